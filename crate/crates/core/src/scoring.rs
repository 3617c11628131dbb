//! RotatE triple scoring.
//!
//! An embedding of even length `d` is read as `d/2` complex numbers: the first
//! half holds real parts, the second half imaginary parts. A relation is a
//! vector of `d/2` phase angles; its rotation `e^{iθ}` has unit modulus by
//! construction. The score of `(h, r, t)` is `-‖h ∘ e^{iθ} − t‖`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Function, Tensor};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    /// Euclidean norm over all real coordinates.
    #[default]
    L2,
    /// Sum of complex moduli, as in the original RotatE.
    L1,
}

impl std::str::FromStr for Norm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "l2" => Ok(Norm::L2),
            "l1" => Ok(Norm::L1),
            other => Err(format!("unknown norm '{other}' (expected l1 or l2)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScoringError {
    #[error("embedding dimension {0} is odd; complex embeddings need an even dimension")]
    OddDimension(usize),
    #[error("dimension mismatch: head {head}, phase {phase}, tail {tail}")]
    Dimension { head: usize, phase: usize, tail: usize },
    #[error("batch size mismatch: {0} heads, {1} phases, {2} tails")]
    BatchSize(usize, usize, usize),
}

/// Splits an embedding into its (real, imaginary) halves.
pub fn complex_parts(v: &[f32]) -> (&[f32], &[f32]) {
    v.split_at(v.len() / 2)
}

fn check_dims(head: usize, phase: usize, tail: usize) -> Result<(), ScoringError> {
    if head % 2 != 0 {
        return Err(ScoringError::OddDimension(head));
    }
    if tail != head || phase * 2 != head {
        return Err(ScoringError::Dimension { head, phase, tail });
    }
    Ok(())
}

/// `h ∘ e^{iθ}` in the same real-then-imaginary layout.
pub fn rotate(head: &[f32], phase: &[f32]) -> Vec<f32> {
    let k = phase.len();
    let (re, im) = complex_parts(head);
    let mut out = vec![0.0f32; 2 * k];
    for i in 0..k {
        let (s, c) = (phase[i] as f64).sin_cos();
        let (a, b) = (re[i] as f64, im[i] as f64);
        out[i] = (a * c - b * s) as f32;
        out[k + i] = (a * s + b * c) as f32;
    }
    out
}

/// Distance `‖h ∘ e^{iθ} − t‖` without dimension checks.
pub(crate) fn distance(head: &[f32], phase: &[f32], tail: &[f32], norm: Norm) -> f64 {
    distance_sc(head, &sin_cos(phase), tail, norm)
}

/// `(sin θ, cos θ)` per coordinate, for reuse across many candidates.
pub(crate) fn sin_cos(phase: &[f32]) -> Vec<(f64, f64)> {
    phase.iter().map(|&p| (p as f64).sin_cos()).collect()
}

/// [`distance`] with the rotation's sines and cosines precomputed.
pub(crate) fn distance_sc(head: &[f32], sc: &[(f64, f64)], tail: &[f32], norm: Norm) -> f64 {
    let k = sc.len();
    let mut acc = 0.0f64;
    for (i, &(s, c)) in sc.iter().enumerate() {
        let (a, b) = (head[i] as f64, head[k + i] as f64);
        let zr = a * c - b * s - tail[i] as f64;
        let zi = a * s + b * c - tail[k + i] as f64;
        match norm {
            Norm::L2 => acc += zr * zr + zi * zi,
            Norm::L1 => acc += (zr * zr + zi * zi).sqrt(),
        }
    }
    match norm {
        Norm::L2 => acc.sqrt(),
        Norm::L1 => acc,
    }
}

/// RotatE plausibility of one triple; never positive.
pub fn score(head: &[f32], phase: &[f32], tail: &[f32], norm: Norm) -> Result<f32, ScoringError> {
    check_dims(head.len(), phase.len(), tail.len())?;
    Ok(-distance(head, phase, tail, norm) as f32)
}

/// Row-wise [`score`] over `[n × d]` heads/tails and `[n × d/2]` phases.
pub fn score_batch(heads: &Tensor, phases: &Tensor, tails: &Tensor, norm: Norm) -> Result<Vec<f32>, ScoringError> {
    let (n, np, nt) = (heads.rows(), phases.rows(), tails.rows());
    if n != np || n != nt {
        return Err(ScoringError::BatchSize(n, np, nt));
    }
    check_dims(heads.cols(), phases.cols(), tails.cols())?;
    Ok((0..n)
        .map(|i| -distance(heads.row(i), phases.row(i), tails.row(i), norm) as f32)
        .collect())
}

/// Differentiable row-wise distance `‖h_i ∘ e^{iθ_i} − t_i‖` for the tape.
/// Inputs: heads `[n × d]`, phases `[n × d/2]`, tails `[n × d]`; output `[n]`.
/// The subgradient at zero distance is taken as zero.
#[derive(Debug, Clone, Copy)]
pub struct RotateDistance {
    pub norm: Norm,
}

impl Function for RotateDistance {
    fn name(&self) -> &'static str {
        "rotate_distance"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AutodiffError> {
        let (h, p, t) = (inputs[0], inputs[1], inputs[2]);
        let shape_err = || AutodiffError::Shape {
            op: "rotate_distance",
            lhs: h.shape().to_vec(),
            rhs: p.shape().to_vec(),
        };
        if h.rows() != p.rows() || h.rows() != t.rows() || h.cols() != t.cols() || h.cols() != 2 * p.cols() {
            return Err(shape_err());
        }
        let n = h.rows();
        let out = (0..n)
            .map(|i| distance(h.row(i), p.row(i), t.row(i), self.norm) as f32)
            .collect();
        Ok(Tensor::vector(out))
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f32]) -> Vec<Option<Vec<f32>>> {
        let (h, p, t) = (inputs[0], inputs[1], inputs[2]);
        let (n, k) = (h.rows(), p.cols());
        let mut gh = vec![0.0f32; h.numel()];
        let mut gp = vec![0.0f32; p.numel()];
        let mut gt = vec![0.0f32; t.numel()];
        for row in 0..n {
            let up = grad[row] as f64;
            let dist = output.data()[row] as f64;
            if up == 0.0 {
                continue;
            }
            let (hr, pr, tr) = (h.row(row), p.row(row), t.row(row));
            let base = row * 2 * k;
            for i in 0..k {
                let (s, c) = (pr[i] as f64).sin_cos();
                let (a, b) = (hr[i] as f64, hr[k + i] as f64);
                let rot_re = a * c - b * s;
                let rot_im = a * s + b * c;
                let zr = rot_re - tr[i] as f64;
                let zi = rot_im - tr[k + i] as f64;
                // ∂dist/∂zr, ∂dist/∂zi
                let denom = match self.norm {
                    Norm::L2 => dist,
                    Norm::L1 => (zr * zr + zi * zi).sqrt(),
                };
                if denom == 0.0 {
                    continue;
                }
                let (dr, di) = (up * zr / denom, up * zi / denom);
                gh[base + i] += (dr * c + di * s) as f32;
                gh[base + k + i] += (-dr * s + di * c) as f32;
                gt[base + i] -= dr as f32;
                gt[base + k + i] -= di as f32;
                gp[row * k + i] += (-dr * rot_im + di * rot_re) as f32;
            }
        }
        vec![Some(gh), Some(gp), Some(gt)]
    }
}
