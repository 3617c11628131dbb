//! Complementarity-guided fusion.
//!
//! Views (or modalities) are compared pairwise by the mutual information of
//! their learned categorical distributions. A view that shares little
//! information with the others is considered complementary and receives a
//! larger weight:
//!
//! ```text
//! ω_i = softmax_i( −Σ_{j≠i} I(v_i; v_j) )
//! ```
//!
//! The same rule fuses expert views inside a modality and modalities into
//! the joint entity embedding. Mutual information is estimated from a batch:
//! the joint is the batch mean of outer products of the two distributions,
//! the marginals are its row and column sums.

use crate::autodiff::{AutodiffError, Function, Tensor};

/// Joint-probability cells below this threshold contribute nothing.
pub const MI_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FusionError {
    #[error("mutual information of an empty batch")]
    EmptyBatch,
    #[error("distribution widths differ: {0} vs {1}")]
    Width(usize, usize),
    #[error("fusion over zero inputs")]
    NoInputs,
    #[error("expected a {expected}×{expected} MI matrix, got {got} entries")]
    MiShape { expected: usize, got: usize },
    #[error("input {index} has length {got}, expected {expected}")]
    Dimension { index: usize, expected: usize, got: usize },
}

/// Batch joint distribution `J[a][b] = mean_e px[e][a] · py[e][b]`, flat `c×c`.
fn joint(px: &[f32], py: &[f32], n: usize, c: usize) -> Vec<f64> {
    let mut j = vec![0.0f64; c * c];
    for e in 0..n {
        let (x, y) = (&px[e * c..(e + 1) * c], &py[e * c..(e + 1) * c]);
        for a in 0..c {
            let xa = x[a] as f64;
            if xa == 0.0 {
                continue;
            }
            for b in 0..c {
                j[a * c + b] += xa * y[b] as f64;
            }
        }
    }
    let inv = 1.0 / n as f64;
    j.iter_mut().for_each(|v| *v *= inv);
    j
}

fn marginals(j: &[f64], c: usize) -> (Vec<f64>, Vec<f64>) {
    let mut p = vec![0.0; c];
    let mut q = vec![0.0; c];
    for a in 0..c {
        for b in 0..c {
            p[a] += j[a * c + b];
            q[b] += j[a * c + b];
        }
    }
    (p, q)
}

fn mi_of_joint(j: &[f64], c: usize) -> f64 {
    let (p, q) = marginals(j, c);
    let mut mi = 0.0;
    for a in 0..c {
        for b in 0..c {
            let v = j[a * c + b];
            if v >= MI_EPS {
                mi += v * (v.ln() - p[a].ln() - q[b].ln());
            }
        }
    }
    // Rounding can leave a tiny negative value for independent inputs.
    mi.max(0.0)
}

/// Mutual information between two row-stacked batches of distributions
/// (`n` rows of width `c` each, flat row-major).
pub fn mutual_information_rows(px: &[f32], py: &[f32], c: usize) -> Result<f64, FusionError> {
    if px.len() != py.len() {
        return Err(FusionError::Width(px.len(), py.len()));
    }
    if c == 0 || px.is_empty() {
        return Err(FusionError::EmptyBatch);
    }
    let n = px.len() / c;
    Ok(mi_of_joint(&joint(px, py, n, c), c))
}

/// Mutual information of a batch of `(dist_x, dist_y)` pairs.
pub fn mutual_information(batch: &[(&[f32], &[f32])]) -> Result<f64, FusionError> {
    let Some(&(x0, _)) = batch.first() else {
        return Err(FusionError::EmptyBatch);
    };
    let c = x0.len();
    let mut px = Vec::with_capacity(batch.len() * c);
    let mut py = Vec::with_capacity(batch.len() * c);
    for &(x, y) in batch {
        if x.len() != c || y.len() != c {
            return Err(FusionError::Width(x.len(), y.len()));
        }
        px.extend_from_slice(x);
        py.extend_from_slice(y);
    }
    mutual_information_rows(&px, &py, c)
}

/// Softmax of the negative MI row sums over the `present` entries; absent
/// entries get weight 0. `mi` is a flat `M×M` matrix whose diagonal is ignored.
pub fn complementarity_weights(mi: &[f64], present: &[bool]) -> Result<Vec<f64>, FusionError> {
    let m = present.len();
    if mi.len() != m * m {
        return Err(FusionError::MiShape { expected: m, got: mi.len() });
    }
    if !present.iter().any(|&p| p) {
        return Err(FusionError::NoInputs);
    }
    let logits: Vec<f64> = (0..m)
        .map(|i| {
            -(0..m)
                .filter(|&j| j != i && present[j])
                .map(|j| mi[i * m + j])
                .sum::<f64>()
        })
        .collect();
    let max = (0..m)
        .filter(|&i| present[i])
        .map(|i| logits[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = (0..m)
        .map(|i| if present[i] { (logits[i] - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= z);
    Ok(w)
}

fn weighted_sum(inputs: &[&[f32]], weights: &[f64]) -> Vec<f32> {
    let d = inputs[0].len();
    let mut out = vec![0.0f64; d];
    for (x, &w) in inputs.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        out.iter_mut().zip(x.iter()).for_each(|(o, &v)| *o += w * v as f64);
    }
    out.into_iter().map(|v| v as f32).collect()
}

/// Fuses the `K` expert views of one modality.
pub fn intra_modality_fuse(views: &[&[f32]], mi: &[f64]) -> Result<(Vec<f32>, Vec<f64>), FusionError> {
    if views.is_empty() {
        return Err(FusionError::NoInputs);
    }
    check_dims(views.iter().map(|v| Some(*v)))?;
    let w = complementarity_weights(mi, &vec![true; views.len()])?;
    Ok((weighted_sum(views, &w), w))
}

/// Fuses per-modality embeddings of one entity; `None` marks a missing
/// modality, which is left out and the weights renormalize over the rest.
pub fn inter_modality_fuse(
    modalities: &[Option<&[f32]>],
    mi: &[f64],
) -> Result<(Vec<f32>, Vec<f64>), FusionError> {
    let present: Vec<bool> = modalities.iter().map(Option::is_some).collect();
    if !present.iter().any(|&p| p) {
        return Err(FusionError::NoInputs);
    }
    check_dims(modalities.iter().copied())?;
    let w = complementarity_weights(mi, &present)?;
    let (xs, ws): (Vec<&[f32]>, Vec<f64>) = modalities
        .iter()
        .zip(&w)
        .filter_map(|(m, &w)| m.map(|m| (m, w)))
        .unzip();
    Ok((weighted_sum(&xs, &ws), w))
}

fn check_dims<'a>(inputs: impl Iterator<Item = Option<&'a [f32]>>) -> Result<(), FusionError> {
    let mut expected = None;
    for (index, x) in inputs.enumerate() {
        let Some(x) = x else { continue };
        match expected {
            None => expected = Some(x.len()),
            Some(d) if d != x.len() => {
                return Err(FusionError::Dimension {
                    index,
                    expected: d,
                    got: x.len(),
                })
            }
            _ => {}
        }
    }
    Ok(())
}

/// Index of pair `(i, j)`, `i < j`, in upper-triangle row order.
pub fn pair_index(i: usize, j: usize, m: usize) -> usize {
    debug_assert!(i < j && j < m);
    i * m - i * (i + 1) / 2 + (j - i - 1)
}

/// Expands upper-triangle pair values into a symmetric `M×M` matrix with a
/// zero diagonal.
pub fn symmetric_from_pairs(pairs: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * m];
    for i in 0..m {
        for j in i + 1..m {
            let v = pairs[pair_index(i, j, m)];
            out[i * m + j] = v;
            out[j * m + i] = v;
        }
    }
    out
}

/// Differentiable batch MI: inputs `px`, `py` of shape `[n × c]`, output a scalar.
#[derive(Debug, Clone, Copy, Default)]
pub struct MutualInformation;

impl Function for MutualInformation {
    fn name(&self) -> &'static str {
        "mutual_information"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AutodiffError> {
        let (px, py) = mi_inputs(inputs)?;
        let mi = mutual_information_rows(px.data(), py.data(), px.cols())
            .map_err(|e| AutodiffError::Invalid(e.to_string()))?;
        Ok(Tensor::scalar(mi as f32))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f32]) -> Vec<Option<Vec<f32>>> {
        let (px, py) = (inputs[0], inputs[1]);
        let (n, c) = (px.rows(), px.cols());
        let j = joint(px.data(), py.data(), n, c);
        let (p, q) = marginals(&j, c);
        let live = |a: usize, b: usize| j[a * c + b] >= MI_EPS;

        // ∂MI/∂J[a][b]; the marginals depend on every cell of their row/column.
        let row_term: Vec<f64> = (0..c)
            .map(|a| (0..c).filter(|&b| live(a, b)).map(|b| j[a * c + b]).sum::<f64>() / p[a])
            .collect();
        let col_term: Vec<f64> = (0..c)
            .map(|b| (0..c).filter(|&a| live(a, b)).map(|a| j[a * c + b]).sum::<f64>() / q[b])
            .collect();
        let mut dj = vec![0.0f64; c * c];
        for a in 0..c {
            for b in 0..c {
                let mut g = 0.0;
                if live(a, b) {
                    g += j[a * c + b].ln() - p[a].ln() - q[b].ln() + 1.0;
                }
                if p[a] > 0.0 {
                    g -= row_term[a];
                }
                if q[b] > 0.0 {
                    g -= col_term[b];
                }
                dj[a * c + b] = g;
            }
        }
        let scale = grad[0] as f64 / n as f64;
        let mut gx = vec![0.0f32; n * c];
        let mut gy = vec![0.0f32; n * c];
        for e in 0..n {
            let (x, y) = (&px.data()[e * c..(e + 1) * c], &py.data()[e * c..(e + 1) * c]);
            for a in 0..c {
                let mut sx = 0.0;
                let mut sy = 0.0;
                for b in 0..c {
                    sx += dj[a * c + b] * y[b] as f64;
                    sy += dj[b * c + a] * x[b] as f64;
                }
                gx[e * c + a] = (scale * sx) as f32;
                gy[e * c + a] = (scale * sy) as f32;
            }
        }
        vec![Some(gx), Some(gy)]
    }
}

fn mi_inputs<'a>(inputs: &[&'a Tensor]) -> Result<(&'a Tensor, &'a Tensor), AutodiffError> {
    let [px, py] = inputs else {
        return Err(AutodiffError::Invalid("mutual_information takes two inputs".into()));
    };
    if px.ndim() != 2 || px.shape() != py.shape() {
        return Err(AutodiffError::Shape {
            op: "mutual_information",
            lhs: px.shape().to_vec(),
            rhs: py.shape().to_vec(),
        });
    }
    Ok((px, py))
}

/// Differentiable complementarity weights.
///
/// Inputs are the `M(M−1)/2` pairwise MI scalars in upper-triangle order
/// (see [`pair_index`]). `mask` holds one row of `M` presence flags per
/// output row; the output is `[rows × M]` with zeros at absent entries.
#[derive(Debug, Clone)]
pub struct ComplementarityWeights {
    m: usize,
    mask: Vec<bool>,
}

impl ComplementarityWeights {
    pub fn new(m: usize, mask: Vec<bool>) -> Self {
        assert!(m > 0 && mask.len() % m == 0, "mask must hold whole rows of {m} flags");
        Self { m, mask }
    }

    /// A single row where every input is present.
    pub fn all_present(m: usize) -> Self {
        Self::new(m, vec![true; m])
    }

    fn rows(&self) -> usize {
        self.mask.len() / self.m
    }
}

impl Function for ComplementarityWeights {
    fn name(&self) -> &'static str {
        "complementarity_weights"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AutodiffError> {
        let m = self.m;
        if inputs.len() != m * (m - 1) / 2 || inputs.iter().any(|t| t.numel() != 1) {
            return Err(AutodiffError::Invalid(format!(
                "complementarity weights over {m} inputs need {} scalar MI values",
                m * (m - 1) / 2
            )));
        }
        let pairs: Vec<f64> = inputs.iter().map(|t| t.data()[0] as f64).collect();
        let mi = symmetric_from_pairs(&pairs, m);
        let mut out = Vec::with_capacity(self.mask.len());
        for row in self.mask.chunks(m) {
            let w = complementarity_weights(&mi, row).map_err(|e| AutodiffError::Invalid(e.to_string()))?;
            out.extend(w.into_iter().map(|v| v as f32));
        }
        Tensor::matrix(self.rows(), m, out)
    }

    fn backward(&self, _inputs: &[&Tensor], output: &Tensor, grad: &[f32]) -> Vec<Option<Vec<f32>>> {
        let m = self.m;
        let mut dpairs = vec![0.0f64; m * (m - 1) / 2];
        for (r, row) in self.mask.chunks(m).enumerate() {
            let w = &output.data()[r * m..(r + 1) * m];
            let g = &grad[r * m..(r + 1) * m];
            let dot: f64 = (0..m).map(|k| w[k] as f64 * g[k] as f64).sum();
            // ∂L/∂logit_k = w_k (g_k − Σ w g); logit_k = −Σ_{j present} MI_kj.
            let dlogit: Vec<f64> = (0..m).map(|k| w[k] as f64 * (g[k] as f64 - dot)).collect();
            for i in 0..m {
                for j in i + 1..m {
                    if row[i] && row[j] {
                        dpairs[pair_index(i, j, m)] -= dlogit[i] + dlogit[j];
                    }
                }
            }
        }
        dpairs.into_iter().map(|d| Some(vec![d as f32])).collect()
    }
}

#[cfg(test)]
mod tests;
