//! Adam with bias correction.

use crate::autodiff::ParamStore;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Per-block first and second moment estimates plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self {
            lr,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update from the gradients stored in `params`. Blocks
    /// without a gradient slot are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for (b, id) in ids.into_iter().enumerate() {
            let tensor = params.get_mut(id);
            let grad = tensor.grad().map(<[f32]>::to_vec);
            let (m, v) = (&mut self.m[b], &mut self.v[b]);
            for (i, x) in tensor.data_mut().iter_mut().enumerate() {
                let g = grad.as_ref().map_or(0.0, |g| g[i] as f64);
                let mi = BETA1 * m[i] as f64 + (1.0 - BETA1) * g;
                let vi = BETA2 * v[i] as f64 + (1.0 - BETA2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = self.lr * (mi / c1) / ((vi / c2).sqrt() + EPSILON);
                *x = (*x as f64 - update) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Graph, Tensor};

    fn scalar_store(x: f32) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::vector(vec![x]));
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = scalar_store(0.7);
        let mut adam = Adam::new(&p, 0.1);
        for _ in 0..5 {
            p.zero_grad();
            adam.step(&mut p);
        }
        assert_eq!(p.get(p.id("x").unwrap()).data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient() {
        for g0 in [3.0f32, -0.02] {
            let mut p = scalar_store(1.0);
            let id = p.id("x").unwrap();
            p.get_mut(id).accumulate_grad(&[g0]);
            let mut adam = Adam::new(&p, 0.01);
            adam.step(&mut p);
            let delta = p.get(id).data()[0] - 1.0;
            assert!((delta + 0.01 * g0.signum()).abs() < 1e-6, "{delta}");
        }
    }

    #[test]
    fn minimizes_a_square() {
        // Frozen from running the scalar recurrence in f64.
        let mut p = scalar_store(1.0);
        let id = p.id("x").unwrap();
        let mut adam = Adam::new(&p, 0.1);
        for _ in 0..100 {
            p.zero_grad();
            let mut g = Graph::new();
            let x = g.param(&p, id).unwrap();
            let sq = g.square(x).unwrap();
            let loss = g.sum(sq).unwrap();
            g.backward(loss, &mut p).unwrap();
            adam.step(&mut p);
        }
        let x = p.get(id).data()[0] as f64;
        assert!(x.abs() < 0.05);
        assert!((x - 0.002936675681102579).abs() < 1e-4, "{x}");
    }
}
