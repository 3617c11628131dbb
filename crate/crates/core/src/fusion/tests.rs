use super::*;
use crate::autodiff::Graph;
use proptest::prelude::*;
use std::f64::consts::LN_2;

/// Reference MI via entropies, I = H(X) + H(Y) − H(X, Y), all in f64.
fn mi_oracle(px: &[Vec<f64>], py: &[Vec<f64>]) -> f64 {
    let n = px.len() as f64;
    let c = px[0].len();
    let mut j = vec![vec![0.0; c]; c];
    for (x, y) in px.iter().zip(py) {
        for a in 0..c {
            for b in 0..c {
                j[a][b] += x[a] * y[b] / n;
            }
        }
    }
    let h = |v: &mut dyn Iterator<Item = f64>| -> f64 { v.filter(|&p| p > 0.0).map(|p| -p * p.ln()).sum() };
    let hx = h(&mut (0..c).map(|a| j[a].iter().sum::<f64>()));
    let hy = h(&mut (0..c).map(|b| (0..c).map(|a| j[a][b]).sum::<f64>()));
    let hxy = h(&mut j.iter().flatten().copied());
    hx + hy - hxy
}

fn softmax64(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn flat(rows: &[Vec<f64>]) -> Vec<f32> {
    rows.iter().flatten().map(|&v| v as f32).collect()
}

#[test]
fn one_hot_uniform_bins_give_ln_c() {
    let rows: Vec<Vec<f32>> = (0..4)
        .map(|i| (0..4).map(|b| if b == i { 1.0 } else { 0.0 }).collect())
        .collect();
    let batch: Vec<(&[f32], &[f32])> = rows.iter().map(|r| (r.as_slice(), r.as_slice())).collect();
    let mi = mutual_information(&batch).unwrap();
    assert!((mi - 4f64.ln()).abs() < 1e-6, "{mi}");
    assert!((mi - 1.3863).abs() < 1e-4);
}

#[test]
fn constant_distribution_has_zero_mi() {
    let x = [0.1f32, 0.2, 0.3, 0.4];
    let ys = [[0.7f32, 0.1, 0.1, 0.1], [0.25, 0.25, 0.25, 0.25], [0.0, 0.0, 0.5, 0.5]];
    let batch: Vec<(&[f32], &[f32])> = ys.iter().map(|y| (&x[..], &y[..])).collect();
    assert!(mutual_information(&batch).unwrap().abs() < 1e-9);
}

#[test]
fn single_entity_batch_has_zero_mi() {
    let x = [0.6f32, 0.3, 0.1];
    let y = [0.2f32, 0.2, 0.6];
    assert!(mutual_information(&[(&x, &y)]).unwrap().abs() < 1e-9);
}

#[test]
fn empty_batch_is_rejected() {
    assert_eq!(mutual_information(&[]), Err(FusionError::EmptyBatch));
}

#[test]
fn intra_weights_examples() {
    let a = [1.0f32, 0.0];
    let b = [0.0f32, 1.0];
    for x in [0.0, 0.3, 5.0] {
        let (fused, w) = intra_modality_fuse(&[&a, &b], &[0.0, x, x, 0.0]).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-12 && (w[1] - 0.5).abs() < 1e-12);
        assert_eq!(fused, vec![0.5, 0.5]);
    }
    // Off-diagonal row sums [0, ln 2, ln 2].
    let mi = [0.0, 0.0, 0.0, 0.0, 0.0, LN_2, 0.0, LN_2, 0.0];
    let c = [2.0f32, 2.0];
    let (_, w) = intra_modality_fuse(&[&a, &b, &c], &mi).unwrap();
    assert!((w[0] - 0.5).abs() < 1e-6 && (w[1] - 0.25).abs() < 1e-6 && (w[2] - 0.25).abs() < 1e-6, "{w:?}");

    let (fused, w) = intra_modality_fuse(&[&c], &[0.0]).unwrap();
    assert_eq!(w, vec![1.0]);
    assert_eq!(fused, c.to_vec());

    assert_eq!(intra_modality_fuse(&[], &[]), Err(FusionError::NoInputs));
}

#[test]
fn inter_weights_examples() {
    let s = [1.0f32, 2.0, 3.0, 4.0];
    let (joint, w) = inter_modality_fuse(&[Some(&s), None, None], &[0.0; 9]).unwrap();
    assert_eq!(w, vec![1.0, 0.0, 0.0]);
    assert_eq!(joint, s.to_vec());

    let (_, w) = inter_modality_fuse(&[Some(&s), Some(&s), Some(&s)], &[0.0, 0.4, 0.4, 0.4, 0.0, 0.4, 0.4, 0.4, 0.0]).unwrap();
    for v in &w {
        assert!((v - 1.0 / 3.0).abs() < 1e-6);
    }

    // Row sums [0, ln 3] cannot come from a symmetric pair; the weights
    // depend only on the row sums, so build them from an asymmetric matrix.
    let w = complementarity_weights(&[0.0, 0.0, 3f64.ln(), 0.0], &[true, true]).unwrap();
    assert!((w[0] - 0.75).abs() < 1e-6 && (w[1] - 0.25).abs() < 1e-6, "{w:?}");

    assert_eq!(inter_modality_fuse(&[None, None], &[0.0; 4]), Err(FusionError::NoInputs));
}

#[test]
fn hand_built_three_modality_joint() {
    let s = [1.0f32, -1.0, 0.5, 2.0];
    let i = [0.0f32, 3.0, -2.0, 1.0];
    let t = [4.0f32, 0.0, 1.0, -1.0];
    let mi = [0.0, 0.2, 0.5, 0.2, 0.0, 0.1, 0.5, 0.1, 0.0];
    let (joint, w) = inter_modality_fuse(&[Some(&s), Some(&i), Some(&t)], &mi).unwrap();
    // logits −0.7, −0.3, −0.6
    let e = [(-0.7f64).exp(), (-0.3f64).exp(), (-0.6f64).exp()];
    let z: f64 = e.iter().sum();
    for k in 0..3 {
        assert!((w[k] - e[k] / z).abs() < 1e-12);
    }
    for d in 0..4 {
        let want = (e[0] * s[d] as f64 + e[1] * i[d] as f64 + e[2] * t[d] as f64) / z;
        assert!((joint[d] as f64 - want).abs() < 1e-5);
    }
}

#[test]
fn missing_modality_renormalizes_over_present() {
    let s = [1.0f32, 0.0];
    let t = [0.0f32, 1.0];
    let mi = [0.0, 0.9, 0.3, 0.9, 0.0, 0.2, 0.3, 0.2, 0.0];
    let (_, w) = inter_modality_fuse(&[Some(&s), None, Some(&t)], &mi).unwrap();
    assert_eq!(w[1], 0.0);
    // Only the (0, 2) pair counts: equal row sums, equal weights.
    assert!((w[0] - 0.5).abs() < 1e-12 && (w[2] - 0.5).abs() < 1e-12);
}

#[test]
fn pair_index_enumerates_the_upper_triangle() {
    let m = 5;
    let mut k = 0;
    for i in 0..m {
        for j in i + 1..m {
            assert_eq!(pair_index(i, j, m), k);
            k += 1;
        }
    }
}

#[test]
fn mi_op_gradient_matches_finite_differences() {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(5);
    let (n, c) = (6usize, 4usize);
    let lx: Vec<f64> = (0..n * c).map(|_| rand::Rng::gen_range(&mut rng, -2.0..2.0)).collect();
    let ly: Vec<f64> = (0..n * c).map(|_| rand::Rng::gen_range(&mut rng, -2.0..2.0)).collect();
    let f = |lx: &[f64], ly: &[f64]| {
        let px: Vec<Vec<f64>> = lx.chunks(c).map(softmax64).collect();
        let py: Vec<Vec<f64>> = ly.chunks(c).map(softmax64).collect();
        mi_oracle(&px, &py)
    };

    let mut g = Graph::new();
    let x = g.leaf(Tensor::matrix(n, c, lx.iter().map(|&v| v as f32).collect()).unwrap().requires_grad()).unwrap();
    let y = g.leaf(Tensor::matrix(n, c, ly.iter().map(|&v| v as f32).collect()).unwrap().requires_grad()).unwrap();
    let sx = g.softmax(x).unwrap();
    let sy = g.softmax(y).unwrap();
    let mi = g.apply(MutualInformation, &[sx, sy]).unwrap();
    assert!((g.value(mi).item() as f64 - f(&lx, &ly)).abs() < 1e-5);
    g.backward_local(mi).unwrap();

    let h = 1e-3;
    for (node, base, other, is_x) in [(x, &lx, &ly, true), (y, &ly, &lx, false)] {
        let analytic = g.grad(node).unwrap().to_vec();
        let mut fd = vec![0.0; base.len()];
        for i in 0..base.len() {
            let mut p = base.clone();
            let mut m = base.clone();
            p[i] += h;
            m[i] -= h;
            let (fp, fm) = if is_x { (f(&p, other), f(&m, other)) } else { (f(other, &p), f(other, &m)) };
            fd[i] = (fp - fm) / (2.0 * h);
        }
        let num: f64 = analytic.iter().zip(&fd).map(|(a, b)| (*a as f64 - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
        assert!(num / den.max(1e-8) < 1e-3, "relative error {}", num / den);
    }
}

#[test]
fn complementarity_op_gradient_matches_finite_differences() {
    let m = 4;
    let pairs = [0.3f64, 0.1, 0.7, 0.5, 0.2, 0.4];
    let mask = vec![
        true, true, true, true, //
        true, false, true, true, //
        true, true, false, false,
    ];
    let coef: Vec<f64> = (0..12).map(|k| ((k * 7 % 5) as f64 - 2.0) * 0.3).collect();
    let f = |pairs: &[f64]| -> f64 {
        let mi = symmetric_from_pairs(pairs, m);
        mask.chunks(m)
            .enumerate()
            .map(|(r, row)| {
                let w = complementarity_weights(&mi, row).unwrap();
                (0..m).map(|k| w[k] * coef[r * m + k]).sum::<f64>()
            })
            .sum()
    };
    let mut g = Graph::new();
    let leaves: Vec<_> = pairs
        .iter()
        .map(|&p| g.leaf(Tensor::scalar(p as f32).requires_grad()).unwrap())
        .collect();
    let w = g.apply(ComplementarityWeights::new(m, mask.clone()), &leaves).unwrap();
    assert_eq!(g.value(w).shape(), &[3, 4]);
    let c = g.constant(Tensor::matrix(3, 4, coef.iter().map(|&v| v as f32).collect()).unwrap()).unwrap();
    let prod = g.mul(w, c).unwrap();
    let loss = g.sum(prod).unwrap();
    g.backward_local(loss).unwrap();
    let h = 1e-3;
    for (k, &leaf) in leaves.iter().enumerate() {
        let mut p = pairs;
        let mut q = pairs;
        p[k] += h;
        q[k] -= h;
        let fd = (f(&p) - f(&q)) / (2.0 * h);
        let an = g.grad(leaf).unwrap()[0] as f64;
        assert!((an - fd).abs() < 1e-3 * fd.abs().max(1e-2), "pair {k}: {an} vs {fd}");
    }
}

fn arb_dists(n: usize, c: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, c), n).prop_map(|rows| rows.iter().map(|r| softmax64(r)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn mi_is_symmetric_nonnegative_and_matches_oracle(
        (px, py) in (1usize..12, 2usize..6).prop_flat_map(|(n, c)| (arb_dists(n, c), arb_dists(n, c)))
    ) {
        let (fx, fy) = (flat(&px), flat(&py));
        let c = px[0].len();
        let xy = mutual_information_rows(&fx, &fy, c).unwrap();
        let yx = mutual_information_rows(&fy, &fx, c).unwrap();
        prop_assert!(xy >= 0.0);
        prop_assert!((xy - yx).abs() < 1e-9);
        let px32: Vec<Vec<f64>> = fx.chunks(c).map(|r| r.iter().map(|&v| v as f64).collect()).collect();
        let py32: Vec<Vec<f64>> = fy.chunks(c).map(|r| r.iter().map(|&v| v as f64).collect()).collect();
        prop_assert!((xy - mi_oracle(&px32, &py32).max(0.0)).abs() < 1e-9);
    }

    #[test]
    fn weights_are_a_distribution_over_present_entries(
        vals in prop::collection::vec(0.0f64..3.0, 16),
        present in prop::collection::vec(any::<bool>(), 4),
    ) {
        prop_assume!(present.iter().any(|&p| p));
        let mi = symmetric_from_pairs(&vals[..6], 4);
        let w = complementarity_weights(&mi, &present).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        for (k, &p) in present.iter().enumerate() {
            prop_assert!(w[k] >= 0.0);
            if !p { prop_assert_eq!(w[k], 0.0); }
        }
    }

    #[test]
    fn larger_row_sum_means_smaller_weight(
        vals in prop::collection::vec(0.0f64..2.0, 6),
        i in 0usize..4,
        bump in 0.01f64..2.0,
    ) {
        let mi = symmetric_from_pairs(&vals, 4);
        let before = complementarity_weights(&mi, &[true; 4]).unwrap();
        // Raise only view i's own row (its logit), others unchanged.
        let mut raised = mi.clone();
        let j = (i + 1) % 4;
        raised[i * 4 + j] += bump;
        let after = complementarity_weights(&raised, &[true; 4]).unwrap();
        prop_assert!(after[i] < before[i]);
    }

    #[test]
    fn permuting_views_permutes_weights(
        vals in prop::collection::vec(0.0f64..2.0, 3),
        views in prop::collection::vec(prop::collection::vec(-5.0f32..5.0, 4), 3),
        perm_idx in 0usize..6,
    ) {
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let perm = perms[perm_idx];
        let mi = symmetric_from_pairs(&vals, 3);
        let refs: Vec<&[f32]> = views.iter().map(|v| v.as_slice()).collect();
        let (fused, w) = intra_modality_fuse(&refs, &mi).unwrap();
        let pviews: Vec<&[f32]> = perm.iter().map(|&k| views[k].as_slice()).collect();
        let mut pmi = vec![0.0; 9];
        for a in 0..3 {
            for b in 0..3 {
                pmi[a * 3 + b] = mi[perm[a] * 3 + perm[b]];
            }
        }
        let (pfused, pw) = intra_modality_fuse(&pviews, &pmi).unwrap();
        for a in 0..3 {
            prop_assert!((pw[a] - w[perm[a]]).abs() < 1e-12);
        }
        for d in 0..4 {
            prop_assert!((pfused[d] - fused[d]).abs() < 1e-5);
        }
    }

    #[test]
    fn equal_mi_gives_the_plain_mean(
        x in 0.0f64..3.0,
        views in prop::collection::vec(prop::collection::vec(-5.0f32..5.0, 6), 1..5),
    ) {
        let k = views.len();
        let mut mi = vec![x; k * k];
        for i in 0..k { mi[i * k + i] = 0.0; }
        let refs: Vec<&[f32]> = views.iter().map(|v| v.as_slice()).collect();
        let (fused, _) = intra_modality_fuse(&refs, &mi).unwrap();
        for d in 0..6 {
            let mean = views.iter().map(|v| v[d] as f64).sum::<f64>() / k as f64;
            prop_assert!((fused[d] as f64 - mean).abs() < 1e-6);
        }
    }
}
