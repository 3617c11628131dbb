//! Small generated knowledge graphs with planted structure, used for smoke
//! runs and training checks.

use std::collections::BTreeSet;
use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kgdata::{KnowledgeGraph, ModalityFeatureTable, Triple};

/// Shuffles `triples` and splits off `valid` and `test` shares.
fn split(mut triples: Vec<Triple>, num_entities: usize, num_relations: usize, valid: f64, test: f64, rng: &mut ChaCha8Rng) -> KnowledgeGraph {
    triples.shuffle(rng);
    let n = triples.len();
    let n_test = (n as f64 * test).round() as usize;
    let n_valid = (n as f64 * valid).round() as usize;
    let test_part = triples.split_off(n - n_test);
    let valid_part = triples.split_off(n - n_test - n_valid);
    KnowledgeGraph::from_indexed(num_entities, num_relations, triples, valid_part, test_part)
}

/// Entities sit at evenly spaced angles on the unit circle; relation `r`
/// rotates by `steps[r]` spacings. The tail of `(h, r)` is the entity whose
/// angle is nearest to the rotated head angle after a uniform jitter of at
/// most `noise` spacings.
pub fn rotation_ring(num_entities: usize, steps: &[usize], noise: f64, valid: f64, test: f64, seed: u64) -> KnowledgeGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spacing = TAU / num_entities as f64;
    let mut triples = BTreeSet::new();
    for (r, &step) in steps.iter().enumerate() {
        for h in 0..num_entities {
            let jitter = if noise > 0.0 { rng.gen_range(-noise..=noise) } else { 0.0 };
            let angle = (h + step) as f64 * spacing + jitter * spacing;
            let t = (angle / spacing).round().rem_euclid(num_entities as f64) as usize % num_entities;
            triples.insert(Triple::new(h, r, t));
        }
    }
    split(triples.into_iter().collect(), num_entities, steps.len(), valid, test, &mut rng)
}

/// A graph whose entities fall into `clusters` equal groups. Relation `r`
/// links each entity to `fanout` random members of cluster `c + r + 1`.
/// The returned modality table holds a noisy one-hot cluster identity for
/// every entity.
pub struct ClusteredGraph {
    pub graph: KnowledgeGraph,
    pub cluster_feature: ModalityFeatureTable,
    pub cluster_of: Vec<usize>,
}

pub fn clustered(
    num_entities: usize,
    clusters: usize,
    num_relations: usize,
    fanout: usize,
    valid: f64,
    test: f64,
    seed: u64,
) -> ClusteredGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cluster_of: Vec<usize> = (0..num_entities).map(|e| e % clusters).collect();
    let members: Vec<Vec<usize>> = (0..clusters)
        .map(|c| (0..num_entities).filter(|&e| cluster_of[e] == c).collect())
        .collect();
    let mut triples = BTreeSet::new();
    for h in 0..num_entities {
        for r in 0..num_relations {
            let target = &members[(cluster_of[h] + r + 1) % clusters];
            for &t in target.choose_multiple(&mut rng, fanout.min(target.len())) {
                triples.insert(Triple::new(h, r, t));
            }
        }
    }
    let feature = categorical_feature("cluster", &cluster_of, clusters, 0.05, &mut rng);
    ClusteredGraph {
        graph: split(triples.into_iter().collect(), num_entities, num_relations, valid, test, &mut rng),
        cluster_feature: feature,
        cluster_of,
    }
}

/// One-hot encodings of `labels` with uniform jitter of at most `jitter`.
pub fn categorical_feature(name: &str, labels: &[usize], num_labels: usize, jitter: f32, rng: &mut impl Rng) -> ModalityFeatureTable {
    let mut table = ModalityFeatureTable::new(name, num_labels, labels.len());
    for (e, &c) in labels.iter().enumerate() {
        let v = (0..num_labels)
            .map(|i| f32::from(u8::from(i == c)) + rng.gen_range(-jitter..=jitter))
            .collect();
        table.set(e, v);
    }
    table
}

/// A modality of uniform random features carrying no information.
pub fn noise_feature(name: &str, dim: usize, num_entities: usize, seed: u64) -> ModalityFeatureTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = ModalityFeatureTable::new(name, dim, num_entities);
    for e in 0..num_entities {
        table.set(e, (0..dim).map(|_| rng.gen_range(-1.0f32..=1.0)).collect());
    }
    table
}
