//! Entropy-guided negative sampling and the weighted contrastive loss.
//!
//! Negatives are uniform head/tail corruptions filtered against known-true
//! triples. Each negative's probability `p = σ(γ + S⁻)` gives a binary
//! entropy `H`, which places it in one of three difficulty classes with a
//! fixed loss weight λ:
//!
//! ```text
//! easy       H < δ₁        λ_easy
//! ambiguous  δ₁ ≤ H < δ₂   λ_amb
//! hard       H ≥ δ₂        λ_hard
//! ```
//!
//! The per-positive loss is
//! `−ln σ(γ + S⁺) − Σᵢ λᵢ · ln σ(−(γ + S⁻ᵢ))`, with λ treated as a constant.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, NodeId, Tensor};
use crate::kgdata::{FilterIndex, Triple};

/// Attempts per negative before giving up on a positive.
pub const MAX_CORRUPTION_RETRIES: usize = 1000;

const P_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SamplingError {
    #[error("negatives per positive must be at least 1")]
    ZeroNegatives,
    #[error("no valid corruption of {positive} found after {retries} attempts")]
    RetryBudgetExhausted { positive: Triple, retries: usize },
    #[error("the loss needs at least one negative")]
    EmptyNegatives,
    #[error("invalid sampling config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogBase {
    #[default]
    Natural,
    Base2,
}

impl LogBase {
    /// Largest attainable binary entropy in this base.
    pub fn max_entropy(self) -> f64 {
        match self {
            LogBase::Natural => std::f64::consts::LN_2,
            LogBase::Base2 => 1.0,
        }
    }
}

impl fmt::Display for LogBase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LogBase::Natural => "natural",
            LogBase::Base2 => "base2",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EgnsConfig {
    pub delta1: f64,
    pub delta2: f64,
    pub lambda_easy: f64,
    pub lambda_amb: f64,
    pub lambda_hard: f64,
    pub negatives_per_positive: usize,
    pub margin: f64,
    pub log_base: LogBase,
}

impl Default for EgnsConfig {
    fn default() -> Self {
        Self {
            delta1: 0.2,
            delta2: 0.8,
            lambda_easy: 0.5,
            lambda_amb: 1.5,
            lambda_hard: 1.2,
            negatives_per_positive: 16,
            margin: 6.0,
            log_base: LogBase::Natural,
        }
    }
}

impl EgnsConfig {
    pub fn validate(&self) -> Result<(), SamplingError> {
        if !(self.delta1 > 0.0 && self.delta1 < self.delta2) {
            return Err(SamplingError::InvalidConfig(format!(
                "thresholds must satisfy 0 < delta1 < delta2 (got {} and {})",
                self.delta1, self.delta2
            )));
        }
        if self.negatives_per_positive == 0 {
            return Err(SamplingError::ZeroNegatives);
        }
        for (k, v) in [
            ("lambda_easy", self.lambda_easy),
            ("lambda_amb", self.lambda_amb),
            ("lambda_hard", self.lambda_hard),
            ("margin", self.margin),
        ] {
            if !v.is_finite() || (k != "margin" && v < 0.0) {
                return Err(SamplingError::InvalidConfig(format!("{k} = {v}")));
            }
        }
        Ok(())
    }

    /// Set when `delta2` lies above the entropy maximum, i.e. no negative
    /// can ever be classified hard.
    pub fn unreachable_hard_warning(&self) -> Option<String> {
        let max = self.log_base.max_entropy();
        (self.delta2 > max).then(|| {
            format!(
                "delta2 = {} exceeds the maximum binary entropy {:.4} ({} log); the hard class is unreachable",
                self.delta2, max, self.log_base
            )
        })
    }

    /// Non-fatal oddities worth surfacing in logs.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        w.extend(self.unreachable_hard_warning());
        if self.delta1 >= self.log_base.max_entropy() {
            w.push(format!(
                "delta1 = {} is at or above the maximum binary entropy; every negative is easy",
                self.delta1
            ));
        }
        if !(self.lambda_easy < self.lambda_amb && self.lambda_amb < self.lambda_hard) {
            w.push(format!(
                "loss weights are not increasing with difficulty (easy {}, ambiguous {}, hard {})",
                self.lambda_easy, self.lambda_amb, self.lambda_hard
            ));
        }
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Ambiguous,
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Head,
    Tail,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Binary entropy of `p`, clamped into `[1e-7, 1 − 1e-7]`.
pub fn entropy(p: f64, base: LogBase) -> f64 {
    let p = p.clamp(P_CLAMP, 1.0 - P_CLAMP);
    let h = -p * p.ln() - (1.0 - p) * (1.0 - p).ln();
    match base {
        LogBase::Natural => h,
        LogBase::Base2 => h / std::f64::consts::LN_2,
    }
}

pub fn classify(h: f64, cfg: &EgnsConfig) -> (Difficulty, f64) {
    if h < cfg.delta1 {
        (Difficulty::Easy, cfg.lambda_easy)
    } else if h < cfg.delta2 {
        (Difficulty::Ambiguous, cfg.lambda_amb)
    } else {
        (Difficulty::Hard, cfg.lambda_hard)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NegativeSample {
    pub triple: Triple,
    pub side: Side,
    pub score: f32,
    pub probability: f64,
    pub entropy: f64,
    pub difficulty: Difficulty,
    pub weight: f64,
}

impl NegativeSample {
    pub fn annotate(triple: Triple, side: Side, score: f32, cfg: &EgnsConfig) -> Self {
        let probability = sigmoid(score as f64 + cfg.margin);
        let entropy = entropy(probability, cfg.log_base);
        let (difficulty, weight) = classify(entropy, cfg);
        Self {
            triple,
            side,
            score,
            probability,
            entropy,
            difficulty,
            weight,
        }
    }
}

/// Deterministic per-positive generator derived from the run seed.
pub fn positive_rng(seed: u64, epoch: u64, position: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ position);
    rng
}

/// Draws `n` filtered corruptions of `positive`. Each attempt picks a side
/// uniformly and a replacement entity uniformly; candidates that are known
/// true triples are rejected.
pub fn corrupt<R: Rng + ?Sized>(
    positive: Triple,
    n: usize,
    num_entities: usize,
    filter: &FilterIndex,
    rng: &mut R,
) -> Result<Vec<(Triple, Side)>, SamplingError> {
    if n == 0 {
        return Err(SamplingError::ZeroNegatives);
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut found = None;
        for _ in 0..MAX_CORRUPTION_RETRIES {
            let side = if rng.gen_bool(0.5) { Side::Head } else { Side::Tail };
            let e = rng.gen_range(0..num_entities);
            let cand = match side {
                Side::Head => Triple::new(e, positive.relation, positive.tail),
                Side::Tail => Triple::new(positive.head, positive.relation, e),
            };
            if !filter.contains(&cand) {
                found = Some((cand, side));
                break;
            }
        }
        out.push(found.ok_or(SamplingError::RetryBudgetExhausted {
            positive,
            retries: MAX_CORRUPTION_RETRIES,
        })?);
    }
    Ok(out)
}

/// Draws `n` negatives, each a single filtered corruption of a positive
/// picked uniformly from `positives`. Draw `i` depends only on `seed` and `i`.
pub fn draw_negatives(
    positives: &[Triple],
    n: usize,
    num_entities: usize,
    filter: &FilterIndex,
    seed: u64,
) -> Result<Vec<(Triple, Side)>, SamplingError> {
    if n > 0 && positives.is_empty() {
        return Err(SamplingError::InvalidConfig("no positives to corrupt".into()));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = positive_rng(seed, u64::MAX, i as u64);
        let positive = positives[rng.gen_range(0..positives.len())];
        out.extend(corrupt(positive, 1, num_entities, filter, &mut rng)?);
    }
    Ok(out)
}

/// Loss of one positive against its annotated negatives, in closed form.
pub fn loss(positive_score: f32, negatives: &[NegativeSample], cfg: &EgnsConfig) -> Result<f64, SamplingError> {
    if negatives.is_empty() {
        return Err(SamplingError::EmptyNegatives);
    }
    let pos = -log_sigmoid(cfg.margin + positive_score as f64);
    let neg: f64 = negatives
        .iter()
        .map(|n| -n.weight * log_sigmoid(-(cfg.margin + n.score as f64)))
        .sum();
    Ok(pos + neg)
}

/// Batched loss on the tape: mean over `batch` positives of the per-positive
/// loss. `pos_scores` is `[B]`, `neg_scores` is `[B·N]` with constant
/// `weights` of the same length.
pub fn weighted_loss(
    g: &mut Graph,
    pos_scores: NodeId,
    neg_scores: NodeId,
    weights: &[f32],
    margin: f32,
    batch: usize,
) -> Result<NodeId, AutodiffError> {
    if weights.is_empty() {
        return Err(AutodiffError::Invalid("weighted loss without negatives".into()));
    }
    let shifted = g.add_scalar(pos_scores, margin)?;
    let pos_terms = g.log_sigmoid(shifted)?;
    let pos_sum = g.sum(pos_terms)?;

    let shifted = g.add_scalar(neg_scores, margin)?;
    let flipped = g.neg(shifted)?;
    let neg_terms = g.log_sigmoid(flipped)?;
    let w = g.constant(Tensor::vector(weights.to_vec()))?;
    let weighted = g.mul(neg_terms, w)?;
    let neg_sum = g.sum(weighted)?;

    let total = g.add(pos_sum, neg_sum)?;
    g.scale(total, -1.0 / batch as f32)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SampleStats {
    pub easy: usize,
    pub ambiguous: usize,
    pub hard: usize,
    pub mean_entropy: f64,
}

impl SampleStats {
    pub fn total(&self) -> usize {
        self.easy + self.ambiguous + self.hard
    }

    pub fn record(&mut self, d: Difficulty, h: f64) {
        let n = self.total() as f64;
        self.mean_entropy = (self.mean_entropy * n + h) / (n + 1.0);
        match d {
            Difficulty::Easy => self.easy += 1,
            Difficulty::Ambiguous => self.ambiguous += 1,
            Difficulty::Hard => self.hard += 1,
        }
    }

    pub fn merge(&mut self, other: &SampleStats) {
        let (a, b) = (self.total() as f64, other.total() as f64);
        if a + b > 0.0 {
            self.mean_entropy = (self.mean_entropy * a + other.mean_entropy * b) / (a + b);
        }
        self.easy += other.easy;
        self.ambiguous += other.ambiguous;
        self.hard += other.hard;
    }
}

impl fmt::Display for SampleStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "easy={} ambiguous={} hard={} mean_entropy={:.6}",
            self.easy, self.ambiguous, self.hard, self.mean_entropy
        )
    }
}

pub fn sample_stats(negatives: &[NegativeSample]) -> SampleStats {
    let mut s = SampleStats::default();
    for n in negatives {
        s.record(n.difficulty, n.entropy);
    }
    s
}
