//! Link-prediction evaluation: rank the true entity among all candidates,
//! for head and tail queries, in raw or filtered mode.
//!
//! Ties are resolved by the mean rank of the tied block, so a target tied
//! with `t` other candidates below `g` strictly better ones gets rank
//! `g + 1 + t/2`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::kgdata::{FilterIndex, Split, Triple};
use crate::model::ScoringTables;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Raw,
    #[default]
    Filtered,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Raw => "raw",
            EvalMode::Filtered => "filtered",
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvalMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw" => Ok(EvalMode::Raw),
            "filtered" => Ok(EvalMode::Filtered),
            other => Err(format!("unknown evaluation mode '{other}' (expected raw or filtered)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("the {0} split has no triples to evaluate")]
    EmptySplit(Split),
}

/// Anything that can score every entity as the answer of a query.
pub trait Scorer: Sync {
    fn num_entities(&self) -> usize;
    /// Scores of `(head, relation, e)` for every entity `e`.
    fn score_tails(&self, head: usize, relation: usize) -> Vec<f32>;
    /// Scores of `(e, relation, tail)` for every entity `e`.
    fn score_heads(&self, relation: usize, tail: usize) -> Vec<f32>;
}

impl Scorer for ScoringTables {
    fn num_entities(&self) -> usize {
        ScoringTables::num_entities(self)
    }

    fn score_tails(&self, head: usize, relation: usize) -> Vec<f32> {
        ScoringTables::score_tails(self, head, relation)
    }

    fn score_heads(&self, relation: usize, tail: usize) -> Vec<f32> {
        ScoringTables::score_heads(self, relation, tail)
    }
}

/// Mean-tie rank of `target` among the candidates not excluded.
pub fn rank_of(scores: &[f32], target: usize, excluded: impl Fn(usize) -> bool) -> f64 {
    let s = scores[target];
    let (mut greater, mut ties) = (0usize, 0usize);
    for (e, &x) in scores.iter().enumerate() {
        if e == target || excluded(e) {
            continue;
        }
        if x > s {
            greater += 1;
        } else if x == s {
            ties += 1;
        }
    }
    greater as f64 + 1.0 + ties as f64 / 2.0
}

/// `(head_rank, tail_rank)` of every triple. `filter` removes other known
/// true answers; `None` ranks raw.
pub fn query_ranks(
    scorer: &dyn Scorer,
    triples: &[Triple],
    filter: Option<&FilterIndex>,
    threads: usize,
) -> Vec<(f64, f64)> {
    let one = |t: &Triple| -> (f64, f64) {
        let tails = scorer.score_tails(t.head, t.relation);
        let heads = scorer.score_heads(t.relation, t.tail);
        let known_tails = filter.and_then(|f| f.true_tails(t.head, t.relation));
        let known_heads = filter.and_then(|f| f.true_heads(t.relation, t.tail));
        let head_rank = rank_of(&heads, t.head, |e| known_heads.is_some_and(|s| s.contains(&e)));
        let tail_rank = rank_of(&tails, t.tail, |e| known_tails.is_some_and(|s| s.contains(&e)));
        (head_rank, tail_rank)
    };
    let threads = threads.max(1);
    if threads == 1 || triples.len() < 2 * threads {
        return triples.iter().map(one).collect();
    }
    let chunk = triples.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = triples
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(one).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SideMetrics {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
}

impl SideMetrics {
    pub fn from_ranks(ranks: impl Iterator<Item = f64>) -> Self {
        let (mut n, mut m) = (0usize, SideMetrics::default());
        for r in ranks {
            n += 1;
            m.mrr += 1.0 / r;
            m.hits1 += f64::from(u8::from(r <= 1.0));
            m.hits3 += f64::from(u8::from(r <= 3.0));
            m.hits10 += f64::from(u8::from(r <= 10.0));
        }
        if n > 0 {
            let n = n as f64;
            m.mrr /= n;
            m.hits1 /= n;
            m.hits3 /= n;
            m.hits10 /= n;
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Mean over head and tail queries.
    pub overall: SideMetrics,
    pub head: SideMetrics,
    pub tail: SideMetrics,
    pub mode: EvalMode,
    pub split: Split,
    /// Number of ranking queries (two per triple).
    pub queries: usize,
}

/// The fixed-key record printed by the command-line tools.
#[derive(Debug, Serialize)]
struct ReportRecord<'a> {
    mrr: f64,
    hits1: f64,
    hits3: f64,
    hits10: f64,
    mode: &'a str,
    split: &'a str,
    queries: usize,
}

impl EvalReport {
    pub fn mrr(&self) -> f64 {
        self.overall.mrr
    }

    /// One-line JSON with exactly the keys mrr, hits1, hits3, hits10, mode,
    /// split and queries.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&ReportRecord {
            mrr: self.overall.mrr,
            hits1: self.overall.hits1,
            hits3: self.overall.hits3,
            hits10: self.overall.hits10,
            mode: self.mode.as_str(),
            split: self.split.as_str(),
            queries: self.queries,
        })
        .expect("report serializes")
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "split={} mode={} queries={} mrr={:.6} hits1={:.6} hits3={:.6} hits10={:.6} (head mrr={:.6}, tail mrr={:.6})",
            self.split,
            self.mode,
            self.queries,
            self.overall.mrr,
            self.overall.hits1,
            self.overall.hits3,
            self.overall.hits10,
            self.head.mrr,
            self.tail.mrr
        )
    }
}

/// Evaluates `triples` of `split`. In filtered mode, every triple of
/// `known` other than the query's own answer is removed from the candidates.
pub fn evaluate(
    scorer: &dyn Scorer,
    triples: &[Triple],
    split: Split,
    mode: EvalMode,
    known: &FilterIndex,
    threads: usize,
) -> Result<EvalReport, EvalError> {
    if triples.is_empty() {
        return Err(EvalError::EmptySplit(split));
    }
    let filter = (mode == EvalMode::Filtered).then_some(known);
    let ranks = query_ranks(scorer, triples, filter, threads);
    let head = SideMetrics::from_ranks(ranks.iter().map(|r| r.0));
    let tail = SideMetrics::from_ranks(ranks.iter().map(|r| r.1));
    let overall = SideMetrics::from_ranks(ranks.iter().flat_map(|r| [r.0, r.1]));
    Ok(EvalReport {
        overall,
        head,
        tail,
        mode,
        split,
        queries: 2 * triples.len(),
    })
}

/// Top-`k` answers of a query as `(rank, entity, score)`, best first. Ranks
/// follow the mean-tie rule; ties are listed by entity index.
pub fn top_k(scores: &[f32], k: usize) -> Vec<(f64, usize, f32)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .take(k)
        .map(|e| (rank_of(scores, e, |_| false), e, scores[e]))
        .collect()
}

#[cfg(test)]
mod tests;
