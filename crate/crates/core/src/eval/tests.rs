use super::*;
use proptest::prelude::*;

/// Scores looked up from explicit `[h][r][e]` and `[t][r][e]` tables.
struct TableScorer {
    n: usize,
    tails: Vec<Vec<Vec<f32>>>,
    heads: Vec<Vec<Vec<f32>>>,
}

impl Scorer for TableScorer {
    fn num_entities(&self) -> usize {
        self.n
    }
    fn score_tails(&self, head: usize, relation: usize) -> Vec<f32> {
        self.tails[head][relation].clone()
    }
    fn score_heads(&self, relation: usize, tail: usize) -> Vec<f32> {
        self.heads[tail][relation].clone()
    }
}

fn constant(n: usize, nr: usize) -> TableScorer {
    TableScorer {
        n,
        tails: vec![vec![vec![0.5; n]; nr]; n],
        heads: vec![vec![vec![0.5; n]; nr]; n],
    }
}

/// Rank by explicitly sorting the surviving candidates and averaging the
/// positions of the target's tie block.
fn oracle_rank(scores: &[f32], target: usize, keep: impl Fn(usize) -> bool) -> f64 {
    let mut list: Vec<f32> = (0..scores.len()).filter(|&e| e == target || keep(e)).map(|e| scores[e]).collect();
    list.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let s = scores[target];
    let first = list.iter().position(|&x| x == s).unwrap() + 1;
    let last = list.iter().rposition(|&x| x == s).unwrap() + 1;
    (first + last) as f64 / 2.0
}

#[test]
fn perfect_scorer_gets_full_marks() {
    let triples = vec![Triple::new(0, 0, 1), Triple::new(2, 1, 3), Triple::new(4, 0, 0)];
    let n = 5;
    let mut s = constant(n, 2);
    for t in &triples {
        s.tails[t.head][t.relation][t.tail] = 1.0;
        s.heads[t.tail][t.relation][t.head] = 1.0;
    }
    let known = FilterIndex::from_triples(triples.clone());
    for mode in [EvalMode::Raw, EvalMode::Filtered] {
        let r = evaluate(&s, &triples, Split::Test, mode, &known, 1).unwrap();
        assert_eq!(r.overall, SideMetrics { mrr: 1.0, hits1: 1.0, hits3: 1.0, hits10: 1.0 });
        assert_eq!(r.queries, 6);
    }
}

#[test]
fn constant_scorer_gets_middle_rank() {
    for n in [1usize, 2, 7, 40] {
        let triples = vec![Triple::new(0, 0, n - 1)];
        let r = evaluate(&constant(n, 1), &triples, Split::Test, EvalMode::Raw, &FilterIndex::default(), 1).unwrap();
        assert!((r.overall.mrr - 2.0 / (n as f64 + 1.0)).abs() < 1e-12);
    }
}

#[test]
fn empty_split_is_an_error() {
    let err = evaluate(&constant(3, 1), &[], Split::Valid, EvalMode::Raw, &FilterIndex::default(), 1);
    assert_eq!(err, Err(EvalError::EmptySplit(Split::Valid)));
}

#[test]
fn five_entity_toy_matches_sort_oracle() {
    let n = 5;
    let mut s = constant(n, 1);
    // Hand-picked scores with ties.
    s.tails[0][0] = vec![0.3, 0.9, 0.9, 0.1, 0.3];
    s.heads[1][0] = vec![0.2, 0.2, 0.2, 0.8, 0.0];
    s.tails[3][0] = vec![1.0, 0.5, 0.5, 0.5, 0.5];
    s.heads[4][0] = vec![0.0, 0.0, 0.0, 0.0, 0.0];
    let known = FilterIndex::from_triples([Triple::new(0, 0, 1), Triple::new(0, 0, 2), Triple::new(3, 0, 4), Triple::new(3, 0, 1)]);
    let triples = [Triple::new(0, 0, 1), Triple::new(3, 0, 4)];
    let raw = query_ranks(&s, &triples, None, 1);
    let filt = query_ranks(&s, &triples, Some(&known), 1);
    // (0, 0, 1): tail scores tie 1 and 2 at the top → raw 1.5, filtered 1.
    assert_eq!(raw[0].1, 1.5);
    assert_eq!(filt[0].1, 1.0);
    // head query (?, 0, 1): entity 0 ties with 1 and 2 behind entity 3 → 3.
    assert_eq!(raw[0].0, 3.0);
    // (3, 0, 4): four-way tie behind entity 0 → raw 3.5; filtered drops 1.
    assert_eq!(raw[1].1, 3.5);
    assert_eq!(filt[1].1, 3.0);
    for (i, t) in triples.iter().enumerate() {
        let tails = s.score_tails(t.head, t.relation);
        let heads = s.score_heads(t.relation, t.tail);
        assert_eq!(raw[i].1, oracle_rank(&tails, t.tail, |_| true));
        assert_eq!(raw[i].0, oracle_rank(&heads, t.head, |_| true));
        assert_eq!(filt[i].1, oracle_rank(&tails, t.tail, |e| !known.contains(&Triple::new(t.head, t.relation, e))));
        assert_eq!(filt[i].0, oracle_rank(&heads, t.head, |e| !known.contains(&Triple::new(e, t.relation, t.tail))));
    }
}

#[test]
fn report_json_has_the_fixed_keys() {
    let triples = vec![Triple::new(0, 0, 1)];
    let r = evaluate(&constant(3, 1), &triples, Split::Test, EvalMode::Filtered, &FilterIndex::default(), 1).unwrap();
    let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
    let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(sorted, ["hits1", "hits10", "hits3", "mode", "mrr", "queries", "split"]);
    assert_eq!(v["mode"], "filtered");
    assert_eq!(v["split"], "test");
}

#[test]
fn top_k_orders_by_score_with_mean_ranks() {
    let scores = [0.1f32, 0.7, 0.7, -1.0, 0.9];
    let top = top_k(&scores, 3);
    assert_eq!(top, vec![(1.0, 4, 0.9), (2.5, 1, 0.7), (2.5, 2, 0.7)]);
    assert_eq!(top_k(&scores, 10).len(), 5);
}

fn random_scorer(n: usize, nr: usize, levels: u8, seed: u64) -> TableScorer {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut table = || -> Vec<Vec<Vec<f32>>> {
        (0..n)
            .map(|_| (0..nr).map(|_| (0..n).map(|_| rng.gen_range(0..levels) as f32).collect()).collect())
            .collect()
    };
    let tails = table();
    let heads = table();
    TableScorer { n, tails, heads }
}

proptest! {
    #[test]
    fn ranks_match_oracle_and_filtering_never_hurts(
        n in 2usize..20,
        seed in any::<u64>(),
        levels in 1u8..6,
        raw_triples in prop::collection::vec((0usize..20, 0usize..3, 0usize..20), 1..30),
        threads in 1usize..4,
    ) {
        let triples: Vec<Triple> = raw_triples.iter().map(|&(h, r, t)| Triple::new(h % n, r, t % n)).collect();
        let known = FilterIndex::from_triples(triples.clone());
        let s = random_scorer(n, 3, levels, seed);
        let raw = query_ranks(&s, &triples, None, threads);
        let filt = query_ranks(&s, &triples, Some(&known), threads);
        prop_assert_eq!(&raw, &query_ranks(&s, &triples, None, 1));
        for (i, t) in triples.iter().enumerate() {
            let tails = s.score_tails(t.head, t.relation);
            let heads = s.score_heads(t.relation, t.tail);
            prop_assert_eq!(raw[i].1, oracle_rank(&tails, t.tail, |_| true));
            prop_assert_eq!(raw[i].0, oracle_rank(&heads, t.head, |_| true));
            prop_assert_eq!(filt[i].1, oracle_rank(&tails, t.tail, |e| !known.contains(&Triple::new(t.head, t.relation, e))));
            prop_assert_eq!(filt[i].0, oracle_rank(&heads, t.head, |e| !known.contains(&Triple::new(e, t.relation, t.tail))));
            prop_assert!(filt[i].0 <= raw[i].0 && filt[i].1 <= raw[i].1);
        }
        let report = evaluate(&s, &triples, Split::Test, EvalMode::Filtered, &known, threads).unwrap();
        let m = report.overall;
        prop_assert!(0.0 <= m.hits1 && m.hits1 <= m.hits3 && m.hits3 <= m.hits10 && m.hits10 <= 1.0);
        prop_assert!(m.mrr > 0.0 && m.mrr <= 1.0);
    }
}
