use std::collections::{HashMap, HashSet};

use super::{KnowledgeGraph, Triple};

/// Known-true answers over train ∪ valid ∪ test.
#[derive(Debug, Clone, Default)]
pub struct FilterIndex {
    tails: HashMap<(usize, usize), HashSet<usize>>,
    heads: HashMap<(usize, usize), HashSet<usize>>,
    len: usize,
}

impl FilterIndex {
    pub fn build(kg: &KnowledgeGraph) -> Self {
        Self::from_triples(kg.all_triples().copied())
    }

    pub fn from_triples<I: IntoIterator<Item = Triple>>(triples: I) -> Self {
        let mut idx = Self::default();
        for t in triples {
            if idx.tails.entry((t.head, t.relation)).or_default().insert(t.tail) {
                idx.len += 1;
            }
            idx.heads.entry((t.relation, t.tail)).or_default().insert(t.head);
        }
        idx
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.tails
            .get(&(t.head, t.relation))
            .is_some_and(|s| s.contains(&t.tail))
    }

    /// True tails of `(head, relation, ?)`; `None` for an unseen pair.
    pub fn true_tails(&self, head: usize, relation: usize) -> Option<&HashSet<usize>> {
        self.tails.get(&(head, relation))
    }

    /// True heads of `(?, relation, tail)`.
    pub fn true_heads(&self, relation: usize, tail: usize) -> Option<&HashSet<usize>> {
        self.heads.get(&(relation, tail))
    }

    /// Number of distinct triples indexed.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}
