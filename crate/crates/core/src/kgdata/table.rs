use std::collections::HashMap;

use super::graph::KnowledgeGraph;
use super::tokenizer::{Vocabulary, PAD};
use crate::error::{KonError, Result};

/// Fixed-width token rows, one per entity: the label's tokens truncated to
/// `k` or right-padded with `PAD`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EntityTokenTable {
    k: usize,
    ids: Vec<usize>,
    lengths: Vec<usize>,
    truncated: usize,
}

impl EntityTokenTable {
    pub fn build(graph: &KnowledgeGraph, vocab: &Vocabulary, k: usize) -> Result<Self> {
        let labels: Vec<&str> = graph.entities.iter().map(|e| e.label.as_str()).collect();
        Self::from_labels(&labels, vocab, k)
    }

    pub fn from_labels(labels: &[&str], vocab: &Vocabulary, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(KonError::Config("K must be at least 1".into()));
        }
        let mut ids = Vec::with_capacity(labels.len() * k);
        let mut lengths = Vec::with_capacity(labels.len());
        let mut truncated = 0;
        for (e, label) in labels.iter().enumerate() {
            let toks = vocab.encode(label);
            if toks.is_empty() {
                return Err(KonError::Graph(format!(
                    "entity {e} label {label:?} tokenizes to nothing"
                )));
            }
            if toks.len() > k {
                truncated += 1;
            }
            let len = toks.len().min(k);
            ids.extend_from_slice(&toks[..len]);
            ids.extend(std::iter::repeat_n(PAD, k - len));
            lengths.push(len);
        }
        let table = EntityTokenTable {
            k,
            ids,
            lengths,
            truncated,
        };
        let collisions = table.collisions();
        if !collisions.is_empty() {
            log::warn!(
                "{} entity pairs share an identical {k}-token row; ties rank by entity id",
                collisions.len()
            );
        }
        Ok(table)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_entities(&self) -> usize {
        self.lengths.len()
    }

    pub fn row(&self, e: usize) -> &[usize] {
        &self.ids[e * self.k..(e + 1) * self.k]
    }

    /// Tokens before padding (at most `k`).
    pub fn true_len(&self, e: usize) -> usize {
        self.lengths[e]
    }

    pub fn prefix(&self, e: usize) -> &[usize] {
        &self.row(e)[..self.lengths[e]]
    }

    pub fn flat(&self) -> &[usize] {
        &self.ids
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn truncated_count(&self) -> usize {
        self.truncated
    }

    pub fn truncated_fraction(&self) -> f64 {
        self.truncated as f64 / self.num_entities() as f64
    }

    /// Pairs `(a, b)`, `a < b`, whose rows are identical.
    pub fn collisions(&self) -> Vec<(usize, usize)> {
        let mut first: HashMap<&[usize], usize> = HashMap::new();
        let mut out = Vec::new();
        let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
        for e in 0..self.num_entities() {
            match first.get(self.row(e)) {
                Some(&a) => groups.entry(a).or_default().push(e),
                None => {
                    first.insert(self.row(e), e);
                }
            }
        }
        for (a, rest) in groups {
            let mut members = vec![a];
            members.extend(rest);
            for i in 0..members.len() {
                for j in i + 1..members.len() {
                    out.push((members[i], members[j]));
                }
            }
        }
        out.sort_unstable();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::build(&["abcdefghij", "ab"], 30).unwrap()
    }

    #[test]
    fn pads_short_labels() {
        let v = Vocabulary::build(&["a b c d e f g h i j", "x"], 40).unwrap();
        let t = EntityTokenTable::from_labels(&["a b"], &v, 8).unwrap();
        let toks = v.encode("a b");
        assert_eq!(toks.len(), 2);
        assert_eq!(t.true_len(0), 2);
        assert_eq!(&t.row(0)[..2], &toks[..]);
        assert!(t.row(0)[2..].iter().all(|&x| x == PAD));
    }

    #[test]
    fn truncates_long_labels() {
        let v = Vocabulary::build(&["a b c d e f g h i j", "x"], 40).unwrap();
        let label = "a b c d e f g h i j";
        let toks = v.encode(label);
        assert_eq!(toks.len(), 10);
        let t = EntityTokenTable::from_labels(&[label], &v, 8).unwrap();
        assert_eq!(t.row(0), &toks[..8]);
        assert_eq!(t.true_len(0), 8);
        assert_eq!(t.truncated_count(), 1);
    }

    #[test]
    fn detects_collisions() {
        let v = Vocabulary::build(&["ab c", "ab d", "ab"], 20).unwrap();
        let t = EntityTokenTable::from_labels(&["ab c", "ab d", "c"], &v, 1).unwrap();
        assert_eq!(t.row(0), t.row(1));
        assert_eq!(t.collisions(), vec![(0, 1)]);
    }

    #[test]
    fn zero_k_rejected() {
        assert!(EntityTokenTable::from_labels(&["ab"], &vocab(), 0).is_err());
    }
}
