use std::collections::{HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::Model;
use crate::error::{KonError, Result};
use crate::kgdata::{Direction, KnowledgeGraph, QueryRow, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub ranks: Vec<usize>,
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub queries: usize,
}

impl RankingReport {
    pub fn from_ranks(ranks: Vec<usize>) -> Result<Self> {
        if ranks.is_empty() {
            return Err(KonError::Config("no queries to rank".into()));
        }
        if ranks.contains(&0) {
            return Err(KonError::Config("ranks start at 1".into()));
        }
        let n = ranks.len() as f64;
        let hits = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        Ok(RankingReport {
            mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
            hits1: hits(1),
            hits3: hits(3),
            hits10: hits(10),
            queries: ranks.len(),
            ranks,
        })
    }
}

/// True answers for each `(known entity, relation, direction)` over all splits.
pub struct KnownAnswers {
    map: HashMap<(usize, usize, Direction), HashSet<usize>>,
}

impl KnownAnswers {
    pub fn new(graph: &KnowledgeGraph) -> Self {
        let mut map: HashMap<_, HashSet<usize>> = HashMap::new();
        for t in graph.all_triples() {
            map.entry((t.head, t.relation, Direction::Tail))
                .or_default()
                .insert(t.tail);
            map.entry((t.tail, t.relation, Direction::Head))
                .or_default()
                .insert(t.head);
        }
        KnownAnswers { map }
    }

    pub fn answers(&self, q: &QueryRow) -> Option<&HashSet<usize>> {
        self.map.get(&(q.known, q.relation, q.direction))
    }
}

/// 1 + number of candidates ranked above `target`. Candidates in `filter`
/// (other than the target) are skipped; equal scores go to the lower id.
pub fn filtered_rank(scores: &[f64], target: usize, filter: Option<&HashSet<usize>>) -> usize {
    let s = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(e, &x)| {
            e != target
                && !filter.is_some_and(|f| f.contains(&e))
                && (x > s || (x == s && e < target))
        })
        .count()
}

pub fn raw_rank(scores: &[f64], target: usize) -> usize {
    filtered_rank(scores, target, None)
}

/// Filtered ranking over both query directions of `split`.
pub fn evaluate(model: &Model, split: Split) -> Result<RankingReport> {
    let queries = model.queries(split)?;
    rank_queries(model, &queries.rows)
}

pub fn rank_queries(model: &Model, queries: &[QueryRow]) -> Result<RankingReport> {
    let known = KnownAnswers::new(&model.graph);
    let ranks = queries
        .par_iter()
        .map(|q| {
            let scores = model.score_query(q)?;
            if let Some(e) = scores.iter().position(|s| !s.is_finite()) {
                return Err(KonError::NonFinite(format!("score of entity {e}")));
            }
            Ok(filtered_rank(&scores, q.target, known.answers(q)))
        })
        .collect::<Result<Vec<_>>>()?;
    RankingReport::from_ranks(ranks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kgdata::{Named, Triple};

    #[test]
    fn report_arithmetic() {
        let r = RankingReport::from_ranks(vec![1, 2, 4]).unwrap();
        assert!((r.mrr - (1.0 + 0.5 + 0.25) / 3.0).abs() < 1e-15);
        assert!((r.hits1 - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.hits3 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.hits10, 1.0);
        assert!(RankingReport::from_ranks(vec![]).is_err());
    }

    #[test]
    fn three_entity_filtering_case() {
        // (a, r, b) and (a, r, c) are both true; query (a, r, ?) targets c.
        let n = |s: &str| Named {
            id: s.into(),
            label: s.into(),
        };
        let g = KnowledgeGraph::new(
            vec![n("a"), n("b"), n("c")],
            vec![n("r")],
            vec![Triple::new(0, 0, 1)],
            vec![],
            vec![Triple::new(0, 0, 2)],
        )
        .unwrap();
        let known = KnownAnswers::new(&g);
        let q = QueryRow {
            tokens: vec![1],
            last: 0,
            target: 2,
            known: 0,
            relation: 0,
            direction: Direction::Tail,
        };
        let scores = [0.5, 0.9, 0.3];
        assert_eq!(raw_rank(&scores, 2), 3);
        assert_eq!(filtered_rank(&scores, 2, known.answers(&q)), 2);
        let head_q = QueryRow {
            target: 0,
            known: 2,
            direction: Direction::Head,
            ..q
        };
        assert_eq!(known.answers(&head_q).unwrap(), &HashSet::from([0]));
    }

    #[test]
    fn ties_go_to_lower_id() {
        let s = [0.2, 0.7, 0.7, 0.7];
        assert_eq!(raw_rank(&s, 1), 1);
        assert_eq!(raw_rank(&s, 2), 2);
        assert_eq!(raw_rank(&s, 3), 3);
    }

    proptest::proptest! {
        #[test]
        fn filtered_never_exceeds_raw(
            scores in proptest::collection::vec(0.0f64..1.0, 2..30),
            pick in 0usize..1000,
            mask in proptest::collection::vec(proptest::bool::ANY, 30),
        ) {
            let target = pick % scores.len();
            let filter: HashSet<usize> = (0..scores.len()).filter(|&i| mask[i]).collect();
            let f = filtered_rank(&scores, target, Some(&filter));
            proptest::prop_assert!(f >= 1 && f <= raw_rank(&scores, target));
        }

        #[test]
        fn report_bounds(ranks in proptest::collection::vec(1usize..50, 1..40)) {
            let r = RankingReport::from_ranks(ranks).unwrap();
            proptest::prop_assert!(r.mrr > 0.0 && r.mrr <= 1.0);
            proptest::prop_assert!(r.hits1 <= r.hits3 && r.hits3 <= r.hits10 && r.hits10 <= 1.0);
            proptest::prop_assert!(r.mrr <= r.hits1 + (1.0 - r.hits1) / 2.0 + 1e-12);
        }
    }
}
