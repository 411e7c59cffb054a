use serde::{Deserialize, Serialize};

use super::graph::{KnowledgeGraph, Split, Triple};
use super::tokenizer::{Vocabulary, BOS};
use crate::error::{KonError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// `(h, r, ?)`
    Tail,
    /// `(?, r, t)`
    Head,
}

/// Query text templates. `{h}`, `{r}` and `{t}` are replaced by the head,
/// relation and tail labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryTemplates {
    pub tail: String,
    pub head: String,
}

impl Default for QueryTemplates {
    fn default() -> Self {
        QueryTemplates {
            tail: "{h} {r} :".into(),
            head: "{r} of {t} :".into(),
        }
    }
}

impl QueryTemplates {
    pub fn validate(&self) -> Result<()> {
        for (name, tpl, needs) in [
            ("tail", &self.tail, ["{h}", "{r}"]),
            ("head", &self.head, ["{r}", "{t}"]),
        ] {
            for n in needs {
                if !tpl.contains(n) {
                    return Err(KonError::Config(format!(
                        "{name} template {tpl:?} is missing {n}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Template text with placeholders removed; added to the tokenizer
    /// corpus so literal template words are in the vocabulary.
    pub fn literal_text(&self) -> Vec<String> {
        [&self.tail, &self.head]
            .iter()
            .map(|t| t.replace("{h}", "").replace("{r}", "").replace("{t}", ""))
            .collect()
    }

    pub fn fill(&self, direction: Direction, known: &str, relation: &str) -> String {
        match direction {
            Direction::Tail => self.tail.replace("{h}", known).replace("{r}", relation),
            Direction::Head => self.head.replace("{t}", known).replace("{r}", relation),
        }
    }
}

/// One tokenized incomplete triple.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryRow {
    pub tokens: Vec<usize>,
    /// Index of the final query token; its hidden state feeds the heads.
    pub last: usize,
    pub target: usize,
    pub known: usize,
    pub relation: usize,
    pub direction: Direction,
}

impl QueryRow {
    pub fn build(
        triple: &Triple,
        direction: Direction,
        graph: &KnowledgeGraph,
        vocab: &Vocabulary,
        templates: &QueryTemplates,
    ) -> Result<Self> {
        templates.validate()?;
        let (known, target) = match direction {
            Direction::Tail => (triple.head, triple.tail),
            Direction::Head => (triple.tail, triple.head),
        };
        let text = templates.fill(
            direction,
            &graph.entities[known].label,
            &graph.relations[triple.relation].label,
        );
        let mut tokens = vec![BOS];
        tokens.extend(vocab.encode(&text));
        Ok(QueryRow {
            last: tokens.len() - 1,
            tokens,
            target,
            known,
            relation: triple.relation,
            direction,
        })
    }
}

/// Query rows for a split: each triple contributes a tail query then a
/// head query.
#[derive(Clone, Debug, Default)]
pub struct QueryBatch {
    pub rows: Vec<QueryRow>,
}

impl QueryBatch {
    pub fn for_split(
        graph: &KnowledgeGraph,
        split: Split,
        vocab: &Vocabulary,
        templates: &QueryTemplates,
    ) -> Result<Self> {
        templates.validate()?;
        let mut rows = Vec::with_capacity(2 * graph.split(split).len());
        for t in graph.split(split) {
            for d in [Direction::Tail, Direction::Head] {
                rows.push(QueryRow::build(t, d, graph, vocab, templates)?);
            }
        }
        Ok(QueryBatch { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.rows.iter().map(|r| r.tokens.len()).max().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::super::graph::Named;
    use super::*;

    fn toy() -> (KnowledgeGraph, Vocabulary) {
        let n = |s: &str| Named {
            id: s.into(),
            label: s.into(),
        };
        let g = KnowledgeGraph::new(
            vec![n("A"), n("B")],
            vec![n("starring")],
            vec![Triple::new(0, 0, 1)],
            vec![],
            vec![],
        )
        .unwrap();
        let t = QueryTemplates::default();
        let mut corpus: Vec<String> = g.label_corpus().iter().map(|s| s.to_string()).collect();
        corpus.extend(t.literal_text());
        let refs: Vec<&str> = corpus.iter().map(String::as_str).collect();
        (g, Vocabulary::build(&refs, 40).unwrap())
    }

    #[test]
    fn tail_query_tokens() {
        let (g, v) = toy();
        let q = QueryRow::build(&g.train[0], Direction::Tail, &g, &v, &QueryTemplates::default())
            .unwrap();
        let mut expect = vec![BOS];
        expect.extend(v.encode("A starring :"));
        assert_eq!(q.tokens, expect);
        assert_eq!(q.last, q.tokens.len() - 1);
        assert_eq!(q.target, 1);
        assert_eq!(q.direction, Direction::Tail);
    }

    #[test]
    fn head_query_tokens() {
        let (g, v) = toy();
        let q = QueryRow::build(&g.train[0], Direction::Head, &g, &v, &QueryTemplates::default())
            .unwrap();
        assert_eq!(v.decode(&q.tokens), "starring of B :");
        assert_eq!(q.target, 0);
    }

    #[test]
    fn missing_placeholder_is_config_error() {
        let (g, v) = toy();
        let bad = QueryTemplates {
            tail: "{h} :".into(),
            head: "{r} of {t} :".into(),
        };
        assert!(matches!(
            QueryRow::build(&g.train[0], Direction::Tail, &g, &v, &bad),
            Err(KonError::Config(_))
        ));
    }
}
