//! Triples, labels, tokenization, entity token rows and query construction.

mod graph;
mod negatives;
mod query;
pub mod synthetic;
mod table;
mod tokenizer;

pub use graph::{DatasetFiles, KnowledgeGraph, Named, Split, Triple};
pub use negatives::sample_negatives;
pub use query::{Direction, QueryBatch, QueryRow, QueryTemplates};
pub use synthetic::SyntheticConfig;
pub use table::EntityTokenTable;
pub use tokenizer::{Vocabulary, BOS, EOS, PAD, RESERVED, UNK};

/// Tokenizer corpus for a graph: all labels plus the templates' literal text.
pub fn tokenizer_corpus(graph: &KnowledgeGraph, templates: &QueryTemplates) -> Vec<String> {
    let mut corpus: Vec<String> = graph.label_corpus().into_iter().map(str::to_string).collect();
    corpus.extend(templates.literal_text());
    corpus
}

pub fn build_tokenizer(
    graph: &KnowledgeGraph,
    templates: &QueryTemplates,
    target_size: usize,
) -> crate::Result<Vocabulary> {
    let corpus = tokenizer_corpus(graph, templates);
    let refs: Vec<&str> = corpus.iter().map(String::as_str).collect();
    Vocabulary::build(&refs, target_size)
}
