use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{LossConfig, RunConfig};
use crate::backbone::Backbone;
use crate::error::{KonError, Result};
use crate::kgdata::{
    build_tokenizer, EntityTokenTable, KnowledgeGraph, QueryBatch, QueryRow, Split, Vocabulary,
};
use crate::konhead::{GatherPlan, KonHead};
use crate::ndops::{Graph, ParamStore, Tensor, Var};
use crate::objectives::{combine, nce_loss, sft_loss, tdt_loss, LossBreakdown};

/// Everything needed to score queries: data, tokenizer, modules and weights.
pub struct Model {
    pub config: RunConfig,
    pub graph: KnowledgeGraph,
    pub vocab: Vocabulary,
    pub table: EntityTokenTable,
    pub plan: GatherPlan,
    pub backbone: Backbone,
    pub head: KonHead,
    pub store: ParamStore,
}

/// Borrowed view of the modules, separate from the parameter store.
#[derive(Clone, Copy)]
pub struct Heads<'a> {
    pub backbone: &'a Backbone,
    pub head: &'a KonHead,
    pub plan: &'a GatherPlan,
    pub table: &'a EntityTokenTable,
}

impl Model {
    /// Builds the graph and tokenizer from `config` and initializes fresh
    /// weights. Returns the generator positioned after initialization.
    pub fn build(config: &RunConfig) -> Result<(Self, ChaCha8Rng)> {
        config.validate()?;
        let graph = config.dataset.load()?;
        let vocab = build_tokenizer(&graph, &config.templates, config.tokenizer.vocab_size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Self::assemble(config, graph, vocab, &mut rng)?;
        Ok((model, rng))
    }

    /// Builds with a given vocabulary; weights are freshly initialized from
    /// `rng`.
    pub fn assemble(
        config: &RunConfig,
        graph: KnowledgeGraph,
        vocab: Vocabulary,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let table = EntityTokenTable::build(&graph, &vocab, config.kon.k)?;
        if table.truncated_count() > 0 {
            log::info!(
                "{} of {} entity names truncated at K = {}",
                table.truncated_count(),
                table.num_entities(),
                config.kon.k
            );
        }
        let mut store = ParamStore::new();
        let backbone = Backbone::init(&config.backbone, vocab.len(), &mut store, rng)?;
        let head = KonHead::init(&config.kon, config.backbone.d, vocab.len(), &mut store, rng)?;
        let plan = head.plan(&table)?;
        let model = Model {
            config: config.clone(),
            graph,
            vocab,
            table,
            plan,
            backbone,
            head,
            store,
        };
        model.check_context()?;
        Ok(model)
    }

    fn check_context(&self) -> Result<()> {
        let longest_target = self.table.lengths().iter().copied().max().unwrap_or(1);
        for split in [Split::Train, Split::Valid, Split::Test] {
            let q = self.queries(split)?;
            let need = q.max_len() + longest_target - 1;
            if need > self.config.backbone.max_seq {
                return Err(KonError::Config(format!(
                    "{split} queries need a context of {need} tokens but max_seq = {}",
                    self.config.backbone.max_seq
                )));
            }
        }
        Ok(())
    }

    pub fn queries(&self, split: Split) -> Result<QueryBatch> {
        QueryBatch::for_split(&self.graph, split, &self.vocab, &self.config.templates)
    }

    pub fn heads(&self) -> Heads<'_> {
        Heads {
            backbone: &self.backbone,
            head: &self.head,
            plan: &self.plan,
            table: &self.table,
        }
    }

    /// Module view plus mutable weights, borrowed disjointly.
    pub fn split_mut(&mut self) -> (Heads<'_>, &mut ParamStore) {
        (
            Heads {
                backbone: &self.backbone,
                head: &self.head,
                plan: &self.plan,
                table: &self.table,
            },
            &mut self.store,
        )
    }

    pub fn trainable_params(&self) -> usize {
        self.store.trainable_count("")
    }

    /// Scores of every entity for one query.
    pub fn score_query(&self, query: &QueryRow) -> Result<Vec<f64>> {
        self.heads().score_query(&self.store, query)
    }
}

impl Heads<'_> {
    pub fn score_query(&self, store: &ParamStore, query: &QueryRow) -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        let h = self.backbone.forward_hidden(&mut g, store, &query.tokens)?;
        let h0 = g.slice_rows(h, query.last, 1)?;
        let out = self.head.score_all(&mut g, store, self.backbone, h0, self.plan)?;
        Ok(g.value(out.scores).data().to_vec())
    }

    /// Builds the joint objective for one query on `g`.
    pub fn query_objective<'s>(
        &self,
        g: &mut Graph<'s>,
        store: &'s ParamStore,
        query: &QueryRow,
        negatives: &[usize],
        loss: &LossConfig,
        step: usize,
    ) -> Result<(Var, LossBreakdown)> {
        self.query_objective_with_teacher(g, store, query, negatives, loss, step, None)
    }

    /// Teacher-forced base-head rows for the target of `query`.
    pub fn teacher_rows(&self, store: &ParamStore, query: &QueryRow) -> Result<Tensor> {
        let mut g = Graph::inference();
        let targets = self.table.prefix(query.target);
        let (_, p) = self.backbone.teacher_forced(&mut g, store, &query.tokens, targets)?;
        Ok(g.value(p).clone())
    }

    /// As [`Heads::query_objective`], with the distillation teacher replaced
    /// by fixed rows when `teacher` is given.
    #[allow(clippy::too_many_arguments)]
    pub fn query_objective_with_teacher<'s>(
        &self,
        g: &mut Graph<'s>,
        store: &'s ParamStore,
        query: &QueryRow,
        negatives: &[usize],
        loss: &LossConfig,
        step: usize,
        teacher: Option<&Tensor>,
    ) -> Result<(Var, LossBreakdown)> {
        let targets = self.table.prefix(query.target);
        let (h0, p_llm) = self.backbone.teacher_forced(g, store, &query.tokens, targets)?;
        let out = self.head.score_all(g, store, self.backbone, h0, self.plan)?;
        let l_nce = nce_loss(g, out.scores, query.target, negatives)?;
        let mask = vec![true; targets.len()];
        let l_sft = sft_loss(g, p_llm, targets, &mask, loss.sft_mode)?;
        let p_kon = g.slice_rows(out.p, 0, targets.len())?;
        let teacher = match teacher {
            Some(t) => g.constant(t.clone()),
            None => p_llm,
        };
        let l_tdt = tdt_loss(g, p_kon, teacher)?;
        combine(g, l_nce, l_sft, l_tdt, loss.weights, step)
    }
}
