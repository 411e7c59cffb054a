//! Ablation, sweep and aggregation-operator studies, plus the gradient-check
//! suite.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{DatasetConfig, RunConfig, TokenizerConfig};
use super::eval::{evaluate, RankingReport};
use super::model::Model;
use super::train::{train, TrainOutcome, Trainer};
use crate::error::{KonError, Result};
use crate::kgdata::{sample_negatives, Split, SyntheticConfig};
use crate::konhead::{AggWeights, Aggregation};
use crate::ndops::{grad_check_store, Tensor};
use crate::objectives::LossWeights;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoTdt,
    NoSft,
    NoNce,
    NoCondAttn,
    SharedHeadMlp,
    SharedScoreLayer,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoTdt,
        Variant::NoSft,
        Variant::NoNce,
        Variant::NoCondAttn,
        Variant::SharedHeadMlp,
        Variant::SharedScoreLayer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoTdt => "no_tdt",
            Variant::NoSft => "no_sft",
            Variant::NoNce => "no_nce",
            Variant::NoCondAttn => "no_cond_attn",
            Variant::SharedHeadMlp => "shared_head_mlp",
            Variant::SharedScoreLayer => "shared_score_layer",
        }
    }

    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoTdt => cfg.loss.weights.tdt = 0.0,
            Variant::NoSft => cfg.loss.weights.sft = 0.0,
            Variant::NoNce => cfg.loss.weights.nce = 0.0,
            Variant::NoCondAttn => cfg.kon.conditional_attention = false,
            Variant::SharedHeadMlp => cfg.kon.shared_head_mlp = true,
            Variant::SharedScoreLayer => cfg.kon.shared_score_layer = true,
        }
        cfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = KonError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| KonError::Config(format!("unknown variant {s:?}")))
    }
}

/// One trained-and-evaluated configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub label: String,
    pub report: RankingReport,
    pub split: Split,
    /// Trainable parameters of the head stack, counted from the store.
    pub kon_params: usize,
    /// The same count from the closed-form expression.
    pub kon_params_formula: usize,
    pub trainable_params: usize,
    /// Median optimizer-step time.
    pub step_ms: f64,
    pub train_secs: f64,
    pub steps: usize,
    pub final_loss: f64,
}

pub fn run_config(label: impl Into<String>, cfg: &RunConfig, split: Split) -> Result<StudyRow> {
    let label = label.into();
    log::info!("study: training {label}");
    let out = train(cfg, None)?;
    study_row(label, cfg, &out, split)
}

fn study_row(label: String, cfg: &RunConfig, out: &TrainOutcome, split: Split) -> Result<StudyRow> {
    let report = evaluate(&out.model, split)?;
    let m = &out.model;
    Ok(StudyRow {
        label,
        split,
        kon_params: m.store.trainable_count("konhead."),
        kon_params_formula: cfg.kon.trainable_params(cfg.backbone.d, m.vocab.len()),
        trainable_params: m.trainable_params(),
        step_ms: out.median_step_ms(),
        train_secs: out.train_secs,
        steps: out.steps,
        final_loss: out.metrics.last().map_or(f64::NAN, |r| r.total),
        report,
    })
}

pub fn run_ablation(cfg: &RunConfig, variants: &[Variant]) -> Result<Vec<StudyRow>> {
    variants
        .iter()
        .map(|v| run_config(v.name(), &v.apply(cfg), Split::Test))
        .collect()
}

pub fn sweep_k(cfg: &RunConfig, ks: &[usize]) -> Result<Vec<StudyRow>> {
    if ks.is_empty() {
        return Err(KonError::Config("sweep needs at least one K".into()));
    }
    ks.iter()
        .map(|&k| {
            let mut c = cfg.clone();
            c.kon.k = k;
            run_config(format!("K={k}"), &c, Split::Test)
        })
        .collect()
}

/// Trains one run per negative count. The runs advance in lockstep, one
/// optimizer step each in turn, so their step times sample the same machine
/// load.
pub fn sweep_negatives(cfg: &RunConfig, ns: &[usize]) -> Result<Vec<StudyRow>> {
    if ns.is_empty() {
        return Err(KonError::Config("sweep needs at least one negative count".into()));
    }
    let configs: Vec<RunConfig> = ns
        .iter()
        .map(|&n| {
            let mut c = cfg.clone();
            c.negatives = n;
            c
        })
        .collect();
    let mut trainers = configs
        .iter()
        .map(|c| Trainer::new(c, None))
        .collect::<Result<Vec<_>>>()?;
    let mut running = true;
    while running {
        running = false;
        for t in trainers.iter_mut() {
            running |= t.step()?;
        }
    }
    trainers
        .into_iter()
        .zip(ns.iter().zip(&configs))
        .map(|(t, (n, c))| study_row(format!("|N|={n}"), c, &t.finish()?, Split::Test))
        .collect()
}

pub const JOINT_OPS: [(Aggregation, AggWeights); 4] = [
    (Aggregation::Sum, AggWeights::Learnable),
    (Aggregation::Sum, AggWeights::Constant),
    (Aggregation::Product, AggWeights::Learnable),
    (Aggregation::Product, AggWeights::Constant),
];

pub fn run_joint_op_study(cfg: &RunConfig) -> Result<Vec<StudyRow>> {
    JOINT_OPS
        .iter()
        .map(|&(a, w)| {
            let mut c = cfg.clone();
            c.kon.aggregation = a;
            c.kon.weights = w;
            let label = format!(
                "{}/{}",
                if a == Aggregation::Sum { "sum" } else { "product" },
                if w == AggWeights::Learnable { "learnable" } else { "constant" }
            );
            run_config(label, &c, Split::Test)
        })
        .collect()
}

pub fn format_table(rows: &[StudyRow]) -> String {
    let mut s = format!(
        "{:<20} {:>7} {:>7} {:>7} {:>7} {:>10} {:>10} {:>9} {:>8}\n",
        "config", "MRR", "H@1", "H@3", "H@10", "kon_par", "formula", "step_ms", "train_s"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<20} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>10} {:>10} {:>9.2} {:>8.1}\n",
            r.label,
            r.report.mrr,
            r.report.hits1,
            r.report.hits3,
            r.report.hits10,
            r.kon_params,
            r.kon_params_formula,
            r.step_ms,
            r.train_secs
        ));
    }
    s
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub loss: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: Option<(String, usize)>,
}

/// Small model used by the gradient-check suite: `d = 16`, `K = 3`, a
/// 10-entity synthetic graph and a vocabulary of at most 48 tokens.
pub fn gradcheck_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::synthetic_small();
    cfg.seed = seed;
    cfg.dataset = DatasetConfig::Synthetic(SyntheticConfig {
        colors: 2,
        kinds: 3,
        habitats: 2,
        ..SyntheticConfig::default()
    });
    cfg.tokenizer = TokenizerConfig { vocab_size: 48 };
    cfg.backbone.d = 16;
    cfg.backbone.d_ff = 16;
    cfg.backbone.layers = 1;
    cfg.kon.k = 3;
    cfg.kon.rank = 2;
    cfg.kon.weights = AggWeights::Learnable;
    cfg.negatives = 4;
    cfg
}

/// Central-difference check of each loss and of their weighted sum on a
/// randomized toy model, once per aggregation operator with learnable
/// weights. Zero-initialized tensors are randomized first so every path
/// carries gradient. The distillation teacher is held at its unperturbed
/// value, matching the stop-gradient on that path.
pub fn gradcheck_suite(seed: u64, max_per_param: Option<usize>) -> Result<Vec<GradCheckEntry>> {
    let mut out = Vec::new();
    for (op, op_name) in [(Aggregation::Sum, "sum"), (Aggregation::Product, "product")] {
        let mut cfg = gradcheck_config(seed);
        cfg.kon.aggregation = op;
        for (loss, e) in gradcheck_model(&cfg, seed, max_per_param)? {
            out.push(GradCheckEntry {
                loss: format!("{loss}/{op_name}"),
                ..e
            });
        }
    }
    Ok(out)
}

fn gradcheck_model(
    cfg: &RunConfig,
    seed: u64,
    max_per_param: Option<usize>,
) -> Result<Vec<(&'static str, GradCheckEntry)>> {
    let (mut model, _) = Model::build(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let names: Vec<(String, Vec<usize>)> = model
        .store
        .iter()
        .map(|(_, n, t)| (n.to_string(), t.shape().to_vec()))
        .collect();
    for (name, shape) in names {
        let t = model.store.get(model.store.id(&name).expect("listed"));
        if t.data().iter().all(|&x| x == 0.0) {
            model.store.assign(&name, Tensor::randn(&shape, 0.3, &mut rng))?;
        }
    }
    let queries = model.queries(Split::Train)?.rows;
    let q = queries[0].clone();
    let negatives = sample_negatives(model.graph.num_entities(), q.target, cfg.negatives, &mut rng)?;
    let cases = [
        ("nce", LossWeights { nce: 1.0, sft: 0.0, tdt: 0.0 }),
        ("sft", LossWeights { nce: 0.0, sft: 1.0, tdt: 0.0 }),
        ("tdt", LossWeights { nce: 0.0, sft: 0.0, tdt: 1.0 }),
        ("combined", LossWeights::default()),
    ];
    let mut out = Vec::new();
    for (name, weights) in cases {
        let mut loss = cfg.loss.clone();
        loss.weights = weights;
        let (heads, store) = model.split_mut();
        let teacher = heads.teacher_rows(store, &q)?;
        let report = grad_check_store(store, max_per_param, |g, s| {
            let fixed = Some(&teacher);
            Ok(heads
                .query_objective_with_teacher(g, s, &q, &negatives, &loss, 0, fixed)?
                .0)
        })?;
        out.push((
            name,
            GradCheckEntry {
                loss: name.to_string(),
                max_rel_err: report.max_rel_err,
                checked: report.checked,
                worst: report.worst,
            },
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_parse_and_apply() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("bogus".parse::<Variant>().is_err());
        let base = RunConfig::synthetic_small();
        assert_eq!(Variant::Full.apply(&base), base);
        assert_eq!(Variant::NoNce.apply(&base).loss.weights.nce, 0.0);
        assert!(Variant::SharedScoreLayer.apply(&base).kon.shared_score_layer);
        assert!(!Variant::NoCondAttn.apply(&base).kon.conditional_attention);
    }

    #[test]
    fn suite_passes_on_toy_model() {
        let entries = gradcheck_suite(1, Some(3)).unwrap();
        assert_eq!(entries.len(), 8);
        for e in entries {
            assert!(e.max_rel_err < 1e-4, "{e:?}");
            assert!(e.checked > 0);
        }
    }

    #[test]
    fn empty_sweeps_are_rejected() {
        let cfg = RunConfig::synthetic_small();
        assert!(sweep_k(&cfg, &[]).is_err());
        assert!(sweep_negatives(&cfg, &[]).is_err());
    }
}
