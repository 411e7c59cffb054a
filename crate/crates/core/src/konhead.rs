//! K-step head stack: per-step MLPs, conditional attention over the steps,
//! low-rank score layers sharing `W_S`, gathering of entity token
//! probabilities and their aggregation into one score per entity.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Block, BlockSpec};
use crate::error::{KonError, Result};
use crate::kgdata::EntityTokenTable;
use crate::ndops::{Graph, ParamId, ParamStore, Tensor, Var, PROB_FLOOR, RMS_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Sum,
    Product,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggWeights {
    Learnable,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KonConfig {
    pub k: usize,
    pub rank: usize,
    pub attn_layers: usize,
    pub attn_heads: usize,
    pub aggregation: Aggregation,
    pub weights: AggWeights,
    /// Score PAD positions like real tokens instead of masking them out.
    pub score_pad: bool,
    pub conditional_attention: bool,
    pub shared_head_mlp: bool,
    pub shared_score_layer: bool,
}

impl Default for KonConfig {
    fn default() -> Self {
        KonConfig {
            k: 8,
            rank: 8,
            attn_layers: 1,
            attn_heads: 2,
            aggregation: Aggregation::Sum,
            weights: AggWeights::Learnable,
            score_pad: false,
            conditional_attention: true,
            shared_head_mlp: false,
            shared_score_layer: false,
        }
    }
}

/// Lower bound on each sum-mode weight after projection, as a fraction of `1/K`.
const ALPHA_FLOOR_FRACTION: f64 = 1e-3;

impl KonConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.k == 0 {
            return Err(KonError::Config("K must be at least 1".into()));
        }
        if self.rank == 0 || self.rank >= d {
            return Err(KonError::Config(format!(
                "LoRA rank {} must be in 1..{d}",
                self.rank
            )));
        }
        if self.conditional_attention
            && (self.attn_layers == 0 || self.attn_heads == 0 || d % self.attn_heads != 0)
        {
            return Err(KonError::Config(format!(
                "conditional attention needs layers >= 1 and heads dividing d = {d}"
            )));
        }
        Ok(())
    }

    fn mlp_count(&self) -> usize {
        if self.shared_head_mlp {
            1
        } else {
            self.k
        }
    }

    fn lora_count(&self) -> usize {
        if self.shared_score_layer {
            1
        } else {
            self.k
        }
    }

    fn attn_block_params(d: usize) -> usize {
        4 * d * d + 2 * d * d + 2 * d
    }

    /// Trainable parameters of the head stack for hidden width `d` and
    /// vocabulary size `vocab`.
    pub fn trainable_params(&self, d: usize, vocab: usize) -> usize {
        let attn = if self.conditional_attention {
            self.attn_layers * Self::attn_block_params(d)
        } else {
            0
        };
        let alpha = match self.weights {
            AggWeights::Learnable => self.k,
            AggWeights::Constant => 0,
        };
        self.mlp_count() * (d * d + d) + self.lora_count() * self.rank * (d + vocab) + attn + alpha
    }

    /// Parameter count of the small step transformer alone.
    pub fn step_transformer_params(&self, d: usize) -> usize {
        self.attn_layers * Self::attn_block_params(d)
    }
}

/// `M_ij = 1` iff `i >= j`.
pub fn causal_mask(k: usize) -> Tensor {
    let mut m = Tensor::zeros(&[k, k]);
    for i in 0..k {
        for j in 0..=i {
            m.data_mut()[i * k + j] = 1.0;
        }
    }
    m
}

/// Flat indices into `P [K×|V|]` for every entity and step, plus the mask of
/// scored positions.
#[derive(Clone, Debug)]
pub struct GatherPlan {
    idx: Vec<usize>,
    mask: Tensor,
    k: usize,
    vocab: usize,
    entities: usize,
}

impl GatherPlan {
    pub fn new(table: &EntityTokenTable, vocab: usize, score_pad: bool) -> Result<Self> {
        let (k, n) = (table.k(), table.num_entities());
        let mut idx = Vec::with_capacity(n * k);
        let mut mask = Tensor::zeros(&[n, k]);
        for e in 0..n {
            let len = if score_pad { k } else { table.true_len(e) };
            if len == 0 {
                return Err(KonError::Graph(format!("entity {e} has no tokens")));
            }
            for (step, &t) in table.row(e).iter().enumerate() {
                if t >= vocab {
                    return Err(KonError::Index {
                        what: "token id",
                        index: t,
                        len: vocab,
                    });
                }
                idx.push(step * vocab + t);
                if step < len {
                    mask.data_mut()[e * k + step] = 1.0;
                }
            }
        }
        Ok(GatherPlan {
            idx,
            mask,
            k,
            vocab,
            entities: n,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_entities(&self) -> usize {
        self.entities
    }

    pub fn mask(&self) -> &Tensor {
        &self.mask
    }

    /// Eager `[|E|×K]` gather: element `(e, k) = P[k][t_k^e]`.
    pub fn gather(&self, p: &Tensor) -> Result<Tensor> {
        self.check(p.shape())?;
        let data = self.idx.iter().map(|&i| p.data()[i]).collect();
        Tensor::new(vec![self.entities, self.k], data)
    }

    fn check(&self, shape: &[usize]) -> Result<()> {
        if shape != [self.k, self.vocab] {
            return Err(KonError::Dimension {
                op: "gather_entities",
                lhs: shape.to_vec(),
                rhs: vec![self.k, self.vocab],
            });
        }
        Ok(())
    }
}

/// Scalar aggregation of one entity's step probabilities over its first
/// `len` positions.
pub fn aggregate(p: &[f64], alpha: &[f64], op: Aggregation, len: usize) -> Result<f64> {
    if len == 0 {
        return Err(KonError::Graph("cannot aggregate an empty token prefix".into()));
    }
    if p.len() != alpha.len() || len > p.len() {
        return Err(KonError::Dimension {
            op: "aggregate",
            lhs: vec![p.len(), len],
            rhs: vec![alpha.len()],
        });
    }
    let (p, alpha) = (&p[..len], &alpha[..len]);
    Ok(match op {
        Aggregation::Sum => {
            let num: f64 = p.iter().zip(alpha).map(|(p, a)| p * a).sum();
            num / alpha.iter().sum::<f64>()
        }
        Aggregation::Product => p
            .iter()
            .zip(alpha)
            .map(|(p, a)| a * p.max(PROB_FLOOR).ln())
            .sum::<f64>()
            .exp(),
    })
}

/// Euclidean projection onto `{x : x_i >= lo, Σ x_i = 1}`.
pub fn project_simplex(v: &[f64], lo: f64) -> Vec<f64> {
    let n = v.len() as f64;
    let budget = 1.0 - n * lo;
    let mut u: Vec<f64> = v.iter().map(|x| x - lo).collect();
    u.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cum += ui;
        let t = (cum - budget) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - lo - theta).max(0.0) + lo).collect()
}

/// Graph handles produced by one head-stack pass.
#[derive(Clone, Copy, Debug)]
pub struct KonForward {
    /// `[K×|V|]` step distributions.
    pub p: Var,
    /// `[|E|×1]` entity scores.
    pub scores: Var,
}

#[derive(Clone, Debug)]
pub struct KonHead {
    cfg: KonConfig,
    d: usize,
    vocab: usize,
    mlp_w: Vec<ParamId>,
    mlp_gain: Vec<ParamId>,
    attn: Vec<Block>,
    lora_a: Vec<ParamId>,
    lora_b: Vec<ParamId>,
    alpha: ParamId,
}

impl KonHead {
    pub fn init<R: Rng + ?Sized>(
        cfg: &KonConfig,
        d: usize,
        vocab: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate(d)?;
        let mut mlp_w = Vec::new();
        let mut mlp_gain = Vec::new();
        for i in 0..cfg.mlp_count() {
            mlp_w.push(store.add(format!("konhead.mlp.{i}.w"), Tensor::zeros(&[d, d])));
            mlp_gain.push(store.add(format!("konhead.mlp.{i}.gain"), Tensor::ones(&[d])));
        }
        let attn = if cfg.conditional_attention {
            (0..cfg.attn_layers)
                .map(|l| {
                    let spec = BlockSpec {
                        d,
                        d_ff: d,
                        heads: cfg.attn_heads,
                        rope: false,
                        zero_out: true,
                        adapter_rank: None,
                    };
                    Block::init(&format!("konhead.attn.{l}"), &spec, store, rng)
                })
                .collect()
        } else {
            Vec::new()
        };
        let mut lora_a = Vec::new();
        let mut lora_b = Vec::new();
        let a_std = 1.0 / (cfg.rank as f64).sqrt();
        for i in 0..cfg.lora_count() {
            lora_a.push(store.add(
                format!("konhead.lora.{i}.a"),
                Tensor::randn(&[vocab, cfg.rank], a_std, rng),
            ));
            lora_b.push(store.add(
                format!("konhead.lora.{i}.b"),
                Tensor::zeros(&[cfg.rank, d]),
            ));
        }
        let a0 = match (cfg.aggregation, cfg.weights) {
            (Aggregation::Sum, _) => 1.0 / cfg.k as f64,
            (Aggregation::Product, _) => 1.0,
        };
        let alpha = store.add("konhead.alpha", Tensor::full(&[cfg.k, 1], a0));
        store.set_trainable(alpha, cfg.weights == AggWeights::Learnable);
        Ok(KonHead {
            cfg: cfg.clone(),
            d,
            vocab,
            mlp_w,
            mlp_gain,
            attn,
            lora_a,
            lora_b,
            alpha,
        })
    }

    pub fn config(&self) -> &KonConfig {
        &self.cfg
    }

    pub fn alpha_id(&self) -> ParamId {
        self.alpha
    }

    pub fn plan(&self, table: &EntityTokenTable) -> Result<GatherPlan> {
        if table.k() != self.cfg.k {
            return Err(KonError::Config(format!(
                "entity table has width {} but K = {}",
                table.k(),
                self.cfg.k
            )));
        }
        GatherPlan::new(table, self.vocab, self.cfg.score_pad)
    }

    /// `h_m0 [1×d]` → `[K×d]`, row `k = RMSNorm_k(SiLU(h_m0 W_k))`.
    pub fn head_mlps<'p>(&self, g: &mut Graph<'p>, store: &'p ParamStore, h_m0: Var) -> Result<Var> {
        let mut rows = Vec::with_capacity(self.cfg.k);
        for i in 0..self.mlp_w.len() {
            let w = g.param(store, self.mlp_w[i]);
            let gain = g.param(store, self.mlp_gain[i]);
            let u = g.matmul(h_m0, w)?;
            let u = g.silu(u)?;
            rows.push(g.rms_norm(u, gain, RMS_EPS)?);
        }
        if self.cfg.shared_head_mlp {
            rows = vec![rows[0]; self.cfg.k];
        }
        if rows.len() == 1 {
            Ok(rows[0])
        } else {
            g.concat_rows(&rows)
        }
    }

    /// Causal step transformer over `h_h [K×d]`, plus `h_m0` on every row.
    pub fn conditional_attention<'p>(
        &self,
        g: &mut Graph<'p>,
        store: &'p ParamStore,
        h_h: Var,
        h_m0: Var,
    ) -> Result<Var> {
        let mut x = h_h;
        for b in &self.attn {
            x = b.forward(g, store, x)?;
        }
        g.add_row(x, h_m0)
    }

    /// Row `k = softmax((W_S + A_k B_k) h_a[k])`.
    pub fn lora_scores<'p>(
        &self,
        g: &mut Graph<'p>,
        store: &'p ParamStore,
        w_s: ParamId,
        h_a: Var,
    ) -> Result<Var> {
        let ws = g.param(store, w_s);
        let base = g.matmul_nt(h_a, ws)?;
        let low = if self.cfg.shared_score_layer {
            let a = g.param(store, self.lora_a[0]);
            let b = g.param(store, self.lora_b[0]);
            let hb = g.matmul_nt(h_a, b)?;
            g.matmul_nt(hb, a)?
        } else {
            let mut rows = Vec::with_capacity(self.cfg.k);
            for k in 0..self.cfg.k {
                let a = g.param(store, self.lora_a[k]);
                let b = g.param(store, self.lora_b[k]);
                let hk = g.slice_rows(h_a, k, 1)?;
                let hb = g.matmul_nt(hk, b)?;
                rows.push(g.matmul_nt(hb, a)?);
            }
            if rows.len() == 1 {
                rows[0]
            } else {
                g.concat_rows(&rows)?
            }
        };
        let logits = g.add(base, low)?;
        g.softmax(logits)
    }

    /// `P [K×|V|]` → `[|E|×K]` gathered step probabilities.
    pub fn gather_entities(&self, g: &mut Graph<'_>, p: Var, plan: &GatherPlan) -> Result<Var> {
        plan.check(g.shape(p))?;
        g.pick(p, &plan.idx, &[plan.entities, plan.k])
    }

    /// `[|E|×K]` → `[|E|×1]` entity scores.
    pub fn aggregate<'p>(
        &self,
        g: &mut Graph<'p>,
        store: &'p ParamStore,
        gathered: Var,
        plan: &GatherPlan,
    ) -> Result<Var> {
        let alpha = g.param(store, self.alpha);
        let mask = g.constant(plan.mask.clone());
        match self.cfg.aggregation {
            Aggregation::Sum => {
                let gm = g.mul(gathered, mask)?;
                let num = g.matmul(gm, alpha)?;
                let den = g.matmul(mask, alpha)?;
                g.div(num, den)
            }
            Aggregation::Product => {
                let lg = g.log_floor(gathered, PROB_FLOOR)?;
                let lm = g.mul(lg, mask)?;
                let s = g.matmul(lm, alpha)?;
                g.exp(s)
            }
        }
    }

    /// Step distributions `P` for one query.
    pub fn step_distributions<'p>(
        &self,
        g: &mut Graph<'p>,
        store: &'p ParamStore,
        backbone: &Backbone,
        h_m0: Var,
    ) -> Result<Var> {
        let hh = self.head_mlps(g, store, h_m0)?;
        let ha = self.conditional_attention(g, store, hh, h_m0)?;
        self.lora_scores(g, store, backbone.score_id(), ha)
    }

    /// One head-stack pass scoring every entity in `plan`.
    pub fn score_all<'p>(
        &self,
        g: &mut Graph<'p>,
        store: &'p ParamStore,
        backbone: &Backbone,
        h_m0: Var,
        plan: &GatherPlan,
    ) -> Result<KonForward> {
        let p = self.step_distributions(g, store, backbone, h_m0)?;
        let gathered = self.gather_entities(g, p, plan)?;
        let scores = self.aggregate(g, store, gathered, plan)?;
        Ok(KonForward { p, scores })
    }

    /// Restores the weight constraints after an optimizer update.
    pub fn project_weights(&self, store: &mut ParamStore) {
        if self.cfg.weights == AggWeights::Constant {
            return;
        }
        let a = store.get_mut(self.alpha);
        match self.cfg.aggregation {
            Aggregation::Sum => {
                let lo = ALPHA_FLOOR_FRACTION / self.cfg.k as f64;
                let projected = project_simplex(a.data(), lo);
                a.data_mut().copy_from_slice(&projected);
            }
            Aggregation::Product => a.data_mut().iter_mut().for_each(|x| *x = x.max(0.0)),
        }
    }

    pub fn alpha<'s>(&self, store: &'s ParamStore) -> &'s [f64] {
        store.get(self.alpha).data()
    }

    pub fn d(&self) -> usize {
        self.d
    }
}

/// Per-entity autoregressive scoring with the base head: one backbone pass
/// per entity token, teacher-forced on the entity's own tokens.
pub fn sequential_scores(
    backbone: &Backbone,
    store: &ParamStore,
    query: &[usize],
    table: &EntityTokenTable,
    op: Aggregation,
    alpha: &[f64],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(table.num_entities());
    for e in 0..table.num_entities() {
        let toks = table.prefix(e);
        let mut probs = vec![0.0; table.k()];
        let mut seq = query.to_vec();
        for (k, &t) in toks.iter().enumerate() {
            let mut g = Graph::inference();
            let h = backbone.forward_hidden(&mut g, store, &seq)?;
            let last = g.slice_rows(h, seq.len() - 1, 1)?;
            let p = backbone.base_head(&mut g, store, last)?;
            probs[k] = g.value(p).data()[t];
            seq.push(t);
        }
        out.push(aggregate(&probs, alpha, op, toks.len())?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::kgdata::Vocabulary;
    use crate::ndops::grad_check_store;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const D: usize = 16;

    fn vocab() -> Vocabulary {
        Vocabulary::build(&["ab cd ef", "gh ij", "kl mn op"], 30).unwrap()
    }

    fn setup(cfg: KonConfig) -> (Backbone, KonHead, ParamStore, Vocabulary) {
        let v = vocab();
        let bcfg = BackboneConfig {
            d: D,
            layers: 1,
            heads: 2,
            d_ff: 16,
            max_seq: 16,
            frozen: false,
            lora_rank: 2,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bb = Backbone::init(&bcfg, v.len(), &mut store, &mut rng).unwrap();
        let head = KonHead::init(&cfg, D, v.len(), &mut store, &mut rng).unwrap();
        (bb, head, store, v)
    }

    fn small_cfg() -> KonConfig {
        KonConfig {
            k: 3,
            rank: 2,
            ..Default::default()
        }
    }

    fn h_m0(bb: &Backbone, store: &ParamStore) -> Tensor {
        let mut g = Graph::inference();
        let h = bb.forward_hidden(&mut g, store, &[1, 5, 6]).unwrap();
        let last = g.slice_rows(h, 2, 1).unwrap();
        g.value(last).clone()
    }

    fn randomize(store: &mut ParamStore, prefix: &str, std: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let updates: Vec<(String, Tensor)> = store
            .iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(_, n, t)| (n.to_string(), Tensor::randn(t.shape(), std, &mut rng)))
            .collect();
        for (n, t) in updates {
            store.assign(&n, t).unwrap();
        }
    }

    #[test]
    fn mask_for_three_steps() {
        assert_eq!(
            causal_mask(3).data(),
            &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0]
        );
    }

    #[test]
    fn zero_head_mlps_give_zero_rows() {
        let (bb, head, store, _) = setup(small_cfg());
        let mut g = Graph::inference();
        let h = g.constant(h_m0(&bb, &store));
        let hh = head.head_mlps(&mut g, &store, h).unwrap();
        assert_eq!(g.shape(hh), &[3, D]);
        assert!(g.value(hh).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_step_mlp_matches_eager() {
        let (bb, head, mut store, _) = setup(KonConfig {
            k: 1,
            rank: 2,
            ..Default::default()
        });
        randomize(&mut store, "konhead.mlp", 0.5, 1);
        let h = h_m0(&bb, &store);
        let mut g = Graph::inference();
        let hv = g.constant(h.clone());
        let out = head.head_mlps(&mut g, &store, hv).unwrap();
        let w = store.get(store.id("konhead.mlp.0.w").unwrap());
        let gain = store.get(store.id("konhead.mlp.0.gain").unwrap());
        let u = crate::ndops::silu(&crate::ndops::matmul(&h, w).unwrap());
        let oracle = crate::ndops::rms_norm(&u, gain, RMS_EPS).unwrap();
        assert!(g.value(out).max_abs_diff(&oracle) < 1e-14);
    }

    #[test]
    fn attention_is_residual_identity_at_init() {
        let (bb, head, store, _) = setup(small_cfg());
        let h = h_m0(&bb, &store);
        let mut g = Graph::inference();
        let hv = g.constant(h.clone());
        let hh = head.head_mlps(&mut g, &store, hv).unwrap();
        let ha = head.conditional_attention(&mut g, &store, hh, hv).unwrap();
        for k in 0..3 {
            assert_eq!(g.value(ha).row_slice(k), h.data());
        }
    }

    #[test]
    fn init_rows_equal_base_head() {
        let (bb, head, store, _) = setup(small_cfg());
        let mut g = Graph::inference();
        let hv = g.constant(h_m0(&bb, &store));
        let p = head.step_distributions(&mut g, &store, &bb, hv).unwrap();
        let base = bb.base_head(&mut g, &store, hv).unwrap();
        let (p, base) = (g.value(p), g.value(base));
        for k in 0..3 {
            let diff = Tensor::row(p.row_slice(k)).max_abs_diff(base);
            assert!(diff < 1e-9, "row {k}: {diff}");
        }
    }

    #[test]
    fn zero_b_rows_match_base_head_of_their_input() {
        let (bb, head, mut store, _) = setup(small_cfg());
        randomize(&mut store, "konhead.lora.0.a", 1.0, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ha = Tensor::randn(&[3, D], 1.0, &mut rng);
        let mut g = Graph::inference();
        let hv = g.constant(ha);
        let p = head.lora_scores(&mut g, &store, bb.score_id(), hv).unwrap();
        let base = bb.base_head(&mut g, &store, hv).unwrap();
        assert!(g.value(p).max_abs_diff(g.value(base)) < 1e-15);
    }

    #[test]
    fn low_rank_update_has_bounded_rank() {
        // rank via Gram-Schmidt on the rows of A B
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = Tensor::randn(&[6, 2], 1.0, &mut rng);
        let b = Tensor::randn(&[2, 5], 1.0, &mut rng);
        let ab = crate::ndops::matmul(&a, &b).unwrap();
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for r in 0..6 {
            let mut v = ab.row_slice(r).to_vec();
            for q in &basis {
                let dot: f64 = v.iter().zip(q).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(q).for_each(|(x, y)| *x -= dot * y);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-9 {
                basis.push(v.iter().map(|x| x / n).collect());
            }
        }
        assert!(basis.len() <= 2);
    }

    #[test]
    fn later_step_perturbation_leaves_earlier_outputs() {
        let (bb, head, mut store, _) = setup(KonConfig {
            k: 4,
            rank: 2,
            ..Default::default()
        });
        randomize(&mut store, "konhead.attn", 0.4, 7);
        let h = h_m0(&bb, &store);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let hh = Tensor::randn(&[4, D], 1.0, &mut rng);
        let run = |hh: &Tensor| {
            let mut g = Graph::inference();
            let a = g.constant(hh.clone());
            let b = g.constant(h.clone());
            let out = head.conditional_attention(&mut g, &store, a, b).unwrap();
            g.value(out).clone()
        };
        let base = run(&hh);
        for j in 0..4 {
            let mut p = hh.clone();
            for c in 0..D {
                p.data_mut()[j * D + c] += 0.7;
            }
            let out = run(&p);
            for k in 0..4 {
                let diff = Tensor::row(base.row_slice(k)).max_abs_diff(&Tensor::row(out.row_slice(k)));
                if k < j {
                    assert!(diff < 1e-12, "step {k} moved under change at {j}");
                } else if k == j {
                    assert!(diff > 0.0);
                }
            }
        }
    }

    fn table(v: &Vocabulary, k: usize) -> EntityTokenTable {
        EntityTokenTable::from_labels(&["ab cd", "gh", "kl mn op", "ef ij"], v, k).unwrap()
    }

    #[test]
    fn one_hot_rows_on_an_entity_gather_to_ones() {
        let v = vocab();
        let t = table(&v, 3);
        let plan = GatherPlan::new(&t, v.len(), false).unwrap();
        let mut p = Tensor::zeros(&[3, v.len()]);
        for (k, &tok) in t.row(2).iter().enumerate() {
            p.data_mut()[k * v.len() + tok] = 1.0;
        }
        assert_eq!(plan.gather(&p).unwrap().row_slice(2), &[1.0, 1.0, 1.0]);
        let u = Tensor::full(&[3, v.len()], 1.0 / v.len() as f64);
        assert!(plan.gather(&u).unwrap().data().iter().all(|&x| x == 1.0 / v.len() as f64));
    }

    #[test]
    fn out_of_range_token_is_index_error() {
        let v = vocab();
        let t = table(&v, 3);
        assert!(matches!(
            GatherPlan::new(&t, 5, false),
            Err(KonError::Index { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn gather_matches_per_entity_lookup(seed in 0u64..10_000, k in 1usize..6) {
            let v = vocab();
            let t = table(&v, k);
            let plan = GatherPlan::new(&t, v.len(), false).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = Tensor::uniform(&[k, v.len()], 0.0, 1.0, &mut rng);
            let fast = plan.gather(&p).unwrap();
            let mut g = Graph::inference();
            let pv = g.constant(p.clone());
            let (_, head, _, _) = setup(KonConfig { k, rank: 2, ..Default::default() });
            let tape = head.gather_entities(&mut g, pv, &plan).unwrap();
            for e in 0..t.num_entities() {
                for step in 0..k {
                    let tok = t.row(e)[step];
                    let want = p.data()[step * v.len() + tok];
                    prop_assert_eq!(fast.at(e, step), want);
                    prop_assert_eq!(g.value(tape).at(e, step), want);
                }
            }
        }

        #[test]
        fn rows_stay_stochastic(seed in 0u64..1000) {
            let (bb, head, mut store, _) = setup(small_cfg());
            randomize(&mut store, "konhead.", 0.5, seed);
            let mut g = Graph::inference();
            let hv = g.constant(h_m0(&bb, &store));
            let p = head.step_distributions(&mut g, &store, &bb, hv).unwrap();
            for k in 0..3 {
                let row = g.value(p).row_slice(k);
                prop_assert!(row.iter().all(|&x| x >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn simplex_projection_is_feasible(v in proptest::collection::vec(-3.0f64..3.0, 1..9)) {
            let lo = 1e-3 / v.len() as f64;
            let x = project_simplex(&v, lo);
            prop_assert!((x.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(x.iter().all(|&a| a >= lo - 1e-15));
        }
    }

    #[test]
    fn simplex_projection_keeps_feasible_points() {
        let v = [0.2, 0.3, 0.5];
        let x = project_simplex(&v, 0.0);
        for (a, b) in x.iter().zip(v) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(project_simplex(&[5.0, 0.0], 0.0), vec![1.0, 0.0]);
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate(&[0.5, 0.5], &[0.5, 0.5], Aggregation::Sum, 2).unwrap(), 0.5);
        let prod = aggregate(&[0.5, 0.5], &[1.0, 1.0], Aggregation::Product, 2).unwrap();
        assert!((prod - 0.25).abs() < 1e-15);
        assert!(aggregate(&[0.5], &[1.0], Aggregation::Sum, 0).is_err());
        // renormalized over the unpadded prefix
        let s = aggregate(&[0.2, 0.9, 0.7], &[0.25, 0.25, 0.5], Aggregation::Sum, 2).unwrap();
        assert!((s - 0.55).abs() < 1e-15);
    }

    #[test]
    fn sum_ranking_matches_standalone_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = 4;
        let alpha = project_simplex(Tensor::uniform(&[k], 0.0, 1.0, &mut rng).data(), 0.0);
        let rows: Vec<(Vec<f64>, usize)> = (0..10)
            .map(|i| (Tensor::uniform(&[k], 0.0, 1.0, &mut rng).into_data(), 1 + i % k))
            .collect();
        let rank = |score: &dyn Fn(&[f64], usize) -> f64| {
            let mut ids: Vec<usize> = (0..10).collect();
            let s: Vec<f64> = rows.iter().map(|(p, l)| score(p, *l)).collect();
            ids.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
            ids
        };
        let standalone = |p: &[f64], l: usize| {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..l {
                num += alpha[i] * p[i];
                den += alpha[i];
            }
            num / den
        };
        let ours = |p: &[f64], l: usize| aggregate(p, &alpha, Aggregation::Sum, l).unwrap();
        assert_eq!(rank(&standalone), rank(&ours));
    }

    #[test]
    fn tape_aggregation_matches_scalar_aggregation() {
        for (aggregation, weights) in [
            (Aggregation::Sum, AggWeights::Learnable),
            (Aggregation::Product, AggWeights::Constant),
            (Aggregation::Product, AggWeights::Learnable),
        ] {
            let cfg = KonConfig {
                aggregation,
                weights,
                ..small_cfg()
            };
            let (bb, head, mut store, v) = setup(cfg);
            randomize(&mut store, "konhead.lora", 0.5, 12);
            if weights == AggWeights::Learnable {
                let a = store.get_mut(head.alpha_id());
                a.data_mut().copy_from_slice(&[0.5, 0.3, 0.2]);
            }
            let t = table(&v, 3);
            let plan = head.plan(&t).unwrap();
            let mut g = Graph::inference();
            let hv = g.constant(h_m0(&bb, &store));
            let out = head.score_all(&mut g, &store, &bb, hv, &plan).unwrap();
            let gathered = plan.gather(g.value(out.p)).unwrap();
            for e in 0..t.num_entities() {
                let want = aggregate(
                    gathered.row_slice(e),
                    head.alpha(&store),
                    aggregation,
                    t.true_len(e),
                )
                .unwrap();
                let got = g.value(out.scores).data()[e];
                assert!((got - want).abs() < 1e-14, "{aggregation:?} entity {e}");
            }
        }
    }

    #[test]
    fn two_entity_manual_composition() {
        let (bb, head, store, v) = setup(KonConfig {
            k: 2,
            rank: 2,
            ..Default::default()
        });
        let t = EntityTokenTable::from_labels(&["ab cd", "gh"], &v, 2).unwrap();
        let plan = head.plan(&t).unwrap();
        let h = h_m0(&bb, &store);
        let mut g = Graph::inference();
        let hv = g.constant(h.clone());
        let out = head.score_all(&mut g, &store, &bb, hv, &plan).unwrap();
        // at init every step distribution is softmax(W_S h)
        let ws = store.get(bb.score_id());
        let logits: Vec<f64> = (0..v.len())
            .map(|i| ws.row_slice(i).iter().zip(h.data()).map(|(a, b)| a * b).sum())
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let prob = |tok: usize| logits[tok].exp() / z;
        for e in 0..2 {
            let toks = t.prefix(e);
            let want = toks.iter().map(|&tk| prob(tk)).sum::<f64>() / toks.len() as f64;
            assert!((g.value(out.scores).data()[e] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn init_ranking_follows_first_token_probability() {
        let v = Vocabulary::build(&["ab", "cd", "ef", "gh", "ij"], 30).unwrap();
        let labels = ["ab", "cd", "ef", "gh", "ij"];
        let t = EntityTokenTable::from_labels(&labels, &v, 3).unwrap();
        assert!(t.lengths().iter().all(|&l| l == 1));
        let bcfg = BackboneConfig {
            d: D,
            layers: 1,
            heads: 2,
            d_ff: 16,
            max_seq: 16,
            frozen: false,
            lora_rank: 2,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let bb = Backbone::init(&bcfg, v.len(), &mut store, &mut rng).unwrap();
        let head = KonHead::init(
            &KonConfig { k: 3, rank: 2, ..Default::default() },
            D,
            v.len(),
            &mut store,
            &mut rng,
        )
        .unwrap();
        let plan = head.plan(&t).unwrap();
        let mut g = Graph::inference();
        let h = bb.forward_hidden(&mut g, &store, &[1, 4]).unwrap();
        let h0 = g.slice_rows(h, 1, 1).unwrap();
        let out = head.score_all(&mut g, &store, &bb, h0, &plan).unwrap();
        let base = bb.base_head(&mut g, &store, h0).unwrap();
        let order = |s: &dyn Fn(usize) -> f64| {
            let mut ids: Vec<usize> = (0..5).collect();
            ids.sort_by(|&a, &b| s(b).total_cmp(&s(a)).then(a.cmp(&b)));
            ids
        };
        let scores = g.value(out.scores).data().to_vec();
        let first = g.value(base).data().to_vec();
        assert_eq!(
            order(&|e| scores[e]),
            order(&|e| first[t.row(e)[0]])
        );
    }

    #[test]
    fn sequential_baseline_matches_stack_on_single_token_entities() {
        // with one-token names both paths read the same base-head row
        let (bb, head, store, v) = setup(KonConfig {
            k: 1,
            rank: 2,
            ..Default::default()
        });
        let t = EntityTokenTable::from_labels(&["ab", "cd", "gh"], &v, 1).unwrap();
        let plan = head.plan(&t).unwrap();
        let query = [1, 5, 6];
        let mut g = Graph::inference();
        let h = bb.forward_hidden(&mut g, &store, &query).unwrap();
        let h0 = g.slice_rows(h, 2, 1).unwrap();
        let out = head.score_all(&mut g, &store, &bb, h0, &plan).unwrap();
        let seq = sequential_scores(&bb, &store, &query, &t, Aggregation::Sum, &[1.0]).unwrap();
        for (a, b) in g.value(out.scores).data().iter().zip(&seq) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn parameter_count_matches_formula() {
        let v = vocab().len();
        for k in [1, 2, 4] {
            let cfg = KonConfig {
                k,
                rank: 2,
                ..Default::default()
            };
            let (_, _, store, _) = setup(cfg.clone());
            let ms = cfg.step_transformer_params(D);
            let formula = k * (D * D + D) + k * 2 * (D + v) + ms + k;
            assert_eq!(store.trainable_count("konhead."), formula);
            assert_eq!(cfg.trainable_params(D, v), formula);
        }
        for cfg in [
            KonConfig { shared_head_mlp: true, ..small_cfg() },
            KonConfig { shared_score_layer: true, ..small_cfg() },
            KonConfig { conditional_attention: false, ..small_cfg() },
            KonConfig { weights: AggWeights::Constant, ..small_cfg() },
        ] {
            let (_, _, store, _) = setup(cfg.clone());
            assert_eq!(store.trainable_count("konhead."), cfg.trainable_params(D, v));
        }
    }

    #[test]
    fn head_gradients_match_central_differences() {
        for cfg in [
            small_cfg(),
            KonConfig { aggregation: Aggregation::Product, ..small_cfg() },
            KonConfig { shared_head_mlp: true, shared_score_layer: true, ..small_cfg() },
        ] {
            let (bb, head, mut store, v) = setup(cfg);
            randomize(&mut store, "konhead.mlp", 0.3, 31);
            randomize(&mut store, "konhead.lora", 0.3, 32);
            randomize(&mut store, "konhead.attn", 0.3, 33);
            for id in store.ids().collect::<Vec<_>>() {
                if store.name(id).starts_with("backbone.") {
                    store.set_trainable(id, false);
                }
            }
            let h = h_m0(&bb, &store);
            let t = table(&v, 3);
            let plan = head.plan(&t).unwrap();
            let report = grad_check_store(&mut store, Some(5), |g, s| {
                let hv = g.constant(h.clone());
                let out = head.score_all(g, s, &bb, hv, &plan)?;
                let lp = g.log_floor(out.scores, PROB_FLOOR)?;
                let w = g.constant(Tensor::vector(&[1.0, -0.5, 0.3, -0.2]).reshape(&[4, 1])?);
                let y = g.mul(lp, w)?;
                g.sum(y)
            })
            .unwrap();
            assert!(report.max_rel_err < 1e-4, "{report:?}");
        }
    }

    #[test]
    fn projection_restores_constraints() {
        let (_, head, mut store, _) = setup(small_cfg());
        store.get_mut(head.alpha_id()).data_mut().copy_from_slice(&[0.9, -0.2, 0.6]);
        head.project_weights(&mut store);
        let a = head.alpha(&store);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(a.iter().all(|&x| x > 0.0));

        let (_, head, mut store, _) = setup(KonConfig {
            aggregation: Aggregation::Product,
            ..small_cfg()
        });
        store.get_mut(head.alpha_id()).data_mut().copy_from_slice(&[0.9, -0.2, 0.6]);
        head.project_weights(&mut store);
        assert_eq!(head.alpha(&store), &[0.9, 0.0, 0.6]);
    }
}
