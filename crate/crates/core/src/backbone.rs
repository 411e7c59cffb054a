//! Small decoder-only transformer and its base score layer.
//!
//! Pre-norm residual blocks with RMS normalization, rotary positions, causal
//! multi-head attention and a SiLU feed-forward. The base head is
//! `softmax(W_S h)` with `W_S` of shape `|V| × d`; the K-step heads reuse the
//! same `W_S` under low-rank corrections.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KonError, Result};
use crate::ndops::{argmax, Graph, ParamId, ParamStore, Tensor, Var, RMS_EPS};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    /// Freeze the base weights and train rank-`lora_rank` adapters on the
    /// attention projections instead.
    pub frozen: bool,
    pub lora_rank: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            d: 128,
            layers: 4,
            heads: 4,
            d_ff: 512,
            max_seq: 64,
            frozen: false,
            lora_rank: 8,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.layers == 0 || self.heads == 0 || self.d_ff == 0 || self.max_seq == 0
        {
            return Err(KonError::Config("backbone sizes must be positive".into()));
        }
        if self.d % self.heads != 0 || (self.d / self.heads) % 2 != 0 {
            return Err(KonError::Config(format!(
                "d = {} must split into {} heads of even width",
                self.d, self.heads
            )));
        }
        if self.frozen && (self.lora_rank == 0 || self.lora_rank >= self.d) {
            return Err(KonError::Config("backbone lora_rank must be in 1..d".into()));
        }
        Ok(())
    }

    /// Closed-form parameter count for a vocabulary of `vocab` tokens.
    pub fn param_count(&self, vocab: usize) -> usize {
        let (d, f) = (self.d, self.d_ff);
        let per_layer = 4 * d * d + 2 * d * f + 2 * d;
        let adapters = if self.frozen {
            self.layers * 4 * 2 * d * self.lora_rank
        } else {
            0
        };
        2 * vocab * d + self.layers * per_layer + d + adapters
    }
}

#[derive(Clone, Debug)]
struct Adapter {
    a: ParamId,
    b: ParamId,
}

/// Parameter ids of one pre-norm attention + feed-forward block.
#[derive(Clone, Debug)]
pub(crate) struct Block {
    attn_norm: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ffn_norm: ParamId,
    w1: ParamId,
    w2: ParamId,
    adapters: Option<[Adapter; 4]>,
    heads: usize,
    rope: bool,
}

pub(crate) struct BlockSpec {
    pub d: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub rope: bool,
    /// Zero the attention output and feed-forward down projections.
    pub zero_out: bool,
    pub adapter_rank: Option<usize>,
}

impl Block {
    pub(crate) fn init<R: Rng + ?Sized>(
        prefix: &str,
        spec: &BlockSpec,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        let (d, f) = (spec.d, spec.d_ff);
        let sd = 1.0 / (d as f64).sqrt();
        let sf = 1.0 / (f as f64).sqrt();
        let mut proj = |name: &str, rows: usize, cols: usize, std: f64, zero: bool| {
            let t = if zero {
                Tensor::zeros(&[rows, cols])
            } else {
                Tensor::randn(&[rows, cols], std, rng)
            };
            store.add(format!("{prefix}.{name}"), t)
        };
        let wq = proj("wq", d, d, sd, false);
        let wk = proj("wk", d, d, sd, false);
        let wv = proj("wv", d, d, sd, false);
        let wo = proj("wo", d, d, sd, spec.zero_out);
        let w1 = proj("w1", d, f, sd, false);
        let w2 = proj("w2", f, d, sf, spec.zero_out);
        let attn_norm = store.add(format!("{prefix}.attn_norm"), Tensor::ones(&[d]));
        let ffn_norm = store.add(format!("{prefix}.ffn_norm"), Tensor::ones(&[d]));
        let adapters = spec.adapter_rank.map(|r| {
            ["q", "k", "v", "o"].map(|p| Adapter {
                a: store.add(
                    format!("{prefix}.lora.{p}.a"),
                    Tensor::randn(&[d, r], sd, rng),
                ),
                b: store.add(format!("{prefix}.lora.{p}.b"), Tensor::zeros(&[r, d])),
            })
        });
        Block {
            attn_norm,
            wq,
            wk,
            wv,
            wo,
            ffn_norm,
            w1,
            w2,
            adapters,
            heads: spec.heads,
            rope: spec.rope,
        }
    }

    pub(crate) fn base_ids(&self) -> [ParamId; 8] {
        [
            self.attn_norm,
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.ffn_norm,
            self.w1,
            self.w2,
        ]
    }

    fn project<'p>(
        &self,
        g: &mut Graph<'p>,
        store: &'p ParamStore,
        x: Var,
        w: ParamId,
        slot: usize,
    ) -> Result<Var> {
        let wv = g.param(store, w);
        let y = g.matmul(x, wv)?;
        match &self.adapters {
            Some(ad) => {
                let a = g.param(store, ad[slot].a);
                let b = g.param(store, ad[slot].b);
                let xa = g.matmul(x, a)?;
                let xab = g.matmul(xa, b)?;
                g.add(y, xab)
            }
            None => Ok(y),
        }
    }

    /// `x [n×d]` → `[n×d]` under the causal mask.
    pub(crate) fn forward<'p>(&self, g: &mut Graph<'p>, store: &'p ParamStore, x: Var) -> Result<Var> {
        let d = g.value(x).cols();
        let dh = d / self.heads;
        let gain = g.param(store, self.attn_norm);
        let h = g.rms_norm(x, gain, RMS_EPS)?;
        let mut q = self.project(g, store, h, self.wq, 0)?;
        let mut k = self.project(g, store, h, self.wk, 1)?;
        let v = self.project(g, store, h, self.wv, 2)?;
        if self.rope {
            q = g.rope(q, dh, 0)?;
            k = g.rope(k, dh, 0)?;
        }
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let qh = g.slice_cols(q, head * dh, dh)?;
            let kh = g.slice_cols(k, head * dh, dh)?;
            let vh = g.slice_cols(v, head * dh, dh)?;
            let s = g.matmul_nt(qh, kh)?;
            let s = g.scale(s, scale)?;
            let a = g.causal_softmax(s)?;
            outs.push(g.matmul(a, vh)?);
        }
        let o = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        let o = self.project(g, store, o, self.wo, 3)?;
        let x = g.add(x, o)?;

        let gain = g.param(store, self.ffn_norm);
        let h = g.rms_norm(x, gain, RMS_EPS)?;
        let w1 = g.param(store, self.w1);
        let w2 = g.param(store, self.w2);
        let u = g.matmul(h, w1)?;
        let u = g.silu(u)?;
        let f = g.matmul(u, w2)?;
        g.add(x, f)
    }
}

/// The decoder `ℳ` plus base score layer `W_S`.
#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    vocab: usize,
    embed: ParamId,
    blocks: Vec<Block>,
    final_norm: ParamId,
    score: ParamId,
}

impl Backbone {
    pub fn init<R: Rng + ?Sized>(
        cfg: &BackboneConfig,
        vocab: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let embed = store.add("backbone.embed", Tensor::randn(&[vocab, d], 1.0, rng));
        let blocks = (0..cfg.layers)
            .map(|i| {
                let spec = BlockSpec {
                    d,
                    d_ff: cfg.d_ff,
                    heads: cfg.heads,
                    rope: true,
                    zero_out: false,
                    adapter_rank: cfg.frozen.then_some(cfg.lora_rank),
                };
                Block::init(&format!("backbone.layers.{i}"), &spec, store, rng)
            })
            .collect::<Vec<_>>();
        let final_norm = store.add("backbone.final_norm", Tensor::ones(&[d]));
        let score = store.add(
            "backbone.score",
            Tensor::randn(&[vocab, d], 1.0 / (d as f64).sqrt(), rng),
        );
        let bb = Backbone {
            cfg: cfg.clone(),
            vocab,
            embed,
            blocks,
            final_norm,
            score,
        };
        if cfg.frozen {
            for id in bb.base_param_ids() {
                store.set_trainable(id, false);
            }
        }
        Ok(bb)
    }

    fn base_param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.embed, self.final_norm, self.score];
        for b in &self.blocks {
            ids.extend(b.base_ids());
        }
        ids
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn d(&self) -> usize {
        self.cfg.d
    }

    pub fn score_id(&self) -> ParamId {
        self.score
    }

    pub fn embed_id(&self) -> ParamId {
        self.embed
    }

    /// Hidden states `[n×d]` for a token sequence.
    pub fn forward_hidden<'p>(
        &self,
        g: &mut Graph<'p>,
        store: &'p ParamStore,
        tokens: &[usize],
    ) -> Result<Var> {
        if tokens.len() > self.cfg.max_seq {
            return Err(KonError::ContextOverflow {
                len: tokens.len(),
                limit: self.cfg.max_seq,
            });
        }
        let emb = g.param(store, self.embed);
        let mut x = g.gather_rows(emb, tokens)?;
        for b in &self.blocks {
            x = b.forward(g, store, x)?;
        }
        let gain = g.param(store, self.final_norm);
        g.rms_norm(x, gain, RMS_EPS)
    }

    /// `softmax(h W_Sᵀ)` row-wise for `h [n×d]`.
    pub fn base_head<'p>(&self, g: &mut Graph<'p>, store: &'p ParamStore, h: Var) -> Result<Var> {
        let ws = g.param(store, self.score);
        let logits = g.matmul_nt(h, ws)?;
        g.softmax(logits)
    }

    /// Runs `query ++ targets[..len-1]` once and returns the query's final
    /// hidden state `[1×d]` and the teacher-forced base-head distributions
    /// `[len×|V|]` for each target position.
    pub fn teacher_forced<'p>(
        &self,
        g: &mut Graph<'p>,
        store: &'p ParamStore,
        query: &[usize],
        targets: &[usize],
    ) -> Result<(Var, Var)> {
        let mut seq = query.to_vec();
        seq.extend_from_slice(&targets[..targets.len().saturating_sub(1)]);
        let h = self.forward_hidden(g, store, &seq)?;
        let last = query.len() - 1;
        let h0 = g.slice_rows(h, last, 1)?;
        let rows = g.slice_rows(h, last, targets.len())?;
        let p = self.base_head(g, store, rows)?;
        Ok((h0, p))
    }

    /// Appends the argmax base-head token `steps` times.
    pub fn greedy_decode(
        &self,
        store: &ParamStore,
        prefix: &[usize],
        steps: usize,
    ) -> Result<Vec<usize>> {
        if steps == 0 {
            return Err(KonError::Config("greedy_decode needs steps >= 1".into()));
        }
        let mut seq = prefix.to_vec();
        for _ in 0..steps {
            if seq.len() > self.cfg.max_seq {
                return Err(KonError::ContextOverflow {
                    len: seq.len(),
                    limit: self.cfg.max_seq,
                });
            }
            let mut g = Graph::inference();
            let h = self.forward_hidden(&mut g, store, &seq)?;
            let last = g.slice_rows(h, seq.len() - 1, 1)?;
            let p = self.base_head(&mut g, store, last)?;
            seq.push(argmax(g.value(p).data()));
        }
        Ok(seq[prefix.len()..].to_vec())
    }
}
