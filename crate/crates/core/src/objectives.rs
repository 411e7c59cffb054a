//! Entity-level contrastive loss, supervised step loss, step-distribution
//! distillation, and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{KonError, Result};
use crate::ndops::{Graph, Tensor, Var, PROB_FLOOR};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SftMode {
    /// `−log p[t] + mean_v log p[v]` per step.
    Literal,
    /// `−log p[t]` per step.
    CrossEntropy,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub nce: f64,
    pub sft: f64,
    pub tdt: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            nce: 1.0,
            sft: 1.0,
            tdt: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_nce: f64,
    pub l_sft: f64,
    pub l_tdt: f64,
    pub total: f64,
    pub weights: LossWeights,
}

/// `−log p_pos + mean_j log p_neg_j` over entries of `scores`, logs floored
/// at [`PROB_FLOOR`].
pub fn nce_loss(g: &mut Graph<'_>, scores: Var, positive: usize, negatives: &[usize]) -> Result<Var> {
    if negatives.is_empty() {
        return Err(KonError::Config("contrastive loss needs at least one negative".into()));
    }
    let pos = g.pick(scores, &[positive], &[1])?;
    let neg = g.pick(scores, negatives, &[negatives.len()])?;
    let lp = g.log_floor(pos, PROB_FLOOR)?;
    let ln = g.log_floor(neg, PROB_FLOOR)?;
    let mean_neg = g.mean(ln)?;
    g.sub(mean_neg, lp)
}

/// Supervised loss of the teacher-forced base-head rows `p [L×|V|]` against
/// `targets`, summed over steps whose `pad_mask` entry is true.
pub fn sft_loss(
    g: &mut Graph<'_>,
    p: Var,
    targets: &[usize],
    pad_mask: &[bool],
    mode: SftMode,
) -> Result<Var> {
    let (rows, vocab) = (g.shape(p)[0], g.shape(p)[1]);
    if targets.len() != rows || pad_mask.len() != rows {
        return Err(KonError::Dimension {
            op: "sft_loss",
            lhs: g.shape(p).to_vec(),
            rhs: vec![targets.len(), pad_mask.len()],
        });
    }
    let kept: Vec<usize> = (0..rows).filter(|&i| pad_mask[i]).collect();
    if kept.is_empty() {
        return Err(KonError::Config("sft_loss needs at least one unpadded step".into()));
    }
    let sel = g.gather_rows(p, &kept)?;
    let idx: Vec<usize> = kept
        .iter()
        .enumerate()
        .map(|(i, &r)| i * vocab + targets[r])
        .collect();
    let tgt = g.pick(sel, &idx, &[idx.len()])?;
    let lt = g.log_floor(tgt, PROB_FLOOR)?;
    let lt = g.sum(lt)?;
    match mode {
        SftMode::CrossEntropy => g.scale(lt, -1.0),
        SftMode::Literal => {
            let all = g.log_floor(sel, PROB_FLOOR)?;
            let all = g.sum(all)?;
            let mean_term = g.scale(all, 1.0 / vocab as f64)?;
            g.sub(mean_term, lt)
        }
    }
}

/// `Σ_k KL(p_kon[k] ‖ p_llm[k])`; `p_llm` is treated as a constant.
pub fn tdt_loss(g: &mut Graph<'_>, p_kon: Var, p_llm: Var) -> Result<Var> {
    if g.shape(p_kon) != g.shape(p_llm) {
        return Err(KonError::Dimension {
            op: "tdt_loss",
            lhs: g.shape(p_kon).to_vec(),
            rhs: g.shape(p_llm).to_vec(),
        });
    }
    let teacher = g.detach(p_llm);
    let lp = g.log_floor(p_kon, PROB_FLOOR)?;
    let lq = g.log_floor(teacher, PROB_FLOOR)?;
    let diff = g.sub(lp, lq)?;
    let terms = g.mul(p_kon, diff)?;
    g.sum(terms)
}

/// Weighted total of the three losses. A non-finite component aborts with
/// its name and `step`.
pub fn combine(
    g: &mut Graph<'_>,
    nce: Var,
    sft: Var,
    tdt: Var,
    weights: LossWeights,
    step: usize,
) -> Result<(Var, LossBreakdown)> {
    let parts = [("nce", nce, weights.nce), ("sft", sft, weights.sft), ("tdt", tdt, weights.tdt)];
    for (name, v, _) in parts {
        if !g.scalar(v).is_finite() {
            return Err(KonError::NonFiniteLoss {
                component: name,
                step,
            });
        }
    }
    let mut total: Option<Var> = None;
    for (_, v, w) in parts {
        let term = if w == 1.0 { v } else { g.scale(v, w)? };
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    let total = total.expect("three parts");
    let breakdown = LossBreakdown {
        l_nce: g.scalar(nce),
        l_sft: g.scalar(sft),
        l_tdt: g.scalar(tdt),
        total: g.scalar(total),
        weights,
    };
    if !breakdown.total.is_finite() {
        return Err(KonError::NonFiniteLoss {
            component: "total",
            step,
        });
    }
    Ok((total, breakdown))
}

/// Evaluates a loss built on leaves holding `inputs`, without a tape.
pub fn eval_scalar<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: FnOnce(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.scalar(out))
}
