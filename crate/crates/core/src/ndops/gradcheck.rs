//! Central-difference gradient oracle.

use super::graph::{Graph, Var};
use super::params::{GradStore, ParamStore};
use super::Tensor;
use crate::error::{KonError, Result};

pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error; below it the comparison is
/// effectively absolute. Central differences of an O(1) loss carry roundoff
/// near 1e-10 at this step, so exactly-zero gradients need some headroom.
pub const REL_ERR_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name (or leaf index) and flat element of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    fn record(&mut self, rel: f64, name: impl FnOnce() -> String, elem: usize) {
        self.checked += 1;
        if rel > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(rel);
            self.worst = Some((name(), elem));
        }
    }
}

fn finite(v: f64, what: impl FnOnce() -> String) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(KonError::GradCheck(format!("non-finite value at {}", what())))
    }
}

/// Checks the tape gradient of `f` with respect to each input tensor.
pub fn grad_check<F>(inputs: &[Tensor], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        finite(g.scalar(out), || "forward".into())?;
        let grads = g.backward(out)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| {
                grads
                    .wrt(*v)
                    .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
            })
            .collect()
    };

    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = ts.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.scalar(out))
    };

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for p in 0..inputs.len() {
        for j in 0..inputs[p].numel() {
            let orig = work[p].data()[j];
            work[p].data_mut()[j] = orig + FD_STEP;
            let plus = finite(eval(&work)?, || format!("input {p} element {j}"))?;
            work[p].data_mut()[j] = orig - FD_STEP;
            let minus = finite(eval(&work)?, || format!("input {p} element {j}"))?;
            work[p].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            report.record(relative_error(analytic[p][j], numeric), || format!("input {p}"), j);
        }
    }
    Ok(report)
}

/// Checks the tape gradient of a loss built from `store` against central
/// differences over every trainable element (or at most `max_per_param`
/// evenly spaced elements of each tensor).
pub fn grad_check_store<F>(
    store: &mut ParamStore,
    max_per_param: Option<usize>,
    f: F,
) -> Result<GradCheckReport>
where
    F: for<'s> Fn(&mut Graph<'s>, &'s ParamStore) -> Result<Var>,
{
    let mut analytic = GradStore::new(store);
    {
        let mut g = Graph::new();
        let out = f(&mut g, store)?;
        finite(g.scalar(out), || "forward".into())?;
        analytic.accumulate(&g.backward(out)?, 1.0);
    }

    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    for id in ids {
        let n = store.get(id).numel();
        let picks: Vec<usize> = match max_per_param {
            Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
            _ => (0..n).collect(),
        };
        for j in picks {
            let orig = store.get(id).data()[j];
            let at = |delta: f64, store: &mut ParamStore| -> Result<f64> {
                store.get_mut(id).data_mut()[j] = orig + delta;
                let mut g = Graph::inference();
                let out = f(&mut g, store)?;
                let v = g.scalar(out);
                finite(v, || format!("{} element {j}", store.name(id)))
            };
            let plus = at(FD_STEP, store)?;
            let minus = at(-FD_STEP, store)?;
            store.get_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic.get(id).map_or(0.0, |g| g[j]);
            report.record(relative_error(a, numeric), || store.name(id).to_string(), j);
        }
    }
    Ok(report)
}
