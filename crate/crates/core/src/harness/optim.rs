use super::config::OptimConfig;
use crate::ndops::{GradStore, ParamStore};

/// Adaptive moments with decoupled weight decay. Decay applies to matrices
/// only; gains and aggregation weights are left alone.
pub struct AdamW {
    cfg: OptimConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: &OptimConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        AdamW {
            cfg: cfg.clone(),
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradStore) {
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let p = store.get_mut(id);
            let decay = p.rank() == 2 && p.shape()[0] > 1 && p.shape()[1] > 1;
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                if decay {
                    *w -= c.lr * c.weight_decay * *w;
                }
                *w -= c.lr * update;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndops::{Graph, Tensor};

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(&[1.0, -2.0]));
        let cfg = OptimConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut opt = AdamW::new(&cfg, &store);
        let mut grads = GradStore::new(&store);
        {
            let mut g = Graph::new();
            let w = g.param(&store, id);
            let l = g.sum(w).unwrap();
            grads.accumulate(&g.backward(l).unwrap(), 1.0);
        }
        opt.step(&mut store, &grads);
        let w = store.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 2.1).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::matrix(&[&[3.0, -1.0], &[0.5, 2.0]]).unwrap());
        let cfg = OptimConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut opt = AdamW::new(&cfg, &store);
        for _ in 0..500 {
            let mut grads = GradStore::new(&store);
            {
                let mut g = Graph::new();
                let w = g.param(&store, id);
                let sq = g.mul(w, w).unwrap();
                let l = g.sum(sq).unwrap();
                grads.accumulate(&g.backward(l).unwrap(), 1.0);
            }
            opt.step(&mut store, &grads);
        }
        assert!(store.get(id).data().iter().all(|w| w.abs() < 1e-2));
    }

    #[test]
    fn decay_skips_vectors_and_frozen_tensors() {
        let mut store = ParamStore::new();
        let gain = store.add("gain", Tensor::ones(&[3]));
        let mat = store.add("mat", Tensor::ones(&[2, 2]));
        let frozen = store.add("frozen", Tensor::ones(&[2, 2]));
        store.set_trainable(frozen, false);
        let cfg = OptimConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..OptimConfig::default()
        };
        let mut opt = AdamW::new(&cfg, &store);
        let mut grads = GradStore::new(&store);
        {
            let mut g = Graph::new();
            let parts = [gain, mat, frozen].map(|id| g.param(&store, id));
            let zero = |g: &mut Graph, v| {
                let s = g.sum(v).unwrap();
                g.scale(s, 0.0).unwrap()
            };
            let a = zero(&mut g, parts[0]);
            let b = zero(&mut g, parts[1]);
            let c = zero(&mut g, parts[2]);
            let ab = g.add(a, b).unwrap();
            let l = g.add(ab, c).unwrap();
            grads.accumulate(&g.backward(l).unwrap(), 1.0);
        }
        opt.step(&mut store, &grads);
        assert_eq!(store.get(gain).data(), &[1.0; 3]);
        assert!(store.get(mat).data().iter().all(|&w| (w - 0.95).abs() < 1e-12));
        assert_eq!(store.get(frozen).data(), &[1.0; 4]);
    }
}
