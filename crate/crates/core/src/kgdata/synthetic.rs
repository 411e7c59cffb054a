//! Rule-governed synthetic knowledge graph.
//!
//! Items are `"<color> <kind>"` pairs; the remaining entities are the colors,
//! labelled `"hue <color>"` so no entity name is a token prefix of another,
//! and the habitats. Five deterministic relations connect them:
//!
//! | relation     | rule                                     |
//! |--------------|------------------------------------------|
//! | `has color`  | item `(c, k)` → color `c`                |
//! | `lives in`   | item `(c, k)` → habitat `k mod H`        |
//! | `next kind`  | item `(c, k)` → item `(c, k+1 mod K)`    |
//! | `next color` | item `(c, k)` → item `(c+1 mod C, k)`    |
//! | `borders`    | habitat `h` → habitat `h+1 mod H`        |
//!
//! Every held-out triple is implied by the rules and the train split, so a
//! model can generalize rather than only memorize.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{KnowledgeGraph, Named, Triple};
use crate::error::{KonError, Result};

const COLORS: [&str; 10] = [
    "red", "blue", "green", "gold", "gray", "pink", "teal", "plum", "rust", "sand",
];
const KINDS: [&str; 12] = [
    "fox", "owl", "bear", "wolf", "deer", "hare", "lynx", "crow", "mole", "seal", "newt", "wren",
];
const HABITATS: [&str; 8] = [
    "forest", "marsh", "tundra", "desert", "meadow", "canyon", "reef", "steppe",
];

pub const RELATIONS: [&str; 5] = ["has color", "lives in", "next kind", "next color", "borders"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub colors: usize,
    pub kinds: usize,
    pub habitats: usize,
    pub valid_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    /// 40 items + 5 colors + 5 habitats = 50 entities.
    fn default() -> Self {
        SyntheticConfig {
            colors: 5,
            kinds: 8,
            habitats: 5,
            valid_fraction: 0.1,
            test_fraction: 0.1,
            seed: 17,
        }
    }
}

impl SyntheticConfig {
    pub fn num_entities(&self) -> usize {
        self.colors * self.kinds + self.colors + self.habitats
    }

    /// Smallest square-ish config with at least `n` entities.
    pub fn with_at_least(n: usize, seed: u64) -> Self {
        let mut side = 2;
        let mut cfg = SyntheticConfig {
            seed,
            ..Default::default()
        };
        loop {
            cfg.colors = side;
            cfg.kinds = side;
            if cfg.num_entities() >= n {
                return cfg;
            }
            side += 1;
        }
    }
}

fn word(list: &[&str], prefix: &str, i: usize) -> String {
    list.get(i)
        .map_or_else(|| format!("{prefix}{i}"), |w| w.to_string())
}

pub fn generate(cfg: &SyntheticConfig) -> Result<KnowledgeGraph> {
    if cfg.colors < 2 || cfg.kinds < 2 || cfg.habitats < 2 {
        return Err(KonError::Config(
            "synthetic graph needs at least 2 colors, kinds and habitats".into(),
        ));
    }
    if !(0.0..1.0).contains(&(cfg.valid_fraction + cfg.test_fraction)) {
        return Err(KonError::Config("split fractions must sum below 1".into()));
    }
    let (nc, nk, nh) = (cfg.colors, cfg.kinds, cfg.habitats);
    let item = |c: usize, k: usize| c * nk + k;
    let color_entity = |c: usize| nc * nk + c;
    let habitat_entity = |h: usize| nc * nk + nc + h;

    let mut entities = Vec::with_capacity(cfg.num_entities());
    for c in 0..nc {
        for k in 0..nk {
            let label = format!("{} {}", word(&COLORS, "tint", c), word(&KINDS, "beast", k));
            entities.push(Named {
                id: format!("item_{c}_{k}"),
                label,
            });
        }
    }
    for c in 0..nc {
        entities.push(Named {
            id: format!("color_{c}"),
            label: format!("hue {}", word(&COLORS, "tint", c)),
        });
    }
    for h in 0..nh {
        entities.push(Named {
            id: format!("habitat_{h}"),
            label: word(&HABITATS, "land", h),
        });
    }
    let relations = RELATIONS
        .iter()
        .enumerate()
        .map(|(i, l)| Named {
            id: format!("rel_{i}"),
            label: l.to_string(),
        })
        .collect();

    let mut triples = Vec::new();
    for c in 0..nc {
        for k in 0..nk {
            let e = item(c, k);
            triples.push(Triple::new(e, 0, color_entity(c)));
            triples.push(Triple::new(e, 1, habitat_entity(k % nh)));
            triples.push(Triple::new(e, 2, item(c, (k + 1) % nk)));
            triples.push(Triple::new(e, 3, item((c + 1) % nc, k)));
        }
    }
    for h in 0..nh {
        triples.push(Triple::new(habitat_entity(h), 4, habitat_entity((h + 1) % nh)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    triples.shuffle(&mut rng);
    let n = triples.len();
    let n_test = ((n as f64) * cfg.test_fraction).round() as usize;
    let n_valid = ((n as f64) * cfg.valid_fraction).round() as usize;
    let test = triples.split_off(n - n_test);
    let valid = triples.split_off(n - n_test - n_valid);
    let mut train = triples;
    train.sort_unstable();
    KnowledgeGraph::new(entities, relations, train, valid, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shape() {
        let g = generate(&SyntheticConfig::default()).unwrap();
        assert_eq!(g.num_entities(), 50);
        assert_eq!(g.num_relations(), 5);
        assert_eq!(g.train.len() + g.valid.len() + g.test.len(), 4 * 40 + 5);
        assert!(!g.valid.is_empty() && !g.test.is_empty());
        assert_eq!(g.entities[0].label, "red fox");
        assert_eq!(g.entities[40].label, "hue red");
    }

    #[test]
    fn deterministic() {
        let a = generate(&SyntheticConfig::default()).unwrap();
        let b = generate(&SyntheticConfig::default()).unwrap();
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn large_graphs_have_unique_labels() {
        let cfg = SyntheticConfig::with_at_least(1100, 1);
        let g = generate(&cfg).unwrap();
        assert!(g.num_entities() >= 1100);
        let mut labels: Vec<&str> = g.entities.iter().map(|e| e.label.as_str()).collect();
        labels.sort_unstable();
        labels.dedup();
        assert_eq!(labels.len(), g.num_entities());
    }
}
