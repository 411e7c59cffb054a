use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::metrics::{MetricsRow, MetricsWriter};
use super::model::Model;
use super::optim::AdamW;
use crate::error::{KonError, Result};
use crate::kgdata::{sample_negatives, QueryRow, Split};
use crate::ndops::{GradStore, Graph};

pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<MetricsRow>,
    pub steps: usize,
    /// Time spent in setup and optimizer steps.
    pub train_secs: f64,
    pub rng: ChaCha8Rng,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model, self.steps, &self.rng)
    }

    /// Median optimizer-step time in milliseconds, skipping the first step.
    pub fn median_step_ms(&self) -> f64 {
        let mut times: Vec<f64> = self.metrics.iter().skip(1).map(|m| m.wall_ms).collect();
        if times.is_empty() {
            return self.metrics.first().map_or(0.0, |m| m.wall_ms);
        }
        times.sort_by(f64::total_cmp);
        let n = times.len();
        if n % 2 == 1 {
            times[n / 2]
        } else {
            0.5 * (times[n / 2 - 1] + times[n / 2])
        }
    }
}

/// A training run advanced one optimizer step at a time.
///
/// Each epoch shuffles the training queries; every `batch_size ×
/// accumulation` queries form one step with gradients averaged over the
/// chunk.
pub struct Trainer {
    config: RunConfig,
    model: Model,
    rng: ChaCha8Rng,
    opt: AdamW,
    queries: Vec<QueryRow>,
    order: Vec<usize>,
    epoch: usize,
    cursor: usize,
    shuffled: bool,
    done: bool,
    step: usize,
    metrics: Vec<MetricsRow>,
    writer: Option<MetricsWriter>,
    out: Option<PathBuf>,
    busy: Duration,
}

impl Trainer {
    /// Builds a fresh model. With `out`, writes `config.toml` and `vocab.txt`
    /// there now and `metrics.jsonl` as steps run.
    pub fn new(config: &RunConfig, out: Option<&Path>) -> Result<Self> {
        let t0 = Instant::now();
        let (model, rng) = Model::build(config)?;
        let writer = match out {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| KonError::io(dir, e))?;
                let cfg_path = dir.join("config.toml");
                fs::write(&cfg_path, config.to_toml()?).map_err(|e| KonError::io(&cfg_path, e))?;
                model.vocab.save(&dir.join("vocab.txt"))?;
                Some(MetricsWriter::create(&dir.join("metrics.jsonl"))?)
            }
            None => None,
        };
        let queries = model.queries(Split::Train)?.rows;
        if queries.is_empty() {
            return Err(KonError::Config("training split is empty".into()));
        }
        let opt = AdamW::new(&config.optim, &model.store);
        Ok(Trainer {
            config: config.clone(),
            order: (0..queries.len()).collect(),
            queries,
            model,
            rng,
            opt,
            epoch: 0,
            cursor: 0,
            shuffled: false,
            done: false,
            step: 0,
            metrics: Vec::new(),
            writer,
            out: out.map(Path::to_path_buf),
            busy: t0.elapsed(),
        })
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    pub fn metrics(&self) -> &[MetricsRow] {
        &self.metrics
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    /// Runs one optimizer step. Returns false once the epoch or step budget
    /// is exhausted.
    pub fn step(&mut self) -> Result<bool> {
        let optim = &self.config.optim;
        let per_step = optim.batch_size * optim.accumulation;
        loop {
            if self.done || self.epoch >= optim.epochs {
                self.done = true;
                return Ok(false);
            }
            if !self.shuffled {
                self.order.shuffle(&mut self.rng);
                self.shuffled = true;
            }
            if self.cursor < self.order.len() {
                break;
            }
            if let Some(last) = self.metrics.last() {
                log::info!(
                    "epoch {}: step {} total {:.4} (nce {:.4} sft {:.4} tdt {:.4})",
                    self.epoch,
                    self.step,
                    last.total,
                    last.l_nce,
                    last.l_sft,
                    last.l_tdt
                );
            }
            self.epoch += 1;
            self.cursor = 0;
            self.shuffled = false;
        }
        if optim.max_steps.is_some_and(|m| self.step >= m) {
            self.done = true;
            return Ok(false);
        }

        let t0 = Instant::now();
        let end = (self.cursor + per_step).min(self.order.len());
        let chunk = &self.order[self.cursor..end];
        let entities = self.model.graph.num_entities();
        let (heads, store) = self.model.split_mut();
        let mut grads = GradStore::new(store);
        let mut sums = [0.0; 4];
        let scale = 1.0 / chunk.len() as f64;
        for &qi in chunk {
            let q = &self.queries[qi];
            let negatives = sample_negatives(entities, q.target, self.config.negatives, &mut self.rng)?;
            let mut g = Graph::new();
            let (loss, bd) =
                heads.query_objective(&mut g, store, q, &negatives, &self.config.loss, self.step)?;
            grads.accumulate(&g.backward(loss)?, scale);
            for (s, v) in sums.iter_mut().zip([bd.l_nce, bd.l_sft, bd.l_tdt, bd.total]) {
                *s += v * scale;
            }
        }
        self.opt.step(store, &grads);
        heads.head.project_weights(store);
        let elapsed = t0.elapsed();
        let row = MetricsRow {
            step: self.step,
            epoch: self.epoch,
            queries: chunk.len(),
            l_nce: sums[0],
            l_sft: sums[1],
            l_tdt: sums[2],
            total: sums[3],
            lr: self.opt.lr(),
            wall_ms: elapsed.as_secs_f64() * 1e3,
        };
        if let Some(w) = self.writer.as_mut() {
            w.write(&row)?;
        }
        self.metrics.push(row);
        self.cursor = end;
        self.step += 1;
        self.busy += elapsed;
        Ok(true)
    }

    /// Closes the metrics stream and, with an output directory, saves
    /// `checkpoint.bin`.
    pub fn finish(self) -> Result<TrainOutcome> {
        let outcome = TrainOutcome {
            model: self.model,
            metrics: self.metrics,
            steps: self.step,
            train_secs: self.busy.as_secs_f64(),
            rng: self.rng,
        };
        if let Some(w) = self.writer {
            w.finish()?;
        }
        if let Some(dir) = &self.out {
            outcome
                .checkpoint()
                .save(&dir.join("checkpoint.bin"), self.config.checkpoint.dtype)?;
        }
        Ok(outcome)
    }
}

/// Trains from scratch to the end of the budget. With `out`, writes
/// `config.toml`, `vocab.txt`, `metrics.jsonl` and `checkpoint.bin` there.
pub fn train(config: &RunConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config, out)?;
    while trainer.step()? {}
    trainer.finish()
}
