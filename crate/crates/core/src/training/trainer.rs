use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, TrainState};
use super::eval::forward_normalized;
use super::{collate, l2_relative_error, Batch, NormStats};
use crate::datagen::PoissonDataset;
use crate::error::{GinotError, Result};
use crate::extension::ExtraInputs;
use crate::model::{Ginot, GinotConfig};
use crate::numerics::{AdamConfig, Gradients, OptimizerState, Tape, Tensor};
use crate::pointcloud::FpsInit;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const BEST_DIR: &str = "best";
pub const LAST_DIR: &str = "last";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub factor: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
    /// Random first FPS centroid per sample and step (inference always uses the first valid point).
    pub random_fps_init: bool,
    /// Random subset of valid query rows used per sample and step; `0` keeps all.
    pub max_train_queries: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-3,
            patience: 40,
            factor: 0.7,
            epochs: 300,
            seed: 0,
            clip_norm: 1.0,
            random_fps_init: true,
            max_train_queries: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, why: &str| Err(GinotError::InvalidArgument(format!("{f}: {why}")));
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive");
        }
        if self.patience == 0 {
            return bad("patience", "must be >= 1");
        }
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return bad("factor", "must lie in (0, 1)");
        }
        if !(self.clip_norm >= 0.0) {
            return bad("clip_norm", "must be >= 0");
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            plateau_patience: self.patience,
            plateau_factor: self.factor,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub val_l2: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

impl EpochMetrics {
    pub fn csv_header() -> &'static str {
        "epoch,train_mse,val_mse,val_l2,lr"
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.epoch, self.train_mse, self.val_mse, self.val_l2, self.lr
        )
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    crate::datagen::sample_seed(crate::datagen::sample_seed(seed, a as usize), b as usize)
}

/// Owns the model and optimizer during training; borrows the dataset.
pub struct Trainer<'d> {
    pub model: Ginot,
    pub optimizer: OptimizerState,
    pub norm: NormStats,
    pub config: TrainConfig,
    pub history: Vec<EpochMetrics>,
    pub best_val: Option<f64>,
    data: &'d PoissonDataset,
}

impl<'d> Trainer<'d> {
    pub fn new(model_config: GinotConfig, config: TrainConfig, data: &'d PoissonDataset) -> Result<Self> {
        config.validate()?;
        if data.len() < 2 {
            return Err(GinotError::InvalidArgument(
                "training needs at least 2 samples".into(),
            ));
        }
        if model_config.with_extras != data.meta.generator.load_range.is_some() {
            return Err(GinotError::InvalidArgument(
                "with_extras must match whether the dataset varies the load".into(),
            ));
        }
        let model = Ginot::new(model_config, config.seed)?;
        let optimizer = OptimizerState::new(&model.params, config.adam())?;
        Ok(Self {
            model,
            optimizer,
            norm: data.meta.norm.clone(),
            config,
            history: Vec::new(),
            best_val: None,
            data,
        })
    }

    /// Continues from a saved state; `epochs` overrides the stored target when given.
    pub fn resume(
        model: Ginot,
        norm: NormStats,
        state: TrainState,
        epochs: Option<usize>,
        data: &'d PoissonDataset,
    ) -> Result<Self> {
        let mut config = state.config;
        if let Some(e) = epochs {
            config.epochs = e;
        }
        Ok(Self {
            model,
            optimizer: state.optimizer,
            norm,
            config,
            history: state.history,
            best_val: state.best_val,
            data,
        })
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            config: self.config.clone(),
            optimizer: self.optimizer.clone(),
            history: self.history.clone(),
            best_val: self.best_val,
        }
    }

    pub fn next_epoch(&self) -> usize {
        self.history.len()
    }

    /// Batch loss, the number of query rows it covers, and its gradients. Each
    /// sample is taped separately and the gradients are merged in batch order.
    pub fn batch_gradients(&self, batch: &Batch, epoch: usize, ids: &[usize]) -> Result<(f64, usize, Gradients)> {
        let cfg = &self.config;
        let model = &self.model;
        let plans: Vec<(Vec<usize>, FpsInit)> = (0..batch.len())
            .map(|k| {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64, ids[k] as u64));
                let mut rows: Vec<usize> = (0..batch.masks[k].len()).filter(|&r| batch.masks[k][r]).collect();
                if cfg.max_train_queries > 0 && rows.len() > cfg.max_train_queries {
                    rows.shuffle(&mut rng);
                    rows.truncate(cfg.max_train_queries);
                    rows.sort_unstable();
                }
                let init = if cfg.random_fps_init {
                    FpsInit::SeededRandom(rng.gen())
                } else {
                    FpsInit::FixedFirstValid
                };
                (rows, init)
            })
            .collect();
        let rows_used: usize = plans.iter().map(|p| p.0.len()).sum();
        let denom = 1.0 + rows_used as f64;
        let per_sample: Vec<Result<(f64, Gradients)>> = plans
            .par_iter()
            .enumerate()
            .map(|(k, (rows, init))| {
                let q = &batch.queries[k].points;
                let t = &batch.targets[k].values;
                let d = q.last_dim();
                let qs: Vec<f64> = rows.iter().flat_map(|&r| q.row(r).iter().copied()).collect();
                let ts: Vec<f64> = rows.iter().flat_map(|&r| t.row(r).iter().copied()).collect();
                let extras = match &batch.extras {
                    Some(e) => Some(ExtraInputs::new(e[k])?),
                    None => None,
                };
                let mut tape = Tape::new(&model.params);
                let kv = model.key_value_tokens(&mut tape, &batch.clouds[k], extras, *init)?;
                if rows.is_empty() {
                    return Ok((0.0, Gradients::zeros_like(&model.params)));
                }
                let pred = model.decoder.decode(&mut tape, &Tensor::new(vec![rows.len(), d], qs)?, kv)?;
                let loss = tape.masked_sse(pred, &ts, &vec![true; rows.len()], denom)?;
                let value = tape.value(loss)[0];
                Ok((value, tape.backward(loss)?))
            })
            .collect();
        let mut total = 0.0;
        let mut grads = Gradients::zeros_like(&self.model.params);
        for r in per_sample {
            let (l, g) = r?;
            total += l;
            grads.merge(&g);
        }
        Ok((total, rows_used, grads))
    }

    /// One optimizer step on `batch`; returns the pre-step loss and its row count.
    pub fn step(&mut self, batch: &Batch, epoch: usize, batch_index: usize, ids: &[usize]) -> Result<(f64, usize)> {
        let (loss, rows, mut grads) = self.batch_gradients(batch, epoch, ids)?;
        if !loss.is_finite() {
            return Err(GinotError::NonFiniteLoss {
                epoch,
                batch: batch_index,
            });
        }
        if self.config.clip_norm > 0.0 {
            let norm = grads.global_norm();
            if norm > self.config.clip_norm {
                grads.scale(self.config.clip_norm / norm);
            }
        }
        self.model.params.zero_grad();
        self.model.params.accumulate(&grads)?;
        self.optimizer.adam_step(&mut self.model.params)?;
        Ok((loss, rows))
    }

    /// Masked MSE (normalized units) and mean L2 relative error (physical units) over `indices`.
    pub fn validate(&self, indices: &[usize]) -> Result<(f64, f64)> {
        if indices.is_empty() {
            return Ok((f64::NAN, f64::NAN));
        }
        let parts: Vec<Result<(f64, usize, f64)>> = indices
            .par_iter()
            .map(|&i| {
                let s = &self.data.samples[i];
                let pred = forward_normalized(
                    &self.model,
                    &self.norm,
                    &s.boundary,
                    &s.queries,
                    s.load,
                    FpsInit::FixedFirstValid,
                )?;
                let target = self.norm.normalize_values(&s.solution.values)?;
                let mask = &s.solution.valid;
                let c = target.last_dim();
                let mut sse = 0.0;
                for (r, &m) in mask.iter().enumerate() {
                    if m {
                        for j in r * c..(r + 1) * c {
                            sse += (pred.data()[j] - target.data()[j]).powi(2);
                        }
                    }
                }
                let physical = self.norm.denormalize_values(&pred)?;
                let l2 = l2_relative_error(&physical, &s.solution.values, mask)?;
                Ok((sse, s.solution.valid.iter().filter(|&&m| m).count(), l2))
            })
            .collect();
        let (mut sse, mut n, mut l2) = (0.0, 0usize, 0.0);
        for p in parts {
            let (a, b, c) = p?;
            sse += a;
            n += b;
            l2 += c;
        }
        Ok((sse / (1.0 + n as f64), l2 / indices.len() as f64))
    }

    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let epoch = self.next_epoch();
        let mut order = self.data.meta.split.train.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(self.config.seed, u64::MAX, epoch as u64)));
        let lr = self.optimizer.learning_rate;
        let with_extras = self.model.extension.is_some();
        let (mut sse, mut rows) = (0.0, 0usize);
        for (b, ids) in order.chunks(self.config.batch_size).enumerate() {
            let samples: Vec<_> = ids.iter().map(|&i| &self.data.samples[i]).collect();
            let batch = collate(&samples, &self.norm, with_extras)?;
            let (loss, n) = self.step(&batch, epoch, b, ids)?;
            sse += loss * (1.0 + n as f64);
            rows += n;
        }
        let train_mse = sse / (1.0 + rows as f64);
        let (val_mse, val_l2) = self.validate(&self.data.meta.split.test)?;
        let monitored = if val_mse.is_nan() { train_mse } else { val_mse };
        self.optimizer.plateau_schedule(monitored);
        let m = EpochMetrics {
            epoch,
            train_mse,
            val_mse,
            val_l2,
            lr,
        };
        self.history.push(m.clone());
        Ok(m)
    }

    /// Runs until `config.epochs` epochs exist in the history. With a run
    /// directory, writes the config snapshot, appends one metric line per
    /// epoch and keeps `best/` and `last/` checkpoints.
    pub fn fit(&mut self, run_dir: Option<&Path>, mut on_epoch: impl FnMut(&EpochMetrics)) -> Result<()> {
        if let Some(dir) = run_dir {
            fs::create_dir_all(dir)?;
            let snapshot = serde_json::json!({
                "model": self.model.config,
                "train": self.config,
            });
            fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(&snapshot)? + "\n")?;
            let log = dir.join(METRICS_FILE);
            if self.history.is_empty() || !log.exists() {
                let mut text = String::from(EpochMetrics::csv_header());
                text.push('\n');
                for m in &self.history {
                    text.push_str(&m.csv_line());
                    text.push('\n');
                }
                fs::write(&log, text)?;
            }
        }
        while self.history.len() < self.config.epochs {
            let m = self.run_epoch()?;
            let monitored = if m.val_mse.is_nan() { m.train_mse } else { m.val_mse };
            let improved = self.best_val.map_or(true, |b| monitored < b);
            if improved {
                self.best_val = Some(monitored);
            }
            if let Some(dir) = run_dir {
                let mut f = fs::OpenOptions::new().append(true).open(dir.join(METRICS_FILE))?;
                writeln!(f, "{}", m.csv_line())?;
                let state = self.state();
                if improved {
                    save_checkpoint(&dir.join(BEST_DIR), &self.model, &self.norm, Some(&state))?;
                }
                save_checkpoint(&dir.join(LAST_DIR), &self.model, &self.norm, Some(&state))?;
            }
            on_epoch(&m);
        }
        Ok(())
    }
}
