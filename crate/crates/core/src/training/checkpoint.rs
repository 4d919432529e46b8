use std::path::Path;

use serde::{Deserialize, Serialize};

use super::trainer::{EpochMetrics, TrainConfig};
use super::NormStats;
use crate::datagen::container::{Container, NamedArray};
use crate::error::{GinotError, Result};
use crate::model::{Ginot, GinotConfig};
use crate::numerics::{OptimizerState, Tensor};

/// Everything needed to continue training after the last completed epoch.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub optimizer: OptimizerState,
    pub history: Vec<EpochMetrics>,
    pub best_val: Option<f64>,
}

pub struct Checkpoint {
    pub model: Ginot,
    pub norm: NormStats,
    pub train: Option<TrainState>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerMeta {
    step_count: u64,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    plateau_patience: usize,
    plateau_factor: f64,
    best_metric: Option<f64>,
    epochs_since_improvement: usize,
}

#[derive(Serialize, Deserialize)]
struct TrainMeta {
    config: TrainConfig,
    optimizer: OptimizerMeta,
    history: Vec<EpochMetrics>,
    best_val: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    model: GinotConfig,
    norm: NormStats,
    train: Option<TrainMeta>,
}

const KIND: &str = "checkpoint";

pub fn save_checkpoint(dir: &Path, model: &Ginot, norm: &NormStats, train: Option<&TrainState>) -> Result<()> {
    let train_meta = train.map(|t| TrainMeta {
        config: t.config.clone(),
        optimizer: OptimizerMeta {
            step_count: t.optimizer.step_count,
            learning_rate: t.optimizer.learning_rate,
            beta1: t.optimizer.beta1,
            beta2: t.optimizer.beta2,
            eps: t.optimizer.eps,
            plateau_patience: t.optimizer.plateau_patience,
            plateau_factor: t.optimizer.plateau_factor,
            best_metric: t.optimizer.best_metric.is_finite().then_some(t.optimizer.best_metric),
            epochs_since_improvement: t.optimizer.epochs_since_improvement,
        },
        history: t.history.clone(),
        best_val: t.best_val,
    });
    let meta = CheckpointMeta {
        kind: KIND.into(),
        model: model.config.clone(),
        norm: norm.clone(),
        train: train_meta,
    };
    let mut c = Container::new(serde_json::to_value(&meta)?);
    for (name, t) in model.params.iter() {
        c.push(NamedArray::f64(format!("param.{name}"), t.shape().to_vec(), t.data().to_vec()));
    }
    if let Some(t) = train {
        for (k, (name, _)) in model.params.iter().enumerate() {
            let m = &t.optimizer.first_moment[k];
            let v = &t.optimizer.second_moment[k];
            c.push(NamedArray::f64(format!("adam.m.{name}"), m.shape().to_vec(), m.data().to_vec()));
            c.push(NamedArray::f64(format!("adam.v.{name}"), v.shape().to_vec(), v.data().to_vec()));
        }
    }
    c.write(dir)
}

fn tensor(c: &Container, name: &str, shape: &[usize]) -> Result<Tensor> {
    let a = c.get(name)?;
    if a.shape != shape {
        return Err(GinotError::Container(format!(
            "array `{name}` has shape {:?}, model expects {shape:?}",
            a.shape
        )));
    }
    Tensor::new(a.shape.clone(), a.as_f64()?.to_vec())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let c = Container::read(dir)?;
    let meta: CheckpointMeta = serde_json::from_value(c.meta.clone())
        .map_err(|e| GinotError::Container(format!("corrupt checkpoint manifest: {e}")))?;
    if meta.kind != KIND {
        return Err(GinotError::Container(format!(
            "expected a checkpoint, found `{}`",
            meta.kind
        )));
    }
    let mut model = Ginot::new(meta.model, 0)?;
    let ids: Vec<_> = model.params.ids().collect();
    for &id in &ids {
        let name = model.params.name(id).to_string();
        let shape = model.params.get(id).shape().to_vec();
        *model.params.get_mut(id) = tensor(&c, &format!("param.{name}"), &shape)?;
    }
    let train = match meta.train {
        None => None,
        Some(t) => {
            let mut opt = OptimizerState::new(&model.params, crate::numerics::AdamConfig {
                learning_rate: t.optimizer.learning_rate,
                beta1: t.optimizer.beta1,
                beta2: t.optimizer.beta2,
                eps: t.optimizer.eps,
                plateau_patience: t.optimizer.plateau_patience,
                plateau_factor: t.optimizer.plateau_factor,
            })?;
            opt.step_count = t.optimizer.step_count;
            opt.best_metric = t.optimizer.best_metric.unwrap_or(f64::INFINITY);
            opt.epochs_since_improvement = t.optimizer.epochs_since_improvement;
            for (k, &id) in ids.iter().enumerate() {
                let name = model.params.name(id);
                let shape = model.params.get(id).shape().to_vec();
                opt.first_moment[k] = tensor(&c, &format!("adam.m.{name}"), &shape)?;
                opt.second_moment[k] = tensor(&c, &format!("adam.v.{name}"), &shape)?;
            }
            Some(TrainState {
                config: t.config,
                optimizer: opt,
                history: t.history,
                best_val: t.best_val,
            })
        }
    };
    Ok(Checkpoint {
        model,
        norm: meta.norm,
        train,
    })
}
