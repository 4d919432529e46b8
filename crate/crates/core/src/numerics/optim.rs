use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::Tensor;
use crate::error::{GinotError, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            plateau_patience: 40,
            plateau_factor: 0.7,
        }
    }
}

/// Adam moments plus the plateau learning-rate schedule.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub best_metric: f64,
    pub epochs_since_improvement: usize,
}

impl OptimizerState {
    pub fn new(params: &ParamStore, cfg: AdamConfig) -> Result<Self> {
        if cfg.plateau_patience == 0 {
            return Err(GinotError::InvalidArgument(
                "plateau_patience must be >= 1".into(),
            ));
        }
        if !(cfg.plateau_factor > 0.0 && cfg.plateau_factor < 1.0) {
            return Err(GinotError::InvalidArgument(
                "plateau_factor must lie in (0, 1)".into(),
            ));
        }
        if !(cfg.learning_rate > 0.0) {
            return Err(GinotError::InvalidArgument(
                "learning rate must be positive".into(),
            ));
        }
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Ok(Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
            learning_rate: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            plateau_patience: cfg.plateau_patience,
            plateau_factor: cfg.plateau_factor,
            best_metric: f64::INFINITY,
            epochs_since_improvement: 0,
        })
    }

    /// One bias-corrected Adam update using the gradient buffers held in `params`.
    /// Parameters without a gradient buffer are treated as having zero gradient.
    pub fn adam_step(&mut self, params: &mut ParamStore) -> Result<()> {
        if params.len() != self.first_moment.len() {
            return Err(GinotError::Shape(
                "optimizer state does not match the parameter store".into(),
            ));
        }
        for id in params.ids() {
            if let Some(g) = params.get(id).grad() {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(GinotError::NonFiniteGradient(params.name(id).to_string()));
                }
            }
        }
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let step = self.learning_rate / bc1;
        for id in params.ids() {
            let p = params.get_mut(id);
            let grad = p.grad().map(<[f64]>::to_vec);
            let m = self.first_moment[id.0].data_mut();
            let v = self.second_moment[id.0].data_mut();
            if m.len() != p.len() {
                return Err(GinotError::Shape(format!(
                    "moment shape mismatch for `{}`",
                    id.0
                )));
            }
            let data = p.data_mut();
            for j in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                data[j] -= step * m[j] / ((v[j] / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Feeds one epoch's monitored metric; returns true when the learning rate was reduced.
    pub fn plateau_schedule(&mut self, epoch_metric: f64) -> bool {
        if epoch_metric < self.best_metric {
            self.best_metric = epoch_metric;
            self.epochs_since_improvement = 0;
            return false;
        }
        self.epochs_since_improvement += 1;
        if self.epochs_since_improvement >= self.plateau_patience {
            self.learning_rate *= self.plateau_factor;
            self.epochs_since_improvement = 0;
            return true;
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(value: f64) -> ParamStore {
        let mut ps = ParamStore::new();
        ps.add("w", Tensor::new(vec![1], vec![value]).unwrap());
        ps
    }

    fn state(ps: &ParamStore, lr: f64, patience: usize, factor: f64) -> OptimizerState {
        OptimizerState::new(
            ps,
            AdamConfig {
                learning_rate: lr,
                plateau_patience: patience,
                plateau_factor: factor,
                ..AdamConfig::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut ps = single_param(0.3);
        ps.add("b", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let mut st = state(&ps, 1e-3, 40, 0.7);
        let id = ps.id("b").unwrap();
        ps.get_mut(id).accumulate_grad(&[0.0, 0.0]).unwrap();
        st.adam_step(&mut ps).unwrap();
        assert_eq!(ps.by_name("w").unwrap().data(), &[0.3]);
        assert_eq!(ps.by_name("b").unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = 1, v̂ = 1 after bias correction → Δ = lr / (1 + eps)
        let mut ps = single_param(0.0);
        let mut st = state(&ps, 1e-3, 40, 0.7);
        let id = ps.id("w").unwrap();
        ps.get_mut(id).accumulate_grad(&[1.0]).unwrap();
        st.adam_step(&mut ps).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((ps.get(id).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn oscillating_gradients_keep_second_moment_positive() {
        let mut ps = single_param(0.0);
        let mut st = state(&ps, 1e-3, 40, 0.7);
        let id = ps.id("w").unwrap();
        for g in [1.0, -1.0] {
            ps.zero_grad();
            ps.get_mut(id).accumulate_grad(&[g]).unwrap();
            st.adam_step(&mut ps).unwrap();
        }
        assert!(st.second_moment[0].data()[0] > 0.0);
        assert_eq!(st.step_count, 2);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut ps = single_param(0.0);
        let mut st = state(&ps, 1e-3, 40, 0.7);
        let id = ps.id("w").unwrap();
        ps.get_mut(id).accumulate_grad(&[f64::NAN]).unwrap();
        match st.adam_step(&mut ps) {
            Err(GinotError::NonFiniteGradient(name)) => assert_eq!(name, "w"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn plateau_monotone_improvement_keeps_lr() {
        let ps = single_param(0.0);
        let mut st = state(&ps, 1e-3, 2, 0.7);
        for m in [1.0, 0.9, 0.8] {
            assert!(!st.plateau_schedule(m));
        }
        assert_eq!(st.learning_rate, 1e-3);
    }

    #[test]
    fn plateau_flat_metric_reduces_after_patience() {
        let ps = single_param(0.0);
        let mut st = state(&ps, 1e-3, 2, 0.7);
        let reduced: Vec<bool> = [1.0, 1.0, 1.0].iter().map(|&m| st.plateau_schedule(m)).collect();
        assert_eq!(reduced, vec![false, false, true]);
        assert!((st.learning_rate - 7e-4).abs() < 1e-18);
    }

    #[test]
    fn plateau_patience_one_halves_at_epochs_two_and_four() {
        let ps = single_param(0.0);
        let mut st = state(&ps, 1.0, 1, 0.5);
        let reduced: Vec<bool> = [1.0, 2.0, 0.5, 2.0]
            .iter()
            .map(|&m| st.plateau_schedule(m))
            .collect();
        assert_eq!(reduced, vec![false, true, false, true]);
        assert_eq!(st.learning_rate, 0.25);
    }

    #[test]
    fn invalid_schedule_parameters_are_rejected() {
        let ps = single_param(0.0);
        let bad = AdamConfig {
            plateau_factor: 1.0,
            ..AdamConfig::default()
        };
        assert!(OptimizerState::new(&ps, bad).is_err());
        let bad = AdamConfig {
            plateau_patience: 0,
            ..AdamConfig::default()
        };
        assert!(OptimizerState::new(&ps, bad).is_err());
    }
}
