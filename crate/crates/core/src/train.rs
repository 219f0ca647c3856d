//! Full-batch Adam with linear warmup and cosine decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::WeightModel;
use crate::objective::{Workspace, DEFAULT_CACHE_BYTES};
use crate::problem::ProblemInstance;
use crate::real::{Precision, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_steps: usize,
    pub warmup_fraction: f64,
    pub stop_accuracy: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub precision: Precision,
    /// Byte budget for materialized decoupled outputs.
    pub cache_bytes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-2,
            max_steps: 512,
            warmup_fraction: 0.05,
            stop_accuracy: 0.999,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            precision: Precision::F64,
            cache_bytes: DEFAULT_CACHE_BYTES,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.warmup_fraction)
            && (0.0..=1.0).contains(&self.stop_accuracy)
            && (0.0..1.0).contains(&self.adam_beta1)
            && (0.0..1.0).contains(&self.adam_beta2)
            && self.adam_eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid training config: {self:?}")))
        }
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.max_steps as f64).ceil() as usize
    }

    /// Learning rate applied at 1-based step `t`.
    pub fn lr_at(&self, t: usize) -> f64 {
        let tw = self.warmup_steps();
        let total = self.max_steps;
        if t < tw {
            self.learning_rate * t as f64 / tw as f64
        } else if total <= tw {
            self.learning_rate
        } else {
            let x = (t - tw) as f64 / (total - tw) as f64;
            self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    AccuracyReached,
    MaxSteps,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::AccuracyReached => "accuracy_reached",
            StopReason::MaxSteps => "max_steps",
        }
    }
}

/// Trajectory of one run. Entry `k` of `loss`/`accuracy` is measured after `k`
/// updates, so both have `steps_used + 1` entries.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub steps_used: usize,
    pub stop_reason: StopReason,
    pub warmup_steps: usize,
}

impl TrainReport {
    pub fn final_accuracy(&self) -> f64 {
        *self.accuracy.last().expect("non-empty trajectory")
    }

    pub fn final_loss(&self) -> f64 {
        *self.loss.last().expect("non-empty trajectory")
    }
}

struct Adam<T> {
    m: WeightModel<T>,
    v: WeightModel<T>,
}

/// Train `model` in place on `inst`.
pub fn train<T: Real>(
    inst: &ProblemInstance,
    model: &mut WeightModel<T>,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    let ws = Workspace::<T>::new(inst, config.cache_bytes)?;
    train_in(&ws, model, config)
}

/// Train against a prepared workspace.
pub fn train_in<T: Real>(
    ws: &Workspace<'_, T>,
    model: &mut WeightModel<T>,
    config: &TrainConfig,
) -> Result<TrainReport> {
    let mut adam = Adam {
        m: model.zeros_like(),
        v: model.zeros_like(),
    };
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let eps = T::of(config.adam_eps);
    let mut losses = Vec::new();
    let mut accs = Vec::new();
    let mut step = 0;
    let stop_reason = loop {
        let want_grad = step < config.max_steps;
        let eval = ws
            .evaluate(model, want_grad)
            .map_err(|e| relabel(e, step))?;
        losses.push(eval.loss);
        accs.push(eval.accuracy);
        if eval.accuracy >= config.stop_accuracy {
            break StopReason::AccuracyReached;
        }
        if !want_grad {
            break StopReason::MaxSteps;
        }
        step += 1;
        let g = eval.grad.expect("gradient requested");
        let lr = config.lr_at(step);
        let c1 = 1.0 - b1.powi(step as i32);
        let c2 = 1.0 - b2.powi(step as i32);
        let (tb1, tb2) = (T::of(b1), T::of(b2));
        let (ob1, ob2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        let step_size = T::of(lr / c1);
        let inv_sqrt_c2 = T::of(1.0 / c2.sqrt());
        let params = model.params_mut();
        let ms = adam.m.params_mut();
        let vs = adam.v.params_mut();
        for (((p, m), v), g) in params.into_iter().zip(ms).zip(vs).zip(g.params()) {
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = tb1 * *m + ob1 * g;
                    *v = tb2 * *v + ob2 * g * g;
                    *p = *p - step_size * *m / (v.sqrt() * inv_sqrt_c2 + eps);
                });
        }
        if !model.all_finite() {
            return Err(Error::numeric(step, "non-finite parameters after update"));
        }
    };
    Ok(TrainReport {
        loss: losses,
        accuracy: accs,
        steps_used: step,
        stop_reason,
        warmup_steps: config.warmup_steps(),
    })
}

fn relabel(e: Error, step: usize) -> Error {
    match e {
        Error::Numeric { msg, .. } => Error::Numeric { step, msg },
        other => other,
    }
}

/// Initialize and train in the requested precision; returns the report and
/// the final model lifted to f64.
pub fn train_fresh(
    inst: &ProblemInstance,
    kappa: f64,
    factored: bool,
    seed: u64,
    config: &TrainConfig,
) -> Result<(TrainReport, WeightModel<f64>)> {
    match config.precision {
        Precision::F64 => {
            let mut model = WeightModel::<f64>::init(inst.d, kappa, factored, seed)?;
            let report = train(inst, &mut model, config)?;
            Ok((report, model))
        }
        Precision::F32 => {
            let mut model = WeightModel::<f32>::init(inst.d, kappa, factored, seed)?;
            let report = train(inst, &mut model, config)?;
            Ok((report, model.cast()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{p_from_alpha, sample_instance, Mode};

    #[test]
    fn schedule_shape() {
        let c = TrainConfig::default();
        assert_eq!(c.warmup_steps(), 26);
        assert!((c.lr_at(13) - 0.005).abs() < 1e-15);
        assert!((c.lr_at(26) - 0.01).abs() < 1e-15);
        assert!(c.lr_at(512).abs() < 1e-15);
        let mid = 26 + (512 - 26) / 2;
        assert!((c.lr_at(mid) - 0.005).abs() < 1e-15);
        for t in 27..512 {
            assert!(c.lr_at(t) <= c.lr_at(t - 1));
        }
    }

    #[test]
    fn zero_steps_reports_chance() {
        let inst = sample_instance(10, 50, Mode::Op, 1).unwrap();
        let mut m = WeightModel::<f64>::init(10, 1.0, false, 1).unwrap();
        let cfg = TrainConfig {
            max_steps: 0,
            ..Default::default()
        };
        let r = train(&inst, &mut m, &cfg).unwrap();
        assert_eq!(r.steps_used, 0);
        assert_eq!(r.loss.len(), 1);
        assert!(r.final_accuracy() < 0.2);
        // Initial scores are O(1), so the loss sits near ln p.
        assert!((r.final_loss() - 50f64.ln()).abs() < 1.0);
    }

    #[test]
    fn solves_easy_instance_and_reduces_loss() {
        let d = 20;
        let inst = sample_instance(d, p_from_alpha(0.2, d), Mode::Op, 3).unwrap();
        let mut m = WeightModel::<f64>::init(d, 1.0, false, 3).unwrap();
        let r = train(&inst, &mut m, &TrainConfig::default()).unwrap();
        assert_eq!(r.final_accuracy(), 1.0);
        assert_eq!(r.stop_reason, StopReason::AccuracyReached);
        assert!(r.final_loss() < r.loss[0]);
        assert!(r.steps_used <= 512);
        assert!(r.accuracy.iter().all(|a| (0.0..=1.0).contains(a)));
    }

    #[test]
    fn factored_and_f32_train() {
        let d = 16;
        let inst = sample_instance(d, p_from_alpha(0.15, d), Mode::Dp, 4).unwrap();
        let cfg = TrainConfig {
            precision: Precision::F32,
            ..Default::default()
        };
        let (r, m) = train_fresh(&inst, 0.5, true, 4, &cfg).unwrap();
        assert!(m.is_factored());
        assert!(r.final_loss() < r.loss[0]);
    }

    #[test]
    fn rejects_bad_config() {
        let inst = sample_instance(4, 5, Mode::Op, 1).unwrap();
        let mut m = WeightModel::<f64>::zeros_full(4);
        let cfg = TrainConfig {
            learning_rate: -1.0,
            ..Default::default()
        };
        assert!(train(&inst, &mut m, &cfg).is_err());
    }

    #[test]
    fn report_serializes() {
        let inst = sample_instance(4, 5, Mode::Op, 1).unwrap();
        let mut m = WeightModel::<f64>::init(4, 1.0, false, 1).unwrap();
        let cfg = TrainConfig {
            max_steps: 3,
            stop_accuracy: 1.0,
            ..Default::default()
        };
        let r = train(&inst, &mut m, &cfg).unwrap();
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains("\"stop_reason\""));
    }
}
