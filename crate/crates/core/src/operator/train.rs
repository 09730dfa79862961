use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::deeponet::{loss_and_gradients, Batch, DeepOperator, OperatorData, TrainingSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Query columns per step for kernel corpora, rows for feedback corpora.
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Step size reached at the last epoch (geometric decay).
    pub final_learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 600,
            batch_size: 128,
            learning_rate: 3e-3,
            final_learning_rate: 3e-6,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        if !(self.learning_rate > 0.0) || !(self.final_learning_rate > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::invalid("validation fraction must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::invalid("bad moment parameters"));
        }
        Ok(())
    }

    fn rate(&self, epoch: usize) -> f64 {
        if self.epochs == 1 {
            return self.learning_rate;
        }
        let f = epoch as f64 / (self.epochs - 1) as f64;
        self.learning_rate * (self.final_learning_rate / self.learning_rate).powf(f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean minibatch loss per epoch, normalized units.
    pub loss_history: Vec<f64>,
    /// Full-corpus MSE after training, normalized units.
    pub final_train_mse: f64,
    pub final_validation_mse: Option<f64>,
    /// `||pred - target|| / ||target||` over the validation corpus, physical units.
    pub final_validation_rel_l2: Option<f64>,
    /// Whether the window-50 moving average of the loss never increases.
    pub moving_average_monotone: bool,
}

/// Relative rise between consecutive moving-average values still counted as
/// flat; minibatch noise on a converged plateau stays well below it.
const MONOTONE_SLACK: f64 = 1e-3;

/// Whether the trailing moving average of `history` is non-increasing.
pub fn moving_average_monotone(history: &[f64], window: usize) -> bool {
    if history.len() <= window {
        return true;
    }
    let avgs: Vec<f64> = history.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect();
    avgs.windows(2).all(|w| w[1] <= w[0] * (1.0 + MONOTONE_SLACK))
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.epsilon);
        }
    }
}

/// Full-corpus MSE in normalized units.
pub fn corpus_mse(op: &DeepOperator, set: &TrainingSet) -> Result<f64> {
    Ok(loss_and_gradients(op, &set.batch())?.0)
}

fn relative_l2(op: &DeepOperator, data: &OperatorData) -> Result<f64> {
    let pred = op.predict_corpus(data)?;
    let (num, den) = match data {
        OperatorData::Kernel(k) => pred
            .iter()
            .zip(k.fields.iter())
            .fold((0.0, 0.0), |(n, d), (p, y)| (n + (p - y) * (p - y), d + y * y)),
        OperatorData::Feedback(f) => pred
            .column(0)
            .iter()
            .zip(f.controls.iter())
            .fold((0.0, 0.0), |(n, d), (p, y)| (n + (p - y) * (p - y), d + y * y)),
    };
    Ok(if den > 0.0 { (num / den).sqrt() } else { num.sqrt() })
}

/// Fits normalization to `train_data`, then runs seeded minibatch Adam.
pub fn train(
    op: &mut DeepOperator,
    train_data: &OperatorData,
    validation: Option<&OperatorData>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_data.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    op.fit_normalization(train_data)?;
    let set = op.encode(train_data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = op.params();
    let mut adam = Adam::new(params.len());
    let units = match &set {
        TrainingSet::Grid { trunk, .. } => trunk.nrows(),
        TrainingSet::Paired { branch, .. } => branch.nrows(),
    };
    let mut order: Vec<usize> = (0..units).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.rate(epoch);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (loss, grads) = match &set {
                TrainingSet::Grid { branch, trunk, targets } => {
                    let t = trunk.select(Axis(0), chunk);
                    let y = targets.select(Axis(1), chunk);
                    loss_and_gradients(op, &Batch::Grid { branch: branch.view(), trunk: t.view(), targets: y.view() })?
                }
                TrainingSet::Paired { branch, trunk, targets } => {
                    let b = branch.select(Axis(0), chunk);
                    let t = trunk.select(Axis(0), chunk);
                    let y = targets.select(Axis(0), chunk);
                    loss_and_gradients(op, &Batch::Paired { branch: b.view(), trunk: t.view(), targets: y.view() })?
                }
            };
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            total += loss * chunk.len() as f64;
            adam.update(&mut params, &grads.flatten(), lr, cfg);
            op.set_params(&params)?;
        }
        let mean = total / units as f64;
        if !mean.is_finite() || !op.is_finite() {
            return Err(Error::Divergence { epoch, loss: mean });
        }
        history.push(mean);
    }

    let final_train_mse = corpus_mse(op, &set)?;
    let (final_validation_mse, final_validation_rel_l2) = match validation {
        Some(v) if !v.is_empty() => (Some(corpus_mse(op, &op.encode(v)?)?), Some(relative_l2(op, v)?)),
        _ => (None, None),
    };
    Ok(TrainReport {
        moving_average_monotone: moving_average_monotone(&history, 50),
        loss_history: history,
        final_train_mse,
        final_validation_mse,
        final_validation_rel_l2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moving_average_check() {
        let down: Vec<f64> = (0..200).map(|i| 1.0 / (1.0 + i as f64)).collect();
        assert!(moving_average_monotone(&down, 50));
        let mut bump = down.clone();
        bump[150] = 10.0;
        assert!(!moving_average_monotone(&bump, 50));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { validation_fraction: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
        let c = TrainConfig { epochs: 3, learning_rate: 1e-2, final_learning_rate: 1e-4, ..Default::default() };
        assert!((c.rate(1) - 1e-3).abs() < 1e-15);
    }
}
