use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Network, NetError};
use crate::rng;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `ln(1 + exp(-y * t))` for targets in `{-1, +1}`.
    Logistic,
    /// `(t - y)^2` for continuous targets.
    SquaredError,
}

impl LossKind {
    fn value(self, score: f64, target: f64) -> f64 {
        match self {
            LossKind::Logistic => softplus(-score * target),
            LossKind::SquaredError => (target - score).powi(2),
        }
    }

    fn derivative(self, score: f64, target: f64) -> f64 {
        match self {
            LossKind::Logistic => -target * sigmoid(-score * target),
            LossKind::SquaredError => -2.0 * (target - score),
        }
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// One loss kind per attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kinds: Vec<LossKind>,
}

impl LossSpec {
    pub fn logistic(attribute_count: usize) -> Self {
        Self {
            kinds: vec![LossKind::Logistic; attribute_count],
        }
    }

    /// Summed loss over attributes for one sample.
    pub fn sample_loss(&self, scores: &[f64], targets: &[f64]) -> f64 {
        self.kinds
            .iter()
            .zip(scores.iter().zip(targets))
            .map(|(k, (&y, &t))| k.value(y, t))
            .sum()
    }

    fn score_gradient(&self, scores: &[f64], targets: &[f64]) -> Vec<f64> {
        self.kinds
            .iter()
            .zip(scores.iter().zip(targets))
            .map(|(k, (&y, &t))| k.derivative(y, t))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Multiplier on `1/sqrt(fan_in)` for the uniform weight init.
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 12,
            batch_size: 16,
            seed: 0,
            init_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean training loss of the network before the first update.
    pub initial_loss: f64,
    /// Mean loss seen during each epoch, measured before each minibatch update.
    pub epoch_losses: Vec<f64>,
    /// Mean training loss of the returned network.
    pub final_loss: f64,
}

impl Network {
    /// Mean summed loss over a dataset.
    pub fn mean_loss(
        &self,
        images: &[Tensor],
        targets: &[Vec<f64>],
        loss: &LossSpec,
    ) -> Result<f64, NetError> {
        let mut total = 0.0;
        for (img, t) in images.iter().zip(targets) {
            let trace = self.forward(img)?;
            total += loss.sample_loss(trace.scores().data(), t);
        }
        Ok(total / images.len().max(1) as f64)
    }

    fn check_training_data(
        &self,
        images: &[Tensor],
        targets: &[Vec<f64>],
        loss: &LossSpec,
        cfg: &TrainConfig,
    ) -> Result<(), NetError> {
        let n = self.attribute_count();
        if images.len() != targets.len() {
            return Err(NetError::InvalidData(format!(
                "{} images but {} annotation rows",
                images.len(),
                targets.len()
            )));
        }
        if loss.kinds.len() != n {
            return Err(NetError::InvalidData(format!(
                "loss spec covers {} attributes, network has {n}",
                loss.kinds.len()
            )));
        }
        for (row, t) in targets.iter().enumerate() {
            if t.len() != n {
                return Err(NetError::InvalidData(format!("row {row} has {} values", t.len())));
            }
            for (attr, (&v, kind)) in t.iter().zip(&loss.kinds).enumerate() {
                if *kind == LossKind::Logistic && v != 1.0 && v != -1.0 {
                    return Err(NetError::InvalidData(format!(
                        "row {row} attribute {attr}: logistic targets must be -1 or +1, got {v}"
                    )));
                }
                if !v.is_finite() {
                    return Err(NetError::InvalidData(format!("row {row}: non-finite target")));
                }
            }
        }
        if !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) || cfg.batch_size == 0 {
            return Err(NetError::InvalidData(
                "learning rate and batch size must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Plain minibatch SGD. Sample order is shuffled every epoch from the
    /// `train` stream of `cfg.seed`; the input network is left untouched.
    pub fn train(
        &self,
        images: &[Tensor],
        targets: &[Vec<f64>],
        loss: &LossSpec,
        cfg: &TrainConfig,
    ) -> Result<(Network, TrainLog), NetError> {
        self.check_training_data(images, targets, loss, cfg)?;
        let initial_loss = self.mean_loss(images, targets, loss)?;
        let mut net = self.clone();
        let mut order: Vec<usize> = (0..images.len()).collect();
        let mut rng = rng::stream(cfg.seed, rng::TRAIN);
        let mut epoch_losses = Vec::with_capacity(cfg.epochs);

        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut epoch_total = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                let mut acc: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; net.config.layers.len()];
                for &idx in batch {
                    let trace = net.forward(&images[idx]).map_err(|e| match e {
                        NetError::Tensor(TensorError::NonFinite(_)) => NetError::NonFiniteLoss { epoch },
                        e => e,
                    })?;
                    let scores = trace.scores().data();
                    epoch_total += loss.sample_loss(scores, &targets[idx]);
                    let seed = loss.score_gradient(scores, &targets[idx]);
                    for (slot, g) in acc.iter_mut().zip(net.param_grads(&trace, &seed)) {
                        let Some((gw, gb)) = g else { continue };
                        match slot {
                            None => *slot = Some((gw, gb)),
                            Some((aw, ab)) => {
                                aw.iter_mut().zip(&gw).for_each(|(a, g)| *a += g);
                                ab.iter_mut().zip(&gb).for_each(|(a, g)| *a += g);
                            }
                        }
                    }
                }
                if !epoch_total.is_finite() {
                    return Err(NetError::NonFiniteLoss { epoch });
                }
                let step = cfg.learning_rate / batch.len() as f64;
                let grads: Vec<_> = acc
                    .into_iter()
                    .enumerate()
                    .filter(|(k, _)| net.layer_has_params(*k))
                    .map(|(_, g)| g)
                    .collect();
                for (p, g) in net.params_mut().zip(grads) {
                    let Some((gw, gb)) = g else { continue };
                    p.weight = apply_step(&p.weight, &gw, step).ok_or(NetError::NonFiniteLoss { epoch })?;
                    p.bias = apply_step(&p.bias, &gb, step).ok_or(NetError::NonFiniteLoss { epoch })?;
                }
            }
            epoch_losses.push(epoch_total / images.len().max(1) as f64);
        }

        let final_loss = net.mean_loss(images, targets, loss)?;
        if !final_loss.is_finite() {
            return Err(NetError::NonFiniteLoss {
                epoch: cfg.epochs.saturating_sub(1),
            });
        }
        Ok((
            net,
            TrainLog {
                initial_loss,
                epoch_losses,
                final_loss,
            },
        ))
    }
}

fn apply_step(t: &Tensor, grad: &[f64], step: f64) -> Option<Tensor> {
    let data = t.data().iter().zip(grad).map(|(w, g)| w - step * g).collect();
    Tensor::new(t.shape().to_vec(), data).ok()
}
