//! Momentum-SGD training for the MAP baseline and Monte Carlo dropout.

use ndarray::{Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{ForwardMode, Network, ParameterVector};
use crate::numeric::{derive_seed, ln_clamped, PROB_FLOOR};

use super::DropoutPosterior;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SgdHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for SgdHyper {
    fn default() -> Self {
        SgdHyper {
            epochs: 20,
            batch_size: 128,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Per-datum training objective (ELBO for PSVI, negative loss for MAP/MCD).
    pub objective: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub epochs: Vec<EpochStats>,
}

pub(crate) struct MomentumSgd {
    velocity: Vec<f64>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
}

impl MomentumSgd {
    pub(crate) fn new(dim: usize, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        MomentumSgd { velocity: vec![0.0; dim], lr, momentum, weight_decay }
    }

    pub(crate) fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        for i in 0..params.len() {
            let g = grad[i] + self.weight_decay * params[i];
            self.velocity[i] = self.momentum * self.velocity[i] + g;
            params[i] -= self.lr * self.velocity[i];
        }
    }
}

/// Copy the rows `idx` of a dataset into a batch.
pub(crate) fn gather_batch(d: &Dataset, idx: &[usize]) -> (Array4<f64>, Vec<i32>) {
    let (c, h, w) = d.input_shape();
    let mut x = Array4::zeros((idx.len(), c, h, w));
    let mut y = Vec::with_capacity(idx.len());
    for (row, &i) in idx.iter().enumerate() {
        x.index_axis_mut(Axis(0), row).assign(&d.inputs.index_axis(Axis(0), i));
        y.push(d.labels[i]);
    }
    (x, y)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McdConfig {
    pub sgd: SgdHyper,
    pub dropout_rate: f64,
    pub prior_precision: f64,
    /// Carried for config parity with other methods; not consumed.
    pub alpha: f64,
    /// Carried for config parity with other methods; not consumed.
    pub reg_scale: f64,
}

impl Default for McdConfig {
    fn default() -> Self {
        McdConfig {
            sgd: SgdHyper::default(),
            dropout_rate: 0.1,
            prior_precision: 1e-4,
            alpha: 0.05,
            reg_scale: 1.0,
        }
    }
}

/// Shared MAP loop. The full-data objective is
/// `sum_i NLL_i + (prior_precision / 2) ||theta||^2`; the per-batch gradient
/// estimate is the mean batch NLL gradient plus `(prior_precision / N) theta`.
fn train_map_inner(
    train: &Dataset,
    val: Option<&Dataset>,
    net: &Network,
    sgd_cfg: &SgdHyper,
    prior_precision: f64,
    mode: ForwardMode,
) -> Result<(ParameterVector, TrainingCurve)> {
    let n = train.len();
    let mut theta = net.init_params(sgd_cfg.seed);
    let mut sgd = MomentumSgd::new(
        net.param_len(),
        sgd_cfg.learning_rate,
        sgd_cfg.momentum,
        sgd_cfg.weight_decay,
    );
    let mut curve = TrainingCurve::default();
    let mut indices: Vec<usize> = (0..n).collect();
    let reg = prior_precision / n as f64;

    for epoch in 0..sgd_cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(sgd_cfg.seed, 0x6d61_70, epoch as u64));
        indices.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in indices.chunks(sgd_cfg.batch_size).enumerate() {
            let (bx, by) = gather_batch(train, chunk);
            let fwd_seed = derive_seed(sgd_cfg.seed, epoch as u64, bi as u64);
            let trace = net.forward(&theta, &bx, mode, fwd_seed)?;
            let b = chunk.len() as f64;
            let mut loss = 0.0;
            let mut dprobs = Array2::zeros(trace.probs.dim());
            for (i, &label) in by.iter().enumerate() {
                let p = trace.probs[[i, label as usize]];
                loss -= ln_clamped(p);
                dprobs[[i, label as usize]] = -1.0 / (b * p.max(PROB_FLOOR));
            }
            loss /= b;
            if !loss.is_finite() {
                return Err(Error::Training {
                    reason: "loss became non-finite".into(),
                    last_finite: format!("epoch {epoch}, batch {bi}"),
                });
            }
            let grads = net.backward(&theta, &trace, &dprobs, false, true)?;
            let mut g = grads.params.expect("param grads requested").into_vec();
            for (gi, ti) in g.iter_mut().zip(theta.as_slice()) {
                *gi += reg * ti;
            }
            sgd.step(theta.as_mut_slice(), &g);
            epoch_loss += loss;
            batches += 1;
        }
        let train_acc = super::vi::deterministic_accuracy(net, &theta, train, 2048)?;
        let val_acc = match val {
            Some(v) => Some(super::vi::deterministic_accuracy(net, &theta, v, 2048)?),
            None => None,
        };
        curve.epochs.push(EpochStats {
            epoch,
            objective: -(epoch_loss / batches.max(1) as f64),
            train_accuracy: train_acc,
            val_accuracy: val_acc,
        });
    }
    Ok((theta, curve))
}

/// Deterministic MAP baseline (the point-mass posterior of the framework).
pub fn train_map(
    train: &Dataset,
    val: Option<&Dataset>,
    net: &Network,
    cfg: &SgdHyper,
    prior_precision: f64,
) -> Result<(ParameterVector, TrainingCurve)> {
    train_map_inner(train, val, net, cfg, prior_precision, ForwardMode::EvalFrozen)
}

/// Monte Carlo dropout: MAP training with dropout active and an L2 penalty
/// of `prior_precision ||theta||^2 / 2`.
pub fn train_mcd(
    train: &Dataset,
    val: Option<&Dataset>,
    net: &Network,
    cfg: &McdConfig,
) -> Result<(DropoutPosterior, TrainingCurve)> {
    if !net.has_dropout() {
        return Err(Error::Argument(
            "train_mcd requires an architecture with dropout layers".into(),
        ));
    }
    let (theta, curve) =
        train_map_inner(train, val, net, &cfg.sgd, cfg.prior_precision, ForwardMode::Train)?;
    let posterior = DropoutPosterior::new(theta, cfg.dropout_rate, cfg.prior_precision)?;
    Ok((posterior, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::inference::Posterior;
    use crate::nn::build_mlp;

    #[test]
    fn map_learns_separable_blobs() {
        let all = synth_blobs(400, 2, 8.0, 17).unwrap();
        let (train, val) = crate::data::split_halves(&all, 2);
        let net = build_mlp((1, 1, 2), &[8], 2, None).unwrap();
        let cfg = SgdHyper { epochs: 30, batch_size: 64, learning_rate: 0.1, momentum: 0.9, weight_decay: 0.0, seed: 5 };
        let (_, curve) = train_map(&train, Some(&val), &net, &cfg, 1e-4).unwrap();
        assert!(curve.epochs.last().unwrap().val_accuracy.unwrap() >= 0.99);
    }

    #[test]
    fn mcd_draws_differ_and_rate_zero_limit_collapses() {
        let all = synth_blobs(300, 2, 8.0, 19).unwrap();
        let net = build_mlp((1, 1, 2), &[16], 2, Some(0.2)).unwrap();
        let cfg = McdConfig {
            sgd: SgdHyper { epochs: 15, batch_size: 64, learning_rate: 0.1, momentum: 0.9, weight_decay: 0.0, seed: 6 },
            dropout_rate: 0.2,
            ..McdConfig::default()
        };
        let (posterior, _) = train_mcd(&all, None, &net, &cfg).unwrap();
        let p = Posterior::Dropout(posterior.clone());
        let (bx, _) = gather_batch(&all, &[0, 1, 2, 3]);
        let d1 = p.draw(1);
        let d2 = p.draw(2);
        let probs1 = net
            .forward_probs(&d1.params, &bx, d1.forward_mode(), d1.forward_seed())
            .unwrap();
        let probs2 = net
            .forward_probs(&d2.params, &bx, d2.forward_mode(), d2.forward_seed())
            .unwrap();
        assert!(probs1 != probs2, "two stochastic passes should differ");

        // rate -> 0 limit: no stochasticity left in the ensemble. The rate
        // lives in the architecture's dropout layers, so the limit is taken
        // there (the weights are layout-compatible).
        let net0 = build_mlp((1, 1, 2), &[16], 2, Some(1e-12)).unwrap();
        let tiny = DropoutPosterior::new(posterior.weights.clone(), 1e-12, 1e-4).unwrap();
        let p0 = Posterior::Dropout(tiny);
        let e1 = p0.draw(1);
        let e2 = p0.draw(2);
        let q1 = net0.forward_probs(&e1.params, &bx, e1.forward_mode(), e1.forward_seed()).unwrap();
        let q2 = net0.forward_probs(&e2.params, &bx, e2.forward_mode(), e2.forward_seed()).unwrap();
        assert_eq!(q1, q2);
    }

    #[test]
    fn mcd_requires_dropout_arch() {
        let all = synth_blobs(50, 2, 8.0, 20).unwrap();
        let net = build_mlp((1, 1, 2), &[4], 2, None).unwrap();
        assert!(train_mcd(&all, None, &net, &McdConfig::default()).is_err());
    }
}
