//! Posteriors over classifier parameters and the inference methods that
//! produce them: mean-field variational inference, Monte Carlo dropout,
//! full-batch Hamiltonian Monte Carlo, and a deterministic MAP baseline.

mod checkpoint;
mod hmc;
mod trainers;
mod vi;

pub use checkpoint::{load_posterior, save_posterior, PosteriorSidecar};
pub use hmc::{hmc_sample, leapfrog, metropolis_accept_prob, BnnLogPosterior, HmcChain, HmcConfig, LogDensity};
pub use trainers::{train_map, train_mcd, EpochStats, McdConfig, SgdHyper, TrainingCurve};
pub use vi::{elbo, elbo_with, kl_diag_gaussians, train_psvi, BatchElbo, PsviConfig};

use rand::seq::index::sample as sample_without_replacement;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ForwardMode, ParameterVector};
use crate::numeric::{derive_seed, softplus};

/// Isotropic Gaussian prior over the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior {
    pub mean: f64,
    pub variance: f64,
}

impl GaussianPrior {
    pub fn standard() -> Self {
        GaussianPrior { mean: 0.0, variance: 1.0 }
    }

    pub fn std(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Mean-field Gaussian over parameters: `sigma = softplus(rho)` elementwise.
#[derive(Debug, Clone)]
pub struct MeanFieldPosterior {
    pub mu: Vec<f64>,
    pub rho: Vec<f64>,
    pub prior: GaussianPrior,
}

impl MeanFieldPosterior {
    pub fn new(mu: Vec<f64>, rho: Vec<f64>, prior: GaussianPrior) -> Result<Self> {
        if mu.len() != rho.len() {
            return Err(Error::Argument("mu and rho must have equal length".into()));
        }
        Ok(MeanFieldPosterior { mu, rho, prior })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.rho.iter().map(|&r| softplus(r)).collect()
    }

    pub fn draw_params(&self, seed: u64) -> ParameterVector {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x6d66_6472, 0));
        let data: Vec<f64> = self
            .mu
            .iter()
            .zip(&self.rho)
            .map(|(&m, &r)| {
                let z: f64 = StandardNormal.sample(&mut rng);
                m + softplus(r) * z
            })
            .collect();
        ParameterVector::new(data)
    }
}

/// MAP weights plus the dropout rate that realizes the posterior at
/// prediction time; draws are independent mask seeds.
#[derive(Debug, Clone)]
pub struct DropoutPosterior {
    pub weights: ParameterVector,
    pub dropout_rate: f64,
    pub prior_precision: f64,
}

impl DropoutPosterior {
    pub fn new(weights: ParameterVector, dropout_rate: f64, prior_precision: f64) -> Result<Self> {
        if !(0.0 < dropout_rate && dropout_rate < 1.0) {
            return Err(Error::Argument(format!(
                "dropout rate must lie in (0, 1), got {dropout_rate}"
            )));
        }
        if prior_precision <= 0.0 {
            return Err(Error::Argument(format!(
                "prior precision must be positive, got {prior_precision}"
            )));
        }
        Ok(DropoutPosterior { weights, dropout_rate, prior_precision })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorKind {
    MeanField,
    Dropout,
    HmcChain,
    PointMass,
}

impl std::fmt::Display for PosteriorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PosteriorKind::MeanField => "mean_field",
            PosteriorKind::Dropout => "dropout",
            PosteriorKind::HmcChain => "hmc_chain",
            PosteriorKind::PointMass => "point_mass",
        };
        f.write_str(s)
    }
}

/// A sampleable distribution over classifier parameters.
#[derive(Debug, Clone)]
pub enum Posterior {
    MeanField(MeanFieldPosterior),
    Dropout(DropoutPosterior),
    HmcChain(HmcChain),
    PointMass(ParameterVector),
}

/// One realized model: a parameter vector plus, for dropout posteriors, the
/// seed that drives the stochastic forward pass.
#[derive(Debug, Clone)]
pub struct PosteriorDraw {
    pub params: ParameterVector,
    pub stochastic_seed: Option<u64>,
}

impl PosteriorDraw {
    pub fn deterministic(params: ParameterVector) -> Self {
        PosteriorDraw { params, stochastic_seed: None }
    }

    /// Mode for realizing this draw: stochastic components stay enabled
    /// exactly when the draw carries a mask seed.
    pub fn forward_mode(&self) -> ForwardMode {
        if self.stochastic_seed.is_some() {
            ForwardMode::EvalStochastic
        } else {
            ForwardMode::EvalFrozen
        }
    }

    pub fn forward_seed(&self) -> u64 {
        self.stochastic_seed.unwrap_or(0)
    }
}

impl Posterior {
    pub fn kind(&self) -> PosteriorKind {
        match self {
            Posterior::MeanField(_) => PosteriorKind::MeanField,
            Posterior::Dropout(_) => PosteriorKind::Dropout,
            Posterior::HmcChain(_) => PosteriorKind::HmcChain,
            Posterior::PointMass(_) => PosteriorKind::PointMass,
        }
    }

    /// Whether two draws can differ at all.
    pub fn is_stochastic(&self) -> bool {
        match self {
            Posterior::PointMass(_) => false,
            Posterior::HmcChain(c) => c.samples.len() > 1,
            _ => true,
        }
    }

    /// One draw, deterministic given the seed (point mass ignores it).
    pub fn draw(&self, seed: u64) -> PosteriorDraw {
        match self {
            Posterior::MeanField(q) => PosteriorDraw::deterministic(q.draw_params(seed)),
            Posterior::Dropout(d) => PosteriorDraw {
                params: d.weights.clone(),
                stochastic_seed: Some(derive_seed(seed, 0x6d63_6464, 0)),
            },
            Posterior::HmcChain(c) => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x686d_6364, 0));
                let idx = rng.random_range(0..c.samples.len());
                PosteriorDraw::deterministic(c.samples[idx].clone())
            }
            Posterior::PointMass(p) => PosteriorDraw::deterministic(p.clone()),
        }
    }

    /// `n` i.i.d. draws. HMC chains are subsampled uniformly without
    /// replacement when `n <= chain length`, with replacement otherwise.
    pub fn draws(&self, n: usize, seed: u64) -> Vec<PosteriorDraw> {
        match self {
            Posterior::MeanField(q) => (0..n)
                .map(|k| {
                    PosteriorDraw::deterministic(q.draw_params(derive_seed(seed, 0x6d66, k as u64)))
                })
                .collect(),
            Posterior::Dropout(d) => (0..n)
                .map(|k| PosteriorDraw {
                    params: d.weights.clone(),
                    stochastic_seed: Some(derive_seed(seed, 0x6d63, k as u64)),
                })
                .collect(),
            Posterior::HmcChain(c) => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x686d_63, 0));
                let len = c.samples.len();
                let indices: Vec<usize> = if n <= len {
                    sample_without_replacement(&mut rng, len, n).into_vec()
                } else {
                    (0..n).map(|_| rng.random_range(0..len)).collect()
                };
                indices
                    .into_iter()
                    .map(|i| PosteriorDraw::deterministic(c.samples[i].clone()))
                    .collect()
            }
            Posterior::PointMass(p) => {
                (0..n).map(|_| PosteriorDraw::deterministic(p.clone())).collect()
            }
        }
    }

    /// Deterministic collapse used by transfer attacks: dropout turns its
    /// stochasticity off, mean-field collapses to mu, an HMC chain to its
    /// mean, a point mass to itself.
    pub fn collapse_deterministic(&self) -> PosteriorDraw {
        match self {
            Posterior::MeanField(q) => {
                PosteriorDraw::deterministic(ParameterVector::new(q.mu.clone()))
            }
            Posterior::Dropout(d) => PosteriorDraw::deterministic(d.weights.clone()),
            Posterior::HmcChain(c) => {
                let p = c.samples[0].len();
                let mut mean = vec![0.0; p];
                for s in &c.samples {
                    for (m, v) in mean.iter_mut().zip(s.as_slice()) {
                        *m += v;
                    }
                }
                let n = c.samples.len() as f64;
                mean.iter_mut().for_each(|m| *m /= n);
                PosteriorDraw::deterministic(ParameterVector::new(mean))
            }
            Posterior::PointMass(p) => PosteriorDraw::deterministic(p.clone()),
        }
    }
}

/// Convenience used by tests and fixtures to build a mean-field posterior
/// with constant sigma around a center.
pub fn mean_field_around(
    center: &ParameterVector,
    sigma: f64,
    prior: GaussianPrior,
) -> MeanFieldPosterior {
    let rho = if sigma > 0.0 {
        vec![crate::numeric::softplus_inv(sigma); center.len()]
    } else {
        vec![-745.0; center.len()] // softplus underflows to ~5e-324: numerically zero
    };
    MeanFieldPosterior { mu: center.as_slice().to_vec(), rho, prior }
}

/// Draw a standard-normal vector (shared by HMC momenta and tests).
pub(crate) fn standard_normal_vec(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..dim).map(|_| normal.sample(rng)).collect()
}
