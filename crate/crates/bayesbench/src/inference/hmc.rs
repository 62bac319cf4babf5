//! Full-batch Hamiltonian Monte Carlo with a standard leapfrog integrator
//! and Metropolis correction.

use ndarray::{Array2, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ForwardMode, Network, ParameterVector};
use crate::numeric::{derive_seed, ln_clamped, PROB_FLOOR};

use super::standard_normal_vec;

/// Differentiable unnormalized log density over a flat parameter vector.
pub trait LogDensity {
    fn dim(&self) -> usize;
    fn logp_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)>;
}

impl<F> LogDensity for (usize, F)
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    fn dim(&self) -> usize {
        self.0
    }

    fn logp_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((self.1)(theta))
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HmcConfig {
    pub step_size: f64,
    pub leapfrog_steps: usize,
    pub n_samples: usize,
    pub burn_in: usize,
    pub seed: u64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        HmcConfig { step_size: 0.001, leapfrog_steps: 20, n_samples: 100, burn_in: 100, seed: 0 }
    }
}

/// Post-burn-in chain of parameter vectors.
#[derive(Debug, Clone)]
pub struct HmcChain {
    pub samples: Vec<ParameterVector>,
    pub burn_in: usize,
    pub leapfrog_steps: usize,
    pub step_size: f64,
    /// Fraction of accepted proposals among post-burn-in iterations.
    pub acceptance_rate: f64,
}

/// Metropolis rule: accept with probability `min(1, exp(-delta_h))`.
pub fn metropolis_accept_prob(delta_h: f64) -> f64 {
    if !delta_h.is_finite() {
        return 0.0;
    }
    (-delta_h).min(0.0).exp()
}

/// `steps` leapfrog steps in place; returns the log density and gradient at
/// the final position. Volume-preserving and reversible up to roundoff.
pub fn leapfrog(
    target: &impl LogDensity,
    theta: &mut [f64],
    momentum: &mut [f64],
    step: f64,
    steps: usize,
) -> Result<(f64, Vec<f64>)> {
    let (_, mut grad) = target.logp_and_grad(theta)?;
    // half kick
    for (p, g) in momentum.iter_mut().zip(&grad) {
        *p += 0.5 * step * g;
    }
    for s in 0..steps {
        // drift
        for (t, p) in theta.iter_mut().zip(momentum.iter()) {
            *t += step * p;
        }
        let (logp, g) = target.logp_and_grad(theta)?;
        grad = g;
        let kick = if s + 1 == steps { 0.5 * step } else { step };
        for (p, g) in momentum.iter_mut().zip(&grad) {
            *p += kick * g;
        }
        if s + 1 == steps {
            return Ok((logp, grad));
        }
    }
    // steps == 0: report the density at the unchanged position
    let (logp, grad) = target.logp_and_grad(theta)?;
    Ok((logp, grad))
}

fn kinetic(momentum: &[f64]) -> f64 {
    0.5 * momentum.iter().map(|p| p * p).sum::<f64>()
}

/// Standard HMC: unit-mass Gaussian momenta, `leapfrog_steps` leapfrog steps
/// per proposal, Metropolis accept with probability `min(1, exp(-dH))`. A
/// non-finite Hamiltonian rejects the step and logs rather than aborting the
/// chain.
pub fn hmc_sample(
    target: &impl LogDensity,
    init: ParameterVector,
    cfg: &HmcConfig,
) -> Result<HmcChain> {
    if cfg.step_size <= 0.0 || cfg.leapfrog_steps == 0 || cfg.n_samples == 0 {
        return Err(Error::Argument("HMC config must be positive".into()));
    }
    if init.len() != target.dim() {
        return Err(Error::Argument(format!(
            "init has dim {}, target expects {}",
            init.len(),
            target.dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x686d_63, 0));
    let mut current = init.into_vec();
    let (mut current_logp, _) = target.logp_and_grad(&current)?;
    if !current_logp.is_finite() {
        return Err(Error::numeric("hmc", "log density non-finite at the initial point"));
    }

    let total = cfg.burn_in + cfg.n_samples;
    let mut samples = Vec::with_capacity(cfg.n_samples);
    let mut accepted_post = 0usize;

    for iter in 0..total {
        let mut momentum = standard_normal_vec(current.len(), &mut rng);
        let h0 = -current_logp + kinetic(&momentum);
        let mut proposal = current.clone();
        let traj = leapfrog(target, &mut proposal, &mut momentum, cfg.step_size, cfg.leapfrog_steps);
        let accept = match traj {
            Ok((logp, _)) => {
                let h1 = -logp + kinetic(&momentum);
                let delta_h = h1 - h0;
                if !h1.is_finite() {
                    log::warn!("hmc iteration {iter}: non-finite Hamiltonian, rejecting step");
                    false
                } else {
                    let u: f64 = rng.random::<f64>();
                    if u < metropolis_accept_prob(delta_h) {
                        current = proposal;
                        current_logp = logp;
                        true
                    } else {
                        false
                    }
                }
            }
            Err(e) => {
                log::warn!("hmc iteration {iter}: {e}; rejecting step");
                false
            }
        };
        if iter >= cfg.burn_in {
            if accept {
                accepted_post += 1;
            }
            samples.push(ParameterVector::new(current.clone()));
        }
    }

    Ok(HmcChain {
        samples,
        burn_in: cfg.burn_in,
        leapfrog_steps: cfg.leapfrog_steps,
        step_size: cfg.step_size,
        acceptance_rate: accepted_post as f64 / cfg.n_samples as f64,
    })
}

/// Unnormalized BNN log posterior on a fixed training set:
/// summed log-likelihood plus an isotropic Gaussian log prior. Evaluation is
/// chunked to bound activation memory on full-batch data.
pub struct BnnLogPosterior<'a> {
    pub net: &'a Network,
    pub x: &'a Array4<f64>,
    pub y: &'a [i32],
    pub prior_mean: f64,
    pub prior_variance: f64,
    pub chunk: usize,
}

impl LogDensity for BnnLogPosterior<'_> {
    fn dim(&self) -> usize {
        self.net.param_len()
    }

    fn logp_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let tv = ParameterVector::new(theta.to_vec());
        let n = self.x.len_of(Axis(0));
        let mut logp = 0.0;
        let mut grad = vec![0.0; theta.len()];
        let chunk = self.chunk.max(1);
        for start in (0..n).step_by(chunk) {
            let stop = (start + chunk).min(n);
            let xs = self.x.slice(ndarray::s![start..stop, .., .., ..]).to_owned();
            let trace = self.net.forward(&tv, &xs, ForwardMode::EvalFrozen, 0)?;
            let mut dprobs = Array2::zeros(trace.probs.dim());
            for (row, i) in (start..stop).enumerate() {
                let label = self.y[i] as usize;
                let p = trace.probs[[row, label]];
                logp += ln_clamped(p);
                dprobs[[row, label]] = 1.0 / p.max(PROB_FLOOR);
            }
            let g = self.net.backward(&tv, &trace, &dprobs, false, true)?;
            for (acc, gi) in grad.iter_mut().zip(g.params.expect("param grads").as_slice()) {
                *acc += gi;
            }
        }
        // isotropic Gaussian prior
        let inv_var = 1.0 / self.prior_variance;
        for (acc, t) in grad.iter_mut().zip(theta) {
            let centered = t - self.prior_mean;
            logp -= 0.5 * centered * centered * inv_var;
            *acc -= centered * inv_var;
        }
        Ok((logp, grad))
    }
}
