//! Shared numeric conventions: probability clamping, seed derivation, and a
//! central-difference gradient oracle that is independent of the backprop path.

/// Probabilities are clamped to this floor before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// `ln` with the crate-wide probability clamp.
#[inline]
pub fn ln_clamped(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// Shannon entropy in nats of a simplex vector, with `0 ln 0 := 0`.
pub fn entropy_nats(p: &[f64]) -> f64 {
    -p.iter().map(|&pi| if pi > 0.0 { pi * ln_clamped(pi) } else { 0.0 }).sum::<f64>()
}

/// softplus(x) = ln(1 + e^x), evaluated without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`]: returns `rho` such that `softplus(rho) == s`.
#[inline]
pub fn softplus_inv(s: f64) -> f64 {
    debug_assert!(s > 0.0);
    if s > 30.0 {
        s
    } else {
        s.exp_m1().ln()
    }
}

/// d/dx softplus(x) = sigmoid(x).
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// sign with the attack convention `sign(0) := 0`.
#[inline]
pub fn sign_zero(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic seed derivation: `derive_seed(base, stream, index)`.
///
/// Every consumer of randomness derives its own stream from a user-facing
/// seed this way, so runs replay exactly (attacks document
/// `seed = hash(cfg.seed, iteration)` through this function).
#[inline]
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(base ^ splitmix64(stream)) ^ splitmix64(index))
}

/// Central-difference gradient of a scalar function, used as the independent
/// oracle for every autodiff path in the crate. Never calls backprop.
pub fn central_difference_grad<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x: &[f64],
    h: f64,
) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Max-norm relative error between a gradient and its oracle.
pub fn rel_error_inf(actual: &[f64], oracle: &[f64]) -> f64 {
    let scale = oracle.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    actual
        .iter()
        .zip(oracle)
        .fold(0.0f64, |m, (a, o)| m.max((a - o).abs()))
        / scale
}
