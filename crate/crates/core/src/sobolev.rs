//! Surrogate Sobolev geometry and random draws from Sobolev balls.
//!
//! The `H^s` norm is replaced by the spectral surrogate
//! `(Σ_n (1 + κ_n)^s a_n²)^{1/2}` over the coefficients of a [`BasisSet`].
//! Draws take independent Gaussian coefficients with variance
//! `λ_n(s)^{-(1+γ)}`, then rescale so the surrogate norm equals a
//! `Uniform(0, R)` radius. The probability law on the ball is ours: the
//! empirical error figures elsewhere in the crate are relative to it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::basis::BasisSet;
use crate::error::{invalid, shape, Result};
use crate::grid::{GridFunction, GridSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct SobolevBallSpec {
    pub smoothness: f64,
    pub radius: f64,
    pub decay_margin: f64,
    pub center: Option<GridFunction>,
}

impl SobolevBallSpec {
    pub fn new(smoothness: f64, radius: f64, decay_margin: f64) -> Result<Self> {
        if !(smoothness > 0.0) {
            return Err(invalid("smoothness must be positive"));
        }
        if !(radius > 0.0 && radius <= 1.0) {
            return Err(invalid("ball radius must lie in (0, 1]"));
        }
        if !(decay_margin > 0.0) {
            return Err(invalid("decay margin must be positive"));
        }
        Ok(Self {
            smoothness,
            radius,
            decay_margin,
            center: None,
        })
    }

    pub fn with_center(mut self, center: GridFunction) -> Self {
        self.center = Some(center);
        self
    }
}

/// `(Σ_n λ_n(s) a_n²)^{1/2}` summed over channels.
pub fn surrogate_sobolev_norm(u: &GridFunction, s: f64, basis: &BasisSet) -> Result<f64> {
    let coeffs = basis.encode(u)?;
    let n = basis.len();
    let total: f64 = coeffs
        .iter()
        .enumerate()
        .map(|(i, a)| basis.weight(i % n, s) * a * a)
        .sum();
    Ok(total.sqrt())
}

/// One draw from the ball; `channels` independent coefficient blocks.
pub fn sample_sobolev_ball(
    spec: &SobolevBallSpec,
    basis: &BasisSet,
    channels: usize,
    seed: u64,
) -> Result<GridFunction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_with_rng(spec, basis, channels, &mut rng)
}

/// `count` draws from one seeded stream.
pub fn sample_many(
    spec: &SobolevBallSpec,
    basis: &BasisSet,
    channels: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<GridFunction>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| sample_with_rng(spec, basis, channels, &mut rng))
        .collect()
}

pub(crate) fn sample_with_rng(
    spec: &SobolevBallSpec,
    basis: &BasisSet,
    channels: usize,
    rng: &mut impl Rng,
) -> Result<GridFunction> {
    let n = basis.len();
    let s = spec.smoothness;
    let mut coeffs: Vec<f64> = (0..n * channels)
        .map(|i| {
            let z: f64 = rng.sample(StandardNormal);
            z * basis.weight(i % n, s).powf(-(1.0 + spec.decay_margin) / 2.0)
        })
        .collect();
    let norm = coeffs
        .iter()
        .enumerate()
        .map(|(i, a)| basis.weight(i % n, s) * a * a)
        .sum::<f64>()
        .sqrt();
    let target = spec.radius * rng.random::<f64>();
    let scale = if norm > 0.0 { target / norm } else { 0.0 };
    coeffs.iter_mut().for_each(|a| *a *= scale);
    let u = basis.decode(&coeffs)?;
    match &spec.center {
        None => Ok(u),
        Some(c) => {
            if c.spec() != u.spec() {
                return Err(shape("ball center does not match the sampling grid"));
            }
            u.axpy(1.0, c)
        }
    }
}

/// Grid layout a sampler with `basis` and `channels` produces.
pub fn sample_spec(basis: &BasisSet, channels: usize) -> Result<GridSpec> {
    basis.spec().with_channels(channels)
}
