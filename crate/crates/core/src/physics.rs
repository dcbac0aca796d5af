//! Photon-counting statistics of a displaced coherent state.
//!
//! The displacement is implemented by interfering the input with a local
//! oscillator (LO) at finite visibility. The residual field is detected by
//! a photon-number-resolving (PNR) detector that resolves up to `m` photons
//! and reports `m` for anything at or above that.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Detector and interferometer parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicsConfig {
    /// Interference visibility of the displacement, in (0, 1].
    pub visibility: f64,
    /// PNR cutoff `m`: largest resolvable photon count.
    pub pnr: usize,
    /// Detection efficiency, in (0, 1].
    pub efficiency: f64,
    /// Mean dark counts per detection window.
    pub dark_rate: f64,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        Self {
            visibility: 0.997,
            pnr: 10,
            efficiency: 1.0,
            dark_rate: 0.0,
        }
    }
}

impl PhysicsConfig {
    /// Ideal interferometer and detector with the given PNR cutoff.
    pub fn ideal(pnr: usize) -> Self {
        Self {
            visibility: 1.0,
            pnr,
            efficiency: 1.0,
            dark_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.visibility > 0.0 && self.visibility <= 1.0) {
            return Err(Error::Config(format!(
                "visibility must lie in (0, 1], got {}",
                self.visibility
            )));
        }
        if self.pnr < 1 {
            return Err(Error::Config("pnr cutoff must be at least 1".into()));
        }
        if !(self.efficiency > 0.0 && self.efficiency <= 1.0) {
            return Err(Error::Config(format!(
                "efficiency must lie in (0, 1], got {}",
                self.efficiency
            )));
        }
        if !(self.dark_rate >= 0.0 && self.dark_rate.is_finite()) {
            return Err(Error::Config(format!(
                "dark rate must be non-negative, got {}",
                self.dark_rate
            )));
        }
        Ok(())
    }
}

/// Mean photon number of the displaced field.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct MeanPhotonNumber(f64);

impl MeanPhotonNumber {
    pub fn new(value: f64) -> Result<Self> {
        if value >= 0.0 && value.is_finite() {
            Ok(Self(value))
        } else {
            Err(Error::Domain(format!(
                "mean photon number must be finite and non-negative, got {value}"
            )))
        }
    }

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }
}

/// Unchecked interference formula shared by the hot loops.
#[inline]
pub(crate) fn displaced_mean(
    input: f64,
    lo: f64,
    cos_rel: f64,
    physics: &PhysicsConfig,
) -> f64 {
    let raw = input + lo - 2.0 * physics.visibility * (input * lo).sqrt() * cos_rel;
    // Rounding can push perfect nulling a hair below zero.
    physics.efficiency * raw.max(0.0) + physics.dark_rate
}

/// Mean photon number after interfering an input of intensity `input` with
/// an LO of intensity `lo` at relative phase `relative_phase`.
pub fn mean_photon_number(
    input: f64,
    lo: f64,
    relative_phase: f64,
    physics: &PhysicsConfig,
) -> Result<MeanPhotonNumber> {
    if !(input >= 0.0) || !(lo >= 0.0) {
        return Err(Error::Domain(format!(
            "intensities must be non-negative, got input={input}, lo={lo}"
        )));
    }
    MeanPhotonNumber::new(displaced_mean(input, lo, relative_phase.cos(), physics))
}

/// Poisson probability of observing `cutoff` or more photons.
pub(crate) fn poisson_tail(mean: f64, cutoff: usize) -> f64 {
    if cutoff == 0 {
        return 1.0;
    }
    if mean <= 0.0 {
        return 0.0;
    }
    if mean < cutoff as f64 {
        // Direct series; avoids cancellation in 1 - cdf.
        let ln_first = -mean + cutoff as f64 * mean.ln() - ln_factorial(cutoff);
        let mut term = ln_first.exp();
        let mut sum = 0.0;
        let mut k = cutoff;
        while term > 1e-18 * sum || sum == 0.0 {
            sum += term;
            k += 1;
            term *= mean / k as f64;
            if term == 0.0 {
                break;
            }
        }
        sum
    } else {
        let mut p = (-mean).exp();
        let mut cdf = 0.0;
        for k in 0..cutoff {
            cdf += p;
            p *= mean / (k + 1) as f64;
        }
        (1.0 - cdf).max(0.0)
    }
}

pub(crate) fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

/// Count distribution of a PNR(`cutoff`) detector: Poisson for counts below
/// the cutoff, with the remaining tail lumped into the last entry.
pub fn pnr_pmf(mean: MeanPhotonNumber, cutoff: usize) -> Vec<f64> {
    let mean = mean.get();
    let mut pmf = Vec::with_capacity(cutoff + 1);
    let mut p = (-mean).exp();
    for k in 0..cutoff {
        pmf.push(p);
        p *= mean / (k + 1) as f64;
    }
    pmf.push(poisson_tail(mean, cutoff));
    pmf
}

/// Natural log of [`pnr_pmf`]; `-inf` where the probability is zero.
pub fn log_pnr_pmf(mean: MeanPhotonNumber, cutoff: usize) -> Vec<f64> {
    let mean = mean.get();
    let mut out = Vec::with_capacity(cutoff + 1);
    if mean == 0.0 {
        out.push(0.0);
        out.resize(cutoff + 1, f64::NEG_INFINITY);
        return out;
    }
    let ln_mean = mean.ln();
    let mut ln_fact = 0.0;
    for k in 0..cutoff {
        if k > 0 {
            ln_fact += (k as f64).ln();
        }
        out.push(-mean + k as f64 * ln_mean - ln_fact);
    }
    out.push(poisson_tail(mean, cutoff).ln());
    out
}

/// Draws one detector outcome by inverting the cumulative distribution.
#[inline]
pub(crate) fn draw_count<R: Rng + ?Sized>(mean: f64, cutoff: usize, rng: &mut R) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    let u: f64 = rng.random();
    let mut p = (-mean).exp();
    let mut cdf = p;
    let mut k = 0;
    while u >= cdf {
        k += 1;
        if k == cutoff {
            break;
        }
        p *= mean / k as f64;
        cdf += p;
    }
    k
}

/// Samples a photon count in `0..=cutoff` distributed per [`pnr_pmf`].
pub fn sample_detection<R: Rng + ?Sized>(
    mean: MeanPhotonNumber,
    cutoff: usize,
    rng: &mut R,
) -> usize {
    draw_count(mean.get(), cutoff, rng)
}

/// Symbol-error probability of an ideal heterodyne receiver for QPSK
/// states of mean photon number `mean`. This is the quantum-noise limit.
pub fn heterodyne_qnl_error(mean: f64) -> f64 {
    let mean = mean.max(0.0);
    let p_half = 1.0 - 0.5 * statrs::function::erf::erfc((mean / 2.0).sqrt());
    1.0 - p_half * p_half
}

/// Monte-Carlo estimate of [`heterodyne_qnl_error`].
///
/// Each trial draws a heterodyne outcome from the Husimi distribution of a
/// random QPSK state (variance 1/2 per quadrature) and decides for the
/// nearest constellation point.
pub fn heterodyne_mc_oracle<R: Rng + ?Sized>(mean: f64, trials: u64, rng: &mut R) -> f64 {
    assert!(trials >= 1, "at least one trial required");
    let amp = mean.max(0.0).sqrt();
    let sigma = std::f64::consts::FRAC_1_SQRT_2;
    let mut errors = 0u64;
    for _ in 0..trials {
        let k = rng.random_range(0..4usize);
        let (s, c) = (k as f64 * FRAC_PI_2).sin_cos();
        let x = amp * c + sigma * rng.sample::<f64, _>(StandardNormal);
        let y = amp * s + sigma * rng.sample::<f64, _>(StandardNormal);
        let guess = (0..4usize)
            .map(|h| {
                let (sh, ch) = (h as f64 * FRAC_PI_2).sin_cos();
                (h, x * ch + y * sh)
            })
            .fold((0usize, f64::NEG_INFINITY), |best, cur| {
                if cur.1 > best.1 {
                    cur
                } else {
                    best
                }
            })
            .0;
        if guess != k {
            errors += 1;
        }
    }
    errors as f64 / trials as f64
}
