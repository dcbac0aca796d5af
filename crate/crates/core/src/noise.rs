//! Channel noise: a Gaussian random walk in phase and an
//! Ornstein-Uhlenbeck process in intensity, both sampled once per symbol.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Default symbol period (100 MHz repetition rate).
pub const DEFAULT_SYMBOL_PERIOD: f64 = 10e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseNoiseParams {
    /// Phase-noise bandwidth in Hz.
    pub bandwidth: f64,
    /// Symbol period in seconds.
    pub symbol_period: f64,
}

impl PhaseNoiseParams {
    pub fn new(bandwidth: f64, symbol_period: f64) -> Result<Self> {
        if !(bandwidth >= 0.0) || !(symbol_period > 0.0) {
            return Err(Error::Config(format!(
                "phase noise needs bandwidth >= 0 and period > 0, got {bandwidth}, {symbol_period}"
            )));
        }
        Ok(Self {
            bandwidth,
            symbol_period,
        })
    }

    /// Per-symbol variance of the walk, `2 pi dnu dT`.
    pub fn step_variance(&self) -> f64 {
        std::f64::consts::TAU * self.bandwidth * self.symbol_period
    }
}

/// Ornstein-Uhlenbeck intensity noise `dA = gamma (n0 - A) dT + Sigma sqrt(dT) dW`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuParams {
    /// Mean-reversion bandwidth `gamma` in Hz.
    pub bandwidth: f64,
    /// Diffusion strength `Sigma`.
    pub diffusion: f64,
    /// Long-run mean intensity.
    pub mean_intensity: f64,
}

impl OuParams {
    pub fn new(bandwidth: f64, diffusion: f64, mean_intensity: f64) -> Result<Self> {
        if !(bandwidth >= 0.0) || !(diffusion >= 0.0) || !(mean_intensity >= 0.0) {
            return Err(Error::Config(format!(
                "OU parameters must be non-negative, got gamma={bandwidth}, sigma={diffusion}, n0={mean_intensity}"
            )));
        }
        Ok(Self {
            bandwidth,
            diffusion,
            mean_intensity,
        })
    }

    /// Parameterises the diffusion by the long-time variance
    /// `Sigma_inf^2 = Sigma^2 / (2 gamma)`.
    pub fn from_long_time_variance(
        bandwidth: f64,
        long_time_variance: f64,
        mean_intensity: f64,
    ) -> Result<Self> {
        if !(long_time_variance >= 0.0) {
            return Err(Error::Config(format!(
                "long-time variance must be non-negative, got {long_time_variance}"
            )));
        }
        Self::new(
            bandwidth,
            (2.0 * bandwidth * long_time_variance).sqrt(),
            mean_intensity,
        )
    }

    /// Noise-free intensity fixed at `mean_intensity`.
    pub fn constant(mean_intensity: f64) -> Self {
        Self {
            bandwidth: 0.0,
            diffusion: 0.0,
            mean_intensity,
        }
    }

    pub fn long_time_variance(&self) -> Option<f64> {
        (self.bandwidth > 0.0).then(|| self.diffusion * self.diffusion / (2.0 * self.bandwidth))
    }

    /// Rejects step sizes for which the Euler-Maruyama update overshoots.
    pub fn check_step(&self, dt: f64) -> Result<()> {
        if self.bandwidth * dt >= 1.0 {
            return Err(Error::Config(format!(
                "gamma * dT = {} must be below 1 for a stable update",
                self.bandwidth * dt
            )));
        }
        Ok(())
    }
}

/// One step of the phase random walk.
pub fn phase_step<R: Rng + ?Sized>(phase: f64, params: &PhaseNoiseParams, rng: &mut R) -> f64 {
    let var = params.step_variance();
    if var == 0.0 {
        return phase;
    }
    phase + var.sqrt() * rng.sample::<f64, _>(StandardNormal)
}

/// Unclamped Euler-Maruyama update; also reports whether clamping applied.
#[inline]
fn ou_update<R: Rng + ?Sized>(a: f64, p: &OuParams, dt: f64, rng: &mut R) -> (f64, bool) {
    let mut next = a + p.bandwidth * (p.mean_intensity - a) * dt;
    if p.diffusion > 0.0 {
        next += p.diffusion * dt.sqrt() * rng.sample::<f64, _>(StandardNormal);
    }
    if next < 0.0 {
        (0.0, true)
    } else {
        (next, false)
    }
}

/// One Euler-Maruyama step of the intensity, clamped at zero.
pub fn ou_step<R: Rng + ?Sized>(
    intensity: f64,
    params: &OuParams,
    dt: f64,
    rng: &mut R,
) -> Result<f64> {
    if !(intensity >= 0.0) {
        return Err(Error::Domain(format!(
            "intensity must be non-negative, got {intensity}"
        )));
    }
    params.check_step(dt)?;
    Ok(ou_update(intensity, params, dt, rng).0)
}

/// Per-symbol phase and intensity time series.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRealization {
    pub phases: Vec<f64>,
    pub intensities: Vec<f64>,
    pub seed: u64,
    /// Number of steps where the intensity was clamped at zero.
    pub clamped: usize,
}

impl NoiseRealization {
    /// Noise-free series of `steps` symbols at intensity `intensity`.
    pub fn constant(intensity: f64, steps: usize) -> Self {
        Self {
            phases: vec![0.0; steps],
            intensities: vec![intensity; steps],
            seed: 0,
            clamped: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.phases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }

    pub fn clamp_rate(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.clamped as f64 / self.len() as f64
        }
    }

    /// Writes `step,phase_rad,intensity` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "step,phase_rad,intensity")?;
        for (i, (p, a)) in self.phases.iter().zip(&self.intensities).enumerate() {
            writeln!(out, "{i},{p},{a}")?;
        }
        Ok(())
    }
}

/// Generates `steps` symbols of noise starting from `phi = 0`, `A = n0`.
pub fn generate_realization(
    phase: &PhaseNoiseParams,
    ou: &OuParams,
    steps: usize,
    seed: u64,
) -> Result<NoiseRealization> {
    if steps == 0 {
        return Err(Error::Config("a realization needs at least one step".into()));
    }
    let dt = phase.symbol_period;
    ou.check_step(dt)?;
    let mut r = rng::seeded(seed);
    let mut phases = Vec::with_capacity(steps);
    let mut intensities = Vec::with_capacity(steps);
    let (mut phi, mut a) = (0.0, ou.mean_intensity);
    let mut clamped = 0;
    phases.push(phi);
    intensities.push(a);
    for _ in 1..steps {
        phi = phase_step(phi, phase, &mut r);
        let (next, hit) = ou_update(a, ou, dt, &mut r);
        a = next;
        clamped += usize::from(hit);
        phases.push(phi);
        intensities.push(a);
    }
    if clamped > 0 {
        log::debug!(
            "realization seed={seed}: intensity clamped at zero on {clamped}/{steps} steps"
        );
    }
    Ok(NoiseRealization {
        phases,
        intensities,
        seed,
        clamped,
    })
}
