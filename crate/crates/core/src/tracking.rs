//! Closed-loop tracking: discriminate symbols, estimate the channel every
//! `N` symbols, filter, and feed the result back into the LO.

use std::io::Write;

use rand::Rng;

use crate::calibration::CalibrationTable;
use crate::error::{Error, Result};
use crate::estimate::Estimator;
use crate::kalman::{self, KalmanState};
use crate::noise::{NoiseRealization, OuParams, PhaseNoiseParams};
use crate::physics::heterodyne_qnl_error;
use crate::receiver::{DetectionMatrix, LoState, Receiver, ReceiverConfig, SymbolInstance};

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_phase(x: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let y = x.rem_euclid(TAU);
    if y > PI {
        y - TAU
    } else {
        y
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackerConfig {
    /// Symbols per estimation period `N`.
    pub period: usize,
    pub receiver: ReceiverConfig,
    pub phase_noise: PhaseNoiseParams,
    pub ou: OuParams,
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.period == 0 {
            return Err(Error::Config("estimation period must be at least 1".into()));
        }
        self.receiver.validate()?;
        self.ou.check_step(self.phase_noise.symbol_period)
    }
}

/// How the LO follows the channel.
#[derive(Clone, Copy)]
pub enum Correction<'a> {
    /// Raw estimates every `N` symbols, Kalman filtered with the calibrated
    /// measurement variances.
    Estimated {
        estimator: &'a dyn Estimator,
        calibration: &'a CalibrationTable,
    },
    /// The LO is set to the true `A(tau)` and `phi(tau)` before every symbol.
    Perfect,
    /// The LO stays at `B = n0`, `delta = 0`.
    Uncorrected,
}

impl Correction<'_> {
    pub fn label(&self) -> &'static str {
        match self {
            Correction::Estimated { estimator, .. } => estimator.label(),
            Correction::Perfect => "perfect",
            Correction::Uncorrected => "none",
        }
    }
}

/// One symbol of a tracking run. Estimate fields hold the most recent
/// period's values and are `None` before the first estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymbolRecord {
    pub tau: usize,
    pub true_phase: f64,
    pub true_intensity: f64,
    pub correction: f64,
    pub lo_intensity: f64,
    pub raw_phase: Option<f64>,
    pub raw_intensity: Option<f64>,
    pub filtered_phase: Option<f64>,
    pub filtered_intensity: Option<f64>,
    pub error: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub records: Vec<SymbolRecord>,
}

impl Trajectory {
    pub fn error_rate(&self) -> f64 {
        let errors = self.records.iter().filter(|r| r.error).count();
        errors as f64 / self.records.len().max(1) as f64
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        fn opt(x: Option<f64>) -> String {
            x.map(|v| v.to_string()).unwrap_or_default()
        }
        writeln!(
            out,
            "tau,true_phase,true_intensity,delta,lo_intensity,raw_phase,raw_intensity,filtered_phase,filtered_intensity,error"
        )?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.tau,
                r.true_phase,
                r.true_intensity,
                r.correction,
                r.lo_intensity,
                opt(r.raw_phase),
                opt(r.raw_intensity),
                opt(r.filtered_phase),
                opt(r.filtered_intensity),
                u8::from(r.error)
            )?;
        }
        Ok(())
    }
}

/// Drives the tracking loop over `realization`, passing every symbol to
/// `sink`. Transmitted symbols are drawn uniformly from `rng`.
pub fn track<R: Rng + ?Sized>(
    cfg: &TrackerConfig,
    realization: &NoiseRealization,
    correction: Correction<'_>,
    rng: &mut R,
    mut sink: impl FnMut(&SymbolRecord),
) -> Result<()> {
    cfg.validate()?;
    let rc = cfg.receiver;
    let n0 = cfg.ou.mean_intensity;
    let dt = cfg.phase_noise.symbol_period;
    let step_var = cfg.phase_noise.step_variance();
    let mut state = KalmanState::new(n0);
    let mut receiver = Receiver::new(rc, LoState { intensity: n0, correction: 0.0 })?;
    let mut matrix = DetectionMatrix::for_receiver(&rc);
    let (mut raw, mut filtered): (Option<(f64, f64)>, Option<(f64, f64)>) = (None, None);
    let measurement = match correction {
        Correction::Estimated { calibration, .. } => calibration.variances(n0, cfg.period),
        _ => (0.0, 0.0),
    };

    for tau in 0..realization.len() {
        let (phi, a) = (realization.phases[tau], realization.intensities[tau]);
        if let Correction::Perfect = correction {
            state.lo_intensity = a;
            state.correction = phi;
            receiver = Receiver::new(rc, LoState { intensity: a, correction: phi })?;
        }
        let symbol = SymbolInstance {
            index: rng.random_range(0..rc.alphabet),
            intensity: a,
            phase: phi,
        };
        let correct = receiver.discriminate_into(&symbol, rng, &mut matrix);
        sink(&SymbolRecord {
            tau,
            true_phase: phi,
            true_intensity: a,
            correction: state.correction,
            lo_intensity: state.lo_intensity,
            raw_phase: raw.map(|r| r.0),
            raw_intensity: raw.map(|r| r.1),
            filtered_phase: filtered.map(|f| f.0),
            filtered_intensity: filtered.map(|f| f.1),
            error: !correct,
        });

        if (tau + 1) % cfg.period != 0 {
            continue;
        }
        if let Correction::Estimated { estimator, .. } = correction {
            let e = estimator.estimate(&matrix, state.lo_intensity);
            let (phase_meas, intensity_meas) = if e.degenerate {
                (f64::INFINITY, f64::INFINITY)
            } else {
                measurement
            };
            let pp = kalman::predict_phase(&state, cfg.period, step_var);
            let up = kalman::update_phase(e.phase, pp, phase_meas);
            let pi = kalman::predict_intensity(&state, cfg.period, &cfg.ou, dt)?;
            let ui = kalman::update_intensity(e.intensity, pi, intensity_meas);
            state.phase_variance = up.variance;
            state.intensity_variance = ui.variance;
            state.correction = wrap_phase(state.correction + up.estimate);
            state.lo_intensity = ui.estimate;
            raw = Some((e.phase, e.intensity));
            filtered = Some((up.estimate, ui.estimate));
            receiver = Receiver::new(
                rc,
                LoState {
                    intensity: state.lo_intensity,
                    correction: state.correction,
                },
            )?;
        }
        matrix.reset();
    }
    Ok(())
}

/// Runs [`track`] and keeps every record.
pub fn run_tracking<R: Rng + ?Sized>(
    cfg: &TrackerConfig,
    realization: &NoiseRealization,
    correction: Correction<'_>,
    rng: &mut R,
) -> Result<Trajectory> {
    let mut records = Vec::with_capacity(realization.len());
    track(cfg, realization, correction, rng, |r| records.push(*r))?;
    Ok(Trajectory { records })
}

/// Symbol error rate of a tracking run without storing the trajectory.
pub fn tracking_error_rate<R: Rng + ?Sized>(
    cfg: &TrackerConfig,
    realization: &NoiseRealization,
    correction: Correction<'_>,
    rng: &mut R,
) -> Result<f64> {
    let mut errors = 0usize;
    track(cfg, realization, correction, rng, |r| errors += usize::from(r.error))?;
    Ok(errors as f64 / realization.len() as f64)
}

/// Ideal heterodyne error averaged over the realization's intensities.
/// Heterodyne needs no phase reference, so only `A(tau)` matters.
pub fn heterodyne_baseline(realization: &NoiseRealization) -> f64 {
    let total: f64 = realization
        .intensities
        .iter()
        .map(|&a| heterodyne_qnl_error(a))
        .sum();
    total / realization.len().max(1) as f64
}
