//! Empirical variance calibration of raw estimators.
//!
//! For each anchor intensity `A = B` at zero phase the estimator is run on
//! many independent detection matrices for a range of period lengths `N`.
//! The sample variances are fitted with a power law `c N^p` on log-log
//! axes, which the Kalman filter queries for its measurement variances.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::Estimator;
use crate::receiver::ReceiverConfig;
use crate::rng;
use crate::train::simulate_matrix;

/// `variance(N) = coefficient * N^exponent`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLaw {
    pub coefficient: f64,
    pub exponent: f64,
}

impl PowerLaw {
    pub fn eval(&self, experiments: f64) -> f64 {
        self.coefficient * experiments.powf(self.exponent)
    }
}

/// Least-squares line through `(ln N, ln variance)`.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLaw> {
    if points.len() < 2 {
        return Err(Error::DegenerateFit(format!(
            "need at least two points, got {}",
            points.len()
        )));
    }
    if let Some(&(n, v)) = points.iter().find(|(n, v)| !(*n > 0.0) || !(*v > 0.0)) {
        return Err(Error::DegenerateFit(format!(
            "non-positive point (N={n}, variance={v})"
        )));
    }
    let k = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateFit("all points share one N".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let exponent = sxy / sxx;
    Ok(PowerLaw {
        coefficient: (my - exponent * mx).exp(),
        exponent,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub experiments: usize,
    pub phase_variance: f64,
    pub intensity_variance: f64,
    pub phase_mean: f64,
    pub intensity_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEntry {
    /// Anchor intensity `A = B`.
    pub intensity: f64,
    pub phase_fit: PowerLaw,
    pub intensity_fit: PowerLaw,
    pub points: Vec<CalibrationPoint>,
}

/// Per-anchor power-law fits for one estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTable {
    pub estimator: String,
    /// Sorted by anchor intensity.
    pub entries: Vec<CalibrationEntry>,
}

impl CalibrationTable {
    pub fn new(estimator: impl Into<String>, mut entries: Vec<CalibrationEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("calibration table has no anchors".into()));
        }
        entries.sort_by(|a, b| a.intensity.total_cmp(&b.intensity));
        Ok(Self {
            estimator: estimator.into(),
            entries,
        })
    }

    /// `(phase variance, intensity variance)` at mean intensity
    /// `intensity` and period `experiments`, interpolated linearly between
    /// anchors and held constant beyond the outermost ones.
    pub fn variances(&self, intensity: f64, experiments: usize) -> (f64, f64) {
        let n = experiments as f64;
        let at = |e: &CalibrationEntry| (e.phase_fit.eval(n), e.intensity_fit.eval(n));
        let first = &self.entries[0];
        let last = self.entries.last().unwrap();
        if intensity <= first.intensity {
            return at(first);
        }
        if intensity >= last.intensity {
            return at(last);
        }
        let hi = self.entries.iter().position(|e| e.intensity >= intensity).unwrap();
        let (a, b) = (&self.entries[hi - 1], &self.entries[hi]);
        let t = (intensity - a.intensity) / (b.intensity - a.intensity);
        let (pa, ia) = at(a);
        let (pb, ib) = at(b);
        (pa + t * (pb - pa), ia + t * (ib - ia))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("table serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::new(table.estimator, table.entries)
    }
}

/// Anchors, period lengths and trial count for a calibration run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSpec {
    pub anchors: Vec<f64>,
    pub experiments: Vec<usize>,
    pub trials: usize,
}

impl Default for CalibrationSpec {
    fn default() -> Self {
        Self {
            anchors: vec![2.0, 5.0, 10.0],
            experiments: vec![2, 5, 10, 20, 50, 100, 200],
            trials: 10_000,
        }
    }
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, v)
}

/// Sample mean and variance of raw estimates at `A = B = intensity`,
/// zero phase, over `trials` independent periods of `experiments` symbols.
pub fn measure_point(
    estimator: &dyn Estimator,
    cfg: &ReceiverConfig,
    intensity: f64,
    experiments: usize,
    trials: usize,
    seed: u64,
) -> Result<CalibrationPoint> {
    let estimates: Vec<(f64, f64)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut r = rng::stream(seed, &[t as u64]);
            let d = simulate_matrix(cfg, intensity, 0.0, intensity, experiments, &mut r)?;
            let e = estimator.estimate(&d, intensity);
            Ok((e.phase, e.intensity))
        })
        .collect::<Result<_>>()?;
    let phases: Vec<f64> = estimates.iter().map(|e| e.0).collect();
    let intensities: Vec<f64> = estimates.iter().map(|e| e.1).collect();
    let (phase_mean, phase_variance) = mean_var(&phases);
    let (intensity_mean, intensity_variance) = mean_var(&intensities);
    Ok(CalibrationPoint {
        experiments,
        phase_variance,
        intensity_variance,
        phase_mean,
        intensity_mean,
    })
}

/// Runs the full calibration for `estimator`.
pub fn calibrate_variance(
    estimator: &dyn Estimator,
    cfg: &ReceiverConfig,
    spec: &CalibrationSpec,
    seed: u64,
) -> Result<CalibrationTable> {
    if spec.trials < 2 {
        return Err(Error::Config("calibration needs at least two trials".into()));
    }
    let mut entries = Vec::with_capacity(spec.anchors.len());
    for (ai, &anchor) in spec.anchors.iter().enumerate() {
        let mut points = Vec::with_capacity(spec.experiments.len());
        for (ni, &n) in spec.experiments.iter().enumerate() {
            let s = rng::derive_seed(seed, &[ai as u64, ni as u64]);
            points.push(measure_point(estimator, cfg, anchor, n, spec.trials, s)?);
        }
        let fit = |f: fn(&CalibrationPoint) -> f64| {
            let pts: Vec<(f64, f64)> = points.iter().map(|p| (p.experiments as f64, f(p))).collect();
            fit_power_law(&pts)
        };
        let phase_fit = fit(|p| p.phase_variance)?;
        let intensity_fit = fit(|p| p.intensity_variance)?;
        log::info!(
            "{} calibration at A={anchor}: phase {:.3e} N^{:.3}, intensity {:.3e} N^{:.3}",
            estimator.label(),
            phase_fit.coefficient,
            phase_fit.exponent,
            intensity_fit.coefficient,
            intensity_fit.exponent
        );
        entries.push(CalibrationEntry {
            intensity: anchor,
            phase_fit,
            intensity_fit,
            points,
        });
    }
    CalibrationTable::new(estimator.label(), entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimate::{BayesEstimator, BayesGrid};

    #[test]
    fn power_law_fit_recovers_exact_law() {
        let pts: Vec<(f64, f64)> = [2.0, 5.0, 10.0, 50.0, 200.0]
            .iter()
            .map(|&n| (n, 0.03 * f64::powf(n, -0.9)))
            .collect();
        let f = fit_power_law(&pts).unwrap();
        assert!((f.coefficient - 0.03).abs() < 1e-12);
        assert!((f.exponent + 0.9).abs() < 1e-12);
    }

    #[test]
    fn degenerate_fits_are_errors() {
        assert!(fit_power_law(&[(2.0, 1.0)]).is_err());
        assert!(fit_power_law(&[(2.0, 1.0), (4.0, 0.0)]).is_err());
        assert!(fit_power_law(&[(2.0, 1.0), (2.0, 0.5)]).is_err());
    }

    fn table() -> CalibrationTable {
        let entry = |a: f64, c: f64| CalibrationEntry {
            intensity: a,
            phase_fit: PowerLaw {
                coefficient: c,
                exponent: -1.0,
            },
            intensity_fit: PowerLaw {
                coefficient: 10.0 * c,
                exponent: -1.0,
            },
            points: vec![],
        };
        CalibrationTable::new("nn", vec![entry(5.0, 0.02), entry(2.0, 0.04), entry(10.0, 0.01)]).unwrap()
    }

    #[test]
    fn lookup_interpolates_between_anchors() {
        let t = table();
        assert_eq!(t.entries[0].intensity, 2.0);
        let (p, i) = t.variances(5.0, 10);
        assert!((p - 0.002).abs() < 1e-15 && (i - 0.02).abs() < 1e-15);
        let (p, _) = t.variances(3.5, 10);
        assert!((p - 0.003).abs() < 1e-15);
        assert_eq!(t.variances(1.0, 10), t.variances(2.0, 10));
        assert_eq!(t.variances(40.0, 10), t.variances(10.0, 10));
    }

    #[test]
    fn save_and_load() {
        let t = table();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cal.json");
        t.save(&p).unwrap();
        assert_eq!(CalibrationTable::load(&p).unwrap(), t);
        std::fs::write(&p, "{\"estimator\": 3}").unwrap();
        assert!(matches!(CalibrationTable::load(&p), Err(Error::Parse { .. })));
    }

    #[test]
    fn bayes_variance_shrinks_with_more_data() {
        let cfg = ReceiverConfig::default();
        let grid = BayesGrid {
            phase_points: 40,
            intensity_points: 40,
            ..BayesGrid::default()
        };
        let est = BayesEstimator::new(grid, cfg).unwrap();
        let spec = CalibrationSpec {
            anchors: vec![5.0],
            experiments: vec![5, 20, 80],
            trials: 300,
        };
        let t = calibrate_variance(&est, &cfg, &spec, 3).unwrap();
        let e = &t.entries[0];
        assert!(e.phase_fit.exponent < 0.0, "{:?}", e.phase_fit);
        assert!(e.intensity_fit.exponent < 0.0, "{:?}", e.intensity_fit);
        assert_eq!(t.estimator, "bayes");
    }
}
