use serde::{Deserialize, Serialize};

use super::{Estimator, RawEstimate};
use crate::error::{Error, Result};
use crate::physics::poisson_tail;
use crate::receiver::{DetectionMatrix, ReceiverConfig};

/// Uniform-prior grid over `(A, phi)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BayesGrid {
    pub phase_min: f64,
    pub phase_max: f64,
    pub phase_points: usize,
    pub intensity_min: f64,
    pub intensity_max: f64,
    pub intensity_points: usize,
}

impl Default for BayesGrid {
    fn default() -> Self {
        Self {
            phase_min: -0.75,
            phase_max: 0.75,
            phase_points: 100,
            intensity_min: 0.05,
            intensity_max: 25.0,
            intensity_points: 100,
        }
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

impl BayesGrid {
    pub fn validate(&self) -> Result<()> {
        if self.phase_points < 2 || self.intensity_points < 2 {
            return Err(Error::Config("Bayes grid needs at least 2 points per axis".into()));
        }
        if !(self.phase_max > self.phase_min) || !(self.intensity_max > self.intensity_min) {
            return Err(Error::Config("Bayes grid axes must be increasing".into()));
        }
        if !(self.intensity_min >= 0.0) {
            return Err(Error::Config("Bayes grid intensities must be non-negative".into()));
        }
        Ok(())
    }

    pub fn phase_axis(&self) -> Vec<f64> {
        linspace(self.phase_min, self.phase_max, self.phase_points)
    }

    pub fn intensity_axis(&self) -> Vec<f64> {
        linspace(self.intensity_min, self.intensity_max, self.intensity_points)
    }
}

/// Normalized posterior over the grid, intensity-major.
#[derive(Debug, Clone)]
pub struct Posterior {
    pub intensity_axis: Vec<f64>,
    pub phase_axis: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Posterior {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.phase_axis.len() + j]
    }

    pub fn mean(&self) -> (f64, f64) {
        let np = self.phase_axis.len();
        let (mut a, mut p) = (0.0, 0.0);
        for (i, row) in self.weights.chunks(np).enumerate() {
            for (j, &w) in row.iter().enumerate() {
                a += w * self.intensity_axis[i];
                p += w * self.phase_axis[j];
            }
        }
        (a, p)
    }
}

/// Bayesian benchmark estimator: posterior mean under a uniform prior on
/// a `(A, phi)` grid, using the full PNR likelihood of every binned count.
#[derive(Debug, Clone)]
pub struct BayesEstimator {
    grid: BayesGrid,
    cfg: ReceiverConfig,
    intensity_axis: Vec<f64>,
    phase_axis: Vec<f64>,
    // cos(bin phase - phi_j), flattened [bin][j].
    cos_table: Vec<f64>,
}

struct RowStats {
    bin: usize,
    below: f64,
    weighted: f64,
    tail: f64,
}

impl BayesEstimator {
    pub fn new(grid: BayesGrid, cfg: ReceiverConfig) -> Result<Self> {
        grid.validate()?;
        cfg.validate()?;
        let intensity_axis = grid.intensity_axis();
        let phase_axis = grid.phase_axis();
        let mut cos_table = Vec::with_capacity(cfg.alphabet * phase_axis.len());
        for b in 0..cfg.alphabet {
            let delta = cfg.symbol_phase(b);
            cos_table.extend(phase_axis.iter().map(|phi| (delta - phi).cos()));
        }
        Ok(Self {
            grid,
            cfg,
            intensity_axis,
            phase_axis,
            cos_table,
        })
    }

    pub fn grid(&self) -> &BayesGrid {
        &self.grid
    }

    fn row_stats(&self, matrix: &DetectionMatrix) -> Vec<RowStats> {
        let m = self.cfg.physics.pnr;
        (0..matrix.alphabet())
            .filter_map(|bin| {
                let row = matrix.row(bin);
                let below: u64 = row[..m].iter().sum();
                let weighted: u64 = row[..m].iter().enumerate().map(|(d, &c)| d as u64 * c).sum();
                let tail = row[m];
                (below + tail > 0).then_some(RowStats {
                    bin,
                    below: below as f64,
                    weighted: weighted as f64,
                    tail: tail as f64,
                })
            })
            .collect()
    }

    /// Log-likelihood on the grid (up to an additive constant),
    /// intensity-major.
    pub fn log_likelihood(&self, matrix: &DetectionMatrix, lo_intensity: f64) -> Vec<f64> {
        let np = self.phase_axis.len();
        let mut out = vec![0.0; self.intensity_axis.len() * np];
        let rows = self.row_stats(matrix);
        if rows.is_empty() {
            return out;
        }
        let p = &self.cfg.physics;
        let m = p.pnr;
        let steps = self.cfg.steps as f64;
        let lo = lo_intensity.max(0.0) / steps;
        for (i, &a) in self.intensity_axis.iter().enumerate() {
            let slice = a / steps;
            let cross = 2.0 * p.visibility * (slice * lo).sqrt();
            let base = slice + lo;
            let cell = &mut out[i * np..(i + 1) * np];
            for r in &rows {
                let cos_row = &self.cos_table[r.bin * np..(r.bin + 1) * np];
                for (ll, &c) in cell.iter_mut().zip(cos_row) {
                    let mean = p.efficiency * (base - cross * c).max(0.0) + p.dark_rate;
                    let mut acc = -r.below * mean;
                    if r.weighted > 0.0 {
                        acc += r.weighted * mean.ln();
                    }
                    if r.tail > 0.0 {
                        acc += r.tail * poisson_tail(mean, m).ln();
                    }
                    *ll += acc;
                }
            }
        }
        out
    }

    /// Normalized posterior, or `None` when the data rule out every grid
    /// point or the matrix is empty.
    pub fn posterior(&self, matrix: &DetectionMatrix, lo_intensity: f64) -> Option<Posterior> {
        if matrix.is_empty() {
            return None;
        }
        let mut w = self.log_likelihood(matrix, lo_intensity);
        let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return None;
        }
        let mut total = 0.0;
        for x in w.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        w.iter_mut().for_each(|x| *x /= total);
        Some(Posterior {
            intensity_axis: self.intensity_axis.clone(),
            phase_axis: self.phase_axis.clone(),
            weights: w,
        })
    }

    fn prior_mean(&self) -> RawEstimate {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        RawEstimate {
            intensity: mean(&self.intensity_axis),
            phase: mean(&self.phase_axis),
            degenerate: true,
        }
    }
}

impl Estimator for BayesEstimator {
    fn estimate(&self, matrix: &DetectionMatrix, lo_intensity: f64) -> RawEstimate {
        match self.posterior(matrix, lo_intensity) {
            Some(post) => {
                let (intensity, phase) = post.mean();
                RawEstimate {
                    intensity,
                    phase,
                    degenerate: false,
                }
            }
            None => self.prior_mean(),
        }
    }

    fn label(&self) -> &'static str {
        "bayes"
    }
}

/// One-shot Bayesian estimate; builds the grid tables on every call.
pub fn bayes_estimate(
    matrix: &DetectionMatrix,
    lo_intensity: f64,
    grid: &BayesGrid,
    cfg: &ReceiverConfig,
) -> Result<RawEstimate> {
    Ok(BayesEstimator::new(grid.clone(), *cfg)?.estimate(matrix, lo_intensity))
}
