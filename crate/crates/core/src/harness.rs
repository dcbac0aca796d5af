//! Sweep configuration, seeded parallel execution and CSV results.
//!
//! A sweep is the cartesian product of the intensity, noise and period
//! grids. Realization `i` of every grid point shares one noise stream and
//! one symbol stream derived from the master seed, so all estimators face
//! the same channel and the same transmitted symbols.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{calibrate_variance, CalibrationSpec, CalibrationTable};
use crate::error::{Error, Result};
use crate::estimate::{BayesEstimator, BayesGrid, Estimator, NnEstimator};
use crate::noise::{generate_realization, OuParams, PhaseNoiseParams, DEFAULT_SYMBOL_PERIOD};
use crate::physics::PhysicsConfig;
use crate::receiver::{LoState, Receiver, ReceiverConfig, SymbolInstance};
use crate::rng;
use crate::tracking::{heterodyne_baseline, tracking_error_rate, Correction, TrackerConfig};
use crate::train::{load_model, SamplingConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Fig1b,
    SingleRun,
    PhaseBwSweep,
    AmpBwSweep,
    SigmaInfSweep,
    NTradeoff,
}

impl Experiment {
    pub fn label(self) -> &'static str {
        match self {
            Experiment::Fig1b => "fig1b",
            Experiment::SingleRun => "single_run",
            Experiment::PhaseBwSweep => "phase_bw_sweep",
            Experiment::AmpBwSweep => "amp_bw_sweep",
            Experiment::SigmaInfSweep => "sigma_inf_sweep",
            Experiment::NTradeoff => "n_tradeoff",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Nn,
    Bayes,
    Perfect,
    None,
    Heterodyne,
}

impl EstimatorKind {
    pub fn label(self) -> &'static str {
        match self {
            EstimatorKind::Nn => "nn",
            EstimatorKind::Bayes => "bayes",
            EstimatorKind::Perfect => "perfect",
            EstimatorKind::None => "none",
            EstimatorKind::Heterodyne => "heterodyne",
        }
    }
}

/// Where the Kalman measurement variances come from. Tables that are not
/// given as files are calibrated at startup over the listed anchors and
/// periods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSource {
    pub nn: Option<PathBuf>,
    pub bayes: Option<PathBuf>,
    pub anchors: Vec<f64>,
    pub experiments: Vec<usize>,
    pub trials: usize,
}

impl Default for CalibrationSource {
    fn default() -> Self {
        let spec = CalibrationSpec::default();
        Self {
            nn: None,
            bayes: None,
            anchors: spec.anchors,
            experiments: spec.experiments,
            trials: spec.trials,
        }
    }
}

impl CalibrationSource {
    pub fn spec(&self) -> CalibrationSpec {
        CalibrationSpec {
            anchors: self.anchors.clone(),
            experiments: self.experiments.clone(),
            trials: self.trials,
        }
    }
}

/// Full run configuration. Every subcommand of the CLI reads this schema;
/// each uses the sections it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub experiment: Experiment,
    /// Mean intensities `n0`.
    pub intensities: Vec<f64>,
    /// Phase noise bandwidths `delta nu` in Hz.
    pub phase_bandwidths: Vec<f64>,
    /// OU bandwidths `gamma` in Hz.
    pub amplitude_bandwidths: Vec<f64>,
    /// OU long-time variances `Sigma_inf^2`.
    pub long_time_variances: Vec<f64>,
    /// Estimation periods `N`.
    pub periods: Vec<usize>,
    pub realizations: usize,
    /// Symbols per realization.
    pub symbols: usize,
    pub seed: u64,
    pub estimators: Vec<EstimatorKind>,
    /// Symbol period `delta T` in seconds.
    pub symbol_period: f64,
    /// Trained network for the `nn` estimator.
    pub model: Option<PathBuf>,
    pub output: Option<PathBuf>,
    /// Worker threads; all cores when unset.
    pub threads: Option<usize>,
    pub calibration: CalibrationSource,
    pub physics: PhysicsConfig,
    pub receiver: ReceiverConfig,
    pub bayes_grid: BayesGrid,
    pub train: TrainConfig,
    pub sampling: SamplingConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            experiment: Experiment::SingleRun,
            intensities: vec![5.0],
            phase_bandwidths: vec![2e3],
            amplitude_bandwidths: vec![25e3],
            long_time_variances: vec![1.5],
            periods: vec![10],
            realizations: 100,
            symbols: 20_000,
            seed: 1,
            estimators: vec![
                EstimatorKind::Nn,
                EstimatorKind::Bayes,
                EstimatorKind::Perfect,
                EstimatorKind::None,
                EstimatorKind::Heterodyne,
            ],
            symbol_period: DEFAULT_SYMBOL_PERIOD,
            model: None,
            output: None,
            threads: None,
            calibration: CalibrationSource::default(),
            physics: PhysicsConfig::default(),
            receiver: ReceiverConfig::default(),
            bayes_grid: BayesGrid::default(),
            train: TrainConfig::default(),
            sampling: SamplingConfig::default(),
        }
    }
}

impl SweepConfig {
    /// Receiver settings with the `[physics]` section applied.
    pub fn receiver_config(&self) -> ReceiverConfig {
        ReceiverConfig {
            physics: self.physics,
            ..self.receiver
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonempty = |name: &str, len: usize| {
            if len == 0 {
                Err(Error::Config(format!("`{name}` must not be empty")))
            } else {
                Ok(())
            }
        };
        nonempty("intensities", self.intensities.len())?;
        nonempty("phase_bandwidths", self.phase_bandwidths.len())?;
        nonempty("amplitude_bandwidths", self.amplitude_bandwidths.len())?;
        nonempty("long_time_variances", self.long_time_variances.len())?;
        nonempty("periods", self.periods.len())?;
        nonempty("estimators", self.estimators.len())?;
        if self.realizations == 0 {
            return Err(Error::Config("`realizations` must be at least 1".into()));
        }
        if self.symbols == 0 {
            return Err(Error::Config("`symbols` must be at least 1".into()));
        }
        if self.periods.contains(&0) {
            return Err(Error::Config("`periods` entries must be at least 1".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("`threads` must be at least 1".into()));
        }
        if self.experiment == Experiment::SingleRun && self.grid_points().len() != 1 {
            return Err(Error::Config(
                "single_run takes exactly one value per grid".into(),
            ));
        }
        self.receiver_config().validate()?;
        PhaseNoiseParams::new(0.0, self.symbol_period)?;
        for p in self.grid_points() {
            p.tracker(self)?;
        }
        Ok(())
    }

    /// Cartesian product of the grids, `n0` outermost and `N` innermost.
    pub fn grid_points(&self) -> Vec<GridPoint> {
        let mut points = Vec::new();
        for &intensity in &self.intensities {
            for &phase_bandwidth in &self.phase_bandwidths {
                for &amplitude_bandwidth in &self.amplitude_bandwidths {
                    for &long_time_variance in &self.long_time_variances {
                        for &period in &self.periods {
                            points.push(GridPoint {
                                intensity,
                                phase_bandwidth,
                                amplitude_bandwidth,
                                long_time_variance,
                                period,
                            });
                        }
                    }
                }
            }
        }
        points
    }
}

/// Parses a TOML configuration. Unknown keys and empty input are errors.
pub fn parse_config(text: &str, origin: &str) -> Result<SweepConfig> {
    if text.trim().is_empty() {
        return Err(Error::Parse {
            path: origin.to_string(),
            message: "configuration is empty; at least `experiment` must be set".into(),
        });
    }
    let cfg: SweepConfig = toml::from_str(text).map_err(|e| Error::Parse {
        path: origin.to_string(),
        message: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<SweepConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, &path.display().to_string())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub intensity: f64,
    pub phase_bandwidth: f64,
    pub amplitude_bandwidth: f64,
    pub long_time_variance: f64,
    pub period: usize,
}

impl GridPoint {
    pub fn tracker(&self, cfg: &SweepConfig) -> Result<TrackerConfig> {
        let ou = if self.long_time_variance == 0.0 || self.amplitude_bandwidth == 0.0 {
            OuParams::constant(self.intensity)
        } else {
            OuParams::from_long_time_variance(
                self.amplitude_bandwidth,
                self.long_time_variance,
                self.intensity,
            )?
        };
        let tc = TrackerConfig {
            period: self.period,
            receiver: cfg.receiver_config(),
            phase_noise: PhaseNoiseParams::new(self.phase_bandwidth, cfg.symbol_period)?,
            ou,
        };
        tc.validate()?;
        Ok(tc)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub experiment: Experiment,
    pub point: GridPoint,
    pub estimator: EstimatorKind,
    pub mean_error: f64,
    pub std_error: f64,
    pub realizations: usize,
}

pub const CSV_HEADER: &str = "experiment,intensity,phase_bandwidth_hz,amplitude_bandwidth_hz,long_time_variance,period,estimator,mean_error,std_error,realizations";

impl ResultRow {
    pub fn to_csv(&self) -> String {
        let p = &self.point;
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.experiment.label(),
            p.intensity,
            p.phase_bandwidth,
            p.amplitude_bandwidth,
            p.long_time_variance,
            p.period,
            self.estimator.label(),
            self.mean_error,
            self.std_error,
            self.realizations
        )
    }
}

/// Writes a header-only file on creation and appends one flushed line per
/// row, so a partially completed sweep leaves a valid CSV behind.
pub struct ResultWriter {
    out: BufWriter<File>,
    path: PathBuf,
}

impl ResultWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = Self {
            out: BufWriter::new(file),
            path,
        };
        w.line(CSV_HEADER)?;
        Ok(w)
    }

    fn line(&mut self, text: &str) -> Result<()> {
        writeln!(self.out, "{text}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn write(&mut self, row: &ResultRow) -> Result<()> {
        self.line(&row.to_csv())
    }
}

pub fn emit_results(rows: &[ResultRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = ResultWriter::create(path)?;
    rows.iter().try_for_each(|r| w.write(r))
}

/// Estimators and calibration tables shared by all realizations.
pub struct Estimators {
    pub nn: Option<(NnEstimator, CalibrationTable)>,
    pub bayes: Option<(BayesEstimator, CalibrationTable)>,
}

impl Estimators {
    /// Loads the model and calibration tables the configured estimator set
    /// needs, calibrating at startup where no table file is given.
    pub fn prepare(cfg: &SweepConfig) -> Result<Self> {
        let rc = cfg.receiver_config();
        let cal_seed = rng::derive_seed(cfg.seed, &[2]);
        let table = |est: &dyn Estimator, path: &Option<PathBuf>| -> Result<CalibrationTable> {
            match path {
                Some(p) => {
                    let t = CalibrationTable::load(p)?;
                    if t.estimator != est.label() {
                        return Err(Error::Config(format!(
                            "{} holds a calibration for `{}`, expected `{}`",
                            p.display(),
                            t.estimator,
                            est.label()
                        )));
                    }
                    Ok(t)
                }
                None => {
                    log::info!("calibrating {} estimator", est.label());
                    calibrate_variance(est, &rc, &cfg.calibration.spec(), cal_seed)
                }
            }
        };
        let nn = if cfg.estimators.contains(&EstimatorKind::Nn) {
            let path = cfg.model.as_ref().ok_or_else(|| {
                Error::Config("the nn estimator needs `model` to point at a trained network".into())
            })?;
            let (model, _) = load_model(path)?;
            let est = NnEstimator::new(model, &rc)?;
            let t = table(&est, &cfg.calibration.nn)?;
            Some((est, t))
        } else {
            None
        };
        let bayes = if cfg.estimators.contains(&EstimatorKind::Bayes) {
            let est = BayesEstimator::new(cfg.bayes_grid.clone(), rc)?;
            let t = table(&est, &cfg.calibration.bayes)?;
            Some((est, t))
        } else {
            None
        };
        Ok(Self { nn, bayes })
    }

    fn correction(&self, kind: EstimatorKind) -> Option<Correction<'_>> {
        match kind {
            EstimatorKind::Nn => self.nn.as_ref().map(|(e, t)| Correction::Estimated {
                estimator: e,
                calibration: t,
            }),
            EstimatorKind::Bayes => self.bayes.as_ref().map(|(e, t)| Correction::Estimated {
                estimator: e,
                calibration: t,
            }),
            EstimatorKind::Perfect => Some(Correction::Perfect),
            EstimatorKind::None => Some(Correction::Uncorrected),
            EstimatorKind::Heterodyne => None,
        }
    }
}

/// Error rates of every configured estimator on realization `i` of `point`.
pub fn run_realization(
    cfg: &SweepConfig,
    estimators: &Estimators,
    point: &GridPoint,
    i: usize,
) -> Result<Vec<f64>> {
    let tc = point.tracker(cfg)?;
    let noise_seed = rng::derive_seed(cfg.seed, &[0, i as u64]);
    let realization = generate_realization(&tc.phase_noise, &tc.ou, cfg.symbols, noise_seed)?;
    cfg.estimators
        .iter()
        .map(|&kind| match estimators.correction(kind) {
            Some(c) => {
                let mut r = rng::stream(cfg.seed, &[1, i as u64]);
                tracking_error_rate(&tc, &realization, c, &mut r)
            }
            None if kind == EstimatorKind::Heterodyne => Ok(heterodyne_baseline(&realization)),
            None => Err(Error::Config(format!(
                "estimator `{}` was not prepared",
                kind.label()
            ))),
        })
        .collect()
}

fn summarize(errors: &[f64]) -> (f64, f64) {
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    if errors.len() < 2 {
        return (mean, 0.0);
    }
    let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Runs the sweep with already prepared estimators, handing each grid
/// point's rows to `on_rows` as soon as the point completes. Realizations
/// run in parallel; aggregation is in realization order, so results do not
/// depend on the thread count.
pub fn run_sweep_with(
    cfg: &SweepConfig,
    estimators: &Estimators,
    mut on_rows: impl FnMut(&[ResultRow]) -> Result<()>,
) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for point in cfg.grid_points() {
        let per_realization: Vec<Vec<f64>> = (0..cfg.realizations)
            .into_par_iter()
            .map(|i| run_realization(cfg, estimators, &point, i))
            .collect::<Result<_>>()?;
        let start = rows.len();
        for (j, &kind) in cfg.estimators.iter().enumerate() {
            let errors: Vec<f64> = per_realization.iter().map(|r| r[j]).collect();
            let (mean_error, std_error) = summarize(&errors);
            rows.push(ResultRow {
                experiment: cfg.experiment,
                point,
                estimator: kind,
                mean_error,
                std_error,
                realizations: cfg.realizations,
            });
        }
        log::info!(
            "grid point {:?}: {}",
            point,
            rows[start..]
                .iter()
                .map(|r| format!("{}={:.4e}", r.estimator.label(), r.mean_error))
                .collect::<Vec<_>>()
                .join(" ")
        );
        on_rows(&rows[start..])?;
    }
    Ok(rows)
}

/// Prepares estimators, runs the sweep on `cfg.threads` workers and, when
/// `cfg.output` is set, streams rows to that CSV file.
pub fn run_sweep(cfg: &SweepConfig) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    with_threads(cfg.threads, || {
        let estimators = Estimators::prepare(cfg)?;
        let mut writer = cfg.output.as_ref().map(ResultWriter::create).transpose()?;
        run_sweep_with(cfg, &estimators, |rows| match writer.as_mut() {
            Some(w) => rows.iter().try_for_each(|r| w.write(r)),
            None => Ok(()),
        })
    })
}

/// Runs `f` on a dedicated pool of `threads` workers, or on the global
/// pool when unset.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("thread pool builds")
            .install(f),
        None => f(),
    }
}

/// Symbol errors of the noiseless receiver at `A = B = intensity`, zero
/// phase, over `symbols` uniformly drawn symbols. Work is split into
/// fixed chunks with their own streams, so the count is thread-independent.
pub fn noiseless_errors(rc: &ReceiverConfig, intensity: f64, symbols: u64, seed: u64) -> Result<u64> {
    const CHUNK: u64 = 10_000;
    let receiver = Receiver::new(
        *rc,
        LoState {
            intensity,
            correction: 0.0,
        },
    )?;
    let chunks = symbols.div_ceil(CHUNK);
    Ok((0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut r = rng::stream(seed, &[c]);
            let n = CHUNK.min(symbols - c * CHUNK);
            let mut errors = 0;
            for _ in 0..n {
                let symbol = SymbolInstance {
                    index: r.random_range(0..rc.alphabet),
                    intensity,
                    phase: 0.0,
                };
                errors += u64::from(receiver.run(&symbol, &mut r, |_| {}) != symbol.index);
            }
            errors
        })
        .sum())
}
