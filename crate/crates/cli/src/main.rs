use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use pnr_track::calibration::calibrate_variance;
use pnr_track::estimate::{BayesEstimator, Estimator, NnEstimator, DEFAULT_LAYER_SIZES, LEAKY_SLOPE};
use pnr_track::harness::{
    load_config, noiseless_errors, run_sweep, with_threads, EstimatorKind, Estimators, SweepConfig,
    CSV_HEADER,
};
use pnr_track::noise::generate_realization;
use pnr_track::physics::heterodyne_qnl_error;
use pnr_track::rng;
use pnr_track::tracking::{heterodyne_baseline, run_tracking, Correction};
use pnr_track::train::{generate_dataset, load_model, save_model, train, ModelMetadata};

#[derive(Parser)]
#[command(name = "pnr-track", version, about = "Adaptive photon-counting QPSK receiver with channel-noise tracking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    config: PathBuf,
    /// Overrides `seed` in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file; standard output when omitted (except for `train`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Learned {
    Nn,
    Bayes,
}

#[derive(Clone, Copy, ValueEnum)]
enum Tracker {
    Nn,
    Bayes,
    Perfect,
    None,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a training set and train the estimator network.
    Train(Common),
    /// Measure estimator variances and fit the Kalman measurement model.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "nn")]
        estimator: Learned,
    },
    /// Noiseless error rate versus intensity, with the heterodyne limit.
    Discriminate(Common),
    /// Dump one tracking trajectory for the first grid point.
    Track {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "nn")]
        estimator: Tracker,
        /// Realization index.
        #[arg(long, default_value_t = 0)]
        realization: usize,
    },
    /// Run the configured sweep and write result rows.
    Sweep(Common),
    /// Heterodyne baseline averaged over the configured noise.
    Baseline(Common),
}

impl Common {
    fn load(&self) -> anyhow::Result<SweepConfig> {
        let mut cfg = load_config(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if self.threads.is_some() {
            cfg.threads = self.threads;
        }
        if self.out.is_some() {
            cfg.output = self.out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn sink(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn cmd_train(cfg: &SweepConfig) -> anyhow::Result<()> {
    let Some(out) = cfg.output.as_ref().or(cfg.model.as_ref()) else {
        bail!("train needs --out or `model` for the trained network");
    };
    let rc = cfg.receiver_config();
    let t = &cfg.train;
    log::info!("generating {} training samples", t.dataset_size);
    let data = generate_dataset(&rc, &cfg.sampling, t.dataset_size, rng::derive_seed(cfg.seed, &[3]))?;
    let outcome = train(&DEFAULT_LAYER_SIZES, LEAKY_SLOPE, &data, t, rng::derive_seed(cfg.seed, &[4]))?;
    let last = outcome.history.last();
    save_model(
        out,
        &outcome.model,
        &ModelMetadata {
            seed: cfg.seed,
            epochs: t.epochs,
            dataset_size: t.dataset_size,
            final_train_loss: last.map(|s| s.train_loss),
            final_validation_loss: last.and_then(|s| s.validation_loss),
        },
    )?;
    log::info!("model written to {}", out.display());
    Ok(())
}

fn cmd_calibrate(cfg: &SweepConfig, which: Learned) -> anyhow::Result<()> {
    let rc = cfg.receiver_config();
    let est: Box<dyn Estimator> = match which {
        Learned::Nn => {
            let Some(path) = cfg.model.as_ref() else {
                bail!("calibrating the nn estimator needs `model` in the configuration");
            };
            Box::new(NnEstimator::new(load_model(path)?.0, &rc)?)
        }
        Learned::Bayes => Box::new(BayesEstimator::new(cfg.bayes_grid.clone(), rc)?),
    };
    let table = calibrate_variance(est.as_ref(), &rc, &cfg.calibration.spec(), cfg.seed)?;
    match cfg.output.as_ref() {
        Some(p) => table.save(p)?,
        None => {
            let mut out = sink(None)?;
            writeln!(out, "{}", serde_json::to_string_pretty(&table)?)?;
        }
    }
    Ok(())
}

fn cmd_discriminate(cfg: &SweepConfig) -> anyhow::Result<()> {
    let rc = cfg.receiver_config();
    let symbols = cfg.symbols as u64 * cfg.realizations as u64;
    let rows: Vec<(f64, u64)> = cfg
        .intensities
        .par_iter()
        .enumerate()
        .map(|(i, &n)| Ok((n, noiseless_errors(&rc, n, symbols, rng::derive_seed(cfg.seed, &[5, i as u64]))?)))
        .collect::<pnr_track::Result<_>>()?;
    let mut out = sink(cfg.output.as_deref())?;
    writeln!(out, "intensity,symbols,errors,error_rate,heterodyne_error")?;
    for (n, errors) in rows {
        writeln!(
            out,
            "{n},{symbols},{errors},{},{}",
            errors as f64 / symbols as f64,
            heterodyne_qnl_error(n)
        )?;
    }
    out.flush()?;
    Ok(())
}

fn cmd_track(cfg: &SweepConfig, which: Tracker, realization: usize) -> anyhow::Result<()> {
    let kind = match which {
        Tracker::Nn => EstimatorKind::Nn,
        Tracker::Bayes => EstimatorKind::Bayes,
        Tracker::Perfect => EstimatorKind::Perfect,
        Tracker::None => EstimatorKind::None,
    };
    let cfg = SweepConfig {
        estimators: vec![kind],
        ..cfg.clone()
    };
    let estimators = Estimators::prepare(&cfg)?;
    let correction = match which {
        Tracker::Nn => {
            let (e, t) = estimators.nn.as_ref().expect("prepared");
            Correction::Estimated { estimator: e, calibration: t }
        }
        Tracker::Bayes => {
            let (e, t) = estimators.bayes.as_ref().expect("prepared");
            Correction::Estimated { estimator: e, calibration: t }
        }
        Tracker::Perfect => Correction::Perfect,
        Tracker::None => Correction::Uncorrected,
    };
    let point = cfg.grid_points()[0];
    let tc = point.tracker(&cfg)?;
    let noise_seed = rng::derive_seed(cfg.seed, &[0, realization as u64]);
    let noise = generate_realization(&tc.phase_noise, &tc.ou, cfg.symbols, noise_seed)?;
    let mut r = rng::stream(cfg.seed, &[1, realization as u64]);
    let trajectory = run_tracking(&tc, &noise, correction, &mut r)?;
    log::info!(
        "{} tracking error {:.4e}, heterodyne baseline {:.4e}",
        correction.label(),
        trajectory.error_rate(),
        heterodyne_baseline(&noise)
    );
    let mut out = sink(cfg.output.as_deref())?;
    trajectory.write_csv(&mut out)?;
    out.flush()?;
    Ok(())
}

fn cmd_sweep(cfg: &SweepConfig) -> anyhow::Result<()> {
    let rows = run_sweep(cfg)?;
    if cfg.output.is_none() {
        let mut out = sink(None)?;
        writeln!(out, "{CSV_HEADER}")?;
        for r in &rows {
            writeln!(out, "{}", r.to_csv())?;
        }
        out.flush()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let common = match &cli.command {
        Command::Train(c) | Command::Discriminate(c) | Command::Sweep(c) | Command::Baseline(c) => c,
        Command::Calibrate { common, .. } | Command::Track { common, .. } => common,
    };
    let cfg = common.load()?;
    with_threads(cfg.threads, || match &cli.command {
        Command::Train(_) => cmd_train(&cfg),
        Command::Calibrate { estimator, .. } => cmd_calibrate(&cfg, *estimator),
        Command::Discriminate(_) => cmd_discriminate(&cfg),
        Command::Track {
            estimator,
            realization,
            ..
        } => cmd_track(&cfg, *estimator, *realization),
        Command::Sweep(_) => cmd_sweep(&cfg),
        Command::Baseline(_) => cmd_sweep(&SweepConfig {
            estimators: vec![EstimatorKind::Heterodyne],
            ..cfg.clone()
        }),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
