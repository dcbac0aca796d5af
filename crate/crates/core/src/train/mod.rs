//! From-scratch training of the tracking network.
//!
//! Training samples come from Monte-Carlo runs of the receiver at random
//! `(A, B, phi, N)`. The loss is a per-sample weighted MSE that favours
//! samples whose LO intensity is close to the input intensity; gradients
//! are computed by hand-written backpropagation and applied with RMSprop
//! with momentum.

mod model_file;

pub use model_file::{load_model, model_from_str, model_to_string, save_model, ModelMetadata};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{dot, leaky_relu, network_input, Mlp};
use crate::receiver::{DetectionMatrix, LoState, Receiver, ReceiverConfig, SymbolInstance};
use crate::rng::{self, SimRng};

/// Distributions the training parameters are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    /// `A` and `B` are uniform on `[intensity_min, intensity_max]`.
    pub intensity_min: f64,
    pub intensity_max: f64,
    /// Spread of the zero-mean normal phase prior.
    pub phase_spread: f64,
    /// Read `phase_spread` as a variance instead of a standard deviation.
    pub phase_spread_is_variance: bool,
    /// `N` is discrete-uniform on `[experiments_min, experiments_max]`.
    pub experiments_min: usize,
    pub experiments_max: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            intensity_min: 0.05,
            intensity_max: 25.0,
            phase_spread: 0.25,
            phase_spread_is_variance: false,
            experiments_min: 2,
            experiments_max: 200,
        }
    }
}

impl SamplingConfig {
    pub fn phase_std(&self) -> f64 {
        if self.phase_spread_is_variance {
            self.phase_spread.sqrt()
        } else {
            self.phase_spread
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.intensity_max > self.intensity_min && self.intensity_min >= 0.0) {
            return Err(Error::Config("sampling intensity range is empty".into()));
        }
        if !(self.phase_spread >= 0.0) {
            return Err(Error::Config("phase spread must be non-negative".into()));
        }
        if self.experiments_min < 1 || self.experiments_max < self.experiments_min {
            return Err(Error::Config("sampling experiment range is empty".into()));
        }
        Ok(())
    }
}

/// Optimiser and loop settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// The last `anneal_epochs` epochs run at `anneal_learning_rate`.
    pub anneal_epochs: usize,
    pub anneal_learning_rate: f64,
    pub momentum: f64,
    pub rms_decay: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub dataset_size: usize,
    pub batch_size: usize,
    /// Loss weight on the phase error.
    pub phase_weight: f64,
    /// Loss weight on the intensity error.
    pub intensity_weight: f64,
    /// Fraction of the dataset held out for validation loss.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 50e-6,
            anneal_epochs: 0,
            anneal_learning_rate: 50e-6,
            momentum: 0.8,
            rms_decay: 0.9,
            epsilon: 1e-8,
            epochs: 2000,
            dataset_size: 500_000,
            batch_size: 256,
            phase_weight: 1.0,
            intensity_weight: 1.0 / 25.0,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            phase: self.phase_weight,
            intensity: self.intensity_weight,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(self.anneal_learning_rate > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.anneal_epochs > self.epochs {
            return Err(Error::Config(format!(
                "anneal_epochs ({}) exceeds epochs ({})",
                self.anneal_epochs, self.epochs
            )));
        }
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation fraction must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.rms_decay) {
            return Err(Error::Config("momentum and decay must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Per-output weights of the squared errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub phase: f64,
    pub intensity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        TrainConfig::default().loss_weights()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub input: Vec<f64>,
    /// `(phi, A)`.
    pub target: [f64; 2],
    pub weight: f64,
    /// Experiments `N` behind this sample.
    pub experiments: usize,
}

/// `exp(-(A - B)^2 / 2) + 0.1`.
pub fn sample_weight(input_intensity: f64, lo_intensity: f64) -> f64 {
    let d = input_intensity - lo_intensity;
    (-d * d / 2.0).exp() + 0.1
}

/// Simulates `experiments` discriminations at fixed `(A, phi)` against an LO
/// of intensity `B` (no phase correction) and returns the filled matrix.
pub fn simulate_matrix<R: Rng + ?Sized>(
    cfg: &ReceiverConfig,
    input_intensity: f64,
    phase: f64,
    lo_intensity: f64,
    experiments: usize,
    rng: &mut R,
) -> Result<DetectionMatrix> {
    let rx = Receiver::new(
        *cfg,
        LoState {
            intensity: lo_intensity,
            correction: 0.0,
        },
    )?;
    let mut d = DetectionMatrix::for_receiver(cfg);
    for _ in 0..experiments {
        let sym = SymbolInstance {
            index: rng.random_range(0..cfg.alphabet),
            intensity: input_intensity,
            phase,
        };
        rx.discriminate_into(&sym, rng, &mut d);
    }
    Ok(d)
}

/// Draws one training sample.
pub fn generate_sample<R: Rng + ?Sized>(
    cfg: &ReceiverConfig,
    sampling: &SamplingConfig,
    rng: &mut R,
) -> Result<TrainingSample> {
    let a = rng.random_range(sampling.intensity_min..=sampling.intensity_max);
    let b = rng.random_range(sampling.intensity_min..=sampling.intensity_max);
    let phi = sampling.phase_std() * rng.sample::<f64, _>(StandardNormal);
    let n = rng.random_range(sampling.experiments_min..=sampling.experiments_max);
    let d = simulate_matrix(cfg, a, phi, b, n, rng)?;
    Ok(TrainingSample {
        input: network_input(&d, b),
        target: [phi, a],
        weight: sample_weight(a, b),
        experiments: n,
    })
}

/// Generates `size` samples; sample `i` uses its own stream derived from
/// `seed`, so the result does not depend on the thread count.
pub fn generate_dataset(
    cfg: &ReceiverConfig,
    sampling: &SamplingConfig,
    size: usize,
    seed: u64,
) -> Result<Vec<TrainingSample>> {
    cfg.validate()?;
    sampling.validate()?;
    (0..size)
        .into_par_iter()
        .map(|i| generate_sample(cfg, sampling, &mut rng::stream(seed, &[i as u64])))
        .collect()
}

/// Xavier initialisation: weights `N(0, 1/fan_in)`, biases zero.
pub fn xavier_init<R: Rng + ?Sized>(layer_sizes: &[usize], slope: f64, rng: &mut R) -> Result<Mlp> {
    let mut model = Mlp::zeros(layer_sizes, slope)?;
    for l in 0..model.num_layers() {
        let fan_in = layer_sizes[l] as f64;
        let normal = Normal::new(0.0, (1.0 / fan_in).sqrt()).expect("positive std");
        let (w, _) = model.layer_mut(l);
        w.iter_mut().for_each(|x| *x = normal.sample(rng));
    }
    Ok(model)
}

/// Weighted MSE: `sum_i w_i (l_phi e_phi^2 + l_A e_A^2) / sum_i w_i`.
pub fn weighted_mse(
    predictions: &[[f64; 2]],
    targets: &[[f64; 2]],
    weights: &[f64],
    loss: LossWeights,
) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::Shape {
            expected: predictions.len(),
            actual: targets.len(),
        });
    }
    if predictions.len() != weights.len() {
        return Err(Error::Shape {
            expected: predictions.len(),
            actual: weights.len(),
        });
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Ok(0.0);
    }
    let s: f64 = predictions
        .iter()
        .zip(targets)
        .zip(weights)
        .map(|((p, t), w)| {
            let ep = p[0] - t[0];
            let ea = p[1] - t[1];
            w * (loss.phase * ep * ep + loss.intensity * ea * ea)
        })
        .sum();
    Ok(s / total)
}

/// Activations kept from a forward pass.
struct Trace {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of each layer.
    pre: Vec<Vec<f64>>,
}

impl Trace {
    fn new(model: &Mlp) -> Self {
        let sizes = model.layer_sizes();
        Self {
            inputs: sizes[..sizes.len() - 1].iter().map(|&n| vec![0.0; n]).collect(),
            pre: sizes[1..].iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

fn forward_trace(model: &Mlp, x: &[f64], trace: &mut Trace) -> [f64; 2] {
    let last = model.num_layers() - 1;
    trace.inputs[0].copy_from_slice(x);
    for l in 0..=last {
        let (w, b) = model.layer(l);
        let n_in = model.layer_sizes()[l];
        let (inputs, pre) = (&trace.inputs[l], &mut trace.pre[l]);
        for ((z, row), &bias) in pre.iter_mut().zip(w.chunks_exact(n_in)).zip(b) {
            *z = bias + dot(row, inputs);
        }
        if l < last {
            let slope = model.slope();
            for (a, &z) in trace.inputs[l + 1].iter_mut().zip(&trace.pre[l]) {
                *a = leaky_relu(z, slope);
            }
        }
    }
    let out = &trace.pre[last];
    [out[0], out[1]]
}

/// Accumulates `dL/dparams` for one sample given `dL/d(output)`.
fn backward(model: &Mlp, trace: &Trace, grad_out: [f64; 2], grads: &mut [f64], delta: &mut Vec<f64>, prev: &mut Vec<f64>) {
    let sizes = model.layer_sizes();
    let slope = model.slope();
    delta.clear();
    delta.extend_from_slice(&grad_out);
    for l in (0..model.num_layers()).rev() {
        let (n_in, n_out) = (sizes[l], sizes[l + 1]);
        let off = model.layer_offset(l);
        let a = &trace.inputs[l];
        {
            let (gw, rest) = grads[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (g, &x) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(a) {
                    *g += d * x;
                }
                rest[o] += d;
            }
        }
        if l > 0 {
            let (w, _) = model.layer(l);
            prev.clear();
            prev.resize(n_in, 0.0);
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (p, &wij) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                    *p += d * wij;
                }
            }
            for (p, &z) in prev.iter_mut().zip(&trace.pre[l - 1]) {
                if z < 0.0 {
                    *p *= slope;
                }
            }
            std::mem::swap(delta, prev);
        }
    }
}

/// Loss and exact gradient over a batch.
pub fn backprop(model: &Mlp, batch: &[&TrainingSample], loss: LossWeights) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    if model.output_size() != 2 {
        return Err(Error::Shape {
            expected: 2,
            actual: model.output_size(),
        });
    }
    for s in batch {
        if s.input.len() != model.input_size() {
            return Err(Error::Shape {
                expected: model.input_size(),
                actual: s.input.len(),
            });
        }
    }
    let total_w: f64 = batch.iter().map(|s| s.weight).sum();
    let mut grads = vec![0.0; model.params().len()];
    if total_w <= 0.0 {
        return Ok((0.0, grads));
    }
    // Fixed-size chunks reduced in order keep the sum independent of the
    // thread count.
    const CHUNK: usize = 32;
    let partials: Vec<(f64, Vec<f64>)> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = vec![0.0; model.params().len()];
            let mut trace = Trace::new(model);
            let (mut delta, mut prev) = (Vec::new(), Vec::new());
            let mut l = 0.0;
            for s in chunk {
                let out = forward_trace(model, &s.input, &mut trace);
                let ep = out[0] - s.target[0];
                let ea = out[1] - s.target[1];
                l += s.weight * (loss.phase * ep * ep + loss.intensity * ea * ea);
                let scale = 2.0 * s.weight / total_w;
                let grad_out = [scale * loss.phase * ep, scale * loss.intensity * ea];
                backward(model, &trace, grad_out, &mut g, &mut delta, &mut prev);
            }
            (l, g)
        })
        .collect();
    let mut loss_sum = 0.0;
    for (l, g) in partials {
        loss_sum += l;
        grads.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    Ok((loss_sum / total_w, grads))
}

/// RMSprop with momentum:
/// `v <- rho v + (1 - rho) g^2`, `buf <- mu buf + g / sqrt(v + eps)`,
/// `theta <- theta - lr buf`.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub learning_rate: f64,
    pub momentum: f64,
    pub decay: f64,
    pub epsilon: f64,
    mean_square: Vec<f64>,
    buffer: Vec<f64>,
}

impl RmsProp {
    pub fn new(num_params: usize, cfg: &TrainConfig) -> Self {
        Self {
            learning_rate: cfg.learning_rate,
            momentum: cfg.momentum,
            decay: cfg.rms_decay,
            epsilon: cfg.epsilon,
            mean_square: vec![0.0; num_params],
            buffer: vec![0.0; num_params],
        }
    }

    pub fn mean_square(&self) -> &[f64] {
        &self.mean_square
    }

    pub fn buffer(&self) -> &[f64] {
        &self.buffer
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.buffer.len() || grads.len() != self.buffer.len() {
            return Err(Error::Shape {
                expected: self.buffer.len(),
                actual: params.len().min(grads.len()),
            });
        }
        for (((p, &g), v), b) in params
            .iter_mut()
            .zip(grads)
            .zip(self.mean_square.iter_mut())
            .zip(self.buffer.iter_mut())
        {
            *v = self.decay * *v + (1.0 - self.decay) * g * g;
            *b = self.momentum * *b + g / (*v + self.epsilon).sqrt();
            *p -= self.learning_rate * *b;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub train_loss: f64,
    pub validation_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Mlp,
    pub history: Vec<EpochStats>,
}

/// Weighted MSE of `model` over `samples`.
pub fn evaluate_loss(model: &Mlp, samples: &[&TrainingSample], loss: LossWeights) -> Result<f64> {
    let mut preds = Vec::with_capacity(samples.len());
    for s in samples {
        let out = model.forward(&s.input)?;
        preds.push([out[0], out[1]]);
    }
    let targets: Vec<[f64; 2]> = samples.iter().map(|s| s.target).collect();
    let weights: Vec<f64> = samples.iter().map(|s| s.weight).collect();
    weighted_mse(&preds, &targets, &weights, loss)
}

/// Trains `model` in place-style and returns it with the per-epoch loss
/// history. `on_epoch` sees every epoch's statistics as they complete.
pub fn train_model(
    mut model: Mlp,
    dataset: &[TrainingSample],
    cfg: &TrainConfig,
    rng: &mut SimRng,
    mut on_epoch: impl FnMut(usize, &EpochStats),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let loss = cfg.loss_weights();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(rng);
    let n_val = ((dataset.len() as f64) * cfg.validation_fraction).floor() as usize;
    let n_val = n_val.min(dataset.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let validation: Vec<&TrainingSample> = val_idx.iter().map(|&i| &dataset[i]).collect();
    let mut train_idx = train_idx.to_vec();

    let mut opt = RmsProp::new(model.params().len(), cfg);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if epoch == cfg.epochs - cfg.anneal_epochs {
            opt.learning_rate = cfg.anneal_learning_rate;
        }
        train_idx.shuffle(rng);
        let (mut loss_acc, mut weight_acc) = (0.0, 0.0);
        for batch_idx in train_idx.chunks(cfg.batch_size) {
            let batch: Vec<&TrainingSample> = batch_idx.iter().map(|&i| &dataset[i]).collect();
            let (l, grads) = backprop(&model, &batch, loss)?;
            let w: f64 = batch.iter().map(|s| s.weight).sum();
            loss_acc += l * w;
            weight_acc += w;
            opt.step(model.params_mut(), &grads)?;
        }
        let train_loss = loss_acc / weight_acc;
        if !train_loss.is_finite() {
            return Err(Error::Diverged {
                epoch: epoch + 1,
                loss: train_loss,
            });
        }
        let validation_loss = if validation.is_empty() {
            None
        } else {
            Some(evaluate_loss(&model, &validation, loss)?)
        };
        let stats = EpochStats {
            train_loss,
            validation_loss,
        };
        on_epoch(epoch, &stats);
        history.push(stats);
    }
    Ok(TrainOutcome { model, history })
}

/// Xavier-initialises a network with `layer_sizes` and trains it.
pub fn train(
    layer_sizes: &[usize],
    slope: f64,
    dataset: &[TrainingSample],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let mut r = rng::seeded(seed);
    let model = xavier_init(layer_sizes, slope, &mut r)?;
    train_model(model, dataset, cfg, &mut r, |epoch, s| {
        log::info!(
            "epoch {}: train loss {:.6e}, validation loss {:?}",
            epoch + 1,
            s.train_loss,
            s.validation_loss
        );
    })
}

#[cfg(test)]
mod tests;
