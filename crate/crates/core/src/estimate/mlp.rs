use serde::{Deserialize, Serialize};

use super::{Estimator, RawEstimate, MIN_INTENSITY};
use crate::error::{Error, Result};
use crate::receiver::{DetectionMatrix, ReceiverConfig};

/// Layer sizes of the tracking network: 44 matrix entries plus the LO
/// intensity in, eight hidden layers, `(phi, A)` out.
pub const DEFAULT_LAYER_SIZES: [usize; 10] = [45, 32, 32, 32, 32, 16, 16, 8, 8, 2];

/// Negative-side slope of the Leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.1;

#[inline]
pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

/// Fully connected network with Leaky ReLU hidden layers and a linear
/// output layer.
///
/// All parameters live in one flat vector. Layer `l` stores its weight
/// matrix (`out x in`, row-major) followed by its bias vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    slope: f64,
    params: Vec<f64>,
}

impl Mlp {
    /// Network with every parameter zero.
    pub fn zeros(layer_sizes: &[usize], slope: f64) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::Config(format!(
                "need at least two non-empty layers, got {layer_sizes:?}"
            )));
        }
        let n = Self::count_params(layer_sizes);
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            slope,
            params: vec![0.0; n],
        })
    }

    /// Builds a network from explicit per-layer `(weights, biases)`.
    pub fn from_layers(layer_sizes: &[usize], slope: f64, layers: &[(Vec<f64>, Vec<f64>)]) -> Result<Self> {
        let mut model = Self::zeros(layer_sizes, slope)?;
        if layers.len() != layer_sizes.len() - 1 {
            return Err(Error::Shape {
                expected: layer_sizes.len() - 1,
                actual: layers.len(),
            });
        }
        for (l, (w, b)) in layers.iter().enumerate() {
            let (wo, bo) = model.layer_mut(l);
            if w.len() != wo.len() {
                return Err(Error::Shape {
                    expected: wo.len(),
                    actual: w.len(),
                });
            }
            wo.copy_from_slice(w);
            if b.len() != bo.len() {
                return Err(Error::Shape {
                    expected: bo.len(),
                    actual: b.len(),
                });
            }
            bo.copy_from_slice(b);
        }
        Ok(model)
    }

    fn count_params(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn slope(&self) -> f64 {
        self.slope
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub(crate) fn layer_offset(&self, l: usize) -> usize {
        self.layer_sizes[..=l]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// `(weights, biases)` of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
        let off = self.layer_offset(l);
        let (w, rest) = self.params[off..].split_at(n_in * n_out);
        (w, &rest[..n_out])
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
        let off = self.layer_offset(l);
        let (w, rest) = self.params[off..].split_at_mut(n_in * n_out);
        (w, &mut rest[..n_out])
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_size() {
            return Err(Error::Shape {
                expected: self.input_size(),
                actual: input.len(),
            });
        }
        let mut cur = input.to_vec();
        let mut next = Vec::new();
        let last = self.num_layers() - 1;
        let mut off = 0;
        for l in 0..self.num_layers() {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            off += n_in * n_out + n_out;
            next.clear();
            for (row, &bias) in w.chunks_exact(n_in).zip(b) {
                let z = bias + dot(row, &cur);
                next.push(if l == last { z } else { leaky_relu(z, self.slope) });
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Neural-network estimator wrapping a trained [`Mlp`].
#[derive(Debug, Clone)]
pub struct NnEstimator {
    model: Mlp,
}

impl NnEstimator {
    /// Checks that the model takes a flattened matrix plus the LO intensity
    /// for `cfg` and returns `(phi, A)`.
    pub fn new(model: Mlp, cfg: &ReceiverConfig) -> Result<Self> {
        let expected = cfg.matrix_len() + 1;
        if model.input_size() != expected {
            return Err(Error::Config(format!(
                "model expects {} inputs but the receiver produces {expected}",
                model.input_size()
            )));
        }
        if model.output_size() != 2 {
            return Err(Error::Config(format!(
                "model must have 2 outputs, has {}",
                model.output_size()
            )));
        }
        Ok(Self { model })
    }

    pub fn model(&self) -> &Mlp {
        &self.model
    }
}

/// Network input for one estimation period: the row-normalized matrix
/// followed by the LO intensity.
pub fn network_input(matrix: &DetectionMatrix, lo_intensity: f64) -> Vec<f64> {
    let mut x = Vec::with_capacity(matrix.alphabet() * (matrix.pnr() + 1) + 1);
    matrix.write_input_vector(&mut x);
    x.push(lo_intensity);
    x
}

impl Estimator for NnEstimator {
    fn estimate(&self, matrix: &DetectionMatrix, lo_intensity: f64) -> RawEstimate {
        let x = network_input(matrix, lo_intensity);
        let out = self
            .model
            .forward(&x)
            .expect("input size checked at construction");
        RawEstimate {
            phase: out[0],
            intensity: out[1].max(MIN_INTENSITY),
            degenerate: matrix.is_empty(),
        }
    }

    fn label(&self) -> &'static str {
        "nn"
    }
}
