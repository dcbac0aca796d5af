//! Model file format.
//!
//! A model is stored as a single JSON document:
//!
//! ```text
//! {
//!   "format": "pnr-track-mlp",
//!   "version": 1,
//!   "layer_sizes": [45, 32, ..., 2],
//!   "activation_slope": 0.1,
//!   "metadata": { "seed": 7, "epochs": 200, "dataset_size": 100000, ... },
//!   "layers": [
//!     { "weights": [[w_00, w_01, ...], ...], "biases": [b_0, ...] },
//!     ...
//!   ]
//! }
//! ```
//!
//! `weights` of layer `l` has `layer_sizes[l+1]` rows of `layer_sizes[l]`
//! entries (row `o` feeds output unit `o`). Floats are written in shortest
//! round-trip form, so save followed by load reproduces every parameter
//! bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::Mlp;

const FORMAT: &str = "pnr-track-mlp";
const VERSION: u32 = 1;

/// Provenance stored next to the parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMetadata {
    pub seed: u64,
    pub epochs: usize,
    pub dataset_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_train_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_validation_loss: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerBlock {
    weights: Vec<Vec<f64>>,
    biases: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDocument {
    format: String,
    version: u32,
    layer_sizes: Vec<usize>,
    activation_slope: f64,
    metadata: ModelMetadata,
    layers: Vec<LayerBlock>,
}

pub fn model_to_string(model: &Mlp, metadata: &ModelMetadata) -> String {
    let sizes = model.layer_sizes();
    let layers = (0..model.num_layers())
        .map(|l| {
            let (w, b) = model.layer(l);
            LayerBlock {
                weights: w.chunks(sizes[l]).map(<[f64]>::to_vec).collect(),
                biases: b.to_vec(),
            }
        })
        .collect();
    let doc = ModelDocument {
        format: FORMAT.into(),
        version: VERSION,
        layer_sizes: sizes.to_vec(),
        activation_slope: model.slope(),
        metadata: metadata.clone(),
        layers,
    };
    serde_json::to_string_pretty(&doc).expect("model serializes")
}

/// Parses a model document; `origin` names the source in error messages.
pub fn model_from_str(text: &str, origin: &str) -> Result<(Mlp, ModelMetadata)> {
    let parse_err = |message: String| Error::Parse {
        path: origin.to_string(),
        message,
    };
    let doc: ModelDocument = serde_json::from_str(text).map_err(|e| parse_err(e.to_string()))?;
    if doc.format != FORMAT {
        return Err(parse_err(format!("unknown format tag {:?}", doc.format)));
    }
    if doc.version != VERSION {
        return Err(parse_err(format!("unsupported version {}", doc.version)));
    }
    let sizes = &doc.layer_sizes;
    if sizes.len() < 2 || doc.layers.len() != sizes.len() - 1 {
        return Err(parse_err(format!(
            "{} layer blocks for layer sizes {sizes:?}",
            doc.layers.len()
        )));
    }
    let mut layers = Vec::with_capacity(doc.layers.len());
    for (l, block) in doc.layers.into_iter().enumerate() {
        let (n_in, n_out) = (sizes[l], sizes[l + 1]);
        if block.weights.len() != n_out || block.weights.iter().any(|r| r.len() != n_in) {
            return Err(parse_err(format!(
                "layer {l}: weight block is not {n_out}x{n_in}"
            )));
        }
        if block.biases.len() != n_out {
            return Err(parse_err(format!(
                "layer {l}: expected {n_out} biases, found {}",
                block.biases.len()
            )));
        }
        layers.push((block.weights.concat(), block.biases));
    }
    let model = Mlp::from_layers(sizes, doc.activation_slope, &layers)?;
    Ok((model, doc.metadata))
}

pub fn save_model(path: impl AsRef<Path>, model: &Mlp, metadata: &ModelMetadata) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, model_to_string(model, metadata)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(Mlp, ModelMetadata)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_str(&text, &path.display().to_string())
}
