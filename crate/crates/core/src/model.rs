//! The two-linear-layer classifier and its atom view.
//!
//! Layer 1 (2 -> 3) maps each of the five input features to a hidden row.
//! The first hidden dimension plays two roles at once: it is the pooling
//! weight for the feature embedding (the remaining two dimensions), and the
//! charge pre-activation of the feature's particle. The pooled embedding is
//! the data-point latent fed to layer 2 (2 -> 2) for classification.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atom::{build_atom, AtomNodes};
use crate::data::{FEATURES, FEATURE_DIM};
use crate::num::Real;
use crate::rng::{stream_rng, Stream};
use crate::tensor::{DiffError, Graph, Mat, Norm, TensorId};

pub const HIDDEN: usize = 3;
pub const CLASSES: usize = 2;
pub const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("unsupported checkpoint schema {0}, expected {CHECKPOINT_SCHEMA}")]
    Schema(u32),
    #[error("checkpoint field {0} has the wrong shape")]
    Shape(&'static str),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Model parameters. Layers carry biases; initialization is uniform in
/// `[-1/sqrt(fan_in), 1/sqrt(fan_in))` per layer, deterministic in the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<F> {
    pub w1: Mat<F>,
    pub b1: Mat<F>,
    pub w2: Mat<F>,
    pub b2: Mat<F>,
    pub seed: u64,
}

impl<F: Real> MlpParams<F> {
    pub fn init(seed: u64) -> Self {
        let mut rng = stream_rng(seed, Stream::ParamInit);
        let mut draw = |rows: usize, cols: usize, bound: f64| {
            let data = (0..rows * cols)
                .map(|_| F::of(bound * (2.0 * rng.gen::<f64>() - 1.0)))
                .collect();
            Mat::from_vec(rows, cols, data)
        };
        let bound1 = 1.0 / (FEATURE_DIM as f64).sqrt();
        let bound2 = 1.0 / (FEATURE_DIM as f64).sqrt();
        MlpParams {
            w1: draw(FEATURE_DIM, HIDDEN, bound1),
            b1: draw(1, HIDDEN, bound1),
            w2: draw(FEATURE_DIM, CLASSES, bound2),
            b2: draw(1, CLASSES, bound2),
            seed,
        }
    }

    pub fn zeros(seed: u64) -> Self {
        MlpParams {
            w1: Mat::zeros(FEATURE_DIM, HIDDEN),
            b1: Mat::zeros(1, HIDDEN),
            w2: Mat::zeros(FEATURE_DIM, CLASSES),
            b2: Mat::zeros(1, CLASSES),
            seed,
        }
    }

    /// Registers the parameters as graph leaves.
    pub fn leaves(&self, g: &mut Graph<F>) -> Result<ParamNodes, DiffError> {
        Ok(ParamNodes {
            w1: g.leaf(self.w1.clone())?,
            b1: g.leaf(self.b1.clone())?,
            w2: g.leaf(self.w2.clone())?,
            b2: g.leaf(self.b2.clone())?,
        })
    }
}

/// Graph leaves for one registration of the parameters.
#[derive(Debug, Clone, Copy)]
pub struct ParamNodes {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

impl ParamNodes {
    pub fn ids(&self) -> [TensorId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

/// Everything the forward pass produces for one data point.
#[derive(Debug, Clone, Copy)]
pub struct ForwardTrace {
    /// Input leaf, 5x2.
    pub input: TensorId,
    /// Per-feature activations, 5x3.
    pub hidden: TensorId,
    /// Pooling weights = first hidden column, 5x1.
    pub weights: TensorId,
    /// Feature embeddings = remaining hidden columns, 5x2.
    pub embeddings: TensorId,
    /// Data-point latent `z = sum_i w_i * emb_i`, 1x2.
    pub z: TensorId,
    /// Class logits, 1x2.
    pub logits: TensorId,
    /// Atom view: charge pre-activations are the pooling weights, particle
    /// positions the feature embeddings.
    pub atom: AtomNodes,
}

/// Runs the model on one 5x2 point. The pooling weights stay raw (no
/// normalization); the same column doubles as the charge pre-activation.
pub fn forward<F: Real>(
    g: &mut Graph<F>,
    params: &ParamNodes,
    point: &Mat<F>,
    norm: Norm,
) -> Result<ForwardTrace, DiffError> {
    if point.shape() != (FEATURES, FEATURE_DIM) {
        return Err(DiffError::ShapeMismatch {
            op: "forward",
            lhs: point.shape(),
            rhs: (FEATURES, FEATURE_DIM),
        });
    }
    let input = g.leaf(point.clone())?;
    let pre = g.matmul(input, params.w1)?;
    let ones = g.leaf(Mat::filled(FEATURES, 1, F::one()))?;
    let bias_rows = g.matmul(ones, params.b1)?;
    let hidden = g.add(pre, bias_rows)?;
    let weights = g.slice(hidden, (0, FEATURES), (0, 1))?;
    let embeddings = g.slice(hidden, (0, FEATURES), (1, FEATURE_DIM))?;
    let weights_row = g.transpose(weights)?;
    let z = g.matmul(weights_row, embeddings)?;
    let zw = g.matmul(z, params.w2)?;
    let logits = g.add(zw, params.b2)?;
    let atom = build_atom(g, weights, embeddings, norm)?;
    Ok(ForwardTrace {
        input,
        hidden,
        weights,
        embeddings,
        z,
        logits,
        atom,
    })
}

/// `-log softmax(logits)[label]`, stabilized with log-sum-exp.
pub fn cross_entropy<F: Real>(
    g: &mut Graph<F>,
    logits: TensorId,
    label: u8,
) -> Result<TensorId, DiffError> {
    g.cross_entropy_logits(logits, label as usize)
}

/// Argmax prediction; a tie goes to class 0.
pub fn predict<F: Real>(logits: &Mat<F>) -> u8 {
    u8::from(logits.at(0, 1) > logits.at(0, 0))
}

/// On-disk parameter snapshot. Floats serialize in shortest round-trip
/// form, so load-back is value-exact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema: u32,
    pub w1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    pub w2: Vec<Vec<f64>>,
    pub b2: Vec<f64>,
    pub seed: u64,
    pub config_hash: String,
    pub method: String,
    /// SHA-256 of the dataset CSV this model was trained on.
    pub data_hash: String,
}

impl MlpParams<f64> {
    pub fn to_checkpoint(&self, config_hash: &str, method: &str, data_hash: &str) -> Checkpoint {
        let rows = |m: &Mat<f64>| {
            (0..m.rows())
                .map(|r| (0..m.cols()).map(|c| m.at(r, c)).collect())
                .collect()
        };
        let row = |m: &Mat<f64>| (0..m.cols()).map(|c| m.at(0, c)).collect();
        Checkpoint {
            schema: CHECKPOINT_SCHEMA,
            w1: rows(&self.w1),
            b1: row(&self.b1),
            w2: rows(&self.w2),
            b2: row(&self.b2),
            seed: self.seed,
            config_hash: config_hash.to_string(),
            method: method.to_string(),
            data_hash: data_hash.to_string(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, CheckpointError> {
        if ck.schema != CHECKPOINT_SCHEMA {
            return Err(CheckpointError::Schema(ck.schema));
        }
        let mat = |rows: &[Vec<f64>], shape: (usize, usize), field: &'static str| {
            if rows.len() != shape.0 || rows.iter().any(|r| r.len() != shape.1) {
                return Err(CheckpointError::Shape(field));
            }
            Ok(Mat::from_rows(rows))
        };
        let vec_row = |v: &[f64], len: usize, field: &'static str| {
            if v.len() != len {
                return Err(CheckpointError::Shape(field));
            }
            Ok(Mat::row_vec(v))
        };
        Ok(MlpParams {
            w1: mat(&ck.w1, (FEATURE_DIM, HIDDEN), "w1")?,
            b1: vec_row(&ck.b1, HIDDEN, "b1")?,
            w2: mat(&ck.w2, (FEATURE_DIM, CLASSES), "w2")?,
            b2: vec_row(&ck.b2, CLASSES, "b2")?,
            seed: ck.seed,
        })
    }
}
