//! Synthetic classification data: points of five 2-D features drawn from a
//! two-component Gaussian mixture, labeled by the majority source component.
//!
//! Sampling goes through Box-Muller with an explicit Cholesky factor rather
//! than a distribution crate, so a seed pins the exact byte stream of draws
//! and regeneration is bit-identical.

use std::io::{Read, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{stream_rng, Stream};
use crate::tensor::Mat;

/// Features per data point.
pub const FEATURES: usize = 5;
/// Dimensions per feature.
pub const FEATURE_DIM: usize = 2;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid GMM spec: {0}")]
    InvalidSpec(String),
    #[error("train fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),
    #[error("dataset must contain at least one point, got {0}")]
    Empty(usize),
    #[error("malformed dataset csv: {0}")]
    Malformed(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Two-component Gaussian mixture over single features. `mix` is the
/// probability of drawing from component 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GmmSpec {
    pub mean_0: [f64; 2],
    pub mean_1: [f64; 2],
    pub cov_0: [[f64; 2]; 2],
    pub cov_1: [[f64; 2]; 2],
    pub mix: f64,
}

impl Default for GmmSpec {
    fn default() -> Self {
        // Overlapping clusters on the diagonal. The shared variance is the
        // calibration knob that sets the cross-entropy baseline's accuracy;
        // see TrainConfig::default for the calibrated experiment settings.
        GmmSpec {
            mean_0: [-1.0, -1.0],
            mean_1: [1.0, 1.0],
            cov_0: [[1.5, 0.0], [0.0, 1.5]],
            cov_1: [[1.5, 0.0], [0.0, 1.5]],
            mix: 0.5,
        }
    }
}

impl GmmSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if !(self.mix > 0.0 && self.mix < 1.0) {
            return Err(DataError::InvalidSpec(format!(
                "mix must lie strictly between 0 and 1, got {}",
                self.mix
            )));
        }
        cholesky2(&self.cov_0)?;
        cholesky2(&self.cov_1)?;
        Ok(())
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive semi-definite
/// 2x2 matrix. Semi-definite is allowed so the zero-variance limit (a point
/// mass at the mean) works.
fn cholesky2(cov: &[[f64; 2]; 2]) -> Result<[[f64; 2]; 2], DataError> {
    let [[a, b], [b2, c]] = *cov;
    if !(a.is_finite() && b.is_finite() && b2.is_finite() && c.is_finite()) {
        return Err(DataError::InvalidSpec("non-finite covariance entry".into()));
    }
    if (b - b2).abs() > 1e-12 * b.abs().max(b2.abs()).max(1.0) {
        return Err(DataError::InvalidSpec(format!(
            "covariance not symmetric: {b} vs {b2}"
        )));
    }
    if a < 0.0 || c < 0.0 {
        return Err(DataError::InvalidSpec("negative variance".into()));
    }
    let l11 = a.sqrt();
    let l21 = if l11 > 0.0 {
        b / l11
    } else if b.abs() <= 1e-12 {
        0.0
    } else {
        return Err(DataError::InvalidSpec(
            "zero variance with nonzero covariance".into(),
        ));
    };
    let rest = c - l21 * l21;
    if rest < -1e-12 {
        return Err(DataError::InvalidSpec("covariance not positive semi-definite".into()));
    }
    Ok([[l11, 0.0], [l21, rest.max(0.0).sqrt()]])
}

/// Dataset generation parameters; also the "dataset reference" recorded in
/// training configs and manifests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub spec: GmmSpec,
    pub n: usize,
    pub seed: u64,
    pub train_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            spec: GmmSpec::default(),
            n: 2000,
            seed: 7,
            train_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

/// Generated dataset. Immutable after creation; regenerating with the same
/// spec and seed is bit-identical.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub seed: u64,
    /// One 5x2 matrix per point.
    pub points: Vec<Mat<f64>>,
    pub labels: Vec<u8>,
    /// Which component produced each feature (`true` = component 1).
    pub sources: Vec<[bool; FEATURES]>,
    pub split: Vec<SplitTag>,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn indices_of(&self, tag: SplitTag) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == tag).collect()
    }
}

fn standard_normal_pair(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen();
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = 2.0 * std::f64::consts::PI * u2;
    (r * theta.cos(), r * theta.sin())
}

/// Draws `n` points: per feature one Bernoulli(mix) component indicator and
/// one Gaussian sample from the indicated component; the label is the
/// majority indicator (5 features, so no ties). All points start tagged
/// `Train`; see [`split_indices`] / [`generate_split`].
pub fn generate(spec: &GmmSpec, n: usize, seed: u64) -> Result<SyntheticDataset, DataError> {
    if n == 0 {
        return Err(DataError::Empty(0));
    }
    spec.validate()?;
    let chol = [cholesky2(&spec.cov_0)?, cholesky2(&spec.cov_1)?];
    let means = [spec.mean_0, spec.mean_1];
    let mut rng = stream_rng(seed, Stream::DataGen);

    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut sources = Vec::with_capacity(n);
    for _ in 0..n {
        let mut rows = Vec::with_capacity(FEATURES);
        let mut from_c1 = [false; FEATURES];
        for (feature, flag) in from_c1.iter_mut().enumerate() {
            let pick_c0 = rng.gen::<f64>() < spec.mix;
            *flag = !pick_c0;
            let which = usize::from(!pick_c0);
            let (z0, z1) = standard_normal_pair(&mut rng);
            let l = &chol[which];
            let m = &means[which];
            rows.push(vec![
                m[0] + l[0][0] * z0,
                m[1] + l[1][0] * z0 + l[1][1] * z1,
            ]);
            let _ = feature;
        }
        let c1_count = from_c1.iter().filter(|&&f| f).count();
        labels.push(u8::from(c1_count > FEATURES / 2));
        sources.push(from_c1);
        points.push(Mat::from_rows(&rows));
    }
    Ok(SyntheticDataset {
        seed,
        points,
        labels,
        sources,
        split: vec![SplitTag::Train; n],
    })
}

/// Disjoint shuffled train/test index partition: `floor(n * fraction)`
/// points go to train. Deterministic under the seed; both halves come back
/// sorted.
pub fn split_indices(
    n: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::InvalidFraction(train_fraction));
    }
    if n == 0 {
        return Err(DataError::Empty(0));
    }
    let mut order: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut stream_rng(seed, Stream::Split));
    let n_train = ((n as f64) * train_fraction).floor() as usize;
    let mut train: Vec<usize> = order[..n_train].to_vec();
    let mut test: Vec<usize> = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Generates and splits in one step, both streams keyed by the same seed.
pub fn generate_split(cfg: &DataConfig) -> Result<SyntheticDataset, DataError> {
    let mut ds = generate(&cfg.spec, cfg.n, cfg.seed)?;
    let (_, test) = split_indices(cfg.n, cfg.train_fraction, cfg.seed)?;
    for i in test {
        ds.split[i] = SplitTag::Test;
    }
    Ok(ds)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CsvRow {
    point_id: usize,
    feature_idx: usize,
    x: f64,
    y: f64,
    source_component: u8,
    label: u8,
    split: SplitTag,
}

impl SyntheticDataset {
    /// Writes the dataset as CSV, one row per feature, columns
    /// `point_id,feature_idx,x,y,source_component,label,split`. Floats are
    /// written in shortest round-trip form, so a read-back is value-exact.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        for (id, point) in self.points.iter().enumerate() {
            for feature in 0..FEATURES {
                w.serialize(CsvRow {
                    point_id: id,
                    feature_idx: feature,
                    x: point.at(feature, 0),
                    y: point.at(feature, 1),
                    source_component: u8::from(self.sources[id][feature]),
                    label: self.labels[id],
                    split: self.split[id],
                })?;
            }
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Reads a dataset written by [`SyntheticDataset::write_csv`]. `seed` is
    /// provenance carried from the sidecar; the rows themselves are
    /// validated (5 features per point, consistent label/split, labels
    /// matching the majority rule over the stored sources).
    pub fn read_csv<R: Read>(reader: R, seed: u64) -> Result<Self, DataError> {
        let mut r = csv::Reader::from_reader(reader);
        let mut rows: Vec<CsvRow> = Vec::new();
        for row in r.deserialize() {
            rows.push(row?);
        }
        if rows.is_empty() {
            return Err(DataError::Malformed("no rows".into()));
        }
        if rows.len() % FEATURES != 0 {
            return Err(DataError::Malformed(format!(
                "row count {} is not a multiple of {FEATURES}",
                rows.len()
            )));
        }
        let n = rows.len() / FEATURES;
        let mut ds = SyntheticDataset {
            seed,
            points: Vec::with_capacity(n),
            labels: vec![0; n],
            sources: vec![[false; FEATURES]; n],
            split: vec![SplitTag::Train; n],
        };
        let mut grid: Vec<Vec<Option<CsvRow>>> = (0..n).map(|_| vec![None; FEATURES]).collect();
        for row in rows {
            if row.point_id >= n || row.feature_idx >= FEATURES {
                return Err(DataError::Malformed(format!(
                    "row ({}, {}) out of range",
                    row.point_id, row.feature_idx
                )));
            }
            if grid[row.point_id][row.feature_idx].is_some() {
                return Err(DataError::Malformed(format!(
                    "duplicate row ({}, {})",
                    row.point_id, row.feature_idx
                )));
            }
            let (id, idx) = (row.point_id, row.feature_idx);
            grid[id][idx] = Some(row);
        }
        for (id, features) in grid.into_iter().enumerate() {
            let mut mat = Mat::zeros(FEATURES, FEATURE_DIM);
            let mut label: Option<u8> = None;
            let mut split: Option<SplitTag> = None;
            for (idx, slot) in features.into_iter().enumerate() {
                let row = slot.ok_or_else(|| {
                    DataError::Malformed(format!("missing row ({id}, {idx})"))
                })?;
                mat.set(idx, 0, row.x);
                mat.set(idx, 1, row.y);
                ds.sources[id][idx] = row.source_component != 0;
                if *label.get_or_insert(row.label) != row.label {
                    return Err(DataError::Malformed(format!("point {id} has mixed labels")));
                }
                if *split.get_or_insert(row.split) != row.split {
                    return Err(DataError::Malformed(format!("point {id} has mixed splits")));
                }
            }
            ds.labels[id] = label.expect("set above");
            ds.split[id] = split.expect("set above");
            let majority = u8::from(ds.sources[id].iter().filter(|&&s| s).count() > FEATURES / 2);
            if ds.labels[id] != majority {
                return Err(DataError::Malformed(format!(
                    "point {id} label {} contradicts its majority source {majority}",
                    ds.labels[id]
                )));
            }
            ds.points.push(mat);
        }
        Ok(ds)
    }
}
