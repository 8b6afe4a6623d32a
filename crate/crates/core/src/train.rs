//! Training loop, evaluation, and multi-seed sweeps.
//!
//! A run is fully determined by its config: parameter init, epoch shuffles,
//! and per-batch pairing plans each draw from an independent stream keyed by
//! the run seed (see [`crate::rng`]), so methods that consume different
//! amounts of randomness still see identical data order under matched seeds,
//! and a sweep's outcome cannot depend on worker-thread scheduling.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataConfig, DataError, SplitTag, SyntheticDataset};
use crate::loss::{total_loss, Coefficients, LossBreakdown, Method, PairingPlan};
use crate::model::{cross_entropy, forward, predict, MlpParams};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{DiffError, Graph, Mat, Norm};

pub const RESULTS_SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("divergence at epoch {epoch}: {term}")]
    Divergence { epoch: usize, term: String },
    #[error("run {method} seed {seed}: {source}")]
    Cell {
        method: String,
        seed: u64,
        #[source]
        source: Box<TrainError>,
    },
    #[error("results file invalid: {0}")]
    InvalidResults(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
}

/// Full training configuration, including the dataset it expects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub coefficients: Coefficients,
    pub seed: u64,
    pub data: DataConfig,
    /// Which hidden layer carries the atom view. This architecture has one,
    /// so only 1 is accepted; the field exists for deeper models.
    pub atomized_layer: usize,
    /// Norm order for the atom geometry (nucleus radius, pair distances).
    pub norm: Norm,
    /// Global gradient-norm clip applied to every SGD step (0 disables).
    /// The Coulomb term's gradient spikes like 1/d^2 when sampled nuclei
    /// pass near the distance floor; unclipped SGD overflows on such spikes
    /// at any practical learning rate.
    pub grad_clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Ce,
            epochs: 200,
            batch_size: 32,
            learning_rate: 0.05,
            optimizer: OptimizerKind::Sgd,
            coefficients: Coefficients::default(),
            seed: 0,
            data: DataConfig::default(),
            atomized_layer: 1,
            norm: Norm::L2,
            grad_clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.atomized_layer != 1 {
            return Err(TrainError::InvalidConfig(format!(
                "this architecture has one hidden layer; atomized_layer must be 1, got {}",
                self.atomized_layer
            )));
        }
        let c = &self.coefficients;
        if [c.c_f, c.c_charge, c.c_neutrons, c.c_p]
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(TrainError::InvalidConfig("coefficients must be nonnegative".into()));
        }
        if !self.grad_clip_norm.is_finite() || self.grad_clip_norm < 0.0 {
            return Err(TrainError::InvalidConfig(format!(
                "grad_clip_norm must be nonnegative and finite, got {}",
                self.grad_clip_norm
            )));
        }
        self.data.spec.validate().map_err(TrainError::from)?;
        Ok(())
    }
}

/// Per-epoch means of the four loss terms: `(epoch, l_ori, l_f, l_charge,
/// l_neutrons)`. Serializes as a plain JSON array.
pub type EpochLosses = (usize, f64, f64, f64, f64);

/// Seratializable outcome of one run; wall-clock time deliberately lives
/// outside so result files stay byte-identical across reruns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub seed: u64,
    pub accuracy: f64,
    pub losses: Vec<EpochLosses>,
}

/// One finished run: final parameters, the record, and timing.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub params: MlpParams<f64>,
    pub record: RunRecord,
    pub wall_clock: Duration,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
}

/// Results file: every run plus per-method statistics. `manifest_hash`
/// links a file written by the CLI back to the manifest that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResults {
    pub schema: u32,
    pub runs: Vec<RunRecord>,
    pub summary: BTreeMap<String, Summary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest_hash: Option<String>,
}

fn sgd_step(param: &mut Mat<f64>, grad: &Mat<f64>, lr: f64) {
    for r in 0..param.rows() {
        for c in 0..param.cols() {
            param.set(r, c, param.at(r, c) - lr * grad.at(r, c));
        }
    }
}

fn map_divergence(err: DiffError, epoch: usize) -> TrainError {
    match err {
        DiffError::NonFinite { op, node } => TrainError::Divergence {
            epoch,
            term: format!("{op} (node {node}) became non-finite"),
        },
        DiffError::Domain { op, node, msg } => TrainError::Divergence {
            epoch,
            term: format!("{op} (node {node}): {msg}"),
        },
        other => TrainError::Diff(other),
    }
}

/// One gradient step over a batch. Returns the loss breakdown.
fn train_batch(
    params: &mut MlpParams<f64>,
    batch: &[usize],
    dataset: &SyntheticDataset,
    config: &TrainConfig,
    plan_seed: u64,
) -> Result<LossBreakdown, DiffError> {
    let mut g: Graph<f64> = Graph::new();
    let nodes = params.leaves(&mut g)?;
    let mut ce_sum = None;
    let mut atoms = Vec::with_capacity(batch.len());
    let mut zs = Vec::with_capacity(batch.len());
    for &i in batch {
        let trace = forward(&mut g, &nodes, &dataset.points[i], config.norm)?;
        let ce = cross_entropy(&mut g, trace.logits, dataset.labels[i])?;
        ce_sum = Some(match ce_sum {
            Some(acc) => g.add(acc, ce)?,
            None => ce,
        });
        atoms.push(trace.atom);
        zs.push(trace.z);
    }
    let ce_sum = ce_sum.expect("non-empty batch");
    let l_ori = g.scale(ce_sum, 1.0 / batch.len() as f64)?;

    // a leftover batch of one atom has no pairs; it trains on the task loss
    // alone for every method
    let out = if batch.len() >= 2 {
        let plan = PairingPlan::from_seed(&vec![atoms[0].size; atoms.len()], plan_seed)?;
        total_loss(
            &mut g,
            l_ori,
            Some(&atoms),
            Some(&zs),
            Some(&plan),
            &config.coefficients,
            config.method,
            config.norm,
        )?
    } else {
        total_loss(
            &mut g,
            l_ori,
            None,
            None,
            None,
            &config.coefficients,
            Method::Ce,
            config.norm,
        )?
    };
    g.backward(out.total)?;
    let mut scale = 1.0;
    if config.grad_clip_norm > 0.0 {
        let mut norm_sq = 0.0;
        for id in nodes.ids() {
            if let Some(grad) = g.grad(id) {
                norm_sq += grad.iter().map(|v| v * v).sum::<f64>();
            }
        }
        if !norm_sq.is_finite() {
            return Err(DiffError::NonFinite {
                op: "gradient-norm",
                node: 0,
            });
        }
        let norm = norm_sq.sqrt();
        if norm > config.grad_clip_norm {
            scale = config.grad_clip_norm / norm;
        }
    }
    let lr = config.learning_rate * scale;
    for (param, id) in [
        (&mut params.w1, nodes.w1),
        (&mut params.b1, nodes.b1),
        (&mut params.w2, nodes.w2),
        (&mut params.b2, nodes.b2),
    ] {
        if let Some(grad) = g.grad(id) {
            sgd_step(param, grad, lr);
        }
    }
    Ok(out.breakdown(&g, config.method, &config.coefficients))
}

/// Minibatch SGD on the configured objective. Deterministic in
/// `(config, dataset)`: init, shuffles and pairing plans all derive from the
/// config seed.
pub fn train(config: &TrainConfig, dataset: &SyntheticDataset) -> Result<RunOutput, TrainError> {
    config.validate()?;
    let start = Instant::now();
    let train_idx = dataset.indices_of(SplitTag::Train);
    if train_idx.is_empty() && config.epochs > 0 {
        return Err(TrainError::EmptySplit("train"));
    }
    let mut params = MlpParams::init(config.seed);
    let mut shuffle_rng = stream_rng(config.seed, Stream::EpochShuffle);
    let mut pairing_rng = stream_rng(config.seed, Stream::Pairing);
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut shuffle_rng);
        let mut sums = [0.0_f64; 4];
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            let plan_seed = pairing_rng.next_u64();
            let breakdown = train_batch(&mut params, batch, dataset, config, plan_seed)
                .map_err(|e| map_divergence(e, epoch))?;
            if !breakdown.total.is_finite() {
                return Err(TrainError::Divergence {
                    epoch,
                    term: "total".into(),
                });
            }
            sums[0] += breakdown.l_ori;
            sums[1] += breakdown.l_f;
            sums[2] += breakdown.l_charge;
            sums[3] += breakdown.l_neutrons;
            batches += 1;
        }
        let k = 1.0 / batches.max(1) as f64;
        losses.push((epoch, sums[0] * k, sums[1] * k, sums[2] * k, sums[3] * k));
    }
    let accuracy = evaluate(&params, dataset, SplitTag::Test, config.norm)?;
    Ok(RunOutput {
        record: RunRecord {
            method: config.method,
            seed: config.seed,
            accuracy,
            losses,
        },
        params,
        wall_clock: start.elapsed(),
    })
}

/// Fraction of correct argmax predictions over one split.
pub fn evaluate(
    params: &MlpParams<f64>,
    dataset: &SyntheticDataset,
    tag: SplitTag,
    norm: Norm,
) -> Result<f64, TrainError> {
    let idx = dataset.indices_of(tag);
    if idx.is_empty() {
        return Err(TrainError::EmptySplit(match tag {
            SplitTag::Train => "train",
            SplitTag::Test => "test",
        }));
    }
    let mut correct = 0usize;
    for &i in &idx {
        let mut g: Graph<f64> = Graph::new();
        let nodes = params.leaves(&mut g)?;
        let trace = forward(&mut g, &nodes, &dataset.points[i], norm)?;
        if predict(g.value(trace.logits)) == dataset.labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / idx.len() as f64)
}

fn summarize(accuracies: &[f64]) -> Summary {
    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let mut sorted = accuracies.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 0 {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    } else {
        sorted[mid]
    };
    Summary {
        mean,
        std: var.sqrt(),
        median,
    }
}

/// Sweep output: the per-run outputs in grid order plus the results table.
#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub runs: Vec<RunOutput>,
    pub results: SweepResults,
}

/// Runs every config cell (already laid out in grid order), optionally on a
/// bounded worker pool. Cells are independent; aggregation follows the input
/// order, so the outcome is identical for any worker count.
pub fn sweep(
    configs: &[TrainConfig],
    dataset: &SyntheticDataset,
    workers: usize,
) -> Result<SweepOutput, TrainError> {
    let run_cell = |config: &TrainConfig| {
        train(config, dataset).map_err(|e| TrainError::Cell {
            method: config.method.to_string(),
            seed: config.seed,
            source: Box::new(e),
        })
    };
    let runs: Vec<RunOutput> = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| TrainError::InvalidConfig(format!("worker pool: {e}")))?;
        use rayon::prelude::*;
        pool.install(|| configs.par_iter().map(run_cell).collect::<Result<_, _>>())?
    } else {
        configs.iter().map(run_cell).collect::<Result<_, _>>()?
    };

    let mut by_method: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for run in &runs {
        by_method
            .entry(run.record.method.to_string())
            .or_default()
            .push(run.record.accuracy);
    }
    let summary = by_method
        .into_iter()
        .map(|(m, accs)| (m, summarize(&accs)))
        .collect();
    let results = SweepResults {
        schema: RESULTS_SCHEMA,
        runs: runs.iter().map(|r| r.record.clone()).collect(),
        summary,
        manifest_hash: None,
    };
    Ok(SweepOutput { runs, results })
}

impl SweepResults {
    pub fn to_json(&self) -> Result<String, TrainError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses and cross-checks: the stored summary must match statistics
    /// recomputed from the per-run list.
    pub fn from_json(s: &str) -> Result<Self, TrainError> {
        let results: SweepResults = serde_json::from_str(s)?;
        if results.schema != RESULTS_SCHEMA {
            return Err(TrainError::InvalidResults(format!(
                "schema {} unsupported",
                results.schema
            )));
        }
        let mut by_method: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for run in &results.runs {
            by_method
                .entry(run.method.to_string())
                .or_default()
                .push(run.accuracy);
        }
        if by_method.len() != results.summary.len() {
            return Err(TrainError::InvalidResults(
                "summary methods do not match runs".into(),
            ));
        }
        for (method, accs) in by_method {
            let stored = results
                .summary
                .get(&method)
                .ok_or_else(|| TrainError::InvalidResults(format!("no summary for {method}")))?;
            let fresh = summarize(&accs);
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
            if !(close(stored.mean, fresh.mean)
                && close(stored.std, fresh.std)
                && close(stored.median, fresh.median))
            {
                return Err(TrainError::InvalidResults(format!(
                    "summary for {method} does not match its runs"
                )));
            }
        }
        Ok(results)
    }
}
