//! Exports of what a trained model learned: the latent positions of the
//! test points (inter-sample structure) and the per-feature charges
//! (intra-sample structure), plus the summary scalars used to compare
//! methods. Plotting is left to whatever consumes the CSVs.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{SplitTag, SyntheticDataset, FEATURES};
use crate::model::{forward, predict, MlpParams};
use crate::tensor::{DiffError, Graph, Norm};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("test split is empty")]
    EmptySplit,
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// One test point's latent position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentRow {
    pub point_id: usize,
    pub z_x: f64,
    pub z_y: f64,
    pub label: u8,
    pub pred: u8,
    pub method: String,
    pub seed: u64,
}

/// Scalars describing the latent cloud. Cross-class distances are 0 when a
/// class is missing from the test split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentSummary {
    pub bbox_width: f64,
    pub bbox_height: f64,
    pub min_cross_class_distance: f64,
    pub mean_cross_class_distance: f64,
}

/// Recomputes the latent embedding of every test point from a checkpoint.
pub fn latent_dump(
    params: &MlpParams<f64>,
    dataset: &SyntheticDataset,
    method: &str,
    seed: u64,
    norm: Norm,
) -> Result<(Vec<LatentRow>, LatentSummary), AnalysisError> {
    let idx = dataset.indices_of(SplitTag::Test);
    if idx.is_empty() {
        return Err(AnalysisError::EmptySplit);
    }
    let mut rows = Vec::with_capacity(idx.len());
    for &i in &idx {
        let mut g: Graph<f64> = Graph::new();
        let nodes = params.leaves(&mut g)?;
        let trace = forward(&mut g, &nodes, &dataset.points[i], norm)?;
        let z = g.value(trace.z);
        rows.push(LatentRow {
            point_id: i,
            z_x: z.at(0, 0),
            z_y: z.at(0, 1),
            label: dataset.labels[i],
            pred: predict(g.value(trace.logits)),
            method: method.to_string(),
            seed,
        });
    }
    let summary = summarize_latent(&rows);
    Ok((rows, summary))
}

fn summarize_latent(rows: &[LatentRow]) -> LatentSummary {
    let fold = |f: fn(f64, f64) -> f64, init: f64, pick: fn(&LatentRow) -> f64| {
        rows.iter().map(pick).fold(init, f)
    };
    let bbox_width = fold(f64::max, f64::NEG_INFINITY, |r| r.z_x)
        - fold(f64::min, f64::INFINITY, |r| r.z_x);
    let bbox_height = fold(f64::max, f64::NEG_INFINITY, |r| r.z_y)
        - fold(f64::min, f64::INFINITY, |r| r.z_y);
    let mut min_d = f64::INFINITY;
    let mut sum_d = 0.0;
    let mut pairs = 0usize;
    for a in rows.iter().filter(|r| r.label == 0) {
        for b in rows.iter().filter(|r| r.label == 1) {
            let d = ((a.z_x - b.z_x).powi(2) + (a.z_y - b.z_y).powi(2)).sqrt();
            min_d = min_d.min(d);
            sum_d += d;
            pairs += 1;
        }
    }
    let (min_cross, mean_cross) = if pairs == 0 {
        (0.0, 0.0)
    } else {
        (min_d, sum_d / pairs as f64)
    };
    LatentSummary {
        bbox_width,
        bbox_height,
        min_cross_class_distance: min_cross,
        mean_cross_class_distance: mean_cross,
    }
}

/// One feature's learned particle assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChargeRow {
    pub point_id: usize,
    pub feature_idx: usize,
    pub q: f64,
    pub m: f64,
    pub source_component: u8,
}

/// Per-atom aggregates of the charge assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomSummaryRow {
    pub point_id: usize,
    pub sum_q: f64,
    pub sum_q2: f64,
    pub radius: f64,
    pub mu_x: f64,
    pub mu_y: f64,
}

/// Charges, masses and atom aggregates of every test point.
pub fn charge_report(
    params: &MlpParams<f64>,
    dataset: &SyntheticDataset,
    norm: Norm,
) -> Result<(Vec<ChargeRow>, Vec<AtomSummaryRow>), AnalysisError> {
    let idx = dataset.indices_of(SplitTag::Test);
    if idx.is_empty() {
        return Err(AnalysisError::EmptySplit);
    }
    let mut charges = Vec::with_capacity(idx.len() * FEATURES);
    let mut atoms = Vec::with_capacity(idx.len());
    for &i in &idx {
        let mut g: Graph<f64> = Graph::new();
        let nodes = params.leaves(&mut g)?;
        let trace = forward(&mut g, &nodes, &dataset.points[i], norm)?;
        let q = g.value(trace.atom.charges).clone();
        let m = g.value(trace.atom.masses).clone();
        let mut sum_q = 0.0;
        let mut sum_q2 = 0.0;
        for f in 0..FEATURES {
            charges.push(ChargeRow {
                point_id: i,
                feature_idx: f,
                q: q.at(f, 0),
                m: m.at(f, 0),
                source_component: u8::from(dataset.sources[i][f]),
            });
            sum_q += q.at(f, 0);
            sum_q2 += q.at(f, 0) * q.at(f, 0);
        }
        let mu = g.value(trace.atom.nucleus);
        atoms.push(AtomSummaryRow {
            point_id: i,
            sum_q,
            sum_q2,
            radius: g.scalar_value(trace.atom.radius),
            mu_x: mu.at(0, 0),
            mu_y: mu.at(0, 1),
        });
    }
    Ok((charges, atoms))
}

pub fn write_csv_rows<T: Serialize, W: Write>(writer: W, rows: &[T]) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
