//! Evaluation protocols: dataset metrics, zero-shot queries, cross-scheme
//! transfer and the linear probe.

pub mod export;
pub mod metrics;
pub mod plot;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use metrics::{auc, fr, nme, norm_distance, CedCurve, MetricReport, NormMode, ThresholdMetrics};

use crate::data::{DatasetDescriptor, Image, Sample};
use crate::error::{Result, TufaError};
use crate::geometry::{fit_affine_alignment, generate_scratch_shape, Point, Region};
use crate::model::{Model, Prediction, PromptSource};

/// Predicted landmarks per sample plus their metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    pub predictions: Vec<Vec<Point>>,
}

/// Scores given predictions against the samples' labels.
pub fn score_predictions(
    predictions: &[Vec<Point>],
    samples: &[Sample],
    descriptor: &DatasetDescriptor,
    mode: NormMode,
    alphas: &[f64],
) -> Result<MetricReport> {
    if predictions.len() != samples.len() {
        return Err(TufaError::ShapeMismatch(format!(
            "{} predictions for {} samples",
            predictions.len(),
            samples.len()
        )));
    }
    let nmes = predictions
        .iter()
        .zip(samples)
        .map(|(p, s)| {
            let d = norm_distance(&s.landmarks, &descriptor.norm, mode, s.box_size)?;
            nme(p, &s.landmarks, d)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_nmes(&descriptor.id, mode, nmes, alphas)
}

/// Full-prompt inference on every sample. Without `plane_points` the
/// dataset must be registered in the model.
pub fn evaluate_dataset(
    model: &Model,
    samples: &[Sample],
    descriptor: &DatasetDescriptor,
    plane_points: Option<&[Point]>,
    mode: NormMode,
    alphas: &[f64],
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(TufaError::Empty("no samples to evaluate".into()));
    }
    let source = match plane_points {
        Some(p) => PromptSource::Points(p),
        None => {
            if !model.registry.contains(&descriptor.id) {
                return Err(TufaError::UnknownDataset(format!(
                    "{} (not in checkpoint and no plane points given)",
                    descriptor.id
                )));
            }
            PromptSource::dataset(&descriptor.id)
        }
    };
    let predictions = samples
        .par_iter()
        .map(|s| model.predict(&s.image, source).map(|p| p.points))
        .collect::<Result<Vec<_>>>()?;
    let report = score_predictions(&predictions, samples, descriptor, mode, alphas)?;
    Ok(Evaluation { report, predictions })
}

/// Queries arbitrary plane points on every image.
pub fn zero_shot_predict(model: &Model, points: &[Point], images: &[Image]) -> Result<Vec<Prediction>> {
    images
        .par_iter()
        .map(|img| model.predict(img, PromptSource::Points(points)))
        .collect()
}

/// Places a new scheme on a trained dataset's plane. `correspondences`
/// pairs `(new index, trained index)`; the affine fit on those pairs is
/// applied to the whole new mean shape.
pub fn cross_scheme_transfer(
    model: &Model,
    trained_id: &str,
    new_mean: &[Point],
    correspondences: &[(usize, usize)],
) -> Result<Vec<Point>> {
    let trained = model.plane_points(trained_id)?;
    let mut src = Vec::with_capacity(correspondences.len());
    let mut dst = Vec::with_capacity(correspondences.len());
    for &(a, b) in correspondences {
        src.push(*new_mean.get(a).ok_or(TufaError::IndexOutOfRange { index: a, len: new_mean.len() })?);
        dst.push(*trained.get(b).ok_or(TufaError::IndexOutOfRange { index: b, len: trained.len() })?);
    }
    let t = fit_affine_alignment(&src, &dst)?;
    Ok(new_mean.iter().map(|&p| t.apply(p)).collect())
}

/// Affine read-out from flattened predictions to labeled landmarks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub inputs: usize,
    pub outputs: usize,
    /// `(2·inputs + 1) × 2·outputs`; the last row is the bias.
    pub weights: Vec<Vec<f64>>,
}

impl LinearProbe {
    pub fn apply(&self, predicted: &[Point]) -> Result<Vec<Point>> {
        if predicted.len() != self.inputs {
            return Err(TufaError::CountMismatch {
                expected: self.inputs,
                found: predicted.len(),
                context: "probe input points".into(),
            });
        }
        let x: Vec<f64> = predicted.iter().flatten().copied().chain([1.0]).collect();
        Ok((0..self.outputs)
            .map(|j| {
                let col = |c: usize| x.iter().zip(&self.weights).map(|(v, row)| v * row[c]).sum::<f64>();
                [col(2 * j), col(2 * j + 1)]
            })
            .collect())
    }
}

/// Least-squares fit of a [`LinearProbe`]. Each output landmark is fitted on
/// the samples where it is labeled; a rank-deficient design is an error.
pub fn fit_linear_probe(features: &[Vec<Point>], labels: &[Sample]) -> Result<LinearProbe> {
    let n = features.len();
    if n == 0 || labels.len() != n {
        return Err(TufaError::ShapeMismatch(format!("{n} feature rows for {} labeled samples", labels.len())));
    }
    let inputs = features[0].len();
    let outputs = labels[0].landmarks.len();
    let k = 2 * inputs + 1;
    if features.iter().any(|f| f.len() != inputs) || labels.iter().any(|s| s.landmarks.len() != outputs) {
        return Err(TufaError::ShapeMismatch("ragged probe data".into()));
    }
    let mut weights = vec![vec![0.0; 2 * outputs]; k];
    for j in 0..outputs {
        let rows: Vec<usize> = (0..n).filter(|&r| labels[r].landmarks.is_valid(j)).collect();
        if rows.len() < k {
            return Err(TufaError::DegenerateFit(format!(
                "landmark {j}: {} labeled samples for {k} unknowns",
                rows.len()
            )));
        }
        let x = DMatrix::from_fn(rows.len(), k, |r, c| {
            if c + 1 == k {
                1.0
            } else {
                features[rows[r]][c / 2][c % 2]
            }
        });
        let y = DMatrix::from_fn(rows.len(), 2, |r, c| labels[rows[r]].landmarks.coords()[j][c]);
        let svd = x.svd(true, true);
        let smax = svd.singular_values.max();
        let tol = smax * 1e-10 * rows.len().max(k) as f64;
        let rank = svd.rank(tol);
        if rank < k {
            return Err(TufaError::DegenerateFit(format!(
                "probe design for landmark {j} has rank {rank} < {k}"
            )));
        }
        let w = svd
            .solve(&y, tol)
            .map_err(|e| TufaError::DegenerateFit(format!("probe solve: {e}")))?;
        for (r, row) in weights.iter_mut().enumerate() {
            row[2 * j] = w[(r, 0)];
            row[2 * j + 1] = w[(r, 1)];
        }
    }
    Ok(LinearProbe { inputs, outputs, weights })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub n_pre: usize,
    pub seed: u64,
    pub scratch_points: Vec<Point>,
    pub report: MetricReport,
}

/// Queries `n_pre` random plane points, fits a probe from the predictions
/// to the labels on `train`, and scores it on `test` (inter-ocular NME).
pub fn linear_probe_eval(
    model: &Model,
    n_pre: usize,
    train: &[Sample],
    test: &[Sample],
    descriptor: &DatasetDescriptor,
    seed: u64,
) -> Result<ProbeResult> {
    if train.len() < 2 * n_pre + 1 {
        return Err(TufaError::InvalidArgument(format!(
            "probe needs at least {} training samples, got {}",
            2 * n_pre + 1,
            train.len()
        )));
    }
    if test.is_empty() {
        return Err(TufaError::Empty("no test samples".into()));
    }
    let scratch = generate_scratch_shape(n_pre, Region::FULL_PLANE, seed)?;
    let predict = |set: &[Sample]| -> Result<Vec<Vec<Point>>> {
        let imgs: Vec<Image> = set.iter().map(|s| s.image.clone()).collect();
        Ok(zero_shot_predict(model, &scratch, &imgs)?.into_iter().map(|p| p.points).collect())
    };
    let probe = fit_linear_probe(&predict(train)?, train)?;
    let mapped = predict(test)?
        .iter()
        .map(|p| probe.apply(p))
        .collect::<Result<Vec<_>>>()?;
    let report = score_predictions(&mapped, test, descriptor, NormMode::InterOcular, &[])?;
    Ok(ProbeResult {
        n_pre,
        seed,
        scratch_points: scratch,
        report,
    })
}

/// Probe NMEs over several scratch seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub n_pre: usize,
    pub seeds: Vec<u64>,
    pub nme_percent: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl ProbeSummary {
    pub fn from_results(results: &[ProbeResult]) -> Result<Self> {
        let first = results.first().ok_or_else(|| TufaError::Empty("no probe runs".into()))?;
        let v: Vec<f64> = results.iter().map(|r| r.report.nme_percent).collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = if v.len() > 1 {
            v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64
        } else {
            0.0
        };
        Ok(ProbeSummary {
            n_pre: first.n_pre,
            seeds: results.iter().map(|r| r.seed).collect(),
            nme_percent: v,
            mean,
            std: var.sqrt(),
        })
    }

    /// One table row: `method | inter-ocular NME (N_pre=n)` as `mean ± std`.
    pub fn table_row(&self, method: &str) -> String {
        format!("{method} | inter-ocular NME (N_pre={}) | {:.2} ± {:.2}", self.n_pre, self.mean, self.std)
    }
}
