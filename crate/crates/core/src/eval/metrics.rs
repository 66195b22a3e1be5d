//! NME, failure rate, CED and AUC.
//!
//! Per-sample NMEs are kept as fractions of the normalization distance;
//! thresholds `α` use the same unit. Only the reported mean and failure rate
//! are scaled to percent.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::NormSpec;
use crate::error::{Result, TufaError};
use crate::geometry::{LandmarkSet, Point};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormMode {
    #[serde(alias = "ocular")]
    InterOcular,
    #[serde(alias = "pupil")]
    InterPupil,
    Box,
}

impl FromStr for NormMode {
    type Err = TufaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ocular" | "inter-ocular" => Ok(NormMode::InterOcular),
            "pupil" | "inter-pupil" => Ok(NormMode::InterPupil),
            "box" => Ok(NormMode::Box),
            other => Err(TufaError::InvalidArgument(format!(
                "unknown normalization `{other}` (expected ocular, pupil or box)"
            ))),
        }
    }
}

impl fmt::Display for NormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormMode::InterOcular => "inter-ocular",
            NormMode::InterPupil => "inter-pupil",
            NormMode::Box => "box",
        })
    }
}

fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn centroid(target: &LandmarkSet, idx: &[usize]) -> Result<Point> {
    let mut sum = [0.0; 2];
    let mut n = 0usize;
    for &i in idx {
        if i >= target.len() {
            return Err(TufaError::IndexOutOfRange { index: i, len: target.len() });
        }
        if target.is_valid(i) {
            sum[0] += target.coords()[i][0];
            sum[1] += target.coords()[i][1];
            n += 1;
        }
    }
    if n == 0 {
        return Err(TufaError::InvalidArgument("no valid landmark in pupil set".into()));
    }
    Ok([sum[0] / n as f64, sum[1] / n as f64])
}

/// Normalization distance of one labeled sample. `box_size` is the labeled
/// face box `(width, height)` in the same units as the landmarks.
pub fn norm_distance(target: &LandmarkSet, spec: &NormSpec, mode: NormMode, box_size: (f64, f64)) -> Result<f64> {
    let d = match mode {
        NormMode::InterOcular => {
            let (a, b) = spec
                .ocular
                .ok_or_else(|| TufaError::InvalidArgument("dataset defines no outer eye corners".into()))?;
            for i in [a, b] {
                if i >= target.len() {
                    return Err(TufaError::IndexOutOfRange { index: i, len: target.len() });
                }
                if !target.is_valid(i) {
                    return Err(TufaError::InvalidArgument(format!("eye corner {i} is not labeled")));
                }
            }
            dist(target.coords()[a], target.coords()[b])
        }
        NormMode::InterPupil => {
            let (l, r) = spec
                .pupil
                .as_ref()
                .ok_or_else(|| TufaError::InvalidArgument("dataset defines no pupil landmarks".into()))?;
            dist(centroid(target, l)?, centroid(target, r)?)
        }
        NormMode::Box => (box_size.0 * box_size.1).sqrt(),
    };
    if !(d.is_finite() && d > 0.0) {
        return Err(TufaError::DegenerateFit(format!("normalization distance {d}")));
    }
    Ok(d)
}

/// Mean L2 error over valid landmarks divided by `d_norm` (a fraction).
pub fn nme(predicted: &[Point], target: &LandmarkSet, d_norm: f64) -> Result<f64> {
    if predicted.len() != target.len() {
        return Err(TufaError::CountMismatch {
            expected: target.len(),
            found: predicted.len(),
            context: "predicted landmarks".into(),
        });
    }
    if !(d_norm.is_finite() && d_norm > 0.0) {
        return Err(TufaError::DegenerateFit(format!("normalization distance {d_norm}")));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, p) in predicted.iter().enumerate() {
        if target.is_valid(i) {
            sum += dist(*p, target.coords()[i]);
            n += 1;
        }
    }
    if n == 0 {
        return Err(TufaError::Empty("sample has no valid landmarks".into()));
    }
    Ok(sum / n as f64 / d_norm)
}

/// Percentage of samples whose NME is strictly above `alpha`.
pub fn fr(nmes: &[f64], alpha: f64) -> Result<f64> {
    if nmes.is_empty() {
        return Err(TufaError::Empty("no NME values".into()));
    }
    if !(alpha > 0.0) {
        return Err(TufaError::InvalidArgument(format!("threshold {alpha} must be positive")));
    }
    let failed = nmes.iter().filter(|&&e| e > alpha).count();
    Ok(100.0 * failed as f64 / nmes.len() as f64)
}

/// Cumulative error distribution `f(ε) = |{NME ≤ ε}| / n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CedCurve {
    sorted: Vec<f64>,
}

impl CedCurve {
    pub fn new(nmes: &[f64]) -> Result<Self> {
        if nmes.is_empty() {
            return Err(TufaError::Empty("no NME values".into()));
        }
        if nmes.iter().any(|e| !e.is_finite() || *e < 0.0) {
            return Err(TufaError::NonFinite("NME list".into()));
        }
        let mut sorted = nmes.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(CedCurve { sorted })
    }

    pub fn sorted(&self) -> &[f64] {
        &self.sorted
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn eval(&self, eps: f64) -> f64 {
        self.sorted.partition_point(|&e| e <= eps) as f64 / self.sorted.len() as f64
    }

    /// `(ε, f(ε))` at every distinct NME value.
    pub fn breakpoints(&self) -> Vec<(f64, f64)> {
        let n = self.sorted.len() as f64;
        let mut out: Vec<(f64, f64)> = Vec::new();
        for (k, &e) in self.sorted.iter().enumerate() {
            let f = (k + 1) as f64 / n;
            match out.last_mut() {
                Some(last) if last.0 == e => last.1 = f,
                _ => out.push((e, f)),
            }
        }
        out
    }
}

/// Area under the CED on `[0, α]`, divided by `α`.
pub fn auc(curve: &CedCurve, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(TufaError::InvalidArgument(format!("threshold {alpha} must be positive")));
    }
    // integrate the step function between consecutive breakpoints
    let mut area = 0.0;
    let mut prev_eps = 0.0;
    let mut level = 0.0;
    for (eps, f) in curve.breakpoints() {
        if eps >= alpha {
            break;
        }
        area += level * (eps - prev_eps);
        prev_eps = eps;
        level = f;
    }
    area += level * (alpha - prev_eps);
    Ok(area / alpha)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub alpha: f64,
    pub fr_percent: f64,
    pub auc: f64,
}

/// Metrics of one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset_id: String,
    pub norm: NormMode,
    pub count: usize,
    pub nme_percent: f64,
    pub thresholds: Vec<ThresholdMetrics>,
    /// Per-sample NME as a fraction of the normalization distance, in
    /// sample order.
    pub per_sample_nme: Vec<f64>,
}

impl MetricReport {
    pub fn from_nmes(dataset_id: &str, norm: NormMode, nmes: Vec<f64>, alphas: &[f64]) -> Result<Self> {
        let curve = CedCurve::new(&nmes)?;
        let thresholds = alphas
            .iter()
            .map(|&a| {
                Ok(ThresholdMetrics {
                    alpha: a,
                    fr_percent: fr(&nmes, a)?,
                    auc: auc(&curve, a)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(MetricReport {
            dataset_id: dataset_id.to_string(),
            norm,
            count: nmes.len(),
            nme_percent: 100.0 * nmes.iter().sum::<f64>() / nmes.len() as f64,
            thresholds,
            per_sample_nme: nmes,
        })
    }

    pub fn ced(&self) -> Result<CedCurve> {
        CedCurve::new(&self.per_sample_nme)
    }

    /// Recomputes every derived field from the per-sample list.
    pub fn recomputed(&self) -> Result<Self> {
        let alphas: Vec<f64> = self.thresholds.iter().map(|t| t.alpha).collect();
        MetricReport::from_nmes(&self.dataset_id, self.norm, self.per_sample_nme.clone(), &alphas)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn nme_examples() {
        let t = LandmarkSet::from_points(vec![[0.0, 0.0], [1.0, 1.0]]).unwrap();
        assert_eq!(nme(t.coords(), &t, 1.0).unwrap(), 0.0);
        let p = vec![[0.03, 0.0], [1.0, 1.03]];
        assert!((100.0 * nme(&p, &t, 1.0).unwrap() - 3.0).abs() < 1e-12);
        let spec = NormSpec::default();
        assert_eq!(norm_distance(&t, &spec, NormMode::Box, (4.0, 9.0)).unwrap(), 6.0);
        assert!(norm_distance(&t, &spec, NormMode::InterOcular, (1.0, 1.0)).is_err());
        assert!(nme(&p, &t, 0.0).is_err());
    }

    #[test]
    fn ocular_and_pupil() {
        let t = LandmarkSet::from_points(vec![[0.0, 0.0], [2.0, 0.0], [0.0, 1.0], [2.0, 1.0]]).unwrap();
        let spec = NormSpec {
            ocular: Some((0, 1)),
            pupil: Some((vec![0, 2], vec![1, 3])),
        };
        assert_eq!(norm_distance(&t, &spec, NormMode::InterOcular, (0.0, 0.0)).unwrap(), 2.0);
        assert_eq!(norm_distance(&t, &spec, NormMode::InterPupil, (0.0, 0.0)).unwrap(), 2.0);
    }

    #[test]
    fn fr_auc_examples() {
        let e = [0.05, 0.2];
        assert_eq!(fr(&e, 0.1).unwrap(), 50.0);
        let c = CedCurve::new(&e).unwrap();
        assert!((auc(&c, 0.1).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(fr(&[0.0, 0.0], 0.1).unwrap(), 0.0);
        assert_eq!(auc(&CedCurve::new(&[0.0, 0.0]).unwrap(), 0.1).unwrap(), 1.0);
        assert_eq!(fr(&[0.1, 0.1], 0.1).unwrap(), 0.0);
        assert_eq!(auc(&CedCurve::new(&[0.3, 0.2]).unwrap(), 0.1).unwrap(), 0.0);
        assert!(fr(&[], 0.1).is_err());
    }

    #[test]
    fn ced_breakpoints_merge_ties() {
        let c = CedCurve::new(&[0.2, 0.1, 0.1, 0.4]).unwrap();
        assert_eq!(c.breakpoints(), vec![(0.1, 0.5), (0.2, 0.75), (0.4, 1.0)]);
        assert_eq!(c.eval(0.0), 0.0);
        assert_eq!(c.eval(0.1), 0.5);
        assert_eq!(c.eval(f64::INFINITY), 1.0);
    }

    proptest! {
        #[test]
        fn order_invariant_and_bounded(mut e in prop::collection::vec(0.0f64..0.3, 1..40), alpha in 0.01f64..0.3) {
            let r1 = MetricReport::from_nmes("d", NormMode::Box, e.clone(), &[alpha]).unwrap();
            e.reverse();
            let r2 = MetricReport::from_nmes("d", NormMode::Box, e, &[alpha]).unwrap();
            prop_assert_eq!(&r1.thresholds, &r2.thresholds);
            let t = &r1.thresholds[0];
            prop_assert!(t.auc >= 0.0 && t.auc <= 1.0 + 1e-15);
            if t.fr_percent == 100.0 {
                prop_assert_eq!(t.auc, 0.0);
            }
            prop_assert_eq!(r1.recomputed().unwrap(), r1);
        }

        #[test]
        fn nme_rigid_invariance(
            pts in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 3..10),
            noise in prop::collection::vec((-0.1f64..0.1, -0.1f64..0.1), 10),
            angle in -3.0f64..3.0, tx in -2.0f64..2.0, ty in -2.0f64..2.0,
        ) {
            let target: Vec<Point> = pts.iter().map(|&(x, y)| [x, y]).collect();
            let pred: Vec<Point> = target.iter().zip(&noise).map(|(p, n)| [p[0] + n.0, p[1] + n.1]).collect();
            let spec = NormSpec { ocular: Some((0, 1)), pupil: None };
            let t0 = LandmarkSet::from_points(target.clone()).unwrap();
            let Ok(d0) = norm_distance(&t0, &spec, NormMode::InterOcular, (1.0, 1.0)) else { return Ok(()); };
            prop_assume!(d0 > 1e-3);
            let base = nme(&pred, &t0, d0).unwrap();
            use crate::geometry::AffineTransform;
            let rt = AffineTransform::translation(tx, ty).compose(&AffineTransform::rotation(angle));
            let t1 = LandmarkSet::from_points(target.iter().map(|&p| rt.apply(p)).collect()).unwrap();
            let p1: Vec<Point> = pred.iter().map(|&p| rt.apply(p)).collect();
            let d1 = norm_distance(&t1, &spec, NormMode::InterOcular, (1.0, 1.0)).unwrap();
            prop_assert!((nme(&p1, &t1, d1).unwrap() - base).abs() < 1e-9);
        }
    }
}
