//! Shape statistics and planar transforms.
//!
//! Everything here is a pure function over 2D point lists. Shapes live in
//! one of two frames: pixel/crop coordinates for annotated faces, and the
//! plane `[-1, 1]²` shared by all mean shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TufaError};

pub type Point = [f64; 2];

/// Landmarks of one face, with a validity flag per landmark.
///
/// Invalid landmarks (e.g. self-occluded points with no annotated position)
/// keep a placeholder coordinate that must never be read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    coords: Vec<Point>,
    valid: Vec<bool>,
}

impl LandmarkSet {
    pub fn new(coords: Vec<Point>, valid: Vec<bool>) -> Result<Self> {
        if coords.is_empty() {
            return Err(TufaError::Empty("landmark set has no points".into()));
        }
        if coords.len() != valid.len() {
            return Err(TufaError::ShapeMismatch(format!(
                "{} coordinates but {} validity flags",
                coords.len(),
                valid.len()
            )));
        }
        for (i, (p, &v)) in coords.iter().zip(&valid).enumerate() {
            if v && !(p[0].is_finite() && p[1].is_finite()) {
                return Err(TufaError::NonFinite(format!("landmark {i}")));
            }
        }
        Ok(LandmarkSet { coords, valid })
    }

    /// All landmarks valid.
    pub fn from_points(coords: Vec<Point>) -> Result<Self> {
        let valid = vec![true; coords.len()];
        Self::new(coords, valid)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Point] {
        &self.coords
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.valid[i]
    }

    /// Maps every coordinate (valid or not) through `t`.
    pub fn transformed(&self, t: &AffineTransform) -> LandmarkSet {
        LandmarkSet {
            coords: self.coords.iter().map(|p| t.apply(*p)).collect(),
            valid: self.valid.clone(),
        }
    }

    /// Reorders landmarks so that output `i` is input `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> LandmarkSet {
        LandmarkSet {
            coords: perm.iter().map(|&j| self.coords[j]).collect(),
            valid: perm.iter().map(|&j| self.valid[j]).collect(),
        }
    }
}

/// Per-dataset statistical shape normalized into the plane `[-1, 1]²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanShape {
    pub dataset_id: String,
    pub points: Vec<Point>,
}

impl MeanShape {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// `p ↦ linear · p + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub linear: [[f64; 2]; 2],
    pub offset: [f64; 2],
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineTransform {
    pub fn identity() -> Self {
        AffineTransform {
            linear: [[1.0, 0.0], [0.0, 1.0]],
            offset: [0.0, 0.0],
        }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        AffineTransform {
            linear: [[1.0, 0.0], [0.0, 1.0]],
            offset: [dx, dy],
        }
    }

    pub fn scaling(sx: f64, sy: f64) -> Self {
        AffineTransform {
            linear: [[sx, 0.0], [0.0, sy]],
            offset: [0.0, 0.0],
        }
    }

    /// Rotation by `angle` radians. In image coordinates (y pointing down)
    /// a positive angle turns +x towards +y.
    pub fn rotation(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        AffineTransform {
            linear: [[c, -s], [s, c]],
            offset: [0.0, 0.0],
        }
    }

    /// Horizontal shear `x += k·y`.
    pub fn shear_x(k: f64) -> Self {
        AffineTransform {
            linear: [[1.0, k], [0.0, 1.0]],
            offset: [0.0, 0.0],
        }
    }

    /// Conjugates `self` so that it acts about `center` instead of the origin.
    pub fn about(&self, center: Point) -> Self {
        AffineTransform::translation(center[0], center[1])
            .compose(self)
            .compose(&AffineTransform::translation(-center[0], -center[1]))
    }

    pub fn apply(&self, p: Point) -> Point {
        let m = &self.linear;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + self.offset[0],
            m[1][0] * p[0] + m[1][1] * p[1] + self.offset[1],
        ]
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &AffineTransform) -> AffineTransform {
        let a = &self.linear;
        let b = &other.linear;
        let linear = [
            [
                a[0][0] * b[0][0] + a[0][1] * b[1][0],
                a[0][0] * b[0][1] + a[0][1] * b[1][1],
            ],
            [
                a[1][0] * b[0][0] + a[1][1] * b[1][0],
                a[1][0] * b[0][1] + a[1][1] * b[1][1],
            ],
        ];
        let o = self.apply(other.offset);
        AffineTransform { linear, offset: o }
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.linear;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }

    pub fn inverse(&self) -> Result<AffineTransform> {
        let det = self.determinant();
        let scale = self
            .linear
            .iter()
            .flatten()
            .fold(0.0f64, |acc, v| acc.max(v.abs()));
        if !det.is_finite() || det.abs() <= 1e-14 * scale * scale.max(1e-300) {
            return Err(TufaError::DegenerateFit("singular affine transform".into()));
        }
        let m = &self.linear;
        let inv = [
            [m[1][1] / det, -m[0][1] / det],
            [-m[1][0] / det, m[0][0] / det],
        ];
        let t = AffineTransform {
            linear: inv,
            offset: [0.0, 0.0],
        };
        let o = t.apply(self.offset);
        Ok(AffineTransform {
            linear: inv,
            offset: [-o[0], -o[1]],
        })
    }

    /// Sum of squared residuals `Σ ‖self(s) − t‖²`.
    pub fn residual(&self, source: &[Point], target: &[Point]) -> f64 {
        source
            .iter()
            .zip(target)
            .map(|(s, t)| {
                let p = self.apply(*s);
                (p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2)
            })
            .sum()
    }
}

/// Per-index mean of canonicalized valid landmarks, normalized into the plane.
///
/// Each sample is first mapped into its crop frame by the matching
/// canonicalizer. The mean is then translated and uniformly scaled so its
/// tight bounding box is centred at the origin and its longer side spans
/// `[-1, 1]`.
pub fn compute_mean_shape(
    dataset_id: &str,
    samples: &[LandmarkSet],
    canonicalizers: &[AffineTransform],
) -> Result<MeanShape> {
    let first = samples
        .first()
        .ok_or_else(|| TufaError::Empty("no samples for mean shape".into()))?;
    if canonicalizers.len() != samples.len() {
        return Err(TufaError::ShapeMismatch(format!(
            "{} samples but {} canonicalizers",
            samples.len(),
            canonicalizers.len()
        )));
    }
    let n = first.len();
    let mut sum = vec![[0.0f64; 2]; n];
    let mut count = vec![0usize; n];
    for (k, (s, t)) in samples.iter().zip(canonicalizers).enumerate() {
        if s.len() != n {
            return Err(TufaError::CountMismatch {
                expected: n,
                found: s.len(),
                context: format!("sample {k}"),
            });
        }
        for i in 0..n {
            if s.is_valid(i) {
                let p = t.apply(s.coords()[i]);
                sum[i][0] += p[0];
                sum[i][1] += p[1];
                count[i] += 1;
            }
        }
    }
    let mut mean = Vec::with_capacity(n);
    for i in 0..n {
        if count[i] == 0 {
            return Err(TufaError::NoValidLandmark { index: i });
        }
        let c = count[i] as f64;
        mean.push([sum[i][0] / c, sum[i][1] / c]);
    }
    Ok(MeanShape {
        dataset_id: dataset_id.to_string(),
        points: normalize_to_plane(&mean),
    })
}

fn plane_frame(points: &[Point]) -> (Point, f64) {
    let (lo, hi) = bounding_box(points);
    let center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
    let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    let scale = if extent > 0.0 { 2.0 / extent } else { 1.0 };
    (center, scale)
}

/// The unclamped map [`normalize_to_plane`] applies to `points`, for
/// placing other points in the same plane.
pub fn plane_normalizer(points: &[Point]) -> AffineTransform {
    let (center, scale) = plane_frame(points);
    AffineTransform::scaling(scale, scale).compose(&AffineTransform::translation(-center[0], -center[1]))
}

/// Centres the bounding box at the origin and scales the longer side to 2.
pub fn normalize_to_plane(points: &[Point]) -> Vec<Point> {
    let (center, scale) = plane_frame(points);
    points
        .iter()
        .map(|p| {
            [
                ((p[0] - center[0]) * scale).clamp(-1.0, 1.0),
                ((p[1] - center[1]) * scale).clamp(-1.0, 1.0),
            ]
        })
        .collect()
}

pub fn bounding_box(points: &[Point]) -> (Point, Point) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in points {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    (lo, hi)
}

/// Elementwise `shape + offsets`. No clamping: the result may leave `[-1, 1]²`.
pub fn apply_semantic_offsets(shape: &[Point], offsets: &[Point]) -> Result<Vec<Point>> {
    if shape.len() != offsets.len() {
        return Err(TufaError::ShapeMismatch(format!(
            "{} points but {} offsets",
            shape.len(),
            offsets.len()
        )));
    }
    Ok(shape
        .iter()
        .zip(offsets)
        .map(|(p, d)| [p[0] + d[0], p[1] + d[1]])
        .collect())
}

/// Least-squares affine map taking `source` onto `target`.
///
/// Solved in centred coordinates: `linear = Σ_ts · Σ_ss⁻¹`,
/// `offset = t̄ − linear · s̄`.
pub fn fit_affine_alignment(source: &[Point], target: &[Point]) -> Result<AffineTransform> {
    if source.len() != target.len() {
        return Err(TufaError::ShapeMismatch(format!(
            "{} source points but {} target points",
            source.len(),
            target.len()
        )));
    }
    if source.len() < 3 {
        return Err(TufaError::DegenerateFit(format!(
            "need at least 3 point pairs, got {}",
            source.len()
        )));
    }
    let n = source.len() as f64;
    let mean = |pts: &[Point]| {
        let s = pts
            .iter()
            .fold([0.0, 0.0], |acc, p| [acc[0] + p[0], acc[1] + p[1]]);
        [s[0] / n, s[1] / n]
    };
    let sm = mean(source);
    let tm = mean(target);
    // css = Σ (s-s̄)(s-s̄)ᵀ, cts = Σ (t-t̄)(s-s̄)ᵀ
    let mut css = [[0.0f64; 2]; 2];
    let mut cts = [[0.0f64; 2]; 2];
    for (s, t) in source.iter().zip(target) {
        let ds = [s[0] - sm[0], s[1] - sm[1]];
        let dt = [t[0] - tm[0], t[1] - tm[1]];
        for r in 0..2 {
            for c in 0..2 {
                css[r][c] += ds[r] * ds[c];
                cts[r][c] += dt[r] * ds[c];
            }
        }
    }
    let det = css[0][0] * css[1][1] - css[0][1] * css[1][0];
    let trace = css[0][0] + css[1][1];
    if !(det > 1e-12 * trace * trace) || trace <= 0.0 {
        return Err(TufaError::DegenerateFit(
            "source points are collinear or coincident".into(),
        ));
    }
    let inv = [
        [css[1][1] / det, -css[0][1] / det],
        [-css[1][0] / det, css[0][0] / det],
    ];
    let mut linear = [[0.0f64; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            linear[r][c] = cts[r][0] * inv[0][c] + cts[r][1] * inv[1][c];
        }
    }
    let offset = [
        tm[0] - (linear[0][0] * sm[0] + linear[0][1] * sm[1]),
        tm[1] - (linear[1][0] * sm[0] + linear[1][1] * sm[1]),
    ];
    Ok(AffineTransform { linear, offset })
}

/// Axis-aligned box in plane coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub min: Point,
    pub max: Point,
}

impl Region {
    pub const FULL_PLANE: Region = Region {
        min: [-1.0, -1.0],
        max: [1.0, 1.0],
    };

    pub fn contains(&self, p: Point) -> bool {
        (0..2).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }
}

/// Uniform random points inside `region`, reproducible from `seed`.
pub fn generate_scratch_shape(n_points: usize, region: Region, seed: u64) -> Result<Vec<Point>> {
    if n_points == 0 {
        return Err(TufaError::InvalidArgument(
            "scratch shape needs at least one point".into(),
        ));
    }
    for a in 0..2 {
        if !(region.min[a] <= region.max[a]) {
            return Err(TufaError::Empty(format!(
                "region is empty along axis {a}: [{}, {}]",
                region.min[a], region.max[a]
            )));
        }
        if region.min[a] < -1.0 || region.max[a] > 1.0 {
            return Err(TufaError::InvalidArgument(
                "scratch region must lie inside [-1, 1]²".into(),
            ));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
        if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        }
    };
    Ok((0..n_points)
        .map(|_| {
            let x = sample(&mut rng, region.min[0], region.max[0]);
            let y = sample(&mut rng, region.min[1], region.max[1]);
            [x, y]
        })
        .collect())
}
