//! Procedural cartoon faces with analytic landmark positions.
//!
//! A face is a head ellipse, two eye ellipses, a parabolic mouth arc and a
//! nose dot, posed by a random similarity transform. Landmarks are fixed
//! parametric positions on these curves, so any annotation scheme can be
//! evaluated on any generated face: schemes differ only in which curve
//! parameters they sample.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{perm_from_pairs, DatasetDescriptor, Image, NormSpec, Sample};
use crate::error::{Result, TufaError};
use crate::geometry::{LandmarkSet, Point};

/// A position on one of the face curves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CurvePoint {
    /// Head ellipse at angle `t`.
    Head(f64),
    /// Eye ellipses at angle `t` (image-left and image-right eye).
    LeftEye(f64),
    RightEye(f64),
    /// Mouth arc at `s`, where `[0, 1]` spans the drawn mouth left to right.
    Mouth(f64),
    Nose,
}

impl CurvePoint {
    fn shifted(self, delta: f64) -> CurvePoint {
        match self {
            CurvePoint::Head(t) => CurvePoint::Head(t + delta),
            CurvePoint::LeftEye(t) => CurvePoint::LeftEye(t + delta),
            CurvePoint::RightEye(t) => CurvePoint::RightEye(t + delta),
            CurvePoint::Mouth(s) => CurvePoint::Mouth(s + delta / (2.0 * PI)),
            CurvePoint::Nose => CurvePoint::Nose,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemeKind {
    /// 20 landmarks.
    A,
    /// 12 landmarks.
    B,
}

impl FromStr for SchemeKind {
    type Err = TufaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(SchemeKind::A),
            "B" | "b" => Ok(SchemeKind::B),
            other => Err(TufaError::InvalidArgument(format!("unknown scheme `{other}` (expected A or B)"))),
        }
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SchemeKind::A => "A",
            SchemeKind::B => "B",
        })
    }
}

/// An annotation scheme over the synthetic face curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scheme {
    pub name: String,
    pub points: Vec<CurvePoint>,
    pub norm: NormSpec,
    pub flip_perm: Option<Vec<usize>>,
}

impl Scheme {
    pub fn new(kind: SchemeKind) -> Self {
        match kind {
            SchemeKind::A => Self::a(),
            SchemeKind::B => Self::b(),
        }
    }

    /// Head at 8 angles, 4 points per eye, mouth corners and centre, nose.
    pub fn a() -> Self {
        let mut points: Vec<CurvePoint> = (0..8).map(|k| CurvePoint::Head(k as f64 * PI / 4.0)).collect();
        points.extend((0..4).map(|k| CurvePoint::LeftEye(k as f64 * PI / 2.0)));
        points.extend((0..4).map(|k| CurvePoint::RightEye(k as f64 * PI / 2.0)));
        points.extend([CurvePoint::Mouth(0.0), CurvePoint::Mouth(0.5), CurvePoint::Mouth(1.0), CurvePoint::Nose]);
        // mirror x: head t → π − t, left eye t ↔ right eye π − t, mouth s ↔ 1 − s
        let mut pairs = vec![(0, 4), (1, 3), (5, 7)];
        for j in 0..4 {
            pairs.push((8 + j, 12 + (6 - j) % 4));
        }
        pairs.push((16, 18));
        Scheme {
            name: "synth-a".into(),
            points,
            norm: NormSpec {
                ocular: Some((10, 12)),
                pupil: Some(((8..12).collect(), (12..16).collect())),
            },
            flip_perm: Some(perm_from_pairs(20, &pairs)),
        }
    }

    /// Sparser scheme at curve positions mostly absent from scheme A.
    pub fn b() -> Self {
        let points = vec![
            CurvePoint::Head(PI / 8.0),
            CurvePoint::Head(7.0 * PI / 8.0),
            CurvePoint::Head(9.0 * PI / 8.0),
            CurvePoint::Head(15.0 * PI / 8.0),
            CurvePoint::LeftEye(PI / 4.0),
            CurvePoint::LeftEye(5.0 * PI / 4.0),
            CurvePoint::RightEye(3.0 * PI / 4.0),
            CurvePoint::RightEye(7.0 * PI / 4.0),
            CurvePoint::Mouth(0.25),
            CurvePoint::Mouth(0.5),
            CurvePoint::Mouth(0.75),
            CurvePoint::Nose,
        ];
        Scheme {
            name: "synth-b".into(),
            points,
            norm: NormSpec {
                ocular: Some((5, 7)),
                pupil: Some((vec![4, 5], vec![6, 7])),
            },
            flip_perm: Some(perm_from_pairs(12, &[(0, 1), (2, 3), (4, 6), (5, 7), (8, 10)])),
        }
    }

    /// Same curves as `base`, every parameter moved by `delta` (mouth by
    /// `delta / 2π`). The mirror symmetry is lost, so no flip permutation.
    pub fn shifted(base: &Scheme, delta: f64, name: &str) -> Self {
        Scheme {
            name: name.into(),
            points: base.points.iter().map(|p| p.shifted(delta)).collect(),
            norm: base.norm.clone(),
            flip_perm: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Descriptor without a mean shape (computed from data later).
    pub fn descriptor(&self) -> DatasetDescriptor {
        DatasetDescriptor {
            id: self.name.clone(),
            n_landmarks: self.points.len(),
            norm: self.norm.clone(),
            flip_perm: self.flip_perm.clone(),
            mean_shape: None,
        }
    }
}

/// Geometry and colours of one generated face, in crop units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceParams {
    pub center: Point,
    /// Radians; rotates the face frame into the image frame.
    pub angle: f64,
    pub head_radii: (f64, f64),
    /// Offset of the image-right eye centre from the face centre; the other
    /// eye is mirrored in x.
    pub eye_offset: (f64, f64),
    pub eye_radii: (f64, f64),
    pub mouth_y: f64,
    pub mouth_half_width: f64,
    /// Downward bulge of the mouth centre relative to its corners.
    pub mouth_curve: f64,
    pub nose_y: f64,
    pub background: [f64; 3],
    pub skin: [f64; 3],
    pub feature: [f64; 3],
}

fn around<R: Rng>(rng: &mut R, mid: f64, half: f64) -> f64 {
    mid + rng.random_range(-half..=half)
}

impl FaceParams {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let center = [around(rng, 0.5, 0.05), around(rng, 0.5, 0.05)];
        let angle = around(rng, 0.0, 15f64.to_radians());
        let head_radii = (around(rng, 0.28, 0.03), around(rng, 0.36, 0.03));
        let eye_offset = (around(rng, 0.12, 0.015), around(rng, -0.07, 0.02));
        let eye_radii = (around(rng, 0.055, 0.01), around(rng, 0.028, 0.006));
        let mouth_y = around(rng, 0.17, 0.02);
        let mouth_half_width = around(rng, 0.09, 0.02);
        let mouth_curve = around(rng, 0.0, 0.035);
        let nose_y = around(rng, 0.05, 0.015);
        let mut tone = |lo: f64, hi: f64| {
            let base = rng.random_range(lo..hi);
            [0, 1, 2].map(|_| (base + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0))
        };
        let background = tone(0.05, 0.3);
        let skin = tone(0.55, 0.85);
        let feature = tone(0.02, 0.2);
        FaceParams {
            center,
            angle,
            head_radii,
            eye_offset,
            eye_radii,
            mouth_y,
            mouth_half_width,
            mouth_curve,
            nose_y,
            background,
            skin,
            feature,
        }
    }

    /// Face-frame position of a curve point.
    fn local(&self, p: CurvePoint) -> Point {
        let (ex, ey) = self.eye_offset;
        let (ra, rb) = self.eye_radii;
        match p {
            CurvePoint::Head(t) => [self.head_radii.0 * t.cos(), self.head_radii.1 * t.sin()],
            CurvePoint::LeftEye(t) => [-ex + ra * t.cos(), ey + rb * t.sin()],
            CurvePoint::RightEye(t) => [ex + ra * t.cos(), ey + rb * t.sin()],
            CurvePoint::Mouth(s) => {
                let u = 2.0 * s - 1.0;
                [self.mouth_half_width * u, self.mouth_y + self.mouth_curve * (1.0 - u * u)]
            }
            CurvePoint::Nose => [0.0, self.nose_y],
        }
    }

    fn to_image(&self, q: Point) -> Point {
        let (s, c) = self.angle.sin_cos();
        [self.center[0] + c * q[0] - s * q[1], self.center[1] + s * q[0] + c * q[1]]
    }

    fn to_face(&self, p: Point) -> Point {
        let (s, c) = self.angle.sin_cos();
        let d = [p[0] - self.center[0], p[1] - self.center[1]];
        [c * d[0] + s * d[1], -s * d[0] + c * d[1]]
    }

    /// Crop-unit position of a curve point.
    pub fn eval(&self, p: CurvePoint) -> Point {
        self.to_image(self.local(p))
    }

    pub fn landmarks(&self, scheme: &Scheme) -> Vec<Point> {
        scheme.points.iter().map(|&p| self.eval(p)).collect()
    }

    /// Anti-aliased rendering into a `size × size` image.
    pub fn render(&self, size: usize) -> Image {
        let px = size as f64;
        let (ex, ey) = self.eye_offset;
        let mouth_half = (0.018 * px).max(0.8) / px;
        let nose_r = (0.025 * px).max(1.0) / px;
        let mouth_poly: Vec<Point> = (0..=48).map(|k| self.local(CurvePoint::Mouth(k as f64 / 48.0))).collect();
        let mut img = Image::zeros((size, size, 3));
        for y in 0..size {
            for x in 0..size {
                let q = self.to_face([(x as f64 + 0.5) / px, (y as f64 + 0.5) / px]);
                let cover = |sd: f64| (0.5 - sd * px).clamp(0.0, 1.0);
                let head = cover(ellipse_sd(q, self.head_radii));
                let left = cover(ellipse_sd([q[0] + ex, q[1] - ey], self.eye_radii));
                let right = cover(ellipse_sd([q[0] - ex, q[1] - ey], self.eye_radii));
                let mouth = cover(polyline_distance(q, &mouth_poly) - mouth_half);
                let nose = cover((q[0] * q[0] + (q[1] - self.nose_y).powi(2)).sqrt() - nose_r);
                let feat = left.max(right).max(mouth).max(nose) * head;
                for c in 0..3 {
                    let face = self.skin[c] * (1.0 - feat) + self.feature[c] * feat;
                    img[[y, x, c]] = self.background[c] * (1.0 - head) + face * head;
                }
            }
        }
        img
    }
}

/// First-order signed distance to an axis-aligned ellipse.
fn ellipse_sd(q: Point, radii: (f64, f64)) -> f64 {
    let (a, b) = radii;
    let f = ((q[0] / a).powi(2) + (q[1] / b).powi(2)).sqrt();
    if f < 1e-12 {
        return -a.min(b);
    }
    let g = ((q[0] / (a * a)).powi(2) + (q[1] / (b * b)).powi(2)).sqrt() / f;
    (f - 1.0) / g
}

fn polyline_distance(q: Point, poly: &[Point]) -> f64 {
    poly.windows(2)
        .map(|w| {
            let (a, b) = (w[0], w[1]);
            let d = [b[0] - a[0], b[1] - a[1]];
            let len2 = d[0] * d[0] + d[1] * d[1];
            let t = if len2 > 0.0 {
                (((q[0] - a[0]) * d[0] + (q[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let p = [a[0] + t * d[0], a[1] + t * d[1]];
            ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Generated faces plus the per-face parameters that define every scheme's
/// ground truth.
#[derive(Debug, Clone)]
pub struct SynthSet {
    pub samples: Vec<Sample>,
    pub faces: Vec<FaceParams>,
}

/// Face geometry depends only on `seed`, never on the scheme.
pub fn synth_faces(count: usize, seed: u64) -> Vec<FaceParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| FaceParams::random(&mut rng)).collect()
}

pub fn synth_generate(scheme: &Scheme, count: usize, seed: u64, size: usize) -> Result<SynthSet> {
    if count == 0 {
        return Err(TufaError::InvalidArgument("count must be at least 1".into()));
    }
    let faces = synth_faces(count, seed);
    let samples = faces
        .iter()
        .enumerate()
        .map(|(k, f)| {
            Ok(Sample {
                image: f.render(size),
                landmarks: LandmarkSet::from_points(f.landmarks(scheme))?,
                dataset_id: scheme.name.clone(),
                source: format!("synth:{}:{seed}:{k}", scheme.name),
                box_size: (1.0, 1.0),
            })
        })
        .collect::<Result<_>>()?;
    Ok(SynthSet { samples, faces })
}

/// Relabels existing faces with another scheme (images are shared).
pub fn relabel(set: &SynthSet, scheme: &Scheme) -> Result<SynthSet> {
    let samples = set
        .samples
        .iter()
        .zip(&set.faces)
        .map(|(s, f)| {
            Ok(Sample {
                landmarks: LandmarkSet::from_points(f.landmarks(scheme))?,
                dataset_id: scheme.name.clone(),
                ..s.clone()
            })
        })
        .collect::<Result<_>>()?;
    Ok(SynthSet {
        samples,
        faces: set.faces.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::imageio::sample_bilinear;

    #[test]
    fn scheme_sizes_and_perms() {
        let a = Scheme::a();
        let b = Scheme::b();
        assert_eq!(a.len(), 20);
        assert_eq!(b.len(), 12);
        a.descriptor().validate().unwrap();
        b.descriptor().validate().unwrap();
    }

    #[test]
    fn flip_perm_mirrors_geometry() {
        // a face with no rotation centred in the crop is mirror-symmetric
        let mut f = FaceParams::random(&mut ChaCha8Rng::seed_from_u64(1));
        f.center = [0.5, 0.5];
        f.angle = 0.0;
        for scheme in [Scheme::a(), Scheme::b()] {
            let pts = f.landmarks(&scheme);
            let perm = scheme.flip_perm.as_ref().unwrap();
            for i in 0..pts.len() {
                let m = pts[perm[i]];
                assert!((1.0 - m[0] - pts[i][0]).abs() < 1e-12, "{} {i}", scheme.name);
                assert!((m[1] - pts[i][1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_generation() {
        let x = synth_generate(&Scheme::a(), 3, 17, 32).unwrap();
        let y = synth_generate(&Scheme::a(), 3, 17, 32).unwrap();
        assert_eq!(x.samples, y.samples);
        let z = synth_generate(&Scheme::a(), 3, 18, 32).unwrap();
        assert_ne!(x.samples[0].image, z.samples[0].image);
    }

    #[test]
    fn head_landmark_on_rendered_boundary() {
        let size = 64;
        let set = synth_generate(&Scheme::a(), 8, 5, size).unwrap();
        for (s, f) in set.samples.iter().zip(&set.faces) {
            let p = s.landmarks.coords()[0];
            // outward normal of the head ellipse at t = 0 is the face-frame +x axis
            let n = [f.angle.cos(), f.angle.sin()];
            let mid: Vec<f64> = (0..3).map(|c| 0.5 * (f.background[c] + f.skin[c])).collect();
            let level = |d: f64| {
                let q = [(p[0] + n[0] * d / size as f64) * size as f64, (p[1] + n[1] * d / size as f64) * size as f64];
                let v = sample_bilinear(&s.image, q, [0.0; 3]);
                (0..3).map(|c| v[c] - mid[c]).sum::<f64>()
            };
            // scan along the normal for the half-intensity crossing
            let steps: Vec<f64> = (-30..=30).map(|k| k as f64 * 0.05).collect();
            let crossing = steps
                .windows(2)
                .find(|w| level(w[0]) > 0.0 && level(w[1]) <= 0.0)
                .map(|w| 0.5 * (w[0] + w[1]))
                .expect("no boundary crossing found");
            assert!(crossing.abs() < 0.5, "crossing at {crossing} px");
        }
    }

    #[test]
    fn scheme_b_matches_analytic_curves() {
        let a = synth_generate(&Scheme::a(), 4, 9, 32).unwrap();
        let b = synth_generate(&Scheme::b(), 4, 9, 32).unwrap();
        for (s, f) in b.samples.iter().zip(&a.faces) {
            let (ex, ey) = f.eye_offset;
            let (ra, rb) = f.eye_radii;
            let t = PI / 4.0;
            let local = [-ex + ra * t.cos(), ey + rb * t.sin()];
            let (sn, cs) = f.angle.sin_cos();
            let expect = [f.center[0] + cs * local[0] - sn * local[1], f.center[1] + sn * local[0] + cs * local[1]];
            let got = s.landmarks.coords()[4];
            assert!((got[0] - expect[0]).abs() < 1e-12 && (got[1] - expect[1]).abs() < 1e-12);
        }
        assert_eq!(a.samples[0].image, b.samples[0].image);
    }

    #[test]
    fn shifted_scheme_offsets_parameters() {
        let s = Scheme::shifted(&Scheme::a(), 0.2, "synth-a2");
        assert_eq!(s.points[0], CurvePoint::Head(0.2));
        assert_eq!(s.points[19], CurvePoint::Nose);
        assert!(s.flip_perm.is_none());
    }
}
