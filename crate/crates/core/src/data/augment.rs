//! Landmark-consistent augmentation.
//!
//! Geometric transforms are composed into a single affine map on pixel
//! coordinates; the image is resampled through its inverse and landmarks are
//! pushed through it directly. Photometric transforms and occlusion touch
//! pixels only.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::imageio::warp_affine;
use super::{DatasetDescriptor, Image, Sample};
use crate::error::{Result, TufaError};
use crate::geometry::{AffineTransform, Point};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    /// Uniform shift range, ± pixels per axis.
    pub translation_px: f64,
    /// Uniform rotation range, ± degrees.
    pub rotation_deg: f64,
    /// Uniform relative scale range, ± fraction.
    pub scale: f64,
    pub hflip_prob: f64,
    pub gray_prob: f64,
    pub brightness_prob: f64,
    /// Additive brightness change, ± this value.
    pub brightness: f64,
    pub occlusion_prob: f64,
    /// Occluding block side as a fraction of the crop side.
    pub occlusion_size: (f64, f64),
    pub shear_prob: f64,
    /// Maximum horizontal shear factor (tangent of the shear angle).
    pub shear_max: f64,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            translation_px: 10.0,
            rotation_deg: 30.0,
            scale: 0.05,
            hflip_prob: 0.5,
            gray_prob: 0.2,
            brightness_prob: 0.5,
            brightness: 0.3,
            occlusion_prob: 0.5,
            occlusion_size: (0.1, 0.3),
            shear_prob: 1.0 / 3.0,
            shear_max: 0.2,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// Every transform disabled.
    pub fn none() -> Self {
        AugmentationConfig {
            translation_px: 0.0,
            rotation_deg: 0.0,
            scale: 0.0,
            hflip_prob: 0.0,
            gray_prob: 0.0,
            brightness_prob: 0.0,
            brightness: 0.0,
            occlusion_prob: 0.0,
            occlusion_size: (0.1, 0.3),
            shear_prob: 0.0,
            shear_max: 0.0,
            seed: 0,
        }
    }

    /// Keeps the pixel ranges proportional when crops are not 256 pixels wide.
    pub fn scaled_to(&self, crop_side: usize) -> Self {
        let mut c = self.clone();
        c.translation_px = self.translation_px * crop_side as f64 / 256.0;
        c
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("hflip_prob", self.hflip_prob),
            ("gray_prob", self.gray_prob),
            ("brightness_prob", self.brightness_prob),
            ("occlusion_prob", self.occlusion_prob),
            ("shear_prob", self.shear_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(TufaError::InvalidArgument(format!("{name} = {p} is not a probability")));
            }
        }
        let (lo, hi) = self.occlusion_size;
        if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
            return Err(TufaError::InvalidArgument("occlusion_size must satisfy 0 ≤ lo ≤ hi ≤ 1".into()));
        }
        Ok(())
    }
}

/// Concrete geometric parameters of one augmentation draw.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GeometricParams {
    /// Pixels.
    pub translation: Point,
    /// Radians; positive turns +x towards +y (clockwise on screen).
    pub rotation: f64,
    /// Multiplicative scale.
    pub scale: f64,
    pub shear: f64,
    pub flip: bool,
}

impl GeometricParams {
    pub fn identity() -> Self {
        GeometricParams {
            scale: 1.0,
            ..Default::default()
        }
    }

    /// Pixel-space affine map for an image of `(height, width)` (flip excluded).
    pub fn transform(&self, size: (usize, usize)) -> AffineTransform {
        let (h, w) = size;
        let center = [w as f64 / 2.0, h as f64 / 2.0];
        let core = AffineTransform::rotation(self.rotation)
            .compose(&AffineTransform::scaling(self.scale, self.scale))
            .compose(&AffineTransform::shear_x(self.shear));
        AffineTransform::translation(self.translation[0], self.translation[1]).compose(&core.about(center))
    }
}

/// Applies `params` to image and landmarks.
pub fn apply_geometric(sample: &Sample, params: &GeometricParams, flip_perm: Option<&[usize]>) -> Result<Sample> {
    let (h, w, _) = sample.image.dim();
    let fwd = params.transform((h, w));
    let inv = fwd.inverse()?;
    let mut image = warp_affine(&sample.image, (h, w), &inv, [0.0; 3]);
    let to_px = AffineTransform::scaling(w as f64, h as f64);
    let to_unit = AffineTransform::scaling(1.0 / w as f64, 1.0 / h as f64);
    let mut landmarks = sample.landmarks.transformed(&to_unit.compose(&fwd).compose(&to_px));
    if params.flip {
        let perm = flip_perm.ok_or_else(|| {
            TufaError::InvalidArgument(format!(
                "horizontal flip requested but dataset `{}` has no flip permutation",
                sample.dataset_id
            ))
        })?;
        image = flip_horizontal(&image);
        let mirror = AffineTransform {
            linear: [[-1.0, 0.0], [0.0, 1.0]],
            offset: [1.0, 0.0],
        };
        landmarks = landmarks.transformed(&mirror).permuted(perm);
    }
    Ok(Sample {
        image,
        landmarks,
        ..sample.clone()
    })
}

pub fn flip_horizontal(image: &Image) -> Image {
    let mut out = image.clone();
    out.invert_axis(ndarray::Axis(1));
    out.as_standard_layout().into_owned()
}

fn chance<R: Rng + ?Sized>(rng: &mut R, p: f64) -> bool {
    let u: f64 = rng.random();
    u < p
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, r: f64) -> f64 {
    let u: f64 = rng.random();
    (2.0 * u - 1.0) * r
}

/// One random augmentation of `sample`.
pub fn augment<R: Rng + ?Sized>(
    sample: &Sample,
    config: &AugmentationConfig,
    descriptor: &DatasetDescriptor,
    rng: &mut R,
) -> Result<Sample> {
    // draw everything up front so the stream layout never depends on which
    // transforms fire
    let tx = symmetric(rng, config.translation_px);
    let ty = symmetric(rng, config.translation_px);
    let rot = symmetric(rng, config.rotation_deg).to_radians();
    let scale = 1.0 + symmetric(rng, config.scale);
    let do_shear = chance(rng, config.shear_prob);
    let shear = symmetric(rng, config.shear_max);
    let flip = chance(rng, config.hflip_prob);
    let gray = chance(rng, config.gray_prob);
    let do_bright = chance(rng, config.brightness_prob);
    let bright = symmetric(rng, config.brightness);
    let occlude = chance(rng, config.occlusion_prob);
    let occ_side: f64 = config.occlusion_size.0 + rng.random::<f64>() * (config.occlusion_size.1 - config.occlusion_size.0);
    let occ_pos: (f64, f64) = (rng.random(), rng.random());
    let occ_value: f64 = rng.random();

    let params = GeometricParams {
        translation: [tx, ty],
        rotation: rot,
        scale,
        shear: if do_shear { shear } else { 0.0 },
        flip,
    };
    let mut out = if params == GeometricParams::identity() {
        sample.clone()
    } else {
        apply_geometric(sample, &params, descriptor.flip_perm.as_deref())?
    };

    if gray {
        to_grayscale(&mut out.image);
    }
    if do_bright && bright != 0.0 {
        out.image.mapv_inplace(|v| (v + bright).clamp(0.0, 1.0));
    }
    if occlude {
        let (h, w, _) = out.image.dim();
        let side_w = (occ_side * w as f64).round() as usize;
        let side_h = (occ_side * h as f64).round() as usize;
        let x0 = (occ_pos.0 * (w - side_w.min(w)) as f64) as usize;
        let y0 = (occ_pos.1 * (h - side_h.min(h)) as f64) as usize;
        for y in y0..(y0 + side_h).min(h) {
            for x in x0..(x0 + side_w).min(w) {
                for c in 0..3 {
                    out.image[[y, x, c]] = occ_value;
                }
            }
        }
    }
    Ok(out)
}

pub fn to_grayscale(image: &mut Image) {
    let (h, w, _) = image.dim();
    for y in 0..h {
        for x in 0..w {
            let l = 0.299 * image[[y, x, 0]] + 0.587 * image[[y, x, 1]] + 0.114 * image[[y, x, 2]];
            for c in 0..3 {
                image[[y, x, c]] = l;
            }
        }
    }
}
