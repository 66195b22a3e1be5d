//! Image decoding/encoding and resampling.
//!
//! Continuous pixel coordinates put pixel `(i, j)`'s centre at
//! `(j + 0.5, i + 0.5)`; `(0, 0)` is the top-left corner of the image.

use std::path::Path;

use image::{Rgb, RgbImage};

use super::Image;
use crate::error::{Result, TufaError};
use crate::geometry::{AffineTransform, Point};

pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| TufaError::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let mut out = Image::zeros((h as usize, w as usize, 3));
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out[[y as usize, x as usize, c]] = px[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

pub fn to_rgb8(image: &Image) -> RgbImage {
    let (h, w, _) = image.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let q = |c: usize| (image[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([q(0), q(1), q(2)])
    })
}

pub fn save_png(path: &Path, image: &Image) -> Result<()> {
    to_rgb8(image)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| TufaError::Image {
            path: path.display().to_string(),
            message: e.to_string(),
        })
}

/// Bilinear sample at continuous pixel coordinates; `fill` outside the image.
pub fn sample_bilinear(image: &Image, p: Point, fill: [f64; 3]) -> [f64; 3] {
    let (h, w, _) = image.dim();
    let fx = p[0] - 0.5;
    let fy = p[1] - 0.5;
    let x0 = fx.floor();
    let y0 = fy.floor();
    let ax = fx - x0;
    let ay = fy - y0;
    let mut out = [0.0; 3];
    for (dy, wy) in [(0, 1.0 - ay), (1, ay)] {
        for (dx, wx) in [(0, 1.0 - ax), (1, ax)] {
            let wgt = wx * wy;
            if wgt == 0.0 {
                continue;
            }
            let xi = x0 as i64 + dx;
            let yi = y0 as i64 + dy;
            let px = if xi >= 0 && yi >= 0 && (xi as usize) < w && (yi as usize) < h {
                [
                    image[[yi as usize, xi as usize, 0]],
                    image[[yi as usize, xi as usize, 1]],
                    image[[yi as usize, xi as usize, 2]],
                ]
            } else {
                fill
            };
            for c in 0..3 {
                out[c] += wgt * px[c];
            }
        }
    }
    out
}

/// Resamples `src` into an `out_size = (h, w)` image; `out_to_src` maps
/// output pixel coordinates to source pixel coordinates.
pub fn warp_affine(src: &Image, out_size: (usize, usize), out_to_src: &AffineTransform, fill: [f64; 3]) -> Image {
    let (h, w) = out_size;
    let mut out = Image::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let s = out_to_src.apply([x as f64 + 0.5, y as f64 + 0.5]);
            let v = sample_bilinear(src, s, fill);
            for c in 0..3 {
                out[[y, x, c]] = v[c];
            }
        }
    }
    out
}

/// Filled disc for overlays and tests.
pub fn draw_dot(image: &mut Image, center: Point, radius: f64, color: [f64; 3]) {
    let (h, w, _) = image.dim();
    let x0 = (center[0] - radius - 1.0).floor().max(0.0) as usize;
    let y0 = (center[1] - radius - 1.0).floor().max(0.0) as usize;
    let x1 = ((center[0] + radius + 1.0).ceil().max(0.0) as usize).min(w);
    let y1 = ((center[1] + radius + 1.0).ceil().max(0.0) as usize).min(h);
    for y in y0..y1 {
        for x in x0..x1 {
            let dx = x as f64 + 0.5 - center[0];
            let dy = y as f64 + 0.5 - center[1];
            if dx * dx + dy * dy <= radius * radius {
                for c in 0..3 {
                    image[[y, x, c]] = color[c];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_warp_preserves_image() {
        let mut img = Image::zeros((5, 7, 3));
        img[[2, 3, 1]] = 1.0;
        img[[4, 6, 0]] = 0.25;
        let out = warp_affine(&img, (5, 7), &AffineTransform::identity(), [0.0; 3]);
        assert_eq!(out, img);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let mut img = Image::zeros((4, 6, 3));
        img[[1, 2, 0]] = 1.0;
        img[[3, 5, 2]] = 128.0 / 255.0;
        save_png(&p, &img).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(back, img);
    }
}
