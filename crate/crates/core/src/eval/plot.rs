//! SVG CED plots and PNG landmark overlays.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::imageio::{draw_dot, save_png};
use crate::data::Image;
use crate::error::{Result, TufaError};
use crate::geometry::Point;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Step-function CED curves over `[0, x_max]` (NME as a fraction), one
/// labeled polyline per `(label, breakpoints)` entry.
pub fn ced_svg(curves: &[(String, Vec<(f64, f64)>)], x_max: f64) -> Result<String> {
    if curves.is_empty() {
        return Err(TufaError::Empty("no curves to plot".into()));
    }
    if !(x_max > 0.0 && x_max.is_finite()) {
        return Err(TufaError::InvalidArgument(format!("plot range {x_max} must be positive")));
    }
    let (w, h) = (640.0, 440.0);
    let (left, right, top, bottom) = (60.0, 20.0, 20.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + pw * (x.min(x_max) / x_max);
    let sy = |y: f64| top + ph * (1.0 - y);

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    for k in 0..=5 {
        let fx = x_max * k as f64 / 5.0;
        let fy = k as f64 / 5.0;
        writeln!(s, r##"<line x1="{:.1}" y1="{top}" x2="{:.1}" y2="{:.1}" stroke="#ddd"/>"##, sx(fx), sx(fx), top + ph).unwrap();
        writeln!(s, r##"<line x1="{left}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#ddd"/>"##, sy(fy), left + pw, sy(fy)).unwrap();
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{:.3}</text>"#, sx(fx), top + ph + 18.0, fx).unwrap();
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.1}</text>"#, left - 6.0, sy(fy) + 4.0, fy).unwrap();
    }
    writeln!(s, r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#).unwrap();
    writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">NME</text>"#, left + pw / 2.0, h - 10.0).unwrap();
    writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">fraction of samples</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    )
    .unwrap();

    for (k, (label, pts)) in curves.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut path = format!("{:.2},{:.2}", sx(0.0), sy(0.0));
        let mut level = 0.0;
        for &(e, f) in pts {
            if e > x_max {
                break;
            }
            write!(path, " {:.2},{:.2} {:.2},{:.2}", sx(e), sy(level), sx(e), sy(f)).unwrap();
            level = f;
        }
        write!(path, " {:.2},{:.2}", sx(x_max), sy(level)).unwrap();
        writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{path}"/>"#).unwrap();
        let ly = top + 16.0 + 18.0 * k as f64;
        let lx = left + pw - 170.0;
        writeln!(s, r#"<line x1="{lx:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{color}" stroke-width="2"/>"#, ly - 4.0, lx + 24.0, ly - 4.0).unwrap();
        writeln!(s, r#"<text x="{:.1}" y="{ly:.1}">{}</text>"#, lx + 30.0, escape(label)).unwrap();
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn write_ced_svg(path: &Path, curves: &[(String, Vec<(f64, f64)>)], x_max: f64) -> Result<()> {
    std::fs::write(path, ced_svg(curves, x_max)?).map_err(|e| TufaError::io(path, e))
}

/// Upscales `image` by `zoom` (nearest neighbour) and draws predicted points
/// in red and, if given, labeled points in green. Points are crop-relative.
pub fn overlay(image: &Image, predicted: &[Point], labeled: Option<&[Point]>, zoom: usize) -> Image {
    let zoom = zoom.max(1);
    let (h, w, _) = image.dim();
    let mut out = Image::zeros((h * zoom, w * zoom, 3));
    for ((y, x, c), v) in out.indexed_iter_mut() {
        *v = image[[y / zoom, x / zoom, c]];
    }
    let r = (zoom as f64 * 0.6).max(1.5);
    let to_px = |p: Point| [p[0] * (w * zoom) as f64, p[1] * (h * zoom) as f64];
    if let Some(l) = labeled {
        for &p in l {
            draw_dot(&mut out, to_px(p), r, [0.1, 0.9, 0.2]);
        }
    }
    for &p in predicted {
        draw_dot(&mut out, to_px(p), r * 0.7, [0.95, 0.1, 0.1]);
    }
    out
}

pub fn write_overlay(path: &Path, image: &Image, predicted: &[Point], labeled: Option<&[Point]>, zoom: usize) -> Result<()> {
    save_png(path, &overlay(image, predicted, labeled, zoom))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_has_one_polyline_per_curve_and_labels() {
        let curves = vec![
            ("ours <a>".to_string(), vec![(0.02, 0.5), (0.05, 1.0)]),
            ("baseline".to_string(), vec![(0.04, 0.5), (0.2, 1.0)]),
        ];
        let svg = ced_svg(&curves, 0.1).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("ours &lt;a&gt;"));
        assert!(svg.contains("baseline"));
        assert!(ced_svg(&[], 0.1).is_err());
    }

    #[test]
    fn overlay_marks_points() {
        let img = Image::zeros((8, 8, 3));
        let out = overlay(&img, &[[0.5, 0.5]], None, 4);
        assert_eq!(out.dim(), (32, 32, 3));
        assert!(out[[16, 16, 0]] > 0.9);
        assert_eq!(out[[0, 0, 0]], 0.0);
    }
}
