//! Annotation import/export.
//!
//! The canonical format is line-delimited JSON, one face per line:
//! `{"image": ..., "dataset_id": ..., "bbox": [x0, y0, x1, y1], "points": [[x, y, valid], ...]}`
//! with pixel coordinates and image paths relative to the annotation file.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::imageio::{load_image, warp_affine};
use super::{DatasetDescriptor, Sample};
use crate::error::{Result, TufaError};
use crate::geometry::{bounding_box, AffineTransform, LandmarkSet, Point};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnnotationFormat {
    CanonicalJson,
    WflwTxt,
    Pts300w,
}

impl FromStr for AnnotationFormat {
    type Err = TufaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "canonical-json" => Ok(AnnotationFormat::CanonicalJson),
            "wflw-txt" => Ok(AnnotationFormat::WflwTxt),
            "300w-pts" => Ok(AnnotationFormat::Pts300w),
            other => Err(TufaError::InvalidArgument(format!(
                "unknown annotation format `{other}` (expected canonical-json, wflw-txt or 300w-pts)"
            ))),
        }
    }
}

impl fmt::Display for AnnotationFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnnotationFormat::CanonicalJson => "canonical-json",
            AnnotationFormat::WflwTxt => "wflw-txt",
            AnnotationFormat::Pts300w => "300w-pts",
        })
    }
}

/// An annotated face whose image has not been loaded yet.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub image_path: PathBuf,
    pub dataset_id: String,
    /// `[x0, y0, x1, y1]` in source pixels.
    pub bbox: [f64; 4],
    /// Source-pixel landmarks.
    pub landmarks: LandmarkSet,
}

impl SampleRecord {
    /// Square crop centred on the box, side = longer box side.
    fn crop_square(&self) -> (Point, f64) {
        let [x0, y0, x1, y1] = self.bbox;
        let side = (x1 - x0).max(y1 - y0).max(1e-9);
        ([(x0 + x1) / 2.0 - side / 2.0, (y0 + y1) / 2.0 - side / 2.0], side)
    }

    /// Maps source pixels to crop units `[0, 1]²`.
    pub fn crop_transform(&self) -> AffineTransform {
        let (corner, side) = self.crop_square();
        AffineTransform {
            linear: [[1.0 / side, 0.0], [0.0, 1.0 / side]],
            offset: [-corner[0] / side, -corner[1] / side],
        }
    }

    pub fn load(&self, size: (usize, usize)) -> Result<Sample> {
        let src = load_image(&self.image_path)?;
        let (corner, side) = self.crop_square();
        let (h, w) = size;
        let out_to_src = AffineTransform {
            linear: [[side / w as f64, 0.0], [0.0, side / h as f64]],
            offset: corner,
        };
        let image = warp_affine(&src, size, &out_to_src, [0.0; 3]);
        let [x0, y0, x1, y1] = self.bbox;
        Ok(Sample {
            image,
            landmarks: self.landmarks.transformed(&self.crop_transform()),
            dataset_id: self.dataset_id.clone(),
            source: self.image_path.display().to_string(),
            box_size: ((x1 - x0) / side, (y1 - y0) / side),
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CanonicalRecord {
    image: String,
    dataset_id: String,
    bbox: [f64; 4],
    points: Vec<(f64, f64, bool)>,
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn check_count(found: usize, descriptor: &DatasetDescriptor, path: &Path, line: usize) -> Result<()> {
    if found != descriptor.n_landmarks {
        return Err(TufaError::CountMismatch {
            expected: descriptor.n_landmarks,
            found,
            context: format!("{}:{line}", path.display()),
        });
    }
    Ok(())
}

/// Reads annotation records for `descriptor` from `path`.
pub fn import_annotations(
    path: &Path,
    format: AnnotationFormat,
    descriptor: &DatasetDescriptor,
) -> Result<Vec<SampleRecord>> {
    match format {
        AnnotationFormat::CanonicalJson => import_canonical(path, descriptor),
        AnnotationFormat::WflwTxt => import_wflw(path, descriptor),
        AnnotationFormat::Pts300w => import_pts(path, descriptor),
    }
}

fn import_canonical(path: &Path, descriptor: &DatasetDescriptor) -> Result<Vec<SampleRecord>> {
    let text = fs::read_to_string(path).map_err(|e| TufaError::io(path, e))?;
    let base = base_dir(path);
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let lineno = k + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| TufaError::Parse {
            path: path.display().to_string(),
            line: lineno,
            message,
        };
        let rec: CanonicalRecord = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        if rec.dataset_id != descriptor.id {
            return Err(parse_err(format!(
                "record belongs to dataset `{}`, expected `{}`",
                rec.dataset_id, descriptor.id
            )));
        }
        check_count(rec.points.len(), descriptor, path, lineno)?;
        let coords = rec.points.iter().map(|&(x, y, _)| [x, y]).collect();
        let valid = rec.points.iter().map(|&(_, _, v)| v).collect();
        let landmarks = LandmarkSet::new(coords, valid).map_err(|e| parse_err(e.to_string()))?;
        out.push(SampleRecord {
            image_path: base.join(&rec.image),
            dataset_id: rec.dataset_id,
            bbox: rec.bbox,
            landmarks,
        });
    }
    Ok(out)
}

/// WFLW layout: `2·N` coordinates, 4 box values, 6 attribute flags, image path.
fn import_wflw(path: &Path, descriptor: &DatasetDescriptor) -> Result<Vec<SampleRecord>> {
    let text = fs::read_to_string(path).map_err(|e| TufaError::io(path, e))?;
    let base = base_dir(path);
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let lineno = k + 1;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        let parse_err = |message: String| TufaError::Parse {
            path: path.display().to_string(),
            line: lineno,
            message,
        };
        if tokens.len() < 11 + 2 || (tokens.len() - 11) % 2 != 0 {
            return Err(parse_err(format!("unexpected token count {}", tokens.len())));
        }
        let n = (tokens.len() - 11) / 2;
        check_count(n, descriptor, path, lineno)?;
        let nums: Vec<f64> = tokens[..tokens.len() - 1]
            .iter()
            .map(|t| t.parse::<f64>().map_err(|_| parse_err(format!("not a number: `{t}`"))))
            .collect::<Result<_>>()?;
        let coords: Vec<Point> = (0..n).map(|i| [nums[2 * i], nums[2 * i + 1]]).collect();
        let bbox = [nums[2 * n], nums[2 * n + 1], nums[2 * n + 2], nums[2 * n + 3]];
        let landmarks = LandmarkSet::from_points(coords).map_err(|e| parse_err(e.to_string()))?;
        out.push(SampleRecord {
            image_path: base.join(tokens[tokens.len() - 1]),
            dataset_id: descriptor.id.clone(),
            bbox,
            landmarks,
        });
    }
    Ok(out)
}

/// A single `.pts` file or a directory of them (sorted by name).
fn import_pts(path: &Path, descriptor: &DatasetDescriptor) -> Result<Vec<SampleRecord>> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| TufaError::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "pts"))
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    files.iter().map(|f| parse_pts(f, descriptor)).collect()
}

fn parse_pts(path: &Path, descriptor: &DatasetDescriptor) -> Result<SampleRecord> {
    let text = fs::read_to_string(path).map_err(|e| TufaError::io(path, e))?;
    let err = |line: usize, message: String| TufaError::Parse {
        path: path.display().to_string(),
        line,
        message,
    };
    let mut declared = None;
    let mut coords = Vec::new();
    let mut in_body = false;
    for (k, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if !in_body {
            if let Some(rest) = line.strip_prefix("n_points:") {
                declared = Some(
                    rest.trim()
                        .parse::<usize>()
                        .map_err(|_| err(k + 1, "bad n_points".into()))?,
                );
            } else if line == "{" {
                in_body = true;
            }
            continue;
        }
        if line == "}" {
            break;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 2 {
            return Err(err(k + 1, format!("expected `x y`, found `{line}`")));
        }
        let x = parts[0].parse::<f64>().map_err(|_| err(k + 1, format!("not a number: `{}`", parts[0])))?;
        let y = parts[1].parse::<f64>().map_err(|_| err(k + 1, format!("not a number: `{}`", parts[1])))?;
        coords.push([x, y]);
    }
    if let Some(n) = declared {
        if n != coords.len() {
            return Err(err(0, format!("header declares {n} points, body has {}", coords.len())));
        }
    }
    check_count(coords.len(), descriptor, path, 0)?;
    let (lo, hi) = bounding_box(&coords);
    let image_path = ["png", "jpg", "jpeg"]
        .iter()
        .map(|ext| path.with_extension(ext))
        .find(|p| p.exists())
        .unwrap_or_else(|| path.with_extension("jpg"));
    Ok(SampleRecord {
        image_path,
        dataset_id: descriptor.id.clone(),
        bbox: [lo[0], lo[1], hi[0], hi[1]],
        landmarks: LandmarkSet::from_points(coords).map_err(|e| err(0, e.to_string()))?,
    })
}

/// Writes records as canonical JSON lines. Image paths are made relative to
/// the output file's directory when possible.
pub fn export_canonical(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let base = base_dir(path);
    let mut f = fs::File::create(path).map_err(|e| TufaError::io(path, e))?;
    for r in records {
        let image = r
            .image_path
            .strip_prefix(&base)
            .unwrap_or(&r.image_path)
            .to_string_lossy()
            .into_owned();
        let rec = CanonicalRecord {
            image,
            dataset_id: r.dataset_id.clone(),
            bbox: r.bbox,
            points: r
                .landmarks
                .coords()
                .iter()
                .zip(r.landmarks.valid())
                .map(|(p, &v)| (p[0], p[1], v))
                .collect(),
        };
        writeln!(f, "{}", serde_json::to_string(&rec)?).map_err(|e| TufaError::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::imageio::save_png;
    use crate::data::Image;

    fn desc(n: usize) -> DatasetDescriptor {
        DatasetDescriptor::new("fx", n)
    }

    #[test]
    fn canonical_fixture_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ann.jsonl");
        let fixture = r#"{"image":"a.png","dataset_id":"fx","bbox":[0,0,10,10],"points":[[1.5,2.0,true],[3.0,4.25,true],[0,0,false]]}
{"image":"b.png","dataset_id":"fx","bbox":[2,2,12,8],"points":[[5.0,6.0,true],[7.0,7.5,true],[9.0,3.0,true]]}

{"image":"sub/c.png","dataset_id":"fx","bbox":[0,0,4,4],"points":[[0.25,0.5,true],[1.0,1.0,false],[2.0,3.0,true]]}
"#;
        fs::write(&p, fixture).unwrap();
        let recs = import_annotations(&p, AnnotationFormat::CanonicalJson, &desc(3)).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0].landmarks.coords()[1], [3.0, 4.25]);
        assert_eq!(recs[1].bbox, [2.0, 2.0, 12.0, 8.0]);
        assert_eq!(recs[2].landmarks.valid(), &[true, false, true]);
        assert_eq!(recs[2].image_path, dir.path().join("sub/c.png"));

        let q = dir.path().join("out.jsonl");
        export_canonical(&q, &recs).unwrap();
        let back = import_annotations(&q, AnnotationFormat::CanonicalJson, &desc(3)).unwrap();
        assert_eq!(back, recs);
    }

    #[test]
    fn count_mismatch_and_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.txt");
        let mut line: Vec<String> = (0..196).map(|i| format!("{}.0", i)).collect();
        line.extend(["0", "0", "100", "100", "0", "0", "0", "0", "0", "0", "img.png"].map(String::from));
        fs::write(&p, line.join(" ")).unwrap();
        assert!(import_annotations(&p, AnnotationFormat::WflwTxt, &DatasetDescriptor::wflw()).is_ok());
        assert!(matches!(
            import_annotations(&p, AnnotationFormat::WflwTxt, &DatasetDescriptor::ibug68("300w")),
            Err(TufaError::CountMismatch { expected: 68, found: 98, .. })
        ));

        let q = dir.path().join("bad.jsonl");
        fs::write(&q, "{\"image\":\"a.png\",\"dataset_id\":\"fx\",\"bbox\":[0,0,1,1],\"points\":[[0,0,true]]}\nnot json\n").unwrap();
        match import_annotations(&q, AnnotationFormat::CanonicalJson, &desc(1)) {
            Err(TufaError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn wflw_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.txt");
        let mut toks: Vec<String> = (0..196).map(|i| format!("{}", i as f64 * 0.5)).collect();
        toks.extend(["10", "20", "110", "140", "1", "0", "0", "0", "0", "1", "dir/x.jpg"].map(String::from));
        fs::write(&p, toks.join(" ") + "\n").unwrap();
        let r = &import_annotations(&p, AnnotationFormat::WflwTxt, &DatasetDescriptor::wflw()).unwrap()[0];
        assert_eq!(r.landmarks.coords()[3], [3.0, 3.5]);
        assert_eq!(r.bbox, [10.0, 20.0, 110.0, 140.0]);
        assert_eq!(r.image_path, dir.path().join("dir/x.jpg"));
        assert_eq!(r.dataset_id, "wflw");
    }

    #[test]
    fn pts_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("face.pts");
        fs::write(&p, "version: 1\nn_points: 3\n{\n1.0 2.0\n3.5 4.0\n2.0 9.0\n}\n").unwrap();
        let recs = import_annotations(&p, AnnotationFormat::Pts300w, &desc(3)).unwrap();
        assert_eq!(recs[0].landmarks.coords(), &[[1.0, 2.0], [3.5, 4.0], [2.0, 9.0]]);
        assert_eq!(recs[0].bbox, [1.0, 2.0, 3.5, 9.0]);
        fs::write(&p, "version: 1\nn_points: 4\n{\n1.0 2.0\n3.5 4.0\n2.0 9.0\n}\n").unwrap();
        assert!(import_annotations(&p, AnnotationFormat::Pts300w, &desc(3)).is_err());
    }

    #[test]
    fn load_crops_square_box() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::zeros((20, 40, 3));
        img[[10, 20, 0]] = 1.0;
        save_png(&dir.path().join("i.png"), &img).unwrap();
        let rec = SampleRecord {
            image_path: dir.path().join("i.png"),
            dataset_id: "fx".into(),
            bbox: [10.0, 5.0, 30.0, 15.0],
            landmarks: LandmarkSet::from_points(vec![[20.5, 10.5]]).unwrap(),
        };
        let s = rec.load((20, 20)).unwrap();
        // side 20, corner (10, 0): landmark → (0.525, 0.525)
        assert!((s.landmarks.coords()[0][0] - 0.525).abs() < 1e-12);
        assert!((s.landmarks.coords()[0][1] - 0.525).abs() < 1e-12);
        assert_eq!(s.box_size, (1.0, 0.5));
        assert_eq!(s.image[[10, 10, 0]], 1.0);
    }
}
