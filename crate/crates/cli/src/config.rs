//! Run configuration: one TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use tufa::data::annotations::{import_annotations, AnnotationFormat};
use tufa::data::synth::{Scheme, SchemeKind};
use tufa::data::{DatasetDescriptor, Sample};
use tufa::eval::NormMode;
use tufa::model::ModelConfig;
use tufa::train::TrainConfig;
use tufa::{Result, TufaError};

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const DESCRIPTOR_FILE: &str = "descriptor.json";
pub const ANNOTATION_FILE: &str = "annotations.jsonl";

/// Where a dataset's annotations live and how to describe its landmarks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    /// A dataset directory (with `annotations.jsonl` and `descriptor.json`)
    /// or an annotation file.
    pub path: PathBuf,
    #[serde(default = "default_format")]
    pub format: String,
    /// Descriptor JSON; defaults to `descriptor.json` next to the annotations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub descriptor: Option<PathBuf>,
    /// Built-in descriptor: `wflw`, `ibug68`, `synth-a` or `synth-b`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// Overrides the descriptor id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

fn default_format() -> String {
    AnnotationFormat::CanonicalJson.to_string()
}

impl DatasetEntry {
    pub fn from_path(path: &Path) -> Self {
        DatasetEntry {
            path: path.to_path_buf(),
            format: default_format(),
            descriptor: None,
            preset: None,
            id: None,
        }
    }

    fn annotation_file(&self) -> PathBuf {
        if self.path.is_dir() {
            self.path.join(ANNOTATION_FILE)
        } else {
            self.path.clone()
        }
    }

    pub fn descriptor(&self) -> Result<DatasetDescriptor> {
        let mut d = match (&self.preset, &self.descriptor) {
            (Some(p), _) => preset(p)?,
            (None, Some(path)) => read_descriptor(path)?,
            (None, None) => {
                let dir = self.annotation_file().parent().map(Path::to_path_buf).unwrap_or_default();
                read_descriptor(&dir.join(DESCRIPTOR_FILE))?
            }
        };
        if let Some(id) = &self.id {
            d.id = id.clone();
        }
        d.mean_shape = None;
        Ok(d)
    }

    /// Descriptor plus crops resized to `size`.
    pub fn load(&self, size: (usize, usize)) -> Result<(DatasetDescriptor, Vec<Sample>)> {
        let d = self.descriptor()?;
        let format: AnnotationFormat = self.format.parse()?;
        let records = import_annotations(&self.annotation_file(), format, &d)?;
        if records.is_empty() {
            return Err(TufaError::Empty(format!("{} has no records", self.annotation_file().display())));
        }
        let samples = records
            .iter()
            .map(|r| {
                let mut s = r.load(size)?;
                s.dataset_id = d.id.clone();
                Ok(s)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((d, samples))
    }
}

fn read_descriptor(path: &Path) -> Result<DatasetDescriptor> {
    let text = std::fs::read_to_string(path).map_err(|e| TufaError::io(path, e))?;
    let d: DatasetDescriptor = serde_json::from_str(&text)?;
    d.validate()?;
    Ok(d)
}

fn preset(name: &str) -> Result<DatasetDescriptor> {
    match name {
        "wflw" => Ok(DatasetDescriptor::wflw()),
        "ibug68" | "300w" => Ok(DatasetDescriptor::ibug68(name)),
        "synth-a" => Ok(Scheme::new(SchemeKind::A).descriptor()),
        "synth-b" => Ok(Scheme::new(SchemeKind::B).descriptor()),
        other => Err(TufaError::InvalidArgument(format!(
            "unknown dataset preset `{other}` (expected wflw, ibug68, synth-a or synth-b)"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Model initialization and training seed.
    pub seed: u64,
    pub workers: usize,
    pub alphas: Vec<f64>,
    pub norm: NormMode,
    /// Number of overlay images written by evaluation commands.
    pub overlays: usize,
    /// Save a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub datasets: Vec<DatasetEntry>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workers: 1,
            alphas: vec![0.08, 0.1],
            norm: NormMode::InterOcular,
            overlays: 4,
            checkpoint_every: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            datasets: Vec::new(),
        }
    }
}

/// Values given on the command line; each one replaces the file value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub alphas: Vec<f64>,
    pub norm: Option<NormMode>,
    pub datasets: Vec<PathBuf>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| TufaError::io(p, e))?;
                toml::from_str(&text).map_err(|e| TufaError::Parse {
                    path: p.display().to_string(),
                    line: e.span().map(|s| text[..s.start].lines().count().max(1)).unwrap_or(0),
                    message: e.message().to_string(),
                })
            }
        }
    }

    pub fn resolve(mut self, o: &Overrides) -> Result<Self> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(w) = o.workers {
            self.workers = w;
        }
        if !o.alphas.is_empty() {
            self.alphas = o.alphas.clone();
        }
        if let Some(n) = o.norm {
            self.norm = n;
        }
        if !o.datasets.is_empty() {
            self.datasets = o.datasets.iter().map(|p| DatasetEntry::from_path(p)).collect();
        }
        self.train.seed = self.seed;
        self.train.workers = self.workers;
        if let Some(a) = &mut self.train.augmentation {
            a.seed = self.seed;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(TufaError::InvalidArgument("workers must be at least 1".into()));
        }
        if let Some(a) = self.alphas.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
            return Err(TufaError::InvalidArgument(format!("threshold {a} must be positive")));
        }
        self.model.validate()?;
        self.train.validate()
    }

    pub fn write_resolved(&self, out: &Path) -> Result<()> {
        let path = out.join(RESOLVED_CONFIG);
        let text = toml::to_string_pretty(self).map_err(|e| TufaError::Serde(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| TufaError::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "seed = 3\nworkers = 2\nalphas = [0.1]\n[train]\nepochs = 7\nmilestones = [5]\n").unwrap();
        let cfg = RunConfig::load(Some(&p)).unwrap();
        let o = Overrides {
            seed: Some(9),
            alphas: vec![0.05, 0.08],
            ..Overrides::default()
        };
        let r = cfg.resolve(&o).unwrap();
        assert_eq!((r.seed, r.workers, r.train.epochs), (9, 2, 7));
        assert_eq!((r.train.seed, r.train.workers), (9, 2));
        assert_eq!(r.alphas, vec![0.05, 0.08]);
    }

    #[test]
    fn resolved_config_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.train.augmentation = Some(Default::default());
        cfg.datasets.push(DatasetEntry::from_path(Path::new("data/a")));
        let cfg = cfg.resolve(&Overrides::default()).unwrap();
        cfg.write_resolved(dir.path()).unwrap();
        let back = RunConfig::load(Some(&dir.path().join(RESOLVED_CONFIG))).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "sede = 3\n").unwrap();
        assert!(matches!(RunConfig::load(Some(&p)), Err(TufaError::Parse { line: 1, .. })));
    }
}
