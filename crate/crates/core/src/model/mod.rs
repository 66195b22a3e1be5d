//! The landmark model: parameters, registered datasets and forward passes.

pub mod config;
pub mod network;
pub mod params;

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use config::ModelConfig;
pub use network::{AttentionNodes, AttentionWeights};
pub use params::{align_name, param_group, ParamStore};

use crate::autodiff::{Graph, NodeId};
use crate::data::{DatasetDescriptor, DatasetRegistry, Image};
use crate::error::{Result, TufaError};
use crate::geometry::Point;
use network::Binder;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Where the decoder queries come from.
#[derive(Debug, Clone, Copy)]
pub enum PromptSource<'a> {
    /// Mean shape plus alignment embedding of a registered dataset,
    /// optionally restricted to a subset of landmarks.
    Dataset { id: &'a str, anchors: Option<&'a [usize]> },
    /// Arbitrary plane points.
    Points(&'a [Point]),
}

impl<'a> PromptSource<'a> {
    pub fn dataset(id: &'a str) -> Self {
        PromptSource::Dataset { id, anchors: None }
    }
}

/// A built forward graph; `output` is the `N × 2` prediction node.
pub struct ForwardGraph {
    pub graph: Graph,
    pub output: NodeId,
    pub attention: AttentionNodes,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Crop-frame coordinates in `[0, 1]²`.
    pub points: Vec<Point>,
    pub attention: AttentionWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub version: u32,
    pub config: ModelConfig,
    pub params: ParamStore,
    pub registry: DatasetRegistry,
    pub seed: u64,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::init(&config, seed);
        Ok(Model {
            version: CHECKPOINT_VERSION,
            config,
            params,
            registry: DatasetRegistry::new(),
            seed,
        })
    }

    /// Registers a dataset with a mean shape. A fresh zero alignment
    /// embedding is created unless one of matching size already exists.
    pub fn register_dataset(&mut self, d: DatasetDescriptor) -> Result<()> {
        d.mean_shape()?;
        let name = align_name(&d.id);
        let fresh = self.params.get(&name).is_none_or(|a| a.nrows() != d.n_landmarks);
        if fresh {
            self.params.insert(name, Array2::zeros((d.n_landmarks, 2)));
        }
        self.registry.register(d)
    }

    /// Resets a dataset's alignment embedding to zero.
    pub fn reset_alignment(&mut self, id: &str) -> Result<()> {
        let n = self.registry.get(id)?.n_landmarks;
        self.params.insert(align_name(id), Array2::zeros((n, 2)));
        Ok(())
    }

    /// Effective plane positions of a dataset: mean shape plus alignment
    /// embedding.
    pub fn plane_points(&self, id: &str) -> Result<Vec<Point>> {
        let d = self.registry.get(id)?;
        let mean = d.mean_shape()?;
        let a = self.alignment(id)?;
        Ok(mean
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| [p[0] + a[[i, 0]], p[1] + a[[i, 1]]])
            .collect())
    }

    pub fn alignment(&self, id: &str) -> Result<&Array2<f64>> {
        self.params
            .get(&align_name(id))
            .ok_or_else(|| TufaError::UnknownDataset(id.to_string()))
    }

    fn prompt_points(&self, g: &mut Graph, source: PromptSource) -> Result<NodeId> {
        match source {
            PromptSource::Points(points) => {
                if points.is_empty() {
                    return Err(TufaError::Empty("no plane points".into()));
                }
                if points.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(TufaError::NonFinite("plane points".into()));
                }
                let flat: Vec<f64> = points.iter().flatten().copied().collect();
                let arr = Array2::from_shape_vec((points.len(), 2), flat).expect("n x 2");
                Ok(g.leaf(arr))
            }
            PromptSource::Dataset { id, anchors } => {
                let d = self.registry.get(id)?;
                let mean = d.mean_shape()?;
                let flat: Vec<f64> = mean.points.iter().flatten().copied().collect();
                let mean = g.leaf(Array2::from_shape_vec((d.n_landmarks, 2), flat).expect("n x 2"));
                let name = align_name(id);
                let params = &self.params;
                if !params.contains(&name) {
                    return Err(TufaError::UnknownDataset(id.to_string()));
                }
                let align = g.named_leaf(&name, || params.expect(&name).clone());
                match anchors {
                    None => Ok(g.add(mean, align)),
                    Some(idx) => {
                        if idx.is_empty() {
                            return Err(TufaError::Empty("no anchors".into()));
                        }
                        if let Some(&bad) = idx.iter().find(|&&i| i >= d.n_landmarks) {
                            return Err(TufaError::IndexOutOfRange {
                                index: bad,
                                len: d.n_landmarks,
                            });
                        }
                        let m = g.gather_rows(mean, idx);
                        let a = g.gather_rows(align, idx);
                        Ok(g.add(m, a))
                    }
                }
            }
        }
    }

    /// Builds the differentiable forward graph for one image.
    pub fn build(&self, image: &Image, source: PromptSource) -> Result<ForwardGraph> {
        let cfg = &self.config;
        let mut g = Graph::new();
        let b = Binder::new(&self.params);
        let x = network::patchify(&mut g, b, image, cfg)?;
        let f = network::encoder_forward(&mut g, b, x, cfg)?;
        let pos = b.get(&mut g, "pos");
        let pts = self.prompt_points(&mut g, source)?;
        let e = g.sincos_encode(pts, cfg.codec());
        let (t, attention) = network::decoder_forward(&mut g, b, e, f, pos, cfg)?;
        let output = network::regression_head(&mut g, b, t);
        Ok(ForwardGraph {
            graph: g,
            output,
            attention,
        })
    }

    pub fn predict(&self, image: &Image, source: PromptSource) -> Result<Prediction> {
        let fg = self.build(image, source)?;
        let out = fg.graph.value(fg.output);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(TufaError::NonFinite("prediction".into()));
        }
        Ok(Prediction {
            points: out.rows().into_iter().map(|r| [r[0], r[1]]).collect(),
            attention: AttentionWeights::from_graph(&fg.graph, &fg.attention),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| TufaError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TufaError::io(path, e))?;
        let model: Model = serde_json::from_str(&text)?;
        if model.version != CHECKPOINT_VERSION {
            return Err(TufaError::Serde(format!(
                "checkpoint version {} (supported: {CHECKPOINT_VERSION})",
                model.version
            )));
        }
        model.config.validate()?;
        for d in model.registry.iter() {
            let a = model.alignment(&d.id)?;
            if a.dim() != (d.n_landmarks, 2) {
                return Err(TufaError::ShapeMismatch(format!("alignment embedding of `{}`", d.id)));
            }
        }
        Ok(model)
    }
}
