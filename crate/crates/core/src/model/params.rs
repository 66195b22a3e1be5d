use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;

/// Init gain for decoder query/key projections. Sharper initial attention
/// lets queries diverge sooner instead of all predicting the same point.
const DECODER_QK_GAIN: f64 = 2.0;

/// Name of the semantic alignment embedding of a dataset.
pub fn align_name(dataset_id: &str) -> String {
    format!("align.{dataset_id}")
}

/// All learnable tensors, keyed by stable dotted names.
///
/// Every tensor is 2D; vectors are stored as `1 × n` rows.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: BTreeMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Freshly initialized network weights (no alignment embeddings).
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut init = Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
            store: ParamStore::new(),
        };
        let c = config.channels;
        let ch = config.head_dim();
        let hidden = config.ffn_ratio * c;

        init.xavier("patch.w", config.patch_dim(), c);
        init.zeros("patch.b", 1, c);
        init.normal("pos", config.patch_count(), c, 0.02);

        for l in 0..config.encoder_depth {
            let p = format!("enc.{l}");
            init.layer_norm(&format!("{p}.ln1"), c);
            for w in ["wq", "wk", "wv", "wo"] {
                init.xavier(&format!("{p}.attn.{w}"), c, c);
            }
            init.zeros(&format!("{p}.attn.bo"), 1, c);
            init.layer_norm(&format!("{p}.ln2"), c);
            init.ffn(&format!("{p}.ffn"), c, hidden);
        }
        if config.encoder_depth > 0 {
            init.layer_norm("enc.norm", c);
        }

        for l in 0..config.decoder_depth {
            let p = format!("dec.{l}");
            for block in ["msa", "mca"] {
                init.layer_norm(&format!("{p}.{block}.ln"), c);
                for z in 0..config.heads {
                    for w in ["wk", "wq", "wv"] {
                        let gain = if w == "wv" { 1.0 } else { DECODER_QK_GAIN };
                        init.xavier_gain(&format!("{p}.{block}.{w}.{z}"), ch, ch, gain);
                    }
                }
                init.xavier(&format!("{p}.{block}.wo"), c, c);
            }
            init.layer_norm(&format!("{p}.ffn.ln"), c);
            init.ffn(&format!("{p}.ffn"), c, hidden);
        }

        init.xavier("head.w1", c, config.head_hidden);
        init.zeros("head.b1", 1, config.head_hidden);
        init.xavier("head.w2", config.head_hidden, 2);
        init.zeros("head.b2", 1, 2);
        init.store
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.tensors.get_mut(name)
    }

    /// Panics on a missing name: parameter names are fixed by the config,
    /// so a miss is a programming error.
    pub fn expect(&self, name: &str) -> &Array2<f64> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn remove(&mut self, name: &str) -> Option<Array2<f64>> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array2<f64>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }
}

/// Coarse grouping of parameter names, used in reports and gradient checks.
pub fn param_group(name: &str) -> &'static str {
    let mut parts = name.split('.');
    match parts.next() {
        Some("patch") => "patch_embed",
        Some("pos") => "positional",
        Some("enc") => "encoder",
        Some("head") => "head",
        Some("align") => "alignment",
        Some("dec") => match parts.nth(1) {
            Some("msa") => "decoder_msa",
            Some("mca") => "decoder_mca",
            _ => "decoder_ffn",
        },
        _ => "other",
    }
}

struct Initializer {
    rng: ChaCha8Rng,
    store: ParamStore,
}

impl Initializer {
    fn xavier(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        self.xavier_gain(name, fan_in, fan_out, 1.0);
    }

    fn xavier_gain(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64) {
        let a = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
        let rng = &mut self.rng;
        let w = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-a..a));
        self.store.insert(name, w);
    }

    fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) {
        let dist = Normal::new(0.0, std).expect("valid std");
        let rng = &mut self.rng;
        let w = Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng));
        self.store.insert(name, w);
    }

    fn zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.store.insert(name, Array2::zeros((rows, cols)));
    }

    fn layer_norm(&mut self, prefix: &str, c: usize) {
        self.store.insert(format!("{prefix}.g"), Array2::ones((1, c)));
        self.store.insert(format!("{prefix}.b"), Array2::zeros((1, c)));
    }

    fn ffn(&mut self, prefix: &str, c: usize, hidden: usize) {
        self.xavier(&format!("{prefix}.w1"), c, hidden);
        self.zeros(&format!("{prefix}.b1"), 1, hidden);
        self.xavier(&format!("{prefix}.w2"), hidden, c);
        self.zeros(&format!("{prefix}.b2"), 1, c);
    }
}
