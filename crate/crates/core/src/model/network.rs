//! Graph builders for the encoder, the prompt-conditioned decoder and the
//! regression head.
//!
//! Shapes: `L` image patches, `N` prompts (queries), `C` channels split into
//! `N_h` contiguous head groups of width `C_h`.

use ndarray::Array2;

use super::config::ModelConfig;
use super::params::ParamStore;
use crate::autodiff::{Graph, NodeId};
use crate::data::Image;
use crate::error::{Result, TufaError};

/// Binds named parameters into a graph on first use.
#[derive(Clone, Copy)]
pub struct Binder<'a> {
    params: &'a ParamStore,
}

impl<'a> Binder<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Binder { params }
    }

    pub fn get(&self, g: &mut Graph, name: &str) -> NodeId {
        let params = self.params;
        g.named_leaf(name, || params.expect(name).clone())
    }

    pub fn params(&self) -> &'a ParamStore {
        self.params
    }

    fn layer_norm(&self, g: &mut Graph, x: NodeId, prefix: &str) -> NodeId {
        let gamma = self.get(g, &format!("{prefix}.g"));
        let beta = self.get(g, &format!("{prefix}.b"));
        g.layer_norm(x, gamma, beta)
    }

    fn linear(&self, g: &mut Graph, x: NodeId, w: &str, b: Option<&str>) -> NodeId {
        let wn = self.get(g, w);
        let y = g.matmul(x, wn);
        match b {
            Some(b) => {
                let bn = self.get(g, b);
                g.add_row(y, bn)
            }
            None => y,
        }
    }
}

/// Cross-attention weights of one forward pass, `[layer][head]`, each
/// `queries × L` with rows summing to one.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionWeights {
    pub maps: Vec<Vec<Array2<f64>>>,
}

/// Softmax nodes of the cross-attention, `[layer][head]`.
pub type AttentionNodes = Vec<Vec<NodeId>>;

impl AttentionWeights {
    pub fn from_graph(g: &Graph, nodes: &AttentionNodes) -> Self {
        AttentionWeights {
            maps: nodes
                .iter()
                .map(|layer| layer.iter().map(|&id| g.value(id).clone()).collect())
                .collect(),
        }
    }
}

/// Non-overlapping patches in row-major order, each flattened as
/// `(row, col, channel)`.
pub fn patch_matrix(image: &Image, config: &ModelConfig) -> Result<Array2<f64>> {
    let (h, w, ch) = image.dim();
    if (h, w) != config.image_size || ch != 3 {
        return Err(TufaError::ShapeMismatch(format!(
            "image is {h}x{w}x{ch}, model expects {}x{}x3",
            config.image_size.0, config.image_size.1
        )));
    }
    let (ph, pw) = config.patch_size;
    let cols = w / pw;
    let mut out = Array2::zeros((config.patch_count(), config.patch_dim()));
    for (r, mut row) in out.rows_mut().into_iter().enumerate() {
        let (py, px) = (r / cols, r % cols);
        let mut k = 0;
        for y in 0..ph {
            for x in 0..pw {
                for c in 0..3 {
                    row[k] = image[[py * ph + y, px * pw + x, c]];
                    k += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Patch projection plus learned positional embeddings: `L × C`.
pub fn patchify(g: &mut Graph, b: Binder, image: &Image, config: &ModelConfig) -> Result<NodeId> {
    let patches = g.leaf(patch_matrix(image, config)?);
    let x = b.linear(g, patches, "patch.w", Some("patch.b"));
    let pos = b.get(g, "pos");
    Ok(g.add(x, pos))
}

fn check_finite(g: &Graph, id: NodeId, what: impl FnOnce() -> String) -> Result<()> {
    if g.value(id).iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TufaError::NonFinite(what()))
    }
}

/// Pre-norm ViT encoder. With depth 0 the input sequence is returned as is.
pub fn encoder_forward(g: &mut Graph, b: Binder, x: NodeId, config: &ModelConfig) -> Result<NodeId> {
    let c = config.channels;
    let ch = config.head_dim();
    let scale = 1.0 / (ch as f64).sqrt();
    let mut x = x;
    for l in 0..config.encoder_depth {
        let p = format!("enc.{l}");
        let xn = b.layer_norm(g, x, &format!("{p}.ln1"));
        let q = b.linear(g, xn, &format!("{p}.attn.wq"), None);
        let k = b.linear(g, xn, &format!("{p}.attn.wk"), None);
        let v = b.linear(g, xn, &format!("{p}.attn.wv"), None);
        let mut heads = Vec::with_capacity(config.heads);
        for z in 0..config.heads {
            let qz = g.slice_cols(q, z * ch, ch);
            let kz = g.slice_cols(k, z * ch, ch);
            let vz = g.slice_cols(v, z * ch, ch);
            heads.push(attend(g, qz, kz, vz, scale).0);
        }
        let cat = g.concat_cols(&heads);
        let o = b.linear(g, cat, &format!("{p}.attn.wo"), Some(&format!("{p}.attn.bo")));
        x = g.add(x, o);
        let xn = b.layer_norm(g, x, &format!("{p}.ln2"));
        let f = ffn(g, b, xn, &format!("{p}.ffn"));
        x = g.add(x, f);
        check_finite(g, x, || format!("encoder layer {l}"))?;
        debug_assert_eq!(g.shape(x).1, c);
    }
    if config.encoder_depth > 0 {
        x = b.layer_norm(g, x, "enc.norm");
    }
    Ok(x)
}

/// `softmax(q kᵀ · scale) v`; also returns the softmax node.
fn attend(g: &mut Graph, q: NodeId, k: NodeId, v: NodeId, scale: f64) -> (NodeId, NodeId) {
    let kt = g.transpose(k);
    let s = g.matmul(q, kt);
    let s = g.scale(s, scale);
    let a = g.softmax_rows(s);
    (g.matmul(a, v), a)
}

fn ffn(g: &mut Graph, b: Binder, x: NodeId, prefix: &str) -> NodeId {
    let h = b.linear(g, x, &format!("{prefix}.w1"), Some(&format!("{prefix}.b1")));
    let h = g.gelu(h);
    b.linear(g, h, &format!("{prefix}.w2"), Some(&format!("{prefix}.b2")))
}

/// Prompt self-attention with residual: `T + MSA(LN(T), E)`.
///
/// Prompts are added to the keys and queries only; values come from the
/// normalized `T` alone.
pub fn msa_block(
    g: &mut Graph,
    b: Binder,
    t: NodeId,
    e: NodeId,
    layer: usize,
    config: &ModelConfig,
) -> Result<NodeId> {
    if g.shape(t) != g.shape(e) {
        return Err(TufaError::ShapeMismatch(format!(
            "decoder input {:?} vs prompts {:?}",
            g.shape(t),
            g.shape(e)
        )));
    }
    head_split_check(g.shape(t).1, config)?;
    let p = format!("dec.{layer}.msa");
    let ch = config.head_dim();
    let scale = 1.0 / (ch as f64).sqrt();
    let tn = b.layer_norm(g, t, &format!("{p}.ln"));
    let mut heads = Vec::with_capacity(config.heads);
    for z in 0..config.heads {
        let tz = g.slice_cols(tn, z * ch, ch);
        let ez = g.slice_cols(e, z * ch, ch);
        let te = g.add(tz, ez);
        let k = b.linear(g, te, &format!("{p}.wk.{z}"), None);
        let q = b.linear(g, te, &format!("{p}.wq.{z}"), None);
        let v = b.linear(g, tz, &format!("{p}.wv.{z}"), None);
        heads.push(attend(g, q, k, v, scale).0);
    }
    let cat = g.concat_cols(&heads);
    let out = b.linear(g, cat, &format!("{p}.wo"), None);
    Ok(g.add(t, out))
}

/// Prompt-to-image cross-attention with residual: `T' + MCA(LN(T'), E, F, P)`.
///
/// Keys are `(F + P)`, queries `(T' + E)`, values `F`, each per head.
/// Returns the updated queries and the per-head softmax nodes.
#[allow(clippy::too_many_arguments)]
pub fn mca_block(
    g: &mut Graph,
    b: Binder,
    t: NodeId,
    e: NodeId,
    f: NodeId,
    pos: NodeId,
    layer: usize,
    config: &ModelConfig,
) -> Result<(NodeId, Vec<NodeId>)> {
    if g.shape(f) != g.shape(pos) {
        return Err(TufaError::ShapeMismatch(format!(
            "image features {:?} vs positional embeddings {:?}",
            g.shape(f),
            g.shape(pos)
        )));
    }
    if g.shape(t) != g.shape(e) {
        return Err(TufaError::ShapeMismatch(format!(
            "decoder input {:?} vs prompts {:?}",
            g.shape(t),
            g.shape(e)
        )));
    }
    head_split_check(g.shape(t).1, config)?;
    head_split_check(g.shape(f).1, config)?;
    let p = format!("dec.{layer}.mca");
    let ch = config.head_dim();
    let scale = 1.0 / (ch as f64).sqrt();
    let tn = b.layer_norm(g, t, &format!("{p}.ln"));
    let fp = g.add(f, pos);
    let mut heads = Vec::with_capacity(config.heads);
    let mut maps = Vec::with_capacity(config.heads);
    for z in 0..config.heads {
        let tz = g.slice_cols(tn, z * ch, ch);
        let ez = g.slice_cols(e, z * ch, ch);
        let te = g.add(tz, ez);
        let fz = g.slice_cols(f, z * ch, ch);
        let fpz = g.slice_cols(fp, z * ch, ch);
        let k = b.linear(g, fpz, &format!("{p}.wk.{z}"), None);
        let q = b.linear(g, te, &format!("{p}.wq.{z}"), None);
        let v = b.linear(g, fz, &format!("{p}.wv.{z}"), None);
        let (h, a) = attend(g, q, k, v, scale);
        heads.push(h);
        maps.push(a);
    }
    let cat = g.concat_cols(&heads);
    let out = b.linear(g, cat, &format!("{p}.wo"), None);
    Ok((g.add(t, out), maps))
}

fn head_split_check(width: usize, config: &ModelConfig) -> Result<()> {
    if width != config.channels || width % config.heads != 0 {
        return Err(TufaError::ShapeMismatch(format!(
            "feature width {width} cannot be split into {} heads of {}",
            config.heads,
            config.head_dim()
        )));
    }
    Ok(())
}

/// Position-wise feed-forward with residual: `T + FFN(LN(T))`.
pub fn ffn_block(g: &mut Graph, b: Binder, t: NodeId, layer: usize) -> NodeId {
    let p = format!("dec.{layer}.ffn");
    let tn = b.layer_norm(g, t, &format!("{p}.ln"));
    let f = ffn(g, b, tn, &p);
    g.add(t, f)
}

/// Row order that sorts `x` lexicographically.
fn canonical_order(x: &Array2<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.nrows()).collect();
    idx.sort_by(|&a, &b| {
        x.row(a)
            .iter()
            .zip(x.row(b).iter())
            .map(|(u, v)| u.total_cmp(v))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    idx
}

/// Runs the decoder from `T = 0`. Returns the final query features and the
/// cross-attention softmax nodes of every layer.
///
/// Queries are decoded in a canonical (sorted) order and scattered back, so
/// permuting the prompts permutes the outputs bitwise.
pub fn decoder_forward(
    g: &mut Graph,
    b: Binder,
    e: NodeId,
    f: NodeId,
    pos: NodeId,
    config: &ModelConfig,
) -> Result<(NodeId, AttentionNodes)> {
    let order = canonical_order(g.value(e));
    if order.iter().enumerate().all(|(k, &i)| k == i) {
        return decoder_layers(g, b, e, f, pos, config);
    }
    let mut inverse = vec![0; order.len()];
    for (k, &i) in order.iter().enumerate() {
        inverse[i] = k;
    }
    let sorted = g.gather_rows(e, &order);
    let (t, attention) = decoder_layers(g, b, sorted, f, pos, config)?;
    let t = g.gather_rows(t, &inverse);
    let attention = attention
        .into_iter()
        .map(|layer| layer.into_iter().map(|a| g.gather_rows(a, &inverse)).collect())
        .collect();
    Ok((t, attention))
}

fn decoder_layers(
    g: &mut Graph,
    b: Binder,
    e: NodeId,
    f: NodeId,
    pos: NodeId,
    config: &ModelConfig,
) -> Result<(NodeId, AttentionNodes)> {
    let (n, c) = g.shape(e);
    let mut t = g.leaf(Array2::zeros((n, c)));
    let mut attention = Vec::with_capacity(config.decoder_depth);
    for l in 0..config.decoder_depth {
        t = msa_block(g, b, t, e, l, config)?;
        let (t2, maps) = mca_block(g, b, t, e, f, pos, l, config)?;
        t = ffn_block(g, b, t2, l);
        check_finite(g, t, || format!("decoder layer {l}"))?;
        attention.push(maps);
    }
    Ok((t, attention))
}

/// Two-layer MLP with a sigmoid: `N × 2` crop-relative coordinates in `[0, 1]`.
pub fn regression_head(g: &mut Graph, b: Binder, features: NodeId) -> NodeId {
    let h = b.linear(g, features, "head.w1", Some("head.b1"));
    let h = g.gelu(h);
    let o = b.linear(g, h, "head.w2", Some("head.b2"));
    g.sigmoid(o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::softmax_rows;
    use ndarray::{s, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
    }

    fn random_image(cfg: &ModelConfig, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn((cfg.image_size.0, cfg.image_size.1, 3), || rng.random_range(0.0..1.0))
    }

    #[test]
    fn patch_rows_and_zero_image() {
        let mut cfg = ModelConfig::toy();
        cfg.image_size = (64, 64);
        cfg.patch_size = (8, 8);
        let params = ParamStore::init(&cfg, 0);
        let img = Image::zeros((64, 64, 3));
        let mut g = Graph::new();
        let x = patchify(&mut g, Binder::new(&params), &img, &cfg).unwrap();
        assert_eq!(g.shape(x), (64, 16));
        let xv = g.value(x);
        let pos = params.expect("pos");
        let bias = params.expect("patch.b");
        for r in 0..64 {
            for c in 0..16 {
                assert_eq!(xv[[r, c]] - pos[[r, c]], bias[[0, c]]);
            }
        }
    }

    #[test]
    fn patch_order_is_row_major() {
        let cfg = ModelConfig::toy();
        let mut img = Image::zeros((32, 32, 3));
        img[[0, 16, 2]] = 1.0; // top-right patch, first pixel, blue
        img[[17, 1, 0]] = 2.0; // bottom-left patch, pixel (1,1), red
        let m = patch_matrix(&img, &cfg).unwrap();
        assert_eq!(m[[1, 2]], 1.0);
        assert_eq!(m[[2, (16 + 1) * 3]], 2.0);
        assert!(patch_matrix(&Image::zeros((16, 32, 3)), &cfg).is_err());
    }

    #[test]
    fn encoder_depth_zero_is_identity() {
        let mut cfg = ModelConfig::toy();
        cfg.encoder_depth = 0;
        let params = ParamStore::init(&cfg, 0);
        let mut g = Graph::new();
        let x = g.leaf(random(4, 16, 1));
        let y = encoder_forward(&mut g, Binder::new(&params), x, &cfg).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn encoder_output_shape() {
        let cfg = ModelConfig::toy();
        let params = ParamStore::init(&cfg, 0);
        let mut g = Graph::new();
        let b = Binder::new(&params);
        let x = patchify(&mut g, b, &random_image(&cfg, 3), &cfg).unwrap();
        let y = encoder_forward(&mut g, b, x, &cfg).unwrap();
        assert_eq!(g.shape(y), (4, 16));
    }

    fn identity_params(cfg: &ModelConfig) -> ParamStore {
        let mut p = ParamStore::init(cfg, 0);
        let ch = cfg.head_dim();
        for block in ["msa", "mca"] {
            for z in 0..cfg.heads {
                for w in ["wk", "wq", "wv"] {
                    p.insert(format!("dec.0.{block}.{w}.{z}"), Array2::eye(ch));
                }
            }
            p.insert(format!("dec.0.{block}.wo"), Array2::eye(cfg.channels));
        }
        p
    }

    fn layer_norm_plain(x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let m = row.mean().unwrap();
            let var = row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / row.len() as f64;
            row.mapv_inplace(|v| (v - m) / (var + 1e-5).sqrt());
        }
        out
    }

    #[test]
    fn msa_two_token_hand_example() {
        let mut cfg = ModelConfig::toy();
        cfg.channels = 4;
        cfg.heads = 2;
        let params = identity_params(&cfg);
        let t0 = ndarray::array![[0.5, -0.2, 0.1, 0.9], [-0.3, 0.4, 0.8, -0.6]];
        let e0 = ndarray::array![[0.1, 0.2, -0.1, 0.0], [0.3, -0.4, 0.2, 0.5]];
        let mut g = Graph::new();
        let t = g.leaf(t0.clone());
        let e = g.leaf(e0.clone());
        let out = msa_block(&mut g, Binder::new(&params), t, e, 0, &cfg).unwrap();
        let got = g.value(out).clone();

        // scalar oracle with identity projections
        let tn = layer_norm_plain(&t0);
        let mut expect = t0.clone();
        for z in 0..2 {
            let cols = z * 2..z * 2 + 2;
            let te: Vec<[f64; 2]> = (0..2)
                .map(|i| [tn[[i, cols.start]] + e0[[i, cols.start]], tn[[i, cols.start + 1]] + e0[[i, cols.start + 1]]])
                .collect();
            for i in 0..2 {
                let s: Vec<f64> = (0..2)
                    .map(|j| (te[i][0] * te[j][0] + te[i][1] * te[j][1]) / 2f64.sqrt())
                    .collect();
                let m = s[0].max(s[1]);
                let w0 = (s[0] - m).exp();
                let w1 = (s[1] - m).exp();
                let (a0, a1) = (w0 / (w0 + w1), w1 / (w0 + w1));
                for d in 0..2 {
                    expect[[i, cols.start + d]] += a0 * tn[[0, cols.start + d]] + a1 * tn[[1, cols.start + d]];
                }
            }
        }
        for (a, b) in got.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12, "{got}\n{expect}");
        }
    }

    #[test]
    fn msa_single_token() {
        let cfg = ModelConfig::toy();
        let params = ParamStore::init(&cfg, 4);
        let t0 = random(1, 16, 9);
        let mut g = Graph::new();
        let t = g.leaf(t0.clone());
        let e = g.leaf(random(1, 16, 10));
        let out = msa_block(&mut g, Binder::new(&params), t, e, 0, &cfg).unwrap();
        // softmax over one key is 1: output = t + concat_z(LN(t)_z Wv_z) W_MSA
        let tn = layer_norm_plain(&t0);
        let ch = 8;
        let mut v = Array2::zeros((1, 16));
        for z in 0..2 {
            let part = tn.slice(s![.., z * ch..(z + 1) * ch]).dot(params.expect(&format!("dec.0.msa.wv.{z}")));
            v.slice_mut(s![.., z * ch..(z + 1) * ch]).assign(&part);
        }
        let expect = &t0 + &v.dot(params.expect("dec.0.msa.wo"));
        for (a, b) in g.value(out).iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mca_matches_direct_matrix_oracle() {
        let cfg = ModelConfig::toy();
        let params = ParamStore::init(&cfg, 11);
        let (t0, e0, f0, p0) = (random(3, 16, 1), random(3, 16, 2), random(4, 16, 3), random(4, 16, 4));
        let mut g = Graph::new();
        let ids: Vec<NodeId> = [&t0, &e0, &f0, &p0].iter().map(|a| g.leaf((*a).clone())).collect();
        let (out, maps) = mca_block(&mut g, Binder::new(&params), ids[0], ids[1], ids[2], ids[3], 0, &cfg).unwrap();

        let tn = layer_norm_plain(&t0);
        let ch = 8;
        let mut cat = Array2::zeros((3, 16));
        for z in 0..2 {
            let sl = s![.., z * ch..(z + 1) * ch];
            let w = |n: &str| params.expect(&format!("dec.0.mca.{n}.{z}")).clone();
            let k = (&f0.slice(sl) + &p0.slice(sl)).dot(&w("wk"));
            let q = (&tn.slice(sl) + &e0.slice(sl)).dot(&w("wq"));
            let v = f0.slice(sl).dot(&w("wv"));
            let a = softmax_rows(&(q.dot(&k.t()) / (ch as f64).sqrt()));
            for (x, y) in a.iter().zip(g.value(maps[z]).iter()) {
                assert!((x - y).abs() < 1e-12);
            }
            cat.slice_mut(sl).assign(&a.dot(&v));
        }
        let expect = &t0 + &cat.dot(params.expect("dec.0.mca.wo"));
        for (a, b) in g.value(out).iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        for &m in &maps {
            for row in g.value(m).rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn mca_single_patch_weight_one() {
        let mut cfg = ModelConfig::toy();
        cfg.image_size = (16, 16);
        let params = ParamStore::init(&cfg, 2);
        let mut g = Graph::new();
        let t = g.leaf(random(5, 16, 1));
        let e = g.leaf(random(5, 16, 2));
        let f = g.leaf(random(1, 16, 3));
        let p = g.leaf(random(1, 16, 4));
        let (_, maps) = mca_block(&mut g, Binder::new(&params), t, e, f, p, 0, &cfg).unwrap();
        for m in maps {
            assert!(g.value(m).iter().all(|&w| w == 1.0));
        }
    }

    #[test]
    fn mca_rejects_mismatched_positional() {
        let cfg = ModelConfig::toy();
        let params = ParamStore::init(&cfg, 2);
        let mut g = Graph::new();
        let t = g.leaf(random(2, 16, 1));
        let f = g.leaf(random(4, 16, 3));
        let p = g.leaf(random(3, 16, 4));
        assert!(matches!(
            mca_block(&mut g, Binder::new(&params), t, t, f, p, 0, &cfg),
            Err(TufaError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn msa_permutation_equivariant() {
        let cfg = ModelConfig::toy();
        let params = ParamStore::init(&cfg, 3);
        let (t0, e0) = (random(5, 16, 5), random(5, 16, 6));
        let perm = [3usize, 0, 4, 1, 2];
        let run = |t0: &Array2<f64>, e0: &Array2<f64>| {
            let mut g = Graph::new();
            let t = g.leaf(t0.clone());
            let e = g.leaf(e0.clone());
            let o = msa_block(&mut g, Binder::new(&params), t, e, 0, &cfg).unwrap();
            g.value(o).clone()
        };
        let base = run(&t0, &e0);
        let permuted = run(&t0.select(ndarray::Axis(0), &perm), &e0.select(ndarray::Axis(0), &perm));
        for (k, &i) in perm.iter().enumerate() {
            for c in 0..16 {
                assert!((permuted[[k, c]] - base[[i, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decoder_permutation_is_bitwise() {
        let cfg = ModelConfig::toy();
        let params = ParamStore::init(&cfg, 4);
        let e0 = random(9, 16, 7);
        let run = |e0: &Array2<f64>| {
            let mut g = Graph::new();
            let e = g.leaf(e0.clone());
            let f = g.leaf(random(4, 16, 8));
            let p = g.leaf(random(4, 16, 9));
            let (t, att) = decoder_forward(&mut g, Binder::new(&params), e, f, p, &cfg).unwrap();
            (g.value(t).clone(), AttentionWeights::from_graph(&g, &att))
        };
        let (base, base_att) = run(&e0);
        let perm = [4usize, 8, 0, 2, 7, 1, 3, 6, 5];
        let (permuted, att) = run(&e0.select(ndarray::Axis(0), &perm));
        assert_eq!(permuted, base.select(ndarray::Axis(0), &perm));
        assert_eq!(att.maps[1][0], base_att.maps[1][0].select(ndarray::Axis(0), &perm));
    }

    #[test]
    fn head_range_and_zero_weights() {
        let cfg = ModelConfig::toy();
        let mut params = ParamStore::init(&cfg, 0);
        let mut g = Graph::new();
        let x = g.leaf(random(7, 16, 1) * 50.0);
        let y = regression_head(&mut g, Binder::new(&params), x);
        assert_eq!(g.shape(y), (7, 2));
        assert!(g.value(y).iter().all(|v| (0.0..=1.0).contains(v)));

        for n in ["head.w1", "head.b1", "head.w2", "head.b2"] {
            let z = Array2::zeros(params.expect(n).dim());
            params.insert(n, z);
        }
        let mut g = Graph::new();
        let x = g.leaf(random(3, 16, 2));
        let y = regression_head(&mut g, Binder::new(&params), x);
        assert!(g.value(y).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn decoder_flops_match_graph_count() {
        let cfg = ModelConfig::toy();
        let params = ParamStore::init(&cfg, 0);
        for n in [1usize, 5, 20] {
            let mut g = Graph::new();
            let e = g.leaf(random(n, 16, 1));
            let f = g.leaf(random(4, 16, 2));
            let p = g.leaf(random(4, 16, 3));
            let before = g.matmul_flops();
            decoder_forward(&mut g, Binder::new(&params), e, f, p, &cfg).unwrap();
            assert_eq!(g.matmul_flops() - before, cfg.decoder_flops(n));
        }
    }
}
