//! Minimal reverse-mode automatic differentiation over `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and enough context to push gradients back to its inputs. Graphs are
//! built per forward pass and thrown away after [`Graph::backward`].

use std::collections::HashMap;

use ndarray::{s, Array2, Axis};

use crate::prompt::PromptCodecConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Transpose(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(NodeId),
    Gelu(NodeId),
    Sigmoid(NodeId),
    SliceCols(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    GatherRows(NodeId, Vec<usize>),
    SinCos(NodeId, PromptCodecConfig),
    MaskedL1Sum {
        pred: NodeId,
        sign: Array2<f64>,
    },
    Sum(Vec<NodeId>),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    named: HashMap<String, NodeId>,
    matmul_flops: u64,
}

/// Gradients indexed by node.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Array2<f64>> {
        self.grads[id.0].take()
    }
}

// GELU, tanh approximation.
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = GELU_K * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.dim()
    }

    /// Constant or input leaf.
    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Leaf registered under `name`; later calls with the same name return the
    /// same node so a shared parameter accumulates one gradient.
    pub fn named_leaf(&mut self, name: &str, value: impl FnOnce() -> Array2<f64>) -> NodeId {
        if let Some(&id) = self.named.get(name) {
            return id;
        }
        let id = self.leaf(value());
        self.named.insert(name.to_string(), id);
        id
    }

    pub fn named_nodes(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.named.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Floating point operations (2 per multiply-add) spent in `matmul`
    /// forward calls so far.
    pub fn matmul_flops(&self) -> u64 {
        self.matmul_flops
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (n, k) = self.shape(a);
        let m = self.shape(b).1;
        self.matmul_flops += 2 * (n * k * m) as u64;
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// `a (n×m) + row (1×m)` broadcast over rows.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (each 1×m).
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = self.value(x);
        let (n, m) = xv.dim();
        let mut xhat = Array2::zeros((n, m));
        let mut inv_std = Vec::with_capacity(n);
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..m {
                xhat[[i, j]] = (row[j] - mean) * is;
            }
            inv_std.push(is);
        }
        let v = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    /// Columns `start .. start + len`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let v = self.value(a).select(Axis(0), idx);
        self.push(v, Op::GatherRows(a, idx.to_vec()))
    }

    /// Sinusoidal prompt encoding of an `N × 2` matrix of plane points.
    pub fn sincos_encode(&mut self, points: NodeId, config: PromptCodecConfig) -> NodeId {
        let pv = self.value(points);
        let (n, _) = pv.dim();
        let c = config.channels;
        let half = c / 2;
        let mut out = Array2::zeros((n, c));
        for i in 0..n {
            for axis in 0..2 {
                let v = pv[[i, axis]];
                for k in 0..config.frequencies() {
                    let (s, co) = (v / config.wavelength(k)).sin_cos();
                    out[[i, axis * half + 2 * k]] = s;
                    out[[i, axis * half + 2 * k + 1]] = co;
                }
            }
        }
        self.push(out, Op::SinCos(points, config))
    }

    /// `Σ_{masked rows} |pred − target|₁` as a 1×1 node. Rows with
    /// `mask[i] == false` contribute nothing and get zero gradient.
    pub fn masked_l1_sum(&mut self, pred: NodeId, target: &Array2<f64>, mask: &[bool]) -> NodeId {
        let pv = self.value(pred);
        assert_eq!(pv.dim(), target.dim(), "masked_l1_sum: shape mismatch");
        assert_eq!(mask.len(), pv.nrows(), "masked_l1_sum: mask length");
        let mut sign = Array2::zeros(pv.dim());
        let mut total = 0.0;
        for i in 0..pv.nrows() {
            if !mask[i] {
                continue;
            }
            for j in 0..pv.ncols() {
                let d = pv[[i, j]] - target[[i, j]];
                total += d.abs();
                sign[[i, j]] = if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                };
            }
        }
        self.push(Array2::from_elem((1, 1), total), Op::MaskedL1Sum { pred, sign })
    }

    /// Elementwise sum of same-shaped nodes.
    pub fn sum(&mut self, parts: &[NodeId]) -> NodeId {
        let mut v = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            v += self.value(p);
        }
        self.push(v, Op::Sum(parts.to_vec()))
    }

    /// Back-propagates from `output`, seeding its gradient with ones.
    pub fn backward(&self, output: NodeId) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Array2::ones(self.value(output).dim()));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let mut acc = |id: NodeId, d: Array2<f64>| match &mut grads[id.0] {
            Some(existing) => *existing += &d,
            slot @ None => *slot = Some(d),
        };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                acc(*a, g.dot(&bv.t()));
                acc(*b, av.t().dot(g));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Scale(a, k) => acc(*a, g * *k),
            Op::Transpose(a) => acc(*a, g.t().to_owned()),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma);
                acc(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                acc(*gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                let dxhat = g * gv;
                let (n, m) = g.dim();
                let mut dx = Array2::zeros((n, m));
                let mf = m as f64;
                for i in 0..n {
                    let row = dxhat.row(i);
                    let xh = xhat.row(i);
                    let mean_d = row.sum() / mf;
                    let mean_dx = row.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / mf;
                    for j in 0..m {
                        dx[[i, j]] = inv_std[i] * (row[j] - mean_d - xh[j] * mean_dx);
                    }
                }
                acc(*x, dx);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[idx].value;
                let mut d = Array2::zeros(y.dim());
                for i in 0..y.nrows() {
                    let dot: f64 = y.row(i).iter().zip(g.row(i).iter()).map(|(p, q)| p * q).sum();
                    for j in 0..y.ncols() {
                        d[[i, j]] = y[[i, j]] * (g[[i, j]] - dot);
                    }
                }
                acc(*a, d);
            }
            Op::Gelu(a) => {
                let xv = self.value(*a);
                let mut d = g.clone();
                d.zip_mut_with(xv, |gi, &x| *gi *= gelu_grad(x));
                acc(*a, d);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].value;
                let mut d = g.clone();
                d.zip_mut_with(y, |gi, &s| *gi *= s * (1.0 - s));
                acc(*a, d);
            }
            Op::SliceCols(a, start) => {
                let mut d = Array2::zeros(self.value(*a).dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    acc(p, g.slice(s![.., col..col + w]).to_owned());
                    col += w;
                }
            }
            Op::GatherRows(a, rows) => {
                let mut d = Array2::zeros(self.value(*a).dim());
                for (k, &r) in rows.iter().enumerate() {
                    let mut dst = d.row_mut(r);
                    dst += &g.row(k);
                }
                acc(*a, d);
            }
            Op::SinCos(points, config) => {
                let pv = self.value(*points);
                let half = config.channels / 2;
                let mut d = Array2::zeros(pv.dim());
                for i in 0..pv.nrows() {
                    for axis in 0..2 {
                        let v = pv[[i, axis]];
                        let mut total = 0.0;
                        for k in 0..config.frequencies() {
                            let w = config.wavelength(k);
                            let (s, co) = (v / w).sin_cos();
                            total += g[[i, axis * half + 2 * k]] * co / w;
                            total -= g[[i, axis * half + 2 * k + 1]] * s / w;
                        }
                        d[[i, axis]] = total;
                    }
                }
                acc(*points, d);
            }
            Op::MaskedL1Sum { pred, sign } => acc(*pred, sign * g[[0, 0]]),
            Op::Sum(parts) => {
                for &p in parts {
                    acc(p, g.clone());
                }
            }
        }
    }
}
