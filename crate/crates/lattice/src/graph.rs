//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every forward operation appends a node holding its value and an `Op`
//! describing how to push gradients back to its parents. Node ids are
//! append-ordered, so the tape is already topologically sorted and a single
//! reverse sweep computes all gradients. All arithmetic is f64.
//!
//! Parameters enter a tape as named leaves; after `backward` the per-name
//! gradients can be collected into a [`GradMap`]. Leaves created with
//! [`Tape::input`] also receive gradients, which is what input-attribution
//! saliency needs.

use std::collections::BTreeMap;

use ndarray::{ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn};

use crate::error::{Error, Result};

pub type NodeId = usize;

/// Epsilon inside layer-norm's variance square root.
pub const LAYER_NORM_EPS: f64 = 1e-6;

const GELU_COEF: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Gradients per parameter name, accumulated in deterministic (sorted) order.
pub type GradMap = BTreeMap<String, ArrayD<f64>>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// Named parameter leaf; the name lives in `Tape::param_nodes`.
    Param,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// (n, d) plus a length-d row vector broadcast over rows.
    AddRow(NodeId, NodeId),
    /// (n, d) scaled per row by a length-n column.
    ScaleRows(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Gelu(NodeId),
    Sigmoid(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    SliceRows {
        x: NodeId,
        start: usize,
        len: usize,
    },
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatRows(NodeId, NodeId),
    ConcatCols(Vec<NodeId>),
    Reshape(NodeId),
    /// (c, h, w) image to (gh*gw, c*p*p) patch rows.
    ExtractPatches {
        x: NodeId,
        patch: usize,
    },
    /// Stride-1, same-padded 2D convolution: x (ci,h,w), w (co,ci,k,k), b (co).
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    /// 2x2 average pooling with stride 2 (trailing odd row/column dropped).
    AvgPool2(NodeId),
    /// (c, h, w) -> (c,)
    GlobalAvgPool(NodeId),
    MeanAll(NodeId),
    /// Single element of a 2D value as a 0-dim scalar.
    Pick {
        x: NodeId,
        row: usize,
        col: usize,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

/// Gradient of the swept scalar with respect to every reachable node.
pub struct Grads {
    by_node: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.by_node.get(id).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: Vec<(String, NodeId)>,
}

fn as2(v: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    v.view().into_dimensionality::<Ix2>().expect("2d value")
}

fn as3(v: &ArrayD<f64>) -> ndarray::ArrayView3<'_, f64> {
    v.view().into_dimensionality::<Ix3>().expect("3d value")
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id].value
    }

    /// Scalar value of a 0-dim node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.len(), 1);
        v.iter().copied().next().unwrap()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    /// Gradient-tracked leaf (model inputs, crafted intermediate features).
    pub fn input(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Leaf bound to a parameter name, so its gradient lands in the GradMap.
    pub fn param(&mut self, name: &str, value: ArrayD<f64>) -> NodeId {
        let id = self.push(value, Op::Param);
        self.param_nodes.push((name.to_string(), id));
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value - &self.nodes[b].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value * &self.nodes[b].value;
        self.push(v, Op::Mul(a, b))
    }

    /// `(n, d) + row(d)` with the row broadcast over every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let av = as2(&self.nodes[a].value);
        let rv = self.nodes[row]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("row vector");
        let mut out = av.to_owned();
        for mut r in out.rows_mut() {
            r += &rv;
        }
        self.push(out.into_dyn(), Op::AddRow(a, row))
    }

    /// `(n, d) * col(n, 1)`: row i of `a` scaled by `s[i, 0]`.
    pub fn scale_rows(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let av = as2(&self.nodes[a].value);
        let sv = as2(&self.nodes[s].value);
        assert_eq!(sv.ncols(), 1, "scale_rows expects an (n,1) column");
        assert_eq!(av.nrows(), sv.nrows());
        let mut out = av.to_owned();
        for (i, mut r) in out.rows_mut().into_iter().enumerate() {
            r *= sv[[i, 0]];
        }
        self.push(out.into_dyn(), Op::ScaleRows(a, s))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = as2(&self.nodes[a].value);
        let bv = as2(&self.nodes[b].value);
        let v = av.dot(&bv);
        self.push(v.into_dyn(), Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = as2(&self.nodes[a].value).t().to_owned();
        self.push(v.into_dyn(), Op::Transpose(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[a].value * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let av = as2(&self.nodes[a].value);
        let mut out = av.to_owned();
        for mut r in out.rows_mut() {
            let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            r.mapv_inplace(|x| (x - m).exp());
            let s = r.sum();
            r.mapv_inplace(|x| x / s);
        }
        self.push(out.into_dyn(), Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let av = as2(&self.nodes[a].value);
        let mut out = av.to_owned();
        for mut r in out.rows_mut() {
            let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + r.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            r.mapv_inplace(|x| x - lse);
        }
        self.push(out.into_dyn(), Op::LogSoftmaxRows(a))
    }

    /// Row-wise layer normalization over the last axis with affine gamma/beta.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = as2(&self.nodes[x].value);
        let gv = self.nodes[gamma]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("gamma");
        let bv = self.nodes[beta]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("beta");
        let d = xv.ncols() as f64;
        let mut out = xv.to_owned();
        for mut r in out.rows_mut() {
            let mean = r.sum() / d;
            let var = r.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (j, v) in r.iter_mut().enumerate() {
                *v = (*v - mean) * inv * gv[j] + bv[j];
            }
        }
        self.push(out.into_dyn(), Op::LayerNorm { x, gamma, beta })
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = as2(&self.nodes[x].value);
        let v = xv.slice(ndarray::s![start..start + len, ..]).to_owned();
        self.push(v.into_dyn(), Op::SliceRows { x, start, len })
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = as2(&self.nodes[x].value);
        let v = xv.slice(ndarray::s![.., start..start + len]).to_owned();
        self.push(v.into_dyn(), Op::SliceCols { x, start, len })
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = as2(&self.nodes[a].value);
        let bv = as2(&self.nodes[b].value);
        let v = ndarray::concatenate(Axis(0), &[av, bv]).expect("concat rows");
        self.push(v.into_dyn(), Op::ConcatRows(a, b))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| as2(&self.nodes[p].value)).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat cols");
        self.push(v.into_dyn(), Op::ConcatCols(parts.to_vec()))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let data: Vec<f64> = self.nodes[x].value.iter().copied().collect();
        let v = ArrayD::from_shape_vec(IxDyn(shape), data).expect("reshape size");
        self.push(v, Op::Reshape(x))
    }

    /// (c, h, w) -> (gh*gw, c*p*p); patches row-major over the grid, features
    /// ordered channel-major then row-major within the patch.
    pub fn extract_patches(&mut self, x: NodeId, patch: usize) -> NodeId {
        let xv = as3(&self.nodes[x].value);
        let (c, h, w) = (xv.dim().0, xv.dim().1, xv.dim().2);
        assert!(h % patch == 0 && w % patch == 0, "image not divisible by patch");
        let (gh, gw) = (h / patch, w / patch);
        let mut out = ndarray::Array2::<f64>::zeros((gh * gw, c * patch * patch));
        for py in 0..gh {
            for px in 0..gw {
                let row = py * gw + px;
                for ch in 0..c {
                    for dy in 0..patch {
                        for dx in 0..patch {
                            out[[row, ch * patch * patch + dy * patch + dx]] =
                                xv[[ch, py * patch + dy, px * patch + dx]];
                        }
                    }
                }
            }
        }
        self.push(out.into_dyn(), Op::ExtractPatches { x, patch })
    }

    /// Stride-1 convolution with same padding (k odd). x (ci,h,w), w (co,ci,k,k), b (co,).
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xv = as3(&self.nodes[x].value);
        let wv = self.nodes[w].value.view();
        let bv = self.nodes[b]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("conv bias");
        let (ci, h, wd) = xv.dim();
        let wd4 = wv.shape();
        let (co, wci, k) = (wd4[0], wd4[1], wd4[2]);
        assert_eq!(ci, wci, "conv channel mismatch");
        assert_eq!(k, wd4[3], "square kernels only");
        assert_eq!(k % 2, 1, "odd kernel size required for same padding");
        let pad = k / 2;
        let mut out = ndarray::Array3::<f64>::zeros((co, h, wd));
        for o in 0..co {
            for y in 0..h {
                for xq in 0..wd {
                    let mut acc = bv[o];
                    for i in 0..ci {
                        for ky in 0..k {
                            let sy = y + ky;
                            if sy < pad || sy - pad >= h {
                                continue;
                            }
                            for kx in 0..k {
                                let sx = xq + kx;
                                if sx < pad || sx - pad >= wd {
                                    continue;
                                }
                                acc += wv[[o, i, ky, kx]] * xv[[i, sy - pad, sx - pad]];
                            }
                        }
                    }
                    out[[o, y, xq]] = acc;
                }
            }
        }
        self.push(out.into_dyn(), Op::Conv2d { x, w, b })
    }

    /// 2x2/stride-2 average pooling; inputs with h or w < 2 pass through.
    pub fn avg_pool2(&mut self, x: NodeId) -> NodeId {
        let xv = as3(&self.nodes[x].value);
        let (c, h, w) = xv.dim();
        if h < 2 || w < 2 {
            let v = xv.to_owned();
            return self.push(v.into_dyn(), Op::Reshape(x));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = ndarray::Array3::<f64>::zeros((c, oh, ow));
        for ch in 0..c {
            for y in 0..oh {
                for xq in 0..ow {
                    out[[ch, y, xq]] = 0.25
                        * (xv[[ch, 2 * y, 2 * xq]]
                            + xv[[ch, 2 * y, 2 * xq + 1]]
                            + xv[[ch, 2 * y + 1, 2 * xq]]
                            + xv[[ch, 2 * y + 1, 2 * xq + 1]]);
                }
            }
        }
        self.push(out.into_dyn(), Op::AvgPool2(x))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let xv = as3(&self.nodes[x].value);
        let (c, h, w) = xv.dim();
        let mut out = ndarray::Array1::<f64>::zeros(c);
        for ch in 0..c {
            out[ch] = xv.index_axis(Axis(0), ch).sum() / (h * w) as f64;
        }
        self.push(out.into_dyn(), Op::GlobalAvgPool(x))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.mean().unwrap();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), v),
            Op::MeanAll(x),
        )
    }

    pub fn pick(&mut self, x: NodeId, row: usize, col: usize) -> NodeId {
        let v = as2(&self.nodes[x].value)[[row, col]];
        self.push(ArrayD::from_elem(IxDyn(&[]), v), Op::Pick { x, row, col })
    }

    /// Reverse sweep from a scalar (0-dim) root.
    pub fn backward(&self, root: NodeId) -> Result<Grads> {
        if self.nodes[root].value.len() != 1 {
            return Err(Error::Internal(
                "backward root must be a scalar node".into(),
            ));
        }
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(ArrayD::from_elem(self.nodes[root].value.raw_dim(), 1.0));

        for id in (0..=root).rev() {
            let Some(g) = grads[id].clone() else { continue };
            match &self.nodes[id].op {
                Op::Leaf | Op::Param => {}
                Op::Add(a, b) => {
                    accum(&mut grads, *a, g.clone());
                    accum(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accum(&mut grads, *a, g.clone());
                    accum(&mut grads, *b, -g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.nodes[*b].value;
                    let gb = &g * &self.nodes[*a].value;
                    accum(&mut grads, *a, ga);
                    accum(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let g2 = as2(&g);
                    accum(&mut grads, *a, g.clone());
                    accum(&mut grads, *row, g2.sum_axis(Axis(0)).into_dyn());
                }
                Op::ScaleRows(a, s) => {
                    let g2 = as2(&g);
                    let av = as2(&self.nodes[*a].value);
                    let sv = as2(&self.nodes[*s].value);
                    let mut ga = g2.to_owned();
                    for (i, mut r) in ga.rows_mut().into_iter().enumerate() {
                        r *= sv[[i, 0]];
                    }
                    let mut gs = ndarray::Array2::<f64>::zeros((av.nrows(), 1));
                    for i in 0..av.nrows() {
                        gs[[i, 0]] = g2.row(i).dot(&av.row(i));
                    }
                    accum(&mut grads, *a, ga.into_dyn());
                    accum(&mut grads, *s, gs.into_dyn());
                }
                Op::Matmul(a, b) => {
                    let g2 = as2(&g);
                    let av = as2(&self.nodes[*a].value);
                    let bv = as2(&self.nodes[*b].value);
                    accum(&mut grads, *a, g2.dot(&bv.t()).into_dyn());
                    accum(&mut grads, *b, av.t().dot(&g2).into_dyn());
                }
                Op::Transpose(a) => {
                    accum(&mut grads, *a, as2(&g).t().to_owned().into_dyn());
                }
                Op::Scale(a, c) => {
                    accum(&mut grads, *a, &g * *c);
                }
                Op::Relu(a) => {
                    let mask = self.nodes[*a].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    accum(&mut grads, *a, &g * &mask);
                }
                Op::Gelu(a) => {
                    let d = self.nodes[*a].value.mapv(gelu_grad);
                    accum(&mut grads, *a, &g * &d);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[id].value;
                    let d = y.mapv(|s| s * (1.0 - s));
                    accum(&mut grads, *a, &g * &d);
                }
                Op::SoftmaxRows(a) => {
                    let y = as2(&self.nodes[id].value);
                    let g2 = as2(&g);
                    let mut ga = g2.to_owned();
                    for (i, mut r) in ga.rows_mut().into_iter().enumerate() {
                        let dot = g2.row(i).dot(&y.row(i));
                        for (j, v) in r.iter_mut().enumerate() {
                            *v = y[[i, j]] * (g2[[i, j]] - dot);
                        }
                    }
                    accum(&mut grads, *a, ga.into_dyn());
                }
                Op::LogSoftmaxRows(a) => {
                    let y = as2(&self.nodes[id].value);
                    let g2 = as2(&g);
                    let mut ga = g2.to_owned();
                    for (i, mut r) in ga.rows_mut().into_iter().enumerate() {
                        let gsum = g2.row(i).sum();
                        for (j, v) in r.iter_mut().enumerate() {
                            *v = g2[[i, j]] - y[[i, j]].exp() * gsum;
                        }
                    }
                    accum(&mut grads, *a, ga.into_dyn());
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let xv = as2(&self.nodes[*x].value);
                    let gv = self.nodes[*gamma]
                        .value
                        .view()
                        .into_dimensionality::<Ix1>()
                        .unwrap();
                    let g2 = as2(&g);
                    let (n, d) = xv.dim();
                    let df = d as f64;
                    let mut gx = ndarray::Array2::<f64>::zeros((n, d));
                    let mut ggamma = ndarray::Array1::<f64>::zeros(d);
                    let mut gbeta = ndarray::Array1::<f64>::zeros(d);
                    for i in 0..n {
                        let row = xv.row(i);
                        let mean = row.sum() / df;
                        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / df;
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        // xhat and the two reductions the LN gradient needs
                        let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                        let dxhat: Vec<f64> =
                            (0..d).map(|j| g2[[i, j]] * gv[j]).collect();
                        let mean_dxhat = dxhat.iter().sum::<f64>() / df;
                        let mean_dxhat_xhat = dxhat
                            .iter()
                            .zip(&xhat)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / df;
                        for j in 0..d {
                            gx[[i, j]] =
                                inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                            ggamma[j] += g2[[i, j]] * xhat[j];
                            gbeta[j] += g2[[i, j]];
                        }
                    }
                    accum(&mut grads, *x, gx.into_dyn());
                    accum(&mut grads, *gamma, ggamma.into_dyn());
                    accum(&mut grads, *beta, gbeta.into_dyn());
                }
                Op::SliceRows { x, start, len } => {
                    let xv = as2(&self.nodes[*x].value);
                    let g2 = as2(&g);
                    let mut gx = ndarray::Array2::<f64>::zeros(xv.dim());
                    gx.slice_mut(ndarray::s![*start..*start + *len, ..]).assign(&g2);
                    accum(&mut grads, *x, gx.into_dyn());
                }
                Op::SliceCols { x, start, len } => {
                    let xv = as2(&self.nodes[*x].value);
                    let g2 = as2(&g);
                    let mut gx = ndarray::Array2::<f64>::zeros(xv.dim());
                    gx.slice_mut(ndarray::s![.., *start..*start + *len]).assign(&g2);
                    accum(&mut grads, *x, gx.into_dyn());
                }
                Op::ConcatRows(a, b) => {
                    let g2 = as2(&g);
                    let na = as2(&self.nodes[*a].value).nrows();
                    accum(
                        &mut grads,
                        *a,
                        g2.slice(ndarray::s![..na, ..]).to_owned().into_dyn(),
                    );
                    accum(
                        &mut grads,
                        *b,
                        g2.slice(ndarray::s![na.., ..]).to_owned().into_dyn(),
                    );
                }
                Op::ConcatCols(parts) => {
                    let g2 = as2(&g);
                    let mut off = 0;
                    for &p in parts {
                        let w = as2(&self.nodes[p].value).ncols();
                        accum(
                            &mut grads,
                            p,
                            g2.slice(ndarray::s![.., off..off + w]).to_owned().into_dyn(),
                        );
                        off += w;
                    }
                }
                Op::Reshape(x) => {
                    let shape = self.nodes[*x].value.shape().to_vec();
                    let data: Vec<f64> = g.iter().copied().collect();
                    accum(
                        &mut grads,
                        *x,
                        ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap(),
                    );
                }
                Op::ExtractPatches { x, patch } => {
                    let xv = as3(&self.nodes[*x].value);
                    let (c, h, w) = xv.dim();
                    let (gh, gw) = (h / patch, w / patch);
                    let g2 = as2(&g);
                    let mut gx = ndarray::Array3::<f64>::zeros((c, h, w));
                    for py in 0..gh {
                        for px in 0..gw {
                            let row = py * gw + px;
                            for ch in 0..c {
                                for dy in 0..*patch {
                                    for dx in 0..*patch {
                                        gx[[ch, py * patch + dy, px * patch + dx]] +=
                                            g2[[row, ch * patch * patch + dy * patch + dx]];
                                    }
                                }
                            }
                        }
                    }
                    accum(&mut grads, *x, gx.into_dyn());
                }
                Op::Conv2d { x, w, b } => {
                    let xv = as3(&self.nodes[*x].value);
                    let wv = &self.nodes[*w].value;
                    let g3 = as3(&g);
                    let (ci, h, wd) = xv.dim();
                    let ws = wv.shape();
                    let (co, k) = (ws[0], ws[2]);
                    let pad = k / 2;
                    let mut gx = ndarray::Array3::<f64>::zeros((ci, h, wd));
                    let mut gw = ArrayD::<f64>::zeros(wv.raw_dim());
                    let mut gb = ndarray::Array1::<f64>::zeros(co);
                    for o in 0..co {
                        for y in 0..h {
                            for xq in 0..wd {
                                let go = g3[[o, y, xq]];
                                gb[o] += go;
                                for i in 0..ci {
                                    for ky in 0..k {
                                        let sy = y + ky;
                                        if sy < pad || sy - pad >= h {
                                            continue;
                                        }
                                        for kx in 0..k {
                                            let sx = xq + kx;
                                            if sx < pad || sx - pad >= wd {
                                                continue;
                                            }
                                            gw[[o, i, ky, kx]] += go * xv[[i, sy - pad, sx - pad]];
                                            gx[[i, sy - pad, sx - pad]] +=
                                                go * wv[[o, i, ky, kx]];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    accum(&mut grads, *x, gx.into_dyn());
                    accum(&mut grads, *w, gw);
                    accum(&mut grads, *b, gb.into_dyn());
                }
                Op::AvgPool2(x) => {
                    let xv = as3(&self.nodes[*x].value);
                    let g3 = as3(&g);
                    let (c, h, w) = xv.dim();
                    let mut gx = ndarray::Array3::<f64>::zeros((c, h, w));
                    let (oh, ow) = (h / 2, w / 2);
                    for ch in 0..c {
                        for y in 0..oh {
                            for xq in 0..ow {
                                let gq = 0.25 * g3[[ch, y, xq]];
                                gx[[ch, 2 * y, 2 * xq]] += gq;
                                gx[[ch, 2 * y, 2 * xq + 1]] += gq;
                                gx[[ch, 2 * y + 1, 2 * xq]] += gq;
                                gx[[ch, 2 * y + 1, 2 * xq + 1]] += gq;
                            }
                        }
                    }
                    accum(&mut grads, *x, gx.into_dyn());
                }
                Op::GlobalAvgPool(x) => {
                    let xv = as3(&self.nodes[*x].value);
                    let (c, h, w) = xv.dim();
                    let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                    let mut gx = ndarray::Array3::<f64>::zeros((c, h, w));
                    let inv = 1.0 / (h * w) as f64;
                    for ch in 0..c {
                        gx.index_axis_mut(Axis(0), ch).fill(g1[ch] * inv);
                    }
                    accum(&mut grads, *x, gx.into_dyn());
                }
                Op::MeanAll(x) => {
                    let n = self.nodes[*x].value.len() as f64;
                    let gs = g.iter().copied().next().unwrap() / n;
                    let gx = ArrayD::from_elem(self.nodes[*x].value.raw_dim(), gs);
                    accum(&mut grads, *x, gx);
                }
                Op::Pick { x, row, col } => {
                    let xv = as2(&self.nodes[*x].value);
                    let gs = g.iter().copied().next().unwrap();
                    let mut gx = ndarray::Array2::<f64>::zeros(xv.dim());
                    gx[[*row, *col]] = gs;
                    accum(&mut grads, *x, gx.into_dyn());
                }
            }
        }
        Ok(Grads { by_node: grads })
    }

    /// Collect parameter-leaf gradients by name; params the sweep never
    /// reached get no entry. Arrays are normalized to standard layout so
    /// consumers can rely on `as_slice`.
    pub fn param_grads(&self, grads: &Grads) -> GradMap {
        let mut out = GradMap::new();
        for (name, id) in &self.param_nodes {
            if let Some(g) = grads.get(*id) {
                let std_g = if g.is_standard_layout() {
                    g.clone()
                } else {
                    g.as_standard_layout().to_owned()
                };
                match out.entry(name.clone()) {
                    std::collections::btree_map::Entry::Vacant(e) => {
                        e.insert(std_g);
                    }
                    std::collections::btree_map::Entry::Occupied(mut e) => {
                        let merged = e.get() as &ArrayD<f64> + &std_g;
                        *e.get_mut() = merged;
                    }
                }
            }
        }
        out
    }
}

fn accum(grads: &mut [Option<ArrayD<f64>>], id: NodeId, delta: ArrayD<f64>) {
    match &mut grads[id] {
        Some(existing) => *existing = existing.clone() + delta,
        slot @ None => *slot = Some(delta),
    }
}

/// Relative agreement between an analytic derivative and a central
/// finite difference. The 1e-6 denominator floor keeps near-zero gradients
/// — where FD roundoff (~1e-11 at step 1e-5) dominates any true value —
/// from failing a relative test they cannot meaningfully take.
pub fn fd_agrees(analytic: f64, numeric: f64, tol: f64) -> bool {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom < tol
}

/// View of an ArrayD checked to be 2-D (shared with model code).
pub fn view2(v: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    as2(v)
}

/// View of an ArrayD checked to be 3-D.
pub fn view3(v: &ArrayD<f64>) -> ndarray::ArrayView3<'_, f64> {
    as3(v)
}
