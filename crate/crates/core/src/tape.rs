//! Minimal reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records one forward pass as a flat list of nodes. Every
//! operation computes its value eagerly and stores a backward closure that
//! turns the output cotangent into parent cotangents. [`Tape::backward`]
//! walks the list in reverse (insertion order is already topological, since
//! an operation can only consume existing nodes) and accumulates gradients
//! for every node, leaves included.
//!
//! The operation set is exactly what the quality model needs: dense linear
//! algebra, convolutions, the attention primitives (masked row softmax,
//! rank-one logit sums, masked cosine similarity), normalization, and shape
//! plumbing. Everything runs at f64; there is no broadcasting beyond the few
//! explicit `*_bias`/`scale_*` forms, which keeps every backward rule short
//! and auditable.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId(usize);

type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<VarId>,
    /// None for leaves and constants.
    backward: Option<BackwardFn>,
}

/// Gradients produced by [`Tape::backward`], indexable by [`VarId`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the seeded output with respect to `id`, if any path
    /// reached it.
    #[must_use]
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Like [`Gradients::get`] but materializes zeros of the given shape for
    /// unreached nodes.
    #[must_use]
    pub fn get_or_zeros(&self, id: VarId, shape: &[usize]) -> Tensor {
        match self.grads[id.0].as_ref() {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

/// One recorded forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Name-addressed parameter nodes on a tape, so model stages can look up
/// their tensors without owning the registry.
#[derive(Default)]
pub struct ParamIds {
    ids: BTreeMap<String, VarId>,
}

impl ParamIds {
    #[must_use]
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, id: VarId) {
        self.ids.insert(name.into(), id);
    }

    /// Node for a named parameter; absence is a configuration error.
    pub fn get(&self, name: &str) -> Result<VarId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing model parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, VarId)> {
        self.ids.iter().map(|(n, &i)| (n.as_str(), i))
    }
}

// ==================== small dense kernels ====================

/// a[m,k] * b[k,n]
fn mm(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let n = b.cols();
    assert_eq!(k, b.rows(), "matmul inner dimensions must agree");
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let av = a.at2(i, l);
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b.at2(l, j);
            }
        }
    }
    Tensor::from_vec(&[m, n], out).expect("matmul shape")
}

/// a[m,k] * b[n,k]^T
fn mm_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let n = b.rows();
    assert_eq!(k, b.cols(), "matmul_nt inner dimensions must agree");
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a.at2(i, l) * b.at2(j, l);
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::from_vec(&[m, n], out).expect("matmul_nt shape")
}

/// a[m,k]^T * b[m,n]
fn mm_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let n = b.cols();
    assert_eq!(m, b.rows(), "matmul_tn outer dimensions must agree");
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        for l in 0..k {
            let av = a.at2(i, l);
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[l * n + j] += av * b.at2(i, j);
            }
        }
    }
    Tensor::from_vec(&[k, n], out).expect("matmul_tn shape")
}

fn unary_map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = x.data().iter().map(|&v| f(v)).collect();
    Tensor::from_vec(x.shape(), data).expect("unary shape")
}

/// Standard normal CDF via the exact erf form.
#[inline]
fn gauss_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Standard normal density.
#[inline]
fn gauss_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

impl Tape {
    #[must_use]
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, parents: Vec<VarId>, backward: Option<BackwardFn>) -> VarId {
        self.nodes.push(Node { value, parents, backward });
        VarId(self.nodes.len() - 1)
    }

    /// Inserts an input node. Leaves and constants are identical on the tape;
    /// the caller decides whose gradients it cares about.
    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.push(value, vec![], None)
    }

    /// Inserts every tensor of a named parameter map as a leaf.
    pub fn leaf_params(&mut self, params: &BTreeMap<String, Tensor>) -> ParamIds {
        let mut ids = ParamIds::new();
        for (name, tensor) in params {
            let id = self.leaf(tensor.clone());
            ids.insert(name.clone(), id);
        }
        ids
    }

    /// Value of any node.
    #[must_use]
    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    // ==================== elementwise arithmetic ====================

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_vec(ta.shape(), data).expect("add shape");
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|g, _, _| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "sub shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::from_vec(ta.shape(), data).expect("sub shape");
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|g, _, _| {
                let mut neg = g.clone();
                neg.scale_inplace(-1.0);
                vec![g.clone(), neg]
            })),
        )
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_vec(ta.shape(), data).expect("mul shape");
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|g, parents, _| {
                let (pa, pb) = (parents[0], parents[1]);
                let da = g.data().iter().zip(pb.data()).map(|(gv, bv)| gv * bv).collect();
                let db = g.data().iter().zip(pa.data()).map(|(gv, av)| gv * av).collect();
                vec![
                    Tensor::from_vec(pa.shape(), da).expect("mul grad"),
                    Tensor::from_vec(pb.shape(), db).expect("mul grad"),
                ]
            })),
        )
    }

    pub fn scale(&mut self, a: VarId, factor: f64) -> VarId {
        let value = unary_map(self.value(a), |v| v * factor);
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g, _, _| {
                let mut d = g.clone();
                d.scale_inplace(factor);
                vec![d]
            })),
        )
    }

    // ==================== linear algebra ====================

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let value = mm(self.value(a), self.value(b));
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|g, parents, _| {
                vec![mm_nt(g, parents[1]), mm_tn(parents[0], g)]
            })),
        )
    }

    /// `a * b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: VarId, b: VarId) -> VarId {
        let value = mm_nt(self.value(a), self.value(b));
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|g, parents, _| {
                vec![mm(g, parents[1]), mm_tn(g, parents[0])]
            })),
        )
    }

    pub fn transpose(&mut self, a: VarId) -> VarId {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = t.at2(i, j);
            }
        }
        let value = Tensor::from_vec(&[c, r], data).expect("transpose shape");
        self.push(
            value,
            vec![a],
            Some(Box::new(|g, parents, _| {
                let (r, c) = (parents[0].rows(), parents[0].cols());
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = g.at2(j, i);
                    }
                }
                vec![Tensor::from_vec(&[r, c], d).expect("transpose grad")]
            })),
        )
    }

    /// Adds a bias row vector `b[n]` to every row of `x[m,n]`.
    pub fn add_row_bias(&mut self, x: VarId, b: VarId) -> VarId {
        let (tx, tb) = (self.value(x), self.value(b));
        assert_eq!(tb.rank(), 1, "bias must be rank 1");
        assert_eq!(tx.cols(), tb.shape()[0], "bias length must match columns");
        let (m, n) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                data.push(tx.at2(i, j) + tb.data()[j]);
            }
        }
        let value = Tensor::from_vec(&[m, n], data).expect("add_row_bias shape");
        self.push(
            value,
            vec![x, b],
            Some(Box::new(|g, parents, _| {
                let (m, n) = (g.rows(), g.cols());
                let mut db = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        db[j] += g.at2(i, j);
                    }
                }
                let _ = parents;
                vec![g.clone(), Tensor::from_vec(&[n], db).expect("bias grad")]
            })),
        )
    }

    /// Rank-one logit table: `out[i][j] = s[i] + t[j]` for column vectors
    /// `s[v,1]`, `t[v,1]`.
    pub fn outer_sum(&mut self, s: VarId, t: VarId) -> VarId {
        let (ts, tt) = (self.value(s), self.value(t));
        assert_eq!(ts.cols(), 1, "outer_sum wants column vectors");
        assert_eq!(tt.cols(), 1, "outer_sum wants column vectors");
        let v = ts.rows();
        assert_eq!(tt.rows(), v, "outer_sum length mismatch");
        let mut data = Vec::with_capacity(v * v);
        for i in 0..v {
            for j in 0..v {
                data.push(ts.data()[i] + tt.data()[j]);
            }
        }
        let value = Tensor::from_vec(&[v, v], data).expect("outer_sum shape");
        self.push(
            value,
            vec![s, t],
            Some(Box::new(|g, _, _| {
                let v = g.rows();
                let mut ds = vec![0.0; v];
                let mut dt = vec![0.0; v];
                for i in 0..v {
                    for j in 0..v {
                        let gv = g.at2(i, j);
                        ds[i] += gv;
                        dt[j] += gv;
                    }
                }
                vec![
                    Tensor::from_vec(&[v, 1], ds).expect("outer_sum grad"),
                    Tensor::from_vec(&[v, 1], dt).expect("outer_sum grad"),
                ]
            })),
        )
    }

    // ==================== activations ====================

    pub fn relu(&mut self, x: VarId) -> VarId {
        let value = unary_map(self.value(x), |v| if v > 0.0 { v } else { 0.0 });
        self.push(
            value,
            vec![x],
            Some(Box::new(|g, parents, _| {
                let d = g
                    .data()
                    .iter()
                    .zip(parents[0].data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                vec![Tensor::from_vec(parents[0].shape(), d).expect("relu grad")]
            })),
        )
    }

    pub fn leaky_relu(&mut self, x: VarId, slope: f64) -> VarId {
        let value = unary_map(self.value(x), |v| if v > 0.0 { v } else { slope * v });
        self.push(
            value,
            vec![x],
            Some(Box::new(move |g, parents, _| {
                let d = g
                    .data()
                    .iter()
                    .zip(parents[0].data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { slope * *gv })
                    .collect();
                vec![Tensor::from_vec(parents[0].shape(), d).expect("leaky_relu grad")]
            })),
        )
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        let value = unary_map(self.value(x), |v| 1.0 / (1.0 + (-v).exp()));
        self.push(
            value,
            vec![x],
            Some(Box::new(|g, _, out| {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(gv, yv)| gv * yv * (1.0 - yv))
                    .collect();
                vec![Tensor::from_vec(out.shape(), d).expect("sigmoid grad")]
            })),
        )
    }

    /// GELU with the exact erf formulation: `x * Phi(x)`.
    pub fn gelu(&mut self, x: VarId) -> VarId {
        let value = unary_map(self.value(x), |v| v * gauss_cdf(v));
        self.push(
            value,
            vec![x],
            Some(Box::new(|g, parents, _| {
                let d = g
                    .data()
                    .iter()
                    .zip(parents[0].data())
                    .map(|(gv, xv)| gv * (gauss_cdf(*xv) + *xv * gauss_pdf(*xv)))
                    .collect();
                vec![Tensor::from_vec(parents[0].shape(), d).expect("gelu grad")]
            })),
        )
    }

    // ==================== normalization and attention ====================

    /// Per-row LayerNorm over the channel axis of `x[m,c]`, with elementwise
    /// scale (gamma) and shift (beta).
    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: f64) -> VarId {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (m, c) = (tx.rows(), tx.cols());
        assert_eq!(tg.shape(), &[c], "layer_norm gamma length");
        assert_eq!(tb.shape(), &[c], "layer_norm beta length");
        let mut data = Vec::with_capacity(m * c);
        for i in 0..m {
            let row = &tx.data()[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                data.push(tg.data()[j] * (row[j] - mu) * rstd + tb.data()[j]);
            }
        }
        let value = Tensor::from_vec(&[m, c], data).expect("layer_norm shape");
        self.push(
            value,
            vec![x, gamma, beta],
            Some(Box::new(move |g, parents, _| {
                let tx = parents[0];
                let tg = parents[1];
                let (m, c) = (tx.rows(), tx.cols());
                let cf = c as f64;
                let mut dx = vec![0.0; m * c];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..m {
                    let row = &tx.data()[i * c..(i + 1) * c];
                    let mu = row.iter().sum::<f64>() / cf;
                    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cf;
                    let rstd = 1.0 / (var + eps).sqrt();
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    let mut xhat = vec![0.0; c];
                    let mut dxhat = vec![0.0; c];
                    for j in 0..c {
                        xhat[j] = (row[j] - mu) * rstd;
                        dxhat[j] = g.at2(i, j) * tg.data()[j];
                        mean_dxhat += dxhat[j];
                        mean_dxhat_xhat += dxhat[j] * xhat[j];
                        dgamma[j] += g.at2(i, j) * xhat[j];
                        dbeta[j] += g.at2(i, j);
                    }
                    mean_dxhat /= cf;
                    mean_dxhat_xhat /= cf;
                    for j in 0..c {
                        dx[i * c + j] =
                            rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                vec![
                    Tensor::from_vec(&[m, c], dx).expect("layer_norm grad"),
                    Tensor::from_vec(&[c], dgamma).expect("layer_norm grad"),
                    Tensor::from_vec(&[c], dbeta).expect("layer_norm grad"),
                ]
            })),
        )
    }

    /// Numerically stable softmax over each row of `x[r,c]`, restricted to
    /// positions where `mask` is true. Masked positions are exactly 0 in the
    /// output. Every row must have at least one unmasked position.
    pub fn masked_row_softmax(&mut self, x: VarId, mask: Arc<Vec<bool>>) -> VarId {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        assert_eq!(mask.len(), r * c, "mask length must match the logit table");
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let mut hi = f64::NEG_INFINITY;
            for j in 0..c {
                if mask[i * c + j] {
                    hi = hi.max(tx.at2(i, j));
                }
            }
            assert!(hi.is_finite(), "softmax row {i} has no unmasked entries");
            let mut denom = 0.0;
            for j in 0..c {
                if mask[i * c + j] {
                    let e = (tx.at2(i, j) - hi).exp();
                    data[i * c + j] = e;
                    denom += e;
                }
            }
            for j in 0..c {
                data[i * c + j] /= denom;
            }
        }
        let value = Tensor::from_vec(&[r, c], data).expect("softmax shape");
        self.push(
            value,
            vec![x],
            Some(Box::new(move |g, _, out| {
                let (r, c) = (out.rows(), out.cols());
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let mut dot = 0.0;
                    for j in 0..c {
                        dot += g.at2(i, j) * out.at2(i, j);
                    }
                    for j in 0..c {
                        dx[i * c + j] = out.at2(i, j) * (g.at2(i, j) - dot);
                    }
                }
                vec![Tensor::from_vec(&[r, c], dx).expect("softmax grad")]
            })),
        )
    }

    /// Masked cosine-affinity table: `out[i][j] = (cos(x_i, x_j) + 1) / 2`
    /// where the mask is true, 0 elsewhere. Zero-norm rows produce 0 with a
    /// warning (cosine undefined).
    pub fn masked_cosine_affinity(&mut self, x: VarId, mask: Arc<Vec<bool>>) -> VarId {
        let tx = self.value(x);
        let (v, c) = (tx.rows(), tx.cols());
        assert_eq!(mask.len(), v * v, "mask length must be V*V");
        let norms: Vec<f64> = (0..v)
            .map(|i| tx.data()[i * c..(i + 1) * c].iter().map(|a| a * a).sum::<f64>().sqrt())
            .collect();
        if norms.iter().any(|&n| n == 0.0) {
            log::warn!("cosine affinity saw a zero-norm feature row; emitting 0 for it");
        }
        let mut data = vec![0.0; v * v];
        for i in 0..v {
            for j in 0..v {
                if mask[i * v + j] && norms[i] > 0.0 && norms[j] > 0.0 {
                    let mut dot = 0.0;
                    for l in 0..c {
                        dot += tx.at2(i, l) * tx.at2(j, l);
                    }
                    data[i * v + j] = 0.5 * (dot / (norms[i] * norms[j]) + 1.0);
                }
            }
        }
        let value = Tensor::from_vec(&[v, v], data).expect("cosine shape");
        self.push(
            value,
            vec![x],
            Some(Box::new(move |g, parents, _| {
                let tx = parents[0];
                let (v, c) = (tx.rows(), tx.cols());
                let norms: Vec<f64> = (0..v)
                    .map(|i| {
                        tx.data()[i * c..(i + 1) * c].iter().map(|a| a * a).sum::<f64>().sqrt()
                    })
                    .collect();
                let mut dx = vec![0.0; v * c];
                for i in 0..v {
                    for j in 0..v {
                        let gv = g.at2(i, j);
                        if gv == 0.0
                            || !mask[i * v + j]
                            || norms[i] == 0.0
                            || norms[j] == 0.0
                        {
                            continue;
                        }
                        let mut dot = 0.0;
                        for l in 0..c {
                            dot += tx.at2(i, l) * tx.at2(j, l);
                        }
                        let inv = 1.0 / (norms[i] * norms[j]);
                        let cos = dot * inv;
                        let half_g = 0.5 * gv;
                        for l in 0..c {
                            let xi = tx.at2(i, l);
                            let xj = tx.at2(j, l);
                            dx[i * c + l] +=
                                half_g * (xj * inv - cos * xi / (norms[i] * norms[i]));
                            dx[j * c + l] +=
                                half_g * (xi * inv - cos * xj / (norms[j] * norms[j]));
                        }
                    }
                }
                vec![Tensor::from_vec(&[v, c], dx).expect("cosine grad")]
            })),
        )
    }

    // ==================== convolution and pooling ====================

    /// 2D convolution of `x[ci,h,w]` with `weight[co,ci,kh,kw]` and
    /// `bias[co]`, zero padding `pad`, square stride `stride`.
    pub fn conv2d(
        &mut self,
        x: VarId,
        weight: VarId,
        bias: VarId,
        stride: usize,
        pad: usize,
    ) -> VarId {
        let (tx, tw, tb) = (self.value(x), self.value(weight), self.value(bias));
        assert_eq!(tx.rank(), 3, "conv input must be [c,h,w]");
        assert_eq!(tw.rank(), 4, "conv weight must be [co,ci,kh,kw]");
        let (ci, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (co, wci, kh, kw) = (tw.shape()[0], tw.shape()[1], tw.shape()[2], tw.shape()[3]);
        assert_eq!(ci, wci, "conv channel mismatch");
        assert_eq!(tb.shape(), &[co], "conv bias length");
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "kernel larger than padded input");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;

        let mut data = vec![0.0; co * oh * ow];
        for o in 0..co {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = tb.data()[o];
                    for c in 0..ci {
                        for i in 0..kh {
                            let iy = (y * stride + i) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for j in 0..kw {
                                let ix = (xo * stride + j) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += tx.data()[c * h * w + iy as usize * w + ix as usize]
                                    * tw.data()[((o * ci + c) * kh + i) * kw + j];
                            }
                        }
                    }
                    data[o * oh * ow + y * ow + xo] = acc;
                }
            }
        }
        let value = Tensor::from_vec(&[co, oh, ow], data).expect("conv shape");
        self.push(
            value,
            vec![x, weight, bias],
            Some(Box::new(move |g, parents, _| {
                let tx = parents[0];
                let tw = parents[1];
                let (ci, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let (co, kh, kw) = (tw.shape()[0], tw.shape()[2], tw.shape()[3]);
                let (oh, ow) = (g.shape()[1], g.shape()[2]);
                let mut dx = vec![0.0; ci * h * w];
                let mut dw = vec![0.0; tw.numel()];
                let mut db = vec![0.0; co];
                for o in 0..co {
                    for y in 0..oh {
                        for xo in 0..ow {
                            let gv = g.data()[o * oh * ow + y * ow + xo];
                            if gv == 0.0 {
                                continue;
                            }
                            db[o] += gv;
                            for c in 0..ci {
                                for i in 0..kh {
                                    let iy = (y * stride + i) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for j in 0..kw {
                                        let ix = (xo * stride + j) as isize - pad as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let xi = c * h * w + iy as usize * w + ix as usize;
                                        let wi = ((o * ci + c) * kh + i) * kw + j;
                                        dw[wi] += gv * tx.data()[xi];
                                        dx[xi] += gv * tw.data()[wi];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![
                    Tensor::from_vec(tx.shape(), dx).expect("conv grad"),
                    Tensor::from_vec(tw.shape(), dw).expect("conv grad"),
                    Tensor::from_vec(&[co], db).expect("conv grad"),
                ]
            })),
        )
    }

    /// Global average pool `x[c,h,w] -> [1,c]`.
    pub fn global_avg_pool(&mut self, x: VarId) -> VarId {
        let tx = self.value(x);
        assert_eq!(tx.rank(), 3, "pool input must be [c,h,w]");
        let (c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let area = (h * w) as f64;
        let data: Vec<f64> = (0..c)
            .map(|ch| tx.data()[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / area)
            .collect();
        let value = Tensor::from_vec(&[1, c], data).expect("pool shape");
        self.push(
            value,
            vec![x],
            Some(Box::new(|g, parents, _| {
                let tx = parents[0];
                let (c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let area = (h * w) as f64;
                let mut dx = vec![0.0; tx.numel()];
                for ch in 0..c {
                    let gv = g.data()[ch] / area;
                    for p in 0..h * w {
                        dx[ch * h * w + p] = gv;
                    }
                }
                vec![Tensor::from_vec(tx.shape(), dx).expect("pool grad")]
            })),
        )
    }

    /// Channel statistics map `x[c,h,w] -> [2,h,w]`: plane 0 is the mean over
    /// channels, plane 1 the max (first channel wins ties).
    pub fn channel_stats(&mut self, x: VarId) -> VarId {
        let tx = self.value(x);
        assert_eq!(tx.rank(), 3, "stats input must be [c,h,w]");
        let (c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let cf = c as f64;
        let mut data = vec![0.0; 2 * h * w];
        for p in 0..h * w {
            let mut sum = 0.0;
            let mut best = f64::NEG_INFINITY;
            for ch in 0..c {
                let v = tx.data()[ch * h * w + p];
                sum += v;
                if v > best {
                    best = v;
                }
            }
            data[p] = sum / cf;
            data[h * w + p] = best;
        }
        let value = Tensor::from_vec(&[2, h, w], data).expect("stats shape");
        self.push(
            value,
            vec![x],
            Some(Box::new(|g, parents, _| {
                let tx = parents[0];
                let (c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let cf = c as f64;
                let mut dx = vec![0.0; tx.numel()];
                for p in 0..h * w {
                    let gmean = g.data()[p] / cf;
                    let mut arg = 0;
                    let mut best = f64::NEG_INFINITY;
                    for ch in 0..c {
                        let v = tx.data()[ch * h * w + p];
                        if v > best {
                            best = v;
                            arg = ch;
                        }
                        dx[ch * h * w + p] += gmean;
                    }
                    dx[arg * h * w + p] += g.data()[h * w + p];
                }
                vec![Tensor::from_vec(tx.shape(), dx).expect("stats grad")]
            })),
        )
    }

    /// Scales every channel plane of `x[c,h,w]` by `gate[1,c]`.
    pub fn scale_channels(&mut self, x: VarId, gate: VarId) -> VarId {
        let (tx, tg) = (self.value(x), self.value(gate));
        let (c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        assert_eq!(tg.shape(), &[1, c], "gate must be [1,c]");
        let mut data = vec![0.0; tx.numel()];
        for ch in 0..c {
            let gv = tg.data()[ch];
            for p in 0..h * w {
                data[ch * h * w + p] = tx.data()[ch * h * w + p] * gv;
            }
        }
        let value = Tensor::from_vec(tx.shape(), data).expect("scale_channels shape");
        self.push(
            value,
            vec![x, gate],
            Some(Box::new(|g, parents, _| {
                let (tx, tg) = (parents[0], parents[1]);
                let (c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let mut dx = vec![0.0; tx.numel()];
                let mut dg = vec![0.0; c];
                for ch in 0..c {
                    let gv = tg.data()[ch];
                    for p in 0..h * w {
                        let idx = ch * h * w + p;
                        dx[idx] = g.data()[idx] * gv;
                        dg[ch] += g.data()[idx] * tx.data()[idx];
                    }
                }
                vec![
                    Tensor::from_vec(tx.shape(), dx).expect("scale_channels grad"),
                    Tensor::from_vec(&[1, c], dg).expect("scale_channels grad"),
                ]
            })),
        )
    }

    /// Scales every spatial position of `x[c,h,w]` by `gate[1,h,w]`.
    pub fn scale_positions(&mut self, x: VarId, gate: VarId) -> VarId {
        let (tx, tg) = (self.value(x), self.value(gate));
        let (c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        assert_eq!(tg.shape(), &[1, h, w], "gate must be [1,h,w]");
        let mut data = vec![0.0; tx.numel()];
        for ch in 0..c {
            for p in 0..h * w {
                data[ch * h * w + p] = tx.data()[ch * h * w + p] * tg.data()[p];
            }
        }
        let value = Tensor::from_vec(tx.shape(), data).expect("scale_positions shape");
        self.push(
            value,
            vec![x, gate],
            Some(Box::new(|g, parents, _| {
                let (tx, tg) = (parents[0], parents[1]);
                let (c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let mut dx = vec![0.0; tx.numel()];
                let mut dg = vec![0.0; h * w];
                for ch in 0..c {
                    for p in 0..h * w {
                        let idx = ch * h * w + p;
                        dx[idx] = g.data()[idx] * tg.data()[p];
                        dg[p] += g.data()[idx] * tx.data()[idx];
                    }
                }
                vec![
                    Tensor::from_vec(tx.shape(), dx).expect("scale_positions grad"),
                    Tensor::from_vec(&[1, h, w], dg).expect("scale_positions grad"),
                ]
            })),
        )
    }

    // ==================== shape plumbing ====================

    /// Concatenates `[m,n_i]` blocks along columns.
    pub fn concat_cols(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty(), "concat of nothing");
        let m = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.value(p).rows(), m, "concat_cols row mismatch");
                self.value(p).cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                let t = self.value(p);
                let c = t.cols();
                data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
            }
        }
        let value = Tensor::from_vec(&[m, total], data).expect("concat shape");
        self.push(
            value,
            parts.to_vec(),
            Some(Box::new(move |g, _, _| {
                let m = g.rows();
                let total = g.cols();
                let mut out = Vec::with_capacity(widths.len());
                let mut start = 0;
                for &wd in &widths {
                    let mut d = Vec::with_capacity(m * wd);
                    for i in 0..m {
                        d.extend_from_slice(&g.data()[i * total + start..i * total + start + wd]);
                    }
                    out.push(Tensor::from_vec(&[m, wd], d).expect("concat grad"));
                    start += wd;
                }
                out
            })),
        )
    }

    /// Column slice `x[:, start..start+len]`.
    pub fn slice_cols(&mut self, x: VarId, start: usize, len: usize) -> VarId {
        let tx = self.value(x);
        let (m, n) = (tx.rows(), tx.cols());
        assert!(start + len <= n, "slice out of range");
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&tx.data()[i * n + start..i * n + start + len]);
        }
        let value = Tensor::from_vec(&[m, len], data).expect("slice shape");
        self.push(
            value,
            vec![x],
            Some(Box::new(move |g, parents, _| {
                let (m, n) = (parents[0].rows(), parents[0].cols());
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..len {
                        dx[i * n + start + j] = g.at2(i, j);
                    }
                }
                vec![Tensor::from_vec(&[m, n], dx).expect("slice grad")]
            })),
        )
    }

    /// Single row `x[row, :]` as a `[1,c]` matrix.
    pub fn slice_row(&mut self, x: VarId, row: usize) -> VarId {
        let tx = self.value(x);
        let (m, n) = (tx.rows(), tx.cols());
        assert!(row < m, "row out of range");
        let data = tx.data()[row * n..(row + 1) * n].to_vec();
        let value = Tensor::from_vec(&[1, n], data).expect("row shape");
        self.push(
            value,
            vec![x],
            Some(Box::new(move |g, parents, _| {
                let (m, n) = (parents[0].rows(), parents[0].cols());
                let mut dx = vec![0.0; m * n];
                dx[row * n..(row + 1) * n].copy_from_slice(g.data());
                vec![Tensor::from_vec(&[m, n], dx).expect("row grad")]
            })),
        )
    }

    /// Stacks `[1,c]` rows into `[m,c]`.
    pub fn stack_rows(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty(), "stack of nothing");
        let c = self.value(parts[0]).cols();
        let mut data = Vec::with_capacity(parts.len() * c);
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.shape(), &[1, c], "stack_rows wants [1,c] parts");
            data.extend_from_slice(t.data());
        }
        let value = Tensor::from_vec(&[parts.len(), c], data).expect("stack shape");
        self.push(
            value,
            parts.to_vec(),
            Some(Box::new(move |g, _, _| {
                let c = g.cols();
                (0..g.rows())
                    .map(|i| {
                        Tensor::from_vec(&[1, c], g.data()[i * c..(i + 1) * c].to_vec())
                            .expect("stack grad")
                    })
                    .collect()
            })),
        )
    }

    /// Column-wise mean of `x[m,c]` as `[1,c]`.
    pub fn mean_rows(&mut self, x: VarId) -> VarId {
        let tx = self.value(x);
        let (m, c) = (tx.rows(), tx.cols());
        let mf = m as f64;
        let mut data = vec![0.0; c];
        for i in 0..m {
            for j in 0..c {
                data[j] += tx.at2(i, j);
            }
        }
        for v in &mut data {
            *v /= mf;
        }
        let value = Tensor::from_vec(&[1, c], data).expect("mean shape");
        self.push(
            value,
            vec![x],
            Some(Box::new(move |g, parents, _| {
                let (m, c) = (parents[0].rows(), parents[0].cols());
                let mut dx = vec![0.0; m * c];
                for i in 0..m {
                    for j in 0..c {
                        dx[i * c + j] = g.data()[j] / m as f64;
                    }
                }
                vec![Tensor::from_vec(&[m, c], dx).expect("mean grad")]
            })),
        )
    }

    // ==================== reverse pass ====================

    /// Backpropagates from `root` seeded with ones.
    #[must_use]
    pub fn backward(&self, root: VarId) -> Gradients {
        let seed = Tensor::full(self.value(root).shape(), 1.0);
        self.backward_with_seed(root, seed)
    }

    /// Backpropagates from `root` with an explicit cotangent seed, which must
    /// match the root's shape. The result contains d(sum(seed * root))/d(node)
    /// for every node the root depends on.
    #[must_use]
    pub fn backward_with_seed(&self, root: VarId, seed: Tensor) -> Gradients {
        assert_eq!(
            seed.shape(),
            self.value(root).shape(),
            "backward seed shape must match the root"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(grad) = grads[idx].clone() else { continue };
            let parent_values: Vec<&Tensor> =
                node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let parent_grads = backward(&grad, &parent_values, &node.value);
            assert_eq!(
                parent_grads.len(),
                node.parents.len(),
                "backward must produce one gradient per parent"
            );
            for (pid, pg) in node.parents.iter().zip(parent_grads) {
                match &mut grads[pid.0] {
                    Some(acc) => acc.accumulate(&pg).expect("gradient shapes agree"),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}


#[cfg(test)]
mod tests {
    use super::testing::{fd_check, random_tensor, rng};
    use super::*;

    // ==================== Elementwise Op Tests ====================

    #[test]
    fn arithmetic_gradients_match_finite_differences() {
        let mut r = rng(1);
        let a = random_tensor(&[3, 4], &mut r);
        let b = random_tensor(&[3, 4], &mut r);
        fd_check(&[a.clone(), b.clone()], |t, ids| t.add(ids[0], ids[1]), 1e-6);
        fd_check(&[a.clone(), b.clone()], |t, ids| t.sub(ids[0], ids[1]), 1e-6);
        fd_check(&[a.clone(), b.clone()], |t, ids| t.mul(ids[0], ids[1]), 1e-6);
        fd_check(&[a], |t, ids| t.scale(ids[0], -2.5), 1e-6);
    }

    #[test]
    fn reused_variable_accumulates_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 1], vec![3.0]).unwrap());
        let y = tape.add(x, x);
        let grads = tape.backward(y);
        assert_eq!(grads.get(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn activation_gradients_match_finite_differences() {
        let mut r = rng(2);
        // Keep inputs away from the ReLU kink by construction.
        let mut x = random_tensor(&[2, 5], &mut r);
        for v in x.data_mut() {
            if v.abs() < 0.05 {
                *v += 0.1;
            }
        }
        fd_check(&[x.clone()], |t, ids| t.relu(ids[0]), 1e-5);
        fd_check(&[x.clone()], |t, ids| t.leaky_relu(ids[0], 0.2), 1e-5);
        fd_check(&[x.clone()], |t, ids| t.sigmoid(ids[0]), 1e-6);
        fd_check(&[x], |t, ids| t.gelu(ids[0]), 1e-6);
    }

    #[test]
    fn gelu_matches_the_exact_erf_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![1.0, -0.5, 2.0]).unwrap());
        let y = tape.gelu(x);
        let got = tape.value(y).data();
        assert!((got[0] - 0.841_344_746_068_542_93).abs() < 1e-12);
        assert!((got[1] + 0.154_268_769_362_993_44).abs() < 1e-12);
        assert!((got[2] - 1.954_499_736_103_641_6).abs() < 1e-12);
    }

    // ==================== Linear Algebra Tests ====================

    #[test]
    fn matmul_variants_match_finite_differences() {
        let mut r = rng(3);
        let a = random_tensor(&[3, 4], &mut r);
        let b = random_tensor(&[4, 2], &mut r);
        fd_check(&[a.clone(), b], |t, ids| t.matmul(ids[0], ids[1]), 1e-6);
        let bt = random_tensor(&[2, 4], &mut r);
        fd_check(&[a.clone(), bt], |t, ids| t.matmul_nt(ids[0], ids[1]), 1e-6);
        fd_check(&[a], |t, ids| t.transpose(ids[0]), 1e-6);
    }

    #[test]
    fn matmul_values_are_correct() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.leaf(Tensor::from_vec(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let y = tape.matmul(a, b);
        assert_eq!(tape.value(y).data(), &[19.0, 22.0, 43.0, 50.0]);
        let ynt = tape.matmul_nt(a, b);
        assert_eq!(tape.value(ynt).data(), &[17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn bias_and_outer_sum_match_finite_differences() {
        let mut r = rng(4);
        let x = random_tensor(&[3, 4], &mut r);
        let b = random_tensor(&[4], &mut r);
        fd_check(&[x, b], |t, ids| t.add_row_bias(ids[0], ids[1]), 1e-6);
        let s = random_tensor(&[5, 1], &mut r);
        let tt = random_tensor(&[5, 1], &mut r);
        fd_check(&[s, tt], |t, ids| t.outer_sum(ids[0], ids[1]), 1e-6);
    }

    // ==================== Normalization and Attention Tests ====================

    #[test]
    fn layer_norm_normalizes_and_matches_finite_differences() {
        let mut r = rng(5);
        let x = random_tensor(&[4, 6], &mut r);
        let gamma = Tensor::full(&[6], 1.0);
        let beta = Tensor::zeros(&[6]);
        let mut tape = Tape::new();
        let ids = [tape.leaf(x.clone()), tape.leaf(gamma.clone()), tape.leaf(beta.clone())];
        let y = tape.layer_norm(ids[0], ids[1], ids[2], 1e-5);
        for i in 0..4 {
            let row: Vec<f64> = (0..6).map(|j| tape.value(y).at2(i, j)).collect();
            let mean = row.iter().sum::<f64>() / 6.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4, "row variance {var}");
        }
        let g2 = random_tensor(&[6], &mut r);
        let b2 = random_tensor(&[6], &mut r);
        fd_check(
            &[x, g2, b2],
            |t, ids| t.layer_norm(ids[0], ids[1], ids[2], 1e-5),
            1e-5,
        );
    }

    #[test]
    fn masked_softmax_rows_sum_to_one_and_mask_is_exact() {
        let mut r = rng(6);
        let x = random_tensor(&[4, 4], &mut r);
        let mask: Vec<bool> = vec![
            true, true, false, false, //
            false, true, true, true, //
            true, false, true, false, //
            true, true, true, true,
        ];
        let mut tape = Tape::new();
        let id = tape.leaf(x.clone());
        let y = tape.masked_row_softmax(id, Arc::new(mask.clone()));
        let out = tape.value(y);
        for i in 0..4 {
            let mut sum = 0.0;
            for j in 0..4 {
                let v = out.at2(i, j);
                if mask[i * 4 + j] {
                    assert!(v > 0.0);
                    sum += v;
                } else {
                    assert_eq!(v, 0.0, "masked entries must be exactly zero");
                }
            }
            assert!((sum - 1.0).abs() < 1e-12);
        }
        let m = Arc::new(mask);
        fd_check(
            &[x],
            move |t, ids| t.masked_row_softmax(ids[0], Arc::clone(&m)),
            1e-5,
        );
    }

    #[test]
    fn cosine_affinity_values_and_gradients() {
        // Rows: e0, e0 again, e1. Mask connects 0->1 (parallel) and 0->2
        // (orthogonal); everything else is off.
        let x = Tensor::from_vec(
            &[3, 2],
            vec![
                1.0, 0.0, //
                1.0, 0.0, //
                0.0, 1.0,
            ],
        )
        .unwrap();
        let mask = vec![
            false, true, true, //
            false, false, false, //
            false, false, false,
        ];
        let mut tape = Tape::new();
        let id = tape.leaf(x);
        let y = tape.masked_cosine_affinity(id, Arc::new(mask));
        let out = tape.value(y);
        assert!((out.at2(0, 1) - 1.0).abs() < 1e-15, "parallel rows give 1");
        assert!((out.at2(0, 2) - 0.5).abs() < 1e-15, "orthogonal rows give 0.5");
        assert_eq!(out.at2(1, 0), 0.0, "unmasked entries are exactly zero");
        assert_eq!(out.at2(2, 2), 0.0);

        let mut r = rng(7);
        let x = random_tensor(&[4, 3], &mut r);
        let mask: Vec<bool> = (0..16).map(|i| i % 3 != 0).collect();
        let m = Arc::new(mask);
        fd_check(
            &[x],
            move |t, ids| t.masked_cosine_affinity(ids[0], Arc::clone(&m)),
            1e-5,
        );
    }

    // ==================== Convolution and Pooling Tests ====================

    #[test]
    fn conv2d_shapes_and_known_value() {
        let mut tape = Tape::new();
        // 1x3x3 input, identity-ish 1x1x1x1 kernel with bias.
        let x = tape.leaf(Tensor::from_vec(&[1, 3, 3], (1..=9).map(f64::from).collect()).unwrap());
        let w = tape.leaf(Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]).unwrap());
        let b = tape.leaf(Tensor::from_vec(&[1], vec![0.5]).unwrap());
        let y = tape.conv2d(x, w, b, 1, 0);
        assert_eq!(tape.value(y).shape(), &[1, 3, 3]);
        assert_eq!(tape.value(y).data()[0], 2.5);
        assert_eq!(tape.value(y).data()[8], 18.5);

        // Strided with padding halves the spatial size.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 8, 8]));
        let w = tape.leaf(Tensor::zeros(&[3, 2, 3, 3]));
        let b = tape.leaf(Tensor::zeros(&[3]));
        let y = tape.conv2d(x, w, b, 2, 1);
        assert_eq!(tape.value(y).shape(), &[3, 4, 4]);
    }

    #[test]
    fn conv2d_matches_finite_differences() {
        let mut r = rng(8);
        let x = random_tensor(&[2, 5, 4], &mut r);
        let w = random_tensor(&[3, 2, 3, 3], &mut r);
        let b = random_tensor(&[3], &mut r);
        fd_check(
            &[x, w, b],
            |t, ids| t.conv2d(ids[0], ids[1], ids[2], 2, 1),
            1e-5,
        );
    }

    #[test]
    fn pooling_and_gates_match_finite_differences() {
        let mut r = rng(9);
        let x = random_tensor(&[3, 4, 4], &mut r);
        fd_check(&[x.clone()], |t, ids| t.global_avg_pool(ids[0]), 1e-6);

        // Separate the channel values so the max winner is stable under the
        // finite-difference step.
        let mut xs = random_tensor(&[3, 2, 2], &mut r);
        for (i, v) in xs.data_mut().iter_mut().enumerate() {
            *v += (i % 3) as f64;
        }
        fd_check(&[xs], |t, ids| t.channel_stats(ids[0]), 1e-5);

        let gate_c = random_tensor(&[1, 3], &mut r);
        fd_check(
            &[x.clone(), gate_c],
            |t, ids| t.scale_channels(ids[0], ids[1]),
            1e-6,
        );
        let gate_p = random_tensor(&[1, 4, 4], &mut r);
        fd_check(&[x, gate_p], |t, ids| t.scale_positions(ids[0], ids[1]), 1e-6);
    }

    #[test]
    fn channel_stats_semantics() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::from_vec(&[2, 1, 2], vec![1.0, 5.0, 3.0, 1.0]).unwrap(),
        );
        let y = tape.channel_stats(x);
        let out = tape.value(y);
        assert_eq!(out.shape(), &[2, 1, 2]);
        assert_eq!(out.data()[0], 2.0, "mean of 1 and 3");
        assert_eq!(out.data()[1], 3.0, "mean of 5 and 1");
        assert_eq!(out.data()[2], 3.0, "max of 1 and 3");
        assert_eq!(out.data()[3], 5.0, "max of 5 and 1");
    }

    // ==================== Shape Plumbing Tests ====================

    #[test]
    fn plumbing_ops_match_finite_differences() {
        let mut r = rng(10);
        let a = random_tensor(&[3, 2], &mut r);
        let b = random_tensor(&[3, 4], &mut r);
        fd_check(&[a.clone(), b.clone()], |t, ids| t.concat_cols(&[ids[0], ids[1]]), 1e-6);
        fd_check(&[b.clone()], |t, ids| t.slice_cols(ids[0], 1, 2), 1e-6);
        fd_check(&[b.clone()], |t, ids| t.slice_row(ids[0], 2), 1e-6);
        fd_check(&[b], |t, ids| t.mean_rows(ids[0]), 1e-6);
        let r1 = random_tensor(&[1, 4], &mut r);
        let r2 = random_tensor(&[1, 4], &mut r);
        fd_check(&[r1, r2], |t, ids| t.stack_rows(&[ids[0], ids[1]]), 1e-6);
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        // A miniature network exercising op composition and variable reuse:
        // y = mean_rows(relu(x*w + b) * sigmoid(x*w + b)).
        let mut r = rng(11);
        let x = random_tensor(&[3, 4], &mut r);
        let w = random_tensor(&[4, 4], &mut r);
        let b = random_tensor(&[4], &mut r);
        fd_check(
            &[x, w, b],
            |t, ids| {
                let lin = t.matmul(ids[0], ids[1]);
                let pre = t.add_row_bias(lin, ids[2]);
                let a = t.relu(pre);
                let s = t.sigmoid(pre);
                let prod = t.mul(a, s);
                t.mean_rows(prod)
            },
            1e-5,
        );
    }
}
