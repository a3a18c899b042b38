//! Fully connected transformer encoder over viewport nodes with two additive
//! attention biases: a normalized great-circle-distance prior and a masked
//! cosine-affinity prior on the k-nearest-neighbor relation.
//!
//! Both biases are built once per forward pass from the module's input and
//! the fixed distance matrix, then added identically to every head's
//! pre-softmax logits in each of the stacked pre-norm encoder layers
//! (attention sublayer, then a 4x-expansion feedforward with exact-erf GELU,
//! each wrapped in residual connections).

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::DistanceMatrix;
use crate::tape::{ParamIds, Tape, VarId};
use crate::tensor::Tensor;

/// Stabilizer in the distance-bias normalization denominator.
pub const DIST_BIAS_EPS: f64 = 1e-8;
/// LayerNorm epsilon.
pub const LN_EPS: f64 = 1e-5;

/// Distance prior: `1 - (D_ij - min D) / (max D - min D + eps)`, with the
/// minimum and maximum taken over all entries including the zero diagonal.
/// Close pairs get values near 1, the farthest pair gets nearly 0.
#[must_use]
pub fn distance_bias(d: &DistanceMatrix) -> Tensor {
    let (lo, hi) = d.min_max();
    let denom = hi - lo + DIST_BIAS_EPS;
    let v = d.len();
    let mut data = Vec::with_capacity(v * v);
    for i in 0..v {
        for j in 0..v {
            data.push(1.0 - (d.get(i, j) - lo) / denom);
        }
    }
    Tensor::from_vec(&[v, v], data).expect("square bias")
}

/// Affinity prior on the tape: `(cos(x_i, x_j) + 1) / 2` where `mask` is
/// true (the knn relation), 0 elsewhere. Differentiable in `x`.
pub fn adjacency_bias_tape(tape: &mut Tape, x: VarId, mask: Arc<Vec<bool>>) -> VarId {
    tape.masked_cosine_affinity(x, mask)
}

/// Plain-tensor wrapper over [`adjacency_bias_tape`].
pub fn adjacency_bias(x: &Tensor, mask: &[bool]) -> Tensor {
    let mut tape = Tape::new();
    let id = tape.leaf(x.clone());
    let out = adjacency_bias_tape(&mut tape, id, Arc::new(mask.to_vec()));
    tape.value(out).clone()
}

/// Multi-head attention with a shared additive logit bias. Returns the
/// projected output and the per-head attention matrices.
pub fn biased_attention_tape(
    tape: &mut Tape,
    params: &ParamIds,
    layer: usize,
    x: VarId,
    bias: VarId,
    heads: usize,
) -> Result<(VarId, Vec<VarId>)> {
    let (v, c) = (tape.value(x).rows(), tape.value(x).cols());
    if c % heads != 0 {
        return Err(Error::Config(format!(
            "feature width {c} is not divisible by {heads} heads"
        )));
    }
    if tape.value(bias).shape() != [v, v] {
        return Err(Error::Shape(format!(
            "attention bias must be [{v}, {v}], got {:?}",
            tape.value(bias).shape()
        )));
    }
    let dh = c / heads;
    let wq = params.get(&format!("enc.{layer}.wq"))?;
    let wk = params.get(&format!("enc.{layer}.wk"))?;
    let wv = params.get(&format!("enc.{layer}.wv"))?;
    let wo = params.get(&format!("enc.{layer}.wo"))?;
    let q = tape.matmul(x, wq);
    let k = tape.matmul(x, wk);
    let val = tape.matmul(x, wv);

    let full = Arc::new(vec![true; v * v]);
    let mut head_outputs = Vec::with_capacity(heads);
    let mut alphas = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(val, h * dh, dh);
        let scores = tape.matmul_nt(qh, kh);
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let scores = tape.add(scores, bias);
        let alpha = tape.masked_row_softmax(scores, Arc::clone(&full));
        head_outputs.push(tape.matmul(alpha, vh));
        alphas.push(alpha);
    }
    let concat = tape.concat_cols(&head_outputs);
    Ok((tape.matmul(concat, wo), alphas))
}

/// One pre-norm encoder layer: attention and feedforward sublayers, each with
/// a residual connection.
pub fn encoder_layer_tape(
    tape: &mut Tape,
    params: &ParamIds,
    layer: usize,
    x: VarId,
    bias: VarId,
    heads: usize,
) -> Result<(VarId, Vec<VarId>)> {
    let ln1_scale = params.get(&format!("enc.{layer}.ln1.scale"))?;
    let ln1_shift = params.get(&format!("enc.{layer}.ln1.shift"))?;
    let normed = tape.layer_norm(x, ln1_scale, ln1_shift, LN_EPS);
    let (attn, alphas) = biased_attention_tape(tape, params, layer, normed, bias, heads)?;
    let mid = tape.add(x, attn);

    let ln2_scale = params.get(&format!("enc.{layer}.ln2.scale"))?;
    let ln2_shift = params.get(&format!("enc.{layer}.ln2.shift"))?;
    let normed2 = tape.layer_norm(mid, ln2_scale, ln2_shift, LN_EPS);
    let w1 = params.get(&format!("enc.{layer}.ffn1.w"))?;
    let b1 = params.get(&format!("enc.{layer}.ffn1.b"))?;
    let w2 = params.get(&format!("enc.{layer}.ffn2.w"))?;
    let b2 = params.get(&format!("enc.{layer}.ffn2.b"))?;
    let h = tape.matmul(normed2, w1);
    let h = tape.add_row_bias(h, b1);
    let h = tape.gelu(h);
    let h = tape.matmul(h, w2);
    let h = tape.add_row_bias(h, b2);
    Ok((tape.add(mid, h), alphas))
}

/// The full encoder: builds both biases once from this module's input, then
/// applies `layers` encoder layers with the shared bias sum.
pub fn graphormer_forward_tape(
    tape: &mut Tape,
    params: &ParamIds,
    x: VarId,
    distances: &DistanceMatrix,
    knn_mask: &[bool],
    heads: usize,
    layers: usize,
) -> Result<VarId> {
    let v = tape.value(x).rows();
    if distances.len() != v || knn_mask.len() != v * v {
        return Err(Error::Shape(format!(
            "bias inputs sized for {} nodes, features have {v} rows",
            distances.len()
        )));
    }
    let b_dist = tape.leaf(distance_bias(distances));
    let b_adj = adjacency_bias_tape(tape, x, Arc::new(knn_mask.to_vec()));
    let bias = tape.add(b_dist, b_adj);
    let mut cur = x;
    for layer in 0..layers {
        let (next, _) = encoder_layer_tape(tape, params, layer, cur, bias, heads)?;
        cur = next;
    }
    Ok(cur)
}

/// Plain-tensor wrapper over one attention sublayer, also returning the
/// per-head attention matrices.
pub fn biased_attention(
    params: &BTreeMap<String, Tensor>,
    layer: usize,
    x: &Tensor,
    bias: &Tensor,
    heads: usize,
) -> Result<(Tensor, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let ids = tape.leaf_params(params);
    let xid = tape.leaf(x.clone());
    let bid = tape.leaf(bias.clone());
    let (out, alphas) = biased_attention_tape(&mut tape, &ids, layer, xid, bid, heads)?;
    Ok((
        tape.value(out).clone(),
        alphas.iter().map(|&a| tape.value(a).clone()).collect(),
    ))
}
