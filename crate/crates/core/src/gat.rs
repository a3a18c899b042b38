//! Graph attention layers over the viewport graph.
//!
//! Each layer projects node features with a shared matrix, scores every
//! in-neighbor pair per head with a learned attention vector through a
//! LeakyReLU, normalizes scores with a masked softmax over each node's
//! in-neighborhood (self-loops included), and aggregates the projected
//! neighbor features. Heads are concatenated back to the full width, then the
//! layer applies LayerNorm, a residual connection to its input, and ReLU.
//! Three such layers form the local-interaction stack.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::ViewportGraph;
use crate::tape::{ParamIds, Tape, VarId};
use crate::tensor::Tensor;

/// LeakyReLU slope for attention logits.
pub const ATTENTION_SLOPE: f64 = 0.2;
/// LayerNorm epsilon.
pub const LN_EPS: f64 = 1e-5;

/// Multi-head masked attention for layer `layer`. Returns the aggregated
/// `[V, C]` features and the per-head `[V, V]` attention matrices (row i
/// holds node i's weights over its in-neighbors; masked entries are exact
/// zeros).
pub fn gat_attention_tape(
    tape: &mut Tape,
    params: &ParamIds,
    layer: usize,
    x: VarId,
    mask: &Arc<Vec<bool>>,
    heads: usize,
) -> Result<(VarId, Vec<VarId>)> {
    let (v, c) = (tape.value(x).rows(), tape.value(x).cols());
    if c % heads != 0 {
        return Err(Error::Config(format!(
            "feature width {c} is not divisible by {heads} heads"
        )));
    }
    if mask.len() != v * v {
        return Err(Error::Shape(format!(
            "neighbor mask has {} entries, expected {}",
            mask.len(),
            v * v
        )));
    }
    for i in 0..v {
        if !mask[i * v..(i + 1) * v].iter().any(|&m| m) {
            return Err(Error::Structure(format!(
                "node {i} has no incoming edges; aggregation is undefined"
            )));
        }
    }
    let dh = c / heads;
    let w = params.get(&format!("gat.{layer}.w"))?;
    let a = params.get(&format!("gat.{layer}.a"))?;
    let z = tape.matmul(x, w);

    let mut head_outputs = Vec::with_capacity(heads);
    let mut alphas = Vec::with_capacity(heads);
    for h in 0..heads {
        let zh = tape.slice_cols(z, h * dh, dh);
        let ah = tape.slice_row(a, h);
        let a_dst = tape.slice_cols(ah, 0, dh);
        let a_src = tape.slice_cols(ah, dh, dh);
        // e[i][j] = leaky_relu(a_dst . z_i + a_src . z_j): the first half of
        // the attention vector scores the aggregating node, the second the
        // neighbor whose features flow in.
        let s = tape.matmul_nt(zh, a_dst);
        let t = tape.matmul_nt(zh, a_src);
        let logits = tape.outer_sum(s, t);
        let logits = tape.leaky_relu(logits, ATTENTION_SLOPE);
        let alpha = tape.masked_row_softmax(logits, Arc::clone(mask));
        let agg = tape.matmul(alpha, zh);
        head_outputs.push(agg);
        alphas.push(alpha);
    }
    Ok((tape.concat_cols(&head_outputs), alphas))
}

/// One full layer: attention, LayerNorm, residual, ReLU.
pub fn gat_layer_tape(
    tape: &mut Tape,
    params: &ParamIds,
    layer: usize,
    x: VarId,
    mask: &Arc<Vec<bool>>,
    heads: usize,
) -> Result<(VarId, Vec<VarId>)> {
    let (h, alphas) = gat_attention_tape(tape, params, layer, x, mask, heads)?;
    let scale = params.get(&format!("gat.{layer}.ln.scale"))?;
    let shift = params.get(&format!("gat.{layer}.ln.shift"))?;
    let normed = tape.layer_norm(h, scale, shift, LN_EPS);
    let residual = tape.add(normed, x);
    Ok((tape.relu(residual), alphas))
}

/// The full stack: `layers` sequential attention layers over the graph's
/// in-neighbor structure. Validates the graph contract on entry (sorted,
/// deduplicated edges with self-loops) because duplicate edges would
/// double-count softmax terms.
pub fn gat_forward_tape(
    tape: &mut Tape,
    params: &ParamIds,
    x: VarId,
    graph: &ViewportGraph,
    heads: usize,
    layers: usize,
) -> Result<VarId> {
    graph.validate()?;
    if tape.value(x).rows() != graph.num_nodes {
        return Err(Error::Shape(format!(
            "feature matrix has {} rows for a {}-node graph",
            tape.value(x).rows(),
            graph.num_nodes
        )));
    }
    let mask = Arc::new(graph.in_neighbor_mask());
    let mut cur = x;
    for layer in 0..layers {
        let (next, _) = gat_layer_tape(tape, params, layer, cur, &mask, heads)?;
        cur = next;
    }
    Ok(cur)
}

/// Convenience wrapper computing attention outside any caller tape: returns
/// the aggregated features and per-head attention matrices as plain tensors.
pub fn gat_attention(
    params: &BTreeMap<String, Tensor>,
    layer: usize,
    x: &Tensor,
    mask: &[bool],
    heads: usize,
) -> Result<(Tensor, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let ids = tape.leaf_params(params);
    let xid = tape.leaf(x.clone());
    let (out, alphas) =
        gat_attention_tape(&mut tape, &ids, layer, xid, &Arc::new(mask.to_vec()), heads)?;
    Ok((
        tape.value(out).clone(),
        alphas.iter().map(|&a| tape.value(a).clone()).collect(),
    ))
}

/// Convenience wrapper for a full layer outside any caller tape.
pub fn gat_layer(
    params: &BTreeMap<String, Tensor>,
    layer: usize,
    x: &Tensor,
    mask: &[bool],
    heads: usize,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let ids = tape.leaf_params(params);
    let xid = tape.leaf(x.clone());
    let (out, _) =
        gat_layer_tape(&mut tape, &ids, layer, xid, &Arc::new(mask.to_vec()), heads)?;
    Ok(tape.value(out).clone())
}
