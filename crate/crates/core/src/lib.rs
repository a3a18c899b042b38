//! Graph-attention pipeline for no-reference omnidirectional image quality
//! assessment.
//!
//! The pipeline scores an equirectangular panorama in five stages:
//!
//! 1. sample near-uniform viewport centers on the sphere (Fibonacci lattice),
//! 2. extract a rectilinear viewport per center (gnomonic projection),
//! 3. embed each viewport with a multi-stage convolutional backbone fused by
//!    channel and spatial attention, plus a spherical positional encoding,
//! 4. exchange information between viewports with a 3-layer graph attention
//!    stack over the k-nearest-neighbor graph, then a 2-layer fully connected
//!    transformer encoder whose attention logits carry geodesic-distance and
//!    adjacency biases,
//! 5. regress the pooled node features to a scalar quality score.
//!
//! Everything runs at f64 and every layer is differentiable through a small
//! reverse-mode tape, so analytic gradients can be validated against central
//! finite differences end to end.

pub mod error;
pub mod features;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod position;
pub mod projection;
pub mod sphere;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod transformer;

pub mod gat;

pub use error::{Error, Result};

/// Configures the global worker pool from the `OIQA_THREADS` environment
/// variable. Call once at process start; later calls are no-ops. Returns the
/// applied cap, or `None` when the variable is unset/invalid and the default
/// pool is kept.
pub fn configure_threads_from_env() -> Option<usize> {
    let raw = std::env::var("OIQA_THREADS").ok()?;
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0)?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().ok();
    Some(n)
}
