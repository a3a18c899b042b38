//! Spherical sinusoidal position codes for viewport centers.
//!
//! Each unit-sphere coordinate axis contributes `n` interleaved sin/cos pairs
//! with logarithmically spaced frequencies, giving a code of dimension `6n`
//! that is added elementwise to the node embedding. Coordinates are passed to
//! the sinusoids as-is (they live in [-1, 1], not on an integer grid), which
//! keeps the code bounded and smooth over the sphere.

use crate::error::{Error, Result};

/// Unit-norm tolerance for [`encode_position`] inputs.
const UNIT_NORM_TOL: f64 = 1e-9;

/// Encodes a unit vector as a `6n`-dimensional sinusoidal position code.
///
/// Per axis value `v`, the code holds `(sin(v / 10000^(i/(n-1))),
/// cos(v / 10000^(i/(n-1))))` for `i` in `0..n`, blocks ordered x, y, z with
/// sin/cos interleaved inside each block.
pub fn encode_position(xyz: [f64; 3], n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::Domain(format!(
            "position code needs at least 2 frequencies per axis, got {n}"
        )));
    }
    let norm = (xyz[0] * xyz[0] + xyz[1] * xyz[1] + xyz[2] * xyz[2]).sqrt();
    if (norm - 1.0).abs() > UNIT_NORM_TOL {
        return Err(Error::Domain(format!(
            "position input must be a unit vector, got norm {norm:.12}"
        )));
    }
    let mut code = Vec::with_capacity(6 * n);
    for &v in &xyz {
        for i in 0..n {
            let freq = 10_000f64.powf(-(i as f64) / (n as f64 - 1.0));
            let arg = v * freq;
            code.push(arg.sin());
            code.push(arg.cos());
        }
    }
    Ok(code)
}

/// Adds a position code to a node embedding of the same dimension.
pub fn add_position(h: &[f64], p: &[f64]) -> Result<Vec<f64>> {
    if h.len() != p.len() {
        return Err(Error::Config(format!(
            "embedding dimension {} does not match position code dimension {}",
            h.len(),
            p.len()
        )));
    }
    Ok(h.iter().zip(p).map(|(a, b)| a + b).collect())
}
