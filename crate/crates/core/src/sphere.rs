//! Fibonacci-lattice viewport sampling on the unit sphere.
//!
//! The k-th of n points is placed at height z_k = 1 - 2k/(n-1) with azimuth
//! psi_k = 2*pi*frac(k/phi), where phi is the golden ratio. Successive points
//! wind around the sphere at the golden angle, which keeps nearest-neighbor
//! distances close to uniform and avoids the polar pile-up of equiangular
//! latitude-longitude grids.
//!
//! Convention note: latitude is defined as theta*180/pi - 90 and longitude as
//! psi*180/pi - 180, so z = +1 maps to lat = -90 degrees. This is not the
//! geodetic convention, but every consumer in this crate (distance matrix,
//! ERP addressing, positional encoding) uses the same mapping, so it cancels
//! end to end. ERP row 0 corresponds to lat = +90 under this convention.

use crate::error::{Error, Result};

/// Golden ratio, the azimuthal step generator.
pub const PHI: f64 = 1.618_033_988_749_894_9;

/// A sampled viewport center in every coordinate system the pipeline needs.
#[derive(Clone, Debug, PartialEq)]
pub struct SpherePoint {
    /// Sample index k in [0, n).
    pub index: usize,
    /// Height on the unit sphere, in [-1, 1].
    pub z: f64,
    /// Polar angle arccos(z), radians in [0, pi].
    pub theta: f64,
    /// Azimuth 2*pi*frac(k/phi), radians in [0, 2*pi).
    pub psi: f64,
    /// Latitude in degrees, [-90, 90].
    pub lat_deg: f64,
    /// Longitude in degrees, [-180, 180).
    pub lon_deg: f64,
    /// Unit vector (sin t cos p, sin t sin p, cos t).
    pub xyz: [f64; 3],
}

impl SpherePoint {
    /// Latitude in radians.
    #[must_use]
    pub fn lat_rad(&self) -> f64 {
        self.lat_deg.to_radians()
    }

    /// Longitude in radians.
    #[must_use]
    pub fn lon_rad(&self) -> f64 {
        self.lon_deg.to_radians()
    }
}

/// Samples `n` near-uniform viewport centers on the unit sphere.
///
/// Fails for `n < 2`: the lattice spaces heights by 2/(n-1), so a single
/// point would divide by zero.
pub fn fibonacci_sample(n: usize) -> Result<Vec<SpherePoint>> {
    if n < 2 {
        return Err(Error::Domain(format!(
            "viewport count must be at least 2: the height spacing divides by n - 1 (got n = {n})"
        )));
    }
    let nm1 = (n - 1) as f64;
    let mut points = Vec::with_capacity(n);
    for k in 0..n {
        let kf = k as f64;
        let z = 1.0 - 2.0 * kf / nm1;
        let theta = z.acos();
        let turns = kf / PHI;
        let psi = 2.0 * std::f64::consts::PI * (turns - turns.floor());
        let (lat_deg, lon_deg) = geographic_from_angles(theta, psi);
        let (st, ct) = theta.sin_cos();
        let (sp, cp) = psi.sin_cos();
        points.push(SpherePoint {
            index: k,
            z,
            theta,
            psi,
            lat_deg,
            lon_deg,
            xyz: [st * cp, st * sp, ct],
        });
    }
    Ok(points)
}

/// Converts a sampled point to geographic (lat, lon) in degrees.
#[must_use]
pub fn to_geographic(p: &SpherePoint) -> (f64, f64) {
    geographic_from_angles(p.theta, p.psi)
}

fn geographic_from_angles(theta: f64, psi: f64) -> (f64, f64) {
    let lat = theta * 180.0 / std::f64::consts::PI - 90.0;
    let lon = psi * 180.0 / std::f64::consts::PI - 180.0;
    (lat, lon)
}

/// Nearest-neighbor geodesic distance statistics for a point set, used by the
/// uniformity report and the sampling regression tests.
#[derive(Clone, Copy, Debug)]
pub struct NeighborStats {
    /// Smallest distance over all pairs.
    pub min_pairwise: f64,
    /// Smallest nearest-neighbor distance.
    pub nn_min: f64,
    /// Largest nearest-neighbor distance.
    pub nn_max: f64,
    /// Mean nearest-neighbor distance.
    pub nn_mean: f64,
    /// Coefficient of variation (population std / mean) of the
    /// nearest-neighbor distances.
    pub nn_cv: f64,
    /// nn_max / nn_min.
    pub nn_ratio: f64,
}

/// Computes [`NeighborStats`] from per-point (lat, lon) radians.
pub fn neighbor_stats(coords: &[(f64, f64)]) -> Result<NeighborStats> {
    if coords.len() < 2 {
        return Err(Error::Domain(
            "neighbor statistics need at least 2 points".to_string(),
        ));
    }
    let n = coords.len();
    let mut min_pairwise = f64::INFINITY;
    let mut nn = vec![f64::INFINITY; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = crate::geometry::haversine(coords[i], coords[j])?;
            min_pairwise = min_pairwise.min(d);
            if d < nn[i] {
                nn[i] = d;
            }
            if d < nn[j] {
                nn[j] = d;
            }
        }
    }
    let nn_min = nn.iter().cloned().fold(f64::INFINITY, f64::min);
    let nn_max = nn.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let nn_mean = nn.iter().sum::<f64>() / n as f64;
    let var = nn.iter().map(|d| (d - nn_mean) * (d - nn_mean)).sum::<f64>() / n as f64;
    Ok(NeighborStats {
        min_pairwise,
        nn_min,
        nn_max,
        nn_mean,
        nn_cv: var.sqrt() / nn_mean,
        nn_ratio: nn_max / nn_min,
    })
}

/// A 20-point-style equiangular latitude-longitude grid at cell centers,
/// the baseline the Fibonacci lattice is compared against. Returns per-point
/// (lat, lon) in radians.
#[must_use]
pub fn equiangular_grid(rings: usize, columns: usize) -> Vec<(f64, f64)> {
    let mut coords = Vec::with_capacity(rings * columns);
    for r in 0..rings {
        let lat = -90.0 + 180.0 * (r as f64 + 0.5) / rings as f64;
        for c in 0..columns {
            let lon = -180.0 + 360.0 * c as f64 / columns as f64;
            coords.push((lat.to_radians(), lon.to_radians()));
        }
    }
    coords
}
