//! Geodesic distances and viewport graph construction.
//!
//! Distances are great-circle arcs on the unit sphere computed with the
//! haversine formula, so every value lies in [0, pi]. The viewport graph
//! connects each node to its k nearest neighbors in both directions and adds
//! a self-loop per node; the edge list is deduplicated and sorted so that the
//! same inputs always produce the same graph.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sphere::SpherePoint;

/// Symmetric matrix of pairwise geodesic distances, radians in [0, pi].
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    d: Vec<f64>,
}

impl DistanceMatrix {
    /// Builds from a row-major buffer; validates symmetry, zero diagonal, and
    /// the [0, pi] range.
    pub fn from_raw(n: usize, d: Vec<f64>) -> Result<Self> {
        if d.len() != n * n {
            return Err(Error::Shape(format!(
                "distance matrix buffer has {} entries, expected {}",
                d.len(),
                n * n
            )));
        }
        let m = DistanceMatrix { n, d };
        for i in 0..n {
            if m.get(i, i) != 0.0 {
                return Err(Error::Domain(format!("nonzero diagonal at ({i},{i})")));
            }
            for j in 0..n {
                let v = m.get(i, j);
                if !v.is_finite() || v < 0.0 || v > std::f64::consts::PI + 1e-12 {
                    return Err(Error::Domain(format!(
                        "distance {v} at ({i},{j}) outside [0, pi]"
                    )));
                }
                if (v - m.get(j, i)).abs() != 0.0 {
                    return Err(Error::Domain(format!("asymmetry at ({i},{j})")));
                }
            }
        }
        Ok(m)
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.n
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    #[must_use]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }

    #[must_use]
    pub fn raw(&self) -> &[f64] {
        &self.d
    }

    /// Smallest and largest entries, diagonal included.
    #[must_use]
    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.d {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }
}

/// Great-circle distance between two (lat, lon) positions in radians.
///
/// `a` is clamped to [0, 1] before the square roots to absorb floating-point
/// overshoot at antipodes.
pub fn haversine(p1: (f64, f64), p2: (f64, f64)) -> Result<f64> {
    let (lat1, lon1) = p1;
    let (lat2, lon2) = p2;
    if !(lat1.is_finite() && lon1.is_finite() && lat2.is_finite() && lon2.is_finite()) {
        return Err(Error::Domain("haversine requires finite coordinates".to_string()));
    }
    if lat1.abs() > std::f64::consts::FRAC_PI_2 + 1e-12
        || lat2.abs() > std::f64::consts::FRAC_PI_2 + 1e-12
    {
        return Err(Error::Domain(format!(
            "latitude outside [-pi/2, pi/2]: {lat1} / {lat2}"
        )));
    }
    let dphi = lat2 - lat1;
    let dlambda = lon2 - lon1;
    let sp = (dphi / 2.0).sin();
    let sl = (dlambda / 2.0).sin();
    let a = (sp * sp + lat1.cos() * lat2.cos() * sl * sl).clamp(0.0, 1.0);
    Ok(2.0 * a.sqrt().atan2((1.0 - a).sqrt()))
}

/// Pairwise haversine distances for a sampled point set.
///
/// The upper triangle is computed once and mirrored, which makes symmetry
/// exact by construction.
pub fn distance_matrix(points: &[SpherePoint]) -> Result<DistanceMatrix> {
    distance_matrix_from_coords(
        &points.iter().map(|p| (p.lat_rad(), p.lon_rad())).collect::<Vec<_>>(),
    )
}

/// Same as [`distance_matrix`] but from raw (lat, lon) radians.
pub fn distance_matrix_from_coords(coords: &[(f64, f64)]) -> Result<DistanceMatrix> {
    let n = coords.len();
    if n < 2 {
        return Err(Error::Shape(format!(
            "distance matrix needs at least 2 points, got {n}"
        )));
    }
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = haversine(coords[i], coords[j])?;
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    Ok(DistanceMatrix { n, d })
}

/// Per-node k-nearest-neighbor lists, self excluded, sorted by
/// (distance, index) ascending so ties resolve to the lower node index.
pub fn knn(d: &DistanceMatrix, k: usize) -> Result<Vec<Vec<usize>>> {
    let v = d.len();
    if k == 0 {
        return Err(Error::Config("k must be positive".to_string()));
    }
    if k >= v {
        return Err(Error::Config(format!(
            "k must satisfy k < V: got k = {k} with V = {v}"
        )));
    }
    let mut lists = Vec::with_capacity(v);
    for i in 0..v {
        let mut order: Vec<usize> = (0..v).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| {
            d.get(i, a)
                .partial_cmp(&d.get(i, b))
                .expect("distances are finite")
                .then(a.cmp(&b))
        });
        order.truncate(k);
        lists.push(order);
    }
    Ok(lists)
}

/// Directed viewport graph: k-nearest-neighbor edges in both directions plus
/// a self-loop per node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewportGraph {
    pub num_nodes: usize,
    pub k: usize,
    /// Deduplicated, lexicographically sorted (src, dst) pairs.
    pub edges: Vec<(usize, usize)>,
    /// Per-node (lat, lon) in radians.
    pub coords: Vec<(f64, f64)>,
    /// Per-node nearest-neighbor lists the edges were built from.
    pub neighbors: Vec<Vec<usize>>,
}

impl ViewportGraph {
    /// Checks the structural contract: sorted deduplicated edges, a self-loop
    /// per node, symmetric neighbor edges, and in-degree >= k + 1.
    pub fn validate(&self) -> Result<()> {
        if self.coords.len() != self.num_nodes || self.neighbors.len() != self.num_nodes {
            return Err(Error::Structure(format!(
                "node count {} disagrees with coords/neighbors lengths {}/{}",
                self.num_nodes,
                self.coords.len(),
                self.neighbors.len()
            )));
        }
        for w in self.edges.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Structure(format!(
                    "edge list not sorted/deduplicated near {:?}",
                    w[0]
                )));
            }
        }
        let mut in_degree = vec![0usize; self.num_nodes];
        for &(s, t) in &self.edges {
            if s >= self.num_nodes || t >= self.num_nodes {
                return Err(Error::Structure(format!("edge ({s},{t}) out of range")));
            }
            in_degree[t] += 1;
        }
        for i in 0..self.num_nodes {
            if self.edges.binary_search(&(i, i)).is_err() {
                return Err(Error::Structure(format!("node {i} is missing its self-loop")));
            }
            if in_degree[i] < self.k + 1 {
                return Err(Error::Structure(format!(
                    "node {i} has in-degree {} < k + 1 = {}",
                    in_degree[i],
                    self.k + 1
                )));
            }
            for &j in &self.neighbors[i] {
                if self.edges.binary_search(&(i, j)).is_err()
                    || self.edges.binary_search(&(j, i)).is_err()
                {
                    return Err(Error::Structure(format!(
                        "neighbor pair ({i},{j}) is missing a direction"
                    )));
                }
            }
        }
        Ok(())
    }

    /// In-neighbor sets as a row-major boolean mask: `mask[i*V + j]` is true
    /// when edge (j, i) exists, i.e. j feeds node i.
    #[must_use]
    pub fn in_neighbor_mask(&self) -> Vec<bool> {
        let v = self.num_nodes;
        let mut mask = vec![false; v * v];
        for &(s, t) in &self.edges {
            mask[t * v + s] = true;
        }
        mask
    }

    /// Neighbor-list membership as a row-major boolean mask: `mask[i*V + j]`
    /// is true when j is one of node i's k nearest neighbors.
    #[must_use]
    pub fn knn_mask(&self) -> Vec<bool> {
        let v = self.num_nodes;
        let mut mask = vec![false; v * v];
        for (i, list) in self.neighbors.iter().enumerate() {
            for &j in list {
                mask[i * v + j] = true;
            }
        }
        mask
    }
}

/// Builds the viewport graph for a sampled point set.
pub fn build_graph(points: &[SpherePoint], k: usize) -> Result<ViewportGraph> {
    let coords: Vec<(f64, f64)> = points.iter().map(|p| (p.lat_rad(), p.lon_rad())).collect();
    build_graph_from_coords(&coords, k)
}

/// Same as [`build_graph`] but from raw (lat, lon) radians.
pub fn build_graph_from_coords(coords: &[(f64, f64)], k: usize) -> Result<ViewportGraph> {
    let d = distance_matrix_from_coords(coords)?;
    let neighbors = knn(&d, k)?;
    let v = coords.len();
    let mut edges = Vec::with_capacity(v * (2 * k + 1));
    for i in 0..v {
        edges.push((i, i));
        for &j in &neighbors[i] {
            edges.push((i, j));
            edges.push((j, i));
        }
    }
    edges.sort_unstable();
    edges.dedup();
    let graph = ViewportGraph { num_nodes: v, k, edges, coords: coords.to_vec(), neighbors };
    graph.validate()?;
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::fibonacci_sample;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng as _, SeedableRng as _};
    use rand_chacha::ChaCha8Rng;

    const FRAC_PI_2: f64 = std::f64::consts::FRAC_PI_2;
    const PI: f64 = std::f64::consts::PI;

    fn random_coord(rng: &mut ChaCha8Rng) -> (f64, f64) {
        // Uniform over the sphere via z = cos(theta), then converted to the
        // crate's latitude convention.
        let z: f64 = rng.gen_range(-1.0..1.0);
        let lon: f64 = rng.gen_range(-PI..PI);
        (z.acos() - FRAC_PI_2, lon)
    }

    fn unit_vec(lat: f64, lon: f64) -> [f64; 3] {
        (lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin()).into()
    }

    // ==================== Haversine Tests ====================

    #[test]
    fn coincident_points_have_zero_distance() {
        assert_eq!(haversine((0.3, -1.2), (0.3, -1.2)).unwrap(), 0.0);
    }

    #[test]
    fn quarter_and_half_turns_on_the_equator() {
        let d = haversine((0.0, 0.0), (0.0, FRAC_PI_2)).unwrap();
        assert!((d - FRAC_PI_2).abs() < 1e-12);
        let d = haversine((0.0, 0.0), (0.0, PI)).unwrap();
        assert!((d - PI).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_finite_and_out_of_range_latitudes() {
        assert!(haversine((f64::NAN, 0.0), (0.0, 0.0)).is_err());
        assert!(haversine((0.0, f64::INFINITY), (0.0, 0.0)).is_err());
        assert!(haversine((2.0, 0.0), (0.0, 0.0)).is_err());
    }

    #[test]
    fn agrees_with_the_chord_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let p = random_coord(&mut rng);
            let q = random_coord(&mut rng);
            let u = unit_vec(p.0, p.1);
            let v = unit_vec(q.0, q.1);
            let chord = ((u[0] - v[0]).powi(2) + (u[1] - v[1]).powi(2) + (u[2] - v[2]).powi(2))
                .sqrt();
            let oracle = 2.0 * (chord / 2.0).asin();
            let d = haversine(p, q).unwrap();
            assert!((d - oracle).abs() < 1e-9, "chord oracle mismatch: {d} vs {oracle}");
        }
    }

    proptest! {
        #[test]
        fn symmetric_and_in_range(
            z1 in -1.0f64..1.0, lon1 in -PI..PI,
            z2 in -1.0f64..1.0, lon2 in -PI..PI,
        ) {
            let p = (z1.acos() - FRAC_PI_2, lon1);
            let q = (z2.acos() - FRAC_PI_2, lon2);
            let d1 = haversine(p, q).unwrap();
            let d2 = haversine(q, p).unwrap();
            prop_assert!((d1 - d2).abs() < 1e-12);
            prop_assert!((0.0..=PI + 1e-12).contains(&d1));
        }

        #[test]
        fn triangle_inequality(
            z1 in -1.0f64..1.0, lon1 in -PI..PI,
            z2 in -1.0f64..1.0, lon2 in -PI..PI,
            z3 in -1.0f64..1.0, lon3 in -PI..PI,
        ) {
            let a = (z1.acos() - FRAC_PI_2, lon1);
            let b = (z2.acos() - FRAC_PI_2, lon2);
            let c = (z3.acos() - FRAC_PI_2, lon3);
            let ab = haversine(a, b).unwrap();
            let bc = haversine(b, c).unwrap();
            let ac = haversine(a, c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-9);
        }
    }

    // ==================== Distance Matrix Tests ====================

    #[test]
    fn two_identical_points_give_the_zero_matrix() {
        let d = distance_matrix_from_coords(&[(0.25, 1.0), (0.25, 1.0)]).unwrap();
        assert_eq!(d.raw(), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn equator_triple_has_known_offdiagonals() {
        let d =
            distance_matrix_from_coords(&[(0.0, 0.0), (0.0, FRAC_PI_2), (0.0, PI)]).unwrap();
        assert!((d.get(0, 1) - FRAC_PI_2).abs() < 1e-12);
        assert!((d.get(1, 2) - FRAC_PI_2).abs() < 1e-12);
        assert!((d.get(0, 2) - PI).abs() < 1e-12);
    }

    #[test]
    fn matches_scalar_loop_oracle_on_fibonacci_points() {
        let pts = fibonacci_sample(20).unwrap();
        let d = distance_matrix(&pts).unwrap();
        for i in 0..20 {
            for j in 0..20 {
                // Oracle: direct formula transcription, no shared code path.
                let (lat1, lon1) = (pts[i].lat_rad(), pts[i].lon_rad());
                let (lat2, lon2) = (pts[j].lat_rad(), pts[j].lon_rad());
                let a = ((lat2 - lat1) / 2.0).sin().powi(2)
                    + lat1.cos() * lat2.cos() * ((lon2 - lon1) / 2.0).sin().powi(2);
                let a = a.clamp(0.0, 1.0);
                let oracle = 2.0 * a.sqrt().atan2((1.0 - a).sqrt());
                assert!((d.get(i, j) - oracle).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_single_point() {
        assert!(distance_matrix_from_coords(&[(0.0, 0.0)]).is_err());
    }

    #[test]
    fn from_raw_validates_invariants() {
        assert!(DistanceMatrix::from_raw(2, vec![0.0, 1.0, 1.0, 0.0]).is_ok());
        assert!(DistanceMatrix::from_raw(2, vec![0.0, 1.0, 2.0, 0.0]).is_err());
        assert!(DistanceMatrix::from_raw(2, vec![0.1, 1.0, 1.0, 0.0]).is_err());
        assert!(DistanceMatrix::from_raw(2, vec![0.0, 4.0, 4.0, 0.0]).is_err());
    }

    // ==================== kNN Tests ====================

    #[test]
    fn ties_break_toward_the_lower_index() {
        // Exactly tied distances: every neighbor list must prefer the lower
        // node index.
        let d = DistanceMatrix::from_raw(
            3,
            vec![0.0, 0.5, 0.5, 0.5, 0.0, 0.5, 0.5, 0.5, 0.0],
        )
        .unwrap();
        let lists = knn(&d, 1).unwrap();
        assert_eq!(lists[0], vec![1]);
        assert_eq!(lists[1], vec![0]);
        assert_eq!(lists[2], vec![0]);

        // A geometric tie: (0, +s) and (0, -s) are bitwise equidistant from
        // the origin point, so node 0 keeps the lower index.
        let s = 2.0 * PI / 3.0;
        let geo = distance_matrix_from_coords(&[(0.0, 0.0), (0.0, s), (0.0, -s)]).unwrap();
        assert_eq!(geo.get(0, 1), geo.get(0, 2));
        assert_eq!(knn(&geo, 1).unwrap()[0], vec![1]);
    }

    #[test]
    fn nearest_by_inspection_on_the_equator() {
        let d =
            distance_matrix_from_coords(&[(0.0, 0.0), (0.0, 0.1), (0.0, 3.0)]).unwrap();
        let lists = knn(&d, 1).unwrap();
        assert_eq!(lists[0], vec![1]);
        assert_eq!(lists[2], vec![1]);
    }

    #[test]
    fn matches_brute_force_sort_oracle_on_fibonacci_points() {
        let pts = fibonacci_sample(20).unwrap();
        let d = distance_matrix(&pts).unwrap();
        let lists = knn(&d, 5).unwrap();
        for i in 0..20 {
            let mut oracle: Vec<(f64, usize)> =
                (0..20).filter(|&j| j != i).map(|j| (d.get(i, j), j)).collect();
            oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let expected: Vec<usize> = oracle.iter().take(5).map(|&(_, j)| j).collect();
            assert_eq!(lists[i], expected, "neighbor list mismatch at node {i}");
        }
    }

    #[test]
    fn rejects_k_not_less_than_v() {
        let d = distance_matrix_from_coords(&[(0.0, 0.0), (0.0, 1.0)]).unwrap();
        assert!(knn(&d, 2).is_err());
        assert!(knn(&d, 0).is_err());
        assert!(knn(&d, 1).is_ok());
    }

    // ==================== Graph Construction Tests ====================

    #[test]
    fn two_nodes_make_the_only_possible_graph() {
        let g = build_graph_from_coords(&[(0.0, 0.0), (0.0, 1.0)], 1).unwrap();
        assert_eq!(g.edges, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
    }

    #[test]
    fn equilateral_triple_with_k2_is_complete_with_self_loops() {
        let step = 2.0 * PI / 3.0;
        let g =
            build_graph_from_coords(&[(0.0, 0.0), (0.0, step), (0.0, -step)], 2).unwrap();
        assert_eq!(g.edges.len(), 9);
    }

    #[test]
    fn fibonacci_20_edge_count_is_within_star_union_bounds() {
        let pts = fibonacci_sample(20).unwrap();
        let g = build_graph(&pts, 5).unwrap();
        assert!(g.edges.len() >= 20 * 6, "every node has k out-edges plus a self-loop");
        assert!(g.edges.len() <= 20 * 11, "at most 2k neighbor edges plus a self-loop each");
        g.validate().unwrap();
    }

    #[test]
    fn edge_set_equals_brute_force_union() {
        let pts = fibonacci_sample(20).unwrap();
        let d = distance_matrix(&pts).unwrap();
        let g = build_graph(&pts, 5).unwrap();
        let mut oracle = std::collections::BTreeSet::new();
        for i in 0..20 {
            oracle.insert((i, i));
            let mut order: Vec<(f64, usize)> =
                (0..20).filter(|&j| j != i).map(|j| (d.get(i, j), j)).collect();
            order.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for &(_, j) in order.iter().take(5) {
                oracle.insert((i, j));
                oracle.insert((j, i));
            }
        }
        let got: std::collections::BTreeSet<(usize, usize)> = g.edges.iter().copied().collect();
        assert_eq!(got, oracle);
    }

    #[test]
    fn graph_is_permutation_invariant_up_to_relabeling() {
        let pts = fibonacci_sample(12).unwrap();
        let coords: Vec<(f64, f64)> = pts.iter().map(|p| (p.lat_rad(), p.lon_rad())).collect();
        let base = build_graph_from_coords(&coords, 3).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut perm: Vec<usize> = (0..12).collect();
        perm.shuffle(&mut rng);
        let permuted: Vec<(f64, f64)> = perm.iter().map(|&i| coords[i]).collect();
        let shuffled = build_graph_from_coords(&permuted, 3).unwrap();

        // Map shuffled-space edges back to original labels and compare sets.
        let mut mapped: Vec<(usize, usize)> =
            shuffled.edges.iter().map(|&(s, t)| (perm[s], perm[t])).collect();
        mapped.sort_unstable();
        assert_eq!(mapped, base.edges);
    }

    #[test]
    fn masks_agree_with_edges() {
        let pts = fibonacci_sample(8).unwrap();
        let g = build_graph(&pts, 2).unwrap();
        let in_mask = g.in_neighbor_mask();
        for i in 0..8 {
            for j in 0..8 {
                let has = g.edges.binary_search(&(j, i)).is_ok();
                assert_eq!(in_mask[i * 8 + j], has);
            }
        }
        let knn_mask = g.knn_mask();
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(knn_mask[i * 8 + j], g.neighbors[i].contains(&j));
            }
        }
    }
}
