//! Acceptance gate: one test per release criterion, each with its stated
//! tolerance and runtime budget. Oracles here are derived independently of
//! the library code they check.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::{Rng as _, SeedableRng as _};
use rand_chacha::ChaCha8Rng;

use oiqa_core::geometry::{build_graph_from_coords, distance_matrix_from_coords, haversine};
use oiqa_core::metrics::{plcc, rmse, srcc};
use oiqa_core::model::{forward, gradient_check, ModelConfig, ModelParams};
use oiqa_core::projection::{gnomonic_extract, gnomonic_pixel_latlon, ErpImage};
use oiqa_core::sphere::{equiangular_grid, fibonacci_sample, neighbor_stats};
use oiqa_core::tensor::Tensor;
use oiqa_core::training::{
    predict, train, DatasetManifest, Split, SyntheticDataset, TrainConfig,
};
use oiqa_core::{gat, transformer};

fn assert_within(start: Instant, budget: Duration, name: &str) {
    let elapsed = start.elapsed();
    assert!(elapsed < budget, "{name} took {elapsed:?}, budget {budget:?}");
}

fn random_coords(rng: &mut ChaCha8Rng, n: usize) -> Vec<(f64, f64)> {
    (0..n).map(|_| (rng.gen_range(-1.4..1.4), rng.gen_range(-3.1..3.1))).collect()
}

/// Geodesic distance via the chord construction, independent of the
/// library's haversine.
fn chord_distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    let unit = |(lat, lon): (f64, f64)| {
        [lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin()]
    };
    let (u, v) = (unit(a), unit(b));
    let chord =
        ((u[0] - v[0]).powi(2) + (u[1] - v[1]).powi(2) + (u[2] - v[2]).powi(2)).sqrt();
    2.0 * (chord / 2.0).asin()
}

#[test]
fn c01_sampling_matches_the_direct_formula_and_beats_the_grid() {
    let t0 = Instant::now();
    let golden = (1.0 + 5.0f64.sqrt()) / 2.0;
    for n in [2usize, 20, 21, 1000] {
        let points = fibonacci_sample(n).unwrap();
        assert_eq!(points.len(), n);
        for (k, p) in points.iter().enumerate() {
            let z = 1.0 - 2.0 * k as f64 / (n - 1) as f64;
            let turns = k as f64 / golden;
            let psi = 2.0 * std::f64::consts::PI * (turns - turns.floor());
            let theta = z.acos();
            assert!((p.z - z).abs() <= 1e-12, "z at k={k}, n={n}");
            assert!((p.theta - theta).abs() <= 1e-12, "theta at k={k}, n={n}");
            assert!((p.psi - psi).abs() <= 1e-12, "psi at k={k}, n={n}");
            let expect = [theta.sin() * psi.cos(), theta.sin() * psi.sin(), theta.cos()];
            for axis in 0..3 {
                assert!((p.xyz[axis] - expect[axis]).abs() <= 1e-12, "xyz at k={k}, n={n}");
            }
        }
    }

    let fib: Vec<(f64, f64)> =
        fibonacci_sample(20).unwrap().iter().map(|p| (p.lat_rad(), p.lon_rad())).collect();
    let fib_stats = neighbor_stats(&fib).unwrap();
    let grid_stats = neighbor_stats(&equiangular_grid(4, 5)).unwrap();
    assert!((fib_stats.nn_min - 0.46295472794035658).abs() <= 1e-12);
    assert!((fib_stats.nn_cv - 0.17386146595652516).abs() <= 1e-12);
    assert!((fib_stats.nn_ratio - 1.6702259832758151).abs() <= 1e-12);
    assert!(
        fib_stats.nn_cv < grid_stats.nn_cv,
        "spiral CV {} vs grid CV {}",
        fib_stats.nn_cv,
        grid_stats.nn_cv
    );
    assert_within(t0, Duration::from_secs(1), "sampling criterion");
    println!(
        "PASS sampling: pointwise <= 1e-12 for n in {{2,20,21,1000}}; CV {:.6} < grid {:.6}",
        fib_stats.nn_cv, grid_stats.nn_cv
    );
}

#[test]
fn c02_geodesic_distance_matches_the_chord_oracle() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xD157);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let a = (rng.gen_range(-1.5..1.5), rng.gen_range(-3.1..3.1));
        let b = (rng.gen_range(-1.5..1.5), rng.gen_range(-3.1..3.1));
        let lib = haversine(a, b).unwrap();
        let oracle = chord_distance(a, b);
        worst = worst.max((lib - oracle).abs());
        assert!((lib - oracle).abs() <= 1e-9, "distance mismatch at {a:?}, {b:?}");
        let swapped = haversine(b, a).unwrap();
        assert!((lib - swapped).abs() <= 1e-15, "symmetry at {a:?}, {b:?}");
    }
    for _ in 0..300 {
        let a = (rng.gen_range(-1.5..1.5), rng.gen_range(-3.1..3.1));
        let b = (rng.gen_range(-1.5..1.5), rng.gen_range(-3.1..3.1));
        let c = (rng.gen_range(-1.5..1.5), rng.gen_range(-3.1..3.1));
        let ab = haversine(a, b).unwrap();
        let bc = haversine(b, c).unwrap();
        let ac = haversine(a, c).unwrap();
        assert!(ac <= ab + bc + 1e-12, "triangle inequality at {a:?}, {b:?}, {c:?}");
    }
    assert_within(t0, Duration::from_secs(1), "geometry criterion");
    println!("PASS geometry: 1000 pairs within 1e-9 of the chord formula (worst {worst:.3e})");
}

#[test]
fn c03_viewport_graph_matches_the_brute_force_oracle() {
    let t0 = Instant::now();
    let (v, k) = (20usize, 5usize);
    let coords: Vec<(f64, f64)> =
        fibonacci_sample(v).unwrap().iter().map(|p| (p.lat_rad(), p.lon_rad())).collect();
    let graph = build_graph_from_coords(&coords, k).unwrap();
    assert_eq!(graph.num_nodes, v);

    let mut expected = BTreeSet::new();
    for i in 0..v {
        expected.insert((i, i));
        let mut candidates: Vec<(f64, usize)> = (0..v)
            .filter(|&j| j != i)
            .map(|j| (chord_distance(coords[i], coords[j]), j))
            .collect();
        candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for &(_, j) in candidates.iter().take(k) {
            expected.insert((j, i));
        }
    }
    let actual: BTreeSet<(usize, usize)> = graph.edges.iter().copied().collect();
    assert_eq!(actual, expected, "edge sets differ from the brute-force oracle");

    let mut in_degree = vec![0usize; v];
    for &(_, t) in &graph.edges {
        in_degree[t] += 1;
    }
    for i in 0..v {
        assert!(actual.contains(&(i, i)), "node {i} misses its self-loop");
        assert!(in_degree[i] >= k + 1, "node {i} in-degree {}", in_degree[i]);
    }
    assert_within(t0, Duration::from_secs(1), "graph criterion");
    println!(
        "PASS graph: V=20 k=5 edge set equals brute force ({} edges), in-degree >= 6",
        graph.edges.len()
    );
}

#[test]
fn c04_attention_rows_are_normalized_over_random_instances() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xA77);
    let tensor = |shape: &[usize], rng: &mut ChaCha8Rng| {
        let data = (0..shape.iter().product::<usize>())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    };

    for instance in 0..100 {
        let v = rng.gen_range(4..9);
        let heads = [1usize, 2, 3][rng.gen_range(0..3)];
        let dh = rng.gen_range(2..5);
        let c = heads * dh;
        let k = rng.gen_range(1..v.min(4));
        let coords = random_coords(&mut rng, v);
        let graph = build_graph_from_coords(&coords, k).unwrap();
        let x = tensor(&[v, c], &mut rng);

        // Local graph attention: rows normalized, non-neighbors exactly 0.
        let mut params = BTreeMap::new();
        params.insert("gat.0.w".to_string(), tensor(&[c, c], &mut rng));
        params.insert("gat.0.a".to_string(), tensor(&[heads, 2 * dh], &mut rng));
        let mask = graph.in_neighbor_mask();
        let (_, alphas) = gat::gat_attention(&params, 0, &x, &mask, heads).unwrap();
        for alpha in &alphas {
            for i in 0..v {
                let row = &alpha.data()[i * v..(i + 1) * v];
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() <= 1e-6, "gat row sum {sum} at {instance}");
                for (j, &value) in row.iter().enumerate() {
                    if !mask[i * v + j] {
                        assert_eq!(value, 0.0, "masked entry at {instance}, ({i},{j})");
                    }
                }
            }
        }

        // Global biased attention: rows normalized, strictly positive.
        let mut enc = BTreeMap::new();
        for name in ["wq", "wk", "wv", "wo"] {
            enc.insert(format!("enc.0.{name}"), tensor(&[c, c], &mut rng));
        }
        let distances = distance_matrix_from_coords(&coords).unwrap();
        let mut bias = transformer::distance_bias(&distances);
        bias.accumulate(&transformer::adjacency_bias(&x, &graph.knn_mask())).unwrap();
        let (_, alphas) = transformer::biased_attention(&enc, 0, &x, &bias, heads).unwrap();
        for alpha in &alphas {
            for i in 0..v {
                let row = &alpha.data()[i * v..(i + 1) * v];
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() <= 1e-6, "encoder row sum {sum} at {instance}");
                for &value in row {
                    assert!(value > 0.0, "non-positive attention at {instance}");
                }
            }
        }
    }
    assert_within(t0, Duration::from_secs(5), "attention normalization criterion");
    println!("PASS attention: 100 random instances normalized within 1e-6; masks exact");
}

#[test]
fn c05_bias_unit_cases_are_exact() {
    let t0 = Instant::now();

    // Constant distances collapse the min-max normalization to all ones.
    let d = oiqa_core::geometry::DistanceMatrix::from_raw(3, vec![0.0; 9]).unwrap();
    let b = transformer::distance_bias(&d);
    assert!(b.data().iter().all(|&x| x == 1.0), "constant distances must give bias 1");

    // Identical rows, orthogonal rows, and non-neighbors.
    let x = Tensor::from_vec(&[3, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
    let mask = vec![
        true, true, false, //
        true, true, true, //
        false, true, true,
    ];
    let adj = transformer::adjacency_bias(&x, &mask);
    assert!((adj.at2(0, 1) - 1.0).abs() <= 1e-12, "identical features");
    assert!((adj.at2(1, 2) - 0.5).abs() <= 1e-12, "orthogonal features");
    assert_eq!(adj.at2(0, 2), 0.0, "non-neighbor");
    assert_eq!(adj.at2(2, 0), 0.0, "non-neighbor");
    assert!((adj.at2(0, 0) - 1.0).abs() <= 1e-12, "self similarity");

    assert_within(t0, Duration::from_secs(1), "bias criterion");
    println!("PASS bias: constant-D all ones; affinities 1 / 0.5 / 0 within 1e-12");
}

#[test]
fn c06_gradient_suite_matches_finite_differences_over_three_seeds() {
    let t0 = Instant::now();
    let config = ModelConfig::desk();
    let reports = gradient_check(&config, &[0, 1, 2], 4).unwrap();
    assert!(!reports.is_empty());
    let mut worst = (String::new(), 0.0f64);
    let mut refined = 0usize;
    for report in &reports {
        assert!(report.entries_checked > 0, "group {} checked nothing", report.group);
        assert!(
            report.max_rel_err < 1e-3,
            "group {} max relative error {}",
            report.group,
            report.max_rel_err
        );
        refined += report.entries_refined;
        if report.max_rel_err > worst.1 {
            worst = (report.group.clone(), report.max_rel_err);
        }
    }
    assert_within(t0, Duration::from_secs(120), "gradient suite criterion");
    println!(
        "PASS gradients: all {} groups < 1e-3 over seeds 0..3 (worst {} {:.3e}, {} kink re-measurements)",
        reports.len(),
        worst.0,
        worst.1,
        refined
    );
}

#[test]
fn c07_overfit_on_sixteen_synthetic_samples() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticDataset { train_count: 16, test_count: 0, ..SyntheticDataset::default() };
    let manifest = DatasetManifest::load(&spec.generate(dir.path()).unwrap()).unwrap();
    let config = ModelConfig::desk();
    let tc = TrainConfig {
        lr: 1e-3,
        weight_decay: 0.0,
        batch_size: 4,
        epochs: 125,
        max_steps: Some(500),
        seed: 0,
        ..TrainConfig::default()
    };
    let outcome = train(&manifest, &config, &tc).unwrap();
    assert!(outcome.steps <= 500);
    let initial = outcome.epoch_losses.first().copied().unwrap();
    let last = outcome.epoch_losses.last().copied().unwrap();
    assert!(
        last <= 0.10 * initial,
        "loss {last:.6} did not reach 10% of initial {initial:.6}"
    );
    let (preds, truth) = predict(&manifest, Split::Train, &outcome.params, &config).unwrap();
    let rank_corr = srcc(&preds, &truth).unwrap();
    assert!(rank_corr >= 0.95, "train SRCC {rank_corr:.4}");

    // The trained model must order a pristine render above a fully noised
    // one (first and last train rows by construction).
    assert!(
        preds[0] > preds[15],
        "pristine {:.3} should outscore noised {:.3}",
        preds[0],
        preds[15]
    );
    assert_within(t0, Duration::from_secs(600), "overfit criterion");
    println!(
        "PASS overfit: loss {initial:.4} -> {last:.4} (ratio {:.4}), train SRCC {rank_corr:.4}, pristine {:.2} > noised {:.2}",
        last / initial,
        preds[0],
        preds[15]
    );
}

#[test]
fn c08_training_and_scoring_are_bitwise_deterministic() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticDataset {
        train_count: 4,
        test_count: 0,
        width: 128,
        height: 64,
        seed: 33,
    };
    let manifest = DatasetManifest::load(&spec.generate(dir.path()).unwrap()).unwrap();
    let config = ModelConfig { seed: 9, ..ModelConfig::desk() };
    let tc = TrainConfig {
        lr: 1e-3,
        epochs: 3,
        batch_size: 2,
        seed: 9,
        ..TrainConfig::default()
    };
    let weights_a = dir.path().join("a.bin");
    let weights_b = dir.path().join("b.bin");
    train(&manifest, &config, &tc).unwrap().params.save(&weights_a).unwrap();
    train(&manifest, &config, &tc).unwrap().params.save(&weights_b).unwrap();
    let bytes_a = std::fs::read(&weights_a).unwrap();
    let bytes_b = std::fs::read(&weights_b).unwrap();
    assert_eq!(bytes_a, bytes_b, "same-seed training must write identical weights files");

    let params = ModelParams::load(&weights_a).unwrap();
    let erp = ErpImage::from_path(&manifest.entries[0].path).unwrap();
    let s1 = forward(&erp, &params, &config).unwrap();
    let s2 = forward(&erp, &params, &config).unwrap();
    assert_eq!(s1.to_bits(), s2.to_bits(), "scoring must be bitwise stable");
    assert_within(t0, Duration::from_secs(120), "determinism criterion");
    println!(
        "PASS determinism: weight files identical ({} bytes); score bitwise stable ({s1:.6})",
        bytes_a.len()
    );
}

#[test]
fn c09_projection_center_fixed_point_and_seam_behavior() {
    let t0 = Instant::now();
    // The middle pixel of an odd-sized viewport maps back to its center.
    for &(lat, lon) in &[(0.0, 0.0), (17.0, -179.5), (-45.0, 90.0), (80.0, 12.5)] {
        let size = 33;
        let (out_lat, out_lon) = gnomonic_pixel_latlon((lat, lon), 90.0, size, size / 2, size / 2);
        let dlat = (out_lat - lat.to_radians()).abs();
        let mut dlon = (out_lon - lon.to_radians()).abs();
        if dlon > std::f64::consts::PI {
            dlon = 2.0 * std::f64::consts::PI - dlon;
        }
        assert!(dlat < 1e-6, "latitude drift {dlat} at ({lat},{lon})");
        assert!(dlon * out_lat.cos() < 1e-6, "longitude drift {dlon} at ({lat},{lon})");
    }

    // A constant image stays exactly constant through a seam-straddling
    // extraction.
    let (w, h) = (64usize, 32usize);
    let erp = ErpImage::from_pixels(w, h, vec![0.40625f32; w * h * 3]).unwrap();
    let vp = gnomonic_extract(&erp, (10.0, 179.0), 90.0, 17).unwrap();
    assert!(vp.pixels().iter().all(|&p| p == 0.40625), "seam viewport must stay constant");

    // On a row-constant image the seam is invisible: a seam-crossing
    // viewport equals the same-latitude viewport away from the seam.
    let mut pixels = vec![0.0f32; w * h * 3];
    for y in 0..h {
        let value = (y as f32 + 1.0) / h as f32;
        for x in 0..w {
            for c in 0..3 {
                pixels[(y * w + x) * 3 + c] = value;
            }
        }
    }
    let rows = ErpImage::from_pixels(w, h, pixels).unwrap();
    let at_seam = gnomonic_extract(&rows, (17.0, 180.0), 90.0, 21).unwrap();
    let away = gnomonic_extract(&rows, (17.0, 0.0), 90.0, 21).unwrap();
    assert_eq!(at_seam.pixels(), away.pixels(), "seam crossing must be exact");

    assert_within(t0, Duration::from_secs(5), "projection criterion");
    println!("PASS projection: center fixed point < 1e-6 rad; seam constancy exact");
}

#[test]
fn c10_metrics_match_brute_force_definitions() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x3E7);

    let pearson = |a: &[f64], b: &[f64]| -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
        cov / (va * vb).sqrt()
    };
    // Quadratic-time average ranks: rank = |{smaller}| + (|{equal}| + 1) / 2.
    let ranks = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|&x| {
                let smaller = v.iter().filter(|&&y| y < x).count() as f64;
                let equal = v.iter().filter(|&&y| y == x).count() as f64;
                smaller + (equal + 1.0) / 2.0
            })
            .collect()
    };

    let mut tie_vectors = 0usize;
    for case in 0..1000 {
        let n = rng.gen_range(2..40);
        let quantize = case % 3 == 0;
        let make = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let mut v: Vec<f64> = (0..n)
                .map(|_| {
                    let x: f64 = rng.gen_range(-5.0..5.0);
                    if quantize { (x * 2.0).round() / 2.0 } else { x }
                })
                .collect();
            let constant = v.iter().all(|&x| x == v[0]);
            if constant {
                v[0] += 1.0;
            }
            v
        };
        let a = make(&mut rng);
        let b = make(&mut rng);
        let has_ties = {
            let mut s = a.clone();
            s.sort_by(f64::total_cmp);
            s.windows(2).any(|w| w[0] == w[1])
        };
        if has_ties {
            tie_vectors += 1;
        }

        let lib_plcc = plcc(&a, &b).unwrap();
        assert!((lib_plcc - pearson(&a, &b)).abs() <= 1e-9, "plcc case {case}");
        let lib_srcc = srcc(&a, &b).unwrap();
        let oracle_srcc = pearson(&ranks(&a), &ranks(&b));
        assert!((lib_srcc - oracle_srcc).abs() <= 1e-9, "srcc case {case}");
        let lib_rmse = rmse(&a, &b).unwrap();
        let oracle_rmse =
            (a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64).sqrt();
        assert!((lib_rmse - oracle_rmse).abs() <= 1e-9, "rmse case {case}");
    }
    assert!(tie_vectors > 100, "tie coverage too thin: {tie_vectors}");
    assert_within(t0, Duration::from_secs(5), "metrics criterion");
    println!("PASS metrics: 1000 vectors within 1e-9 of definitions ({tie_vectors} with ties)");
}

#[test]
fn c11_default_configuration_is_faithful() {
    let t0 = Instant::now();
    let model = ModelConfig::default();
    assert_eq!(model.num_viewports, 20);
    assert_eq!(model.k, 5);
    assert_eq!(model.node_dim, 768);
    assert_eq!(model.heads, 4);
    assert_eq!(model.gat_layers, 3);
    assert_eq!(model.encoder_layers, 2);
    assert_eq!(model.fov_deg, 90.0);
    assert_eq!(model.viewport_size, 224);
    let tc = TrainConfig::default();
    assert_eq!(tc.lr, 1e-5);
    assert_eq!(tc.batch_size, 4);
    assert_eq!(tc.epochs, 30);
    assert_eq!(tc.weight_decay, 0.01);
    assert_eq!((tc.beta1, tc.beta2, tc.eps), (0.9, 0.999, 1e-8));
    model.validate().unwrap();
    let registry = ModelParams::expected_shapes(&model);
    assert_eq!(registry.len(), 84, "parameter registry size at the default width");
    assert_within(t0, Duration::from_secs(1), "config criterion");
    println!("PASS config: defaults are 20 viewports, k=5, 768-d, 4 heads, 3+2 layers, lr 1e-5, batch 4, 30 epochs, 224px");
}
