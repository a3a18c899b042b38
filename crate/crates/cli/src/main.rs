//! Command-line surface for the omnidirectional image quality pipeline.
//!
//! Every subcommand prints machine-readable results on stdout and
//! diagnostics on stderr. Exit codes: 0 on success, 1 on a domain or data
//! error, 2 on a usage error. The `OIQA_THREADS` environment variable caps
//! internal parallelism.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use serde::Deserialize;

use oiqa_core::error::{Error, Result};
use oiqa_core::geometry::build_graph_from_coords;
use oiqa_core::model::{forward, gradient_check, ModelConfig, ModelParams};
use oiqa_core::projection::{gnomonic_extract, ErpImage};
use oiqa_core::sphere::{equiangular_grid, fibonacci_sample, neighbor_stats};
use oiqa_core::training::{evaluate, train, DatasetManifest, Split, TrainConfig};

const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Parser)]
#[command(
    name = "oiqa",
    version,
    about = "No-reference omnidirectional image quality assessment pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample near-uniform viewport centers on the unit sphere.
    ///
    /// Prints a JSON array of objects {"k","theta","psi","lat","lon","xyz"}
    /// with theta/psi in radians and lat/lon in degrees.
    Sample {
        /// Number of points.
        #[arg(long, default_value_t = 20)]
        count: usize,
        /// Write the JSON here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Extract gnomonic viewports from an equirectangular image.
    ///
    /// Writes vp_<k>.png per point plus manifest.json into --outdir and
    /// prints the manifest path.
    Extract {
        /// Equirectangular source image (PNG or JPEG).
        #[arg(long)]
        input: PathBuf,
        /// Points file produced by `sample`.
        #[arg(long)]
        points: PathBuf,
        /// Field of view in degrees (default from the configuration).
        #[arg(long)]
        fov: Option<f64>,
        /// Square viewport resolution (default from the configuration).
        #[arg(long)]
        size: Option<usize>,
        /// Output directory, created if missing.
        #[arg(long)]
        outdir: PathBuf,
        /// JSON configuration overrides.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Build the k-nearest-neighbor viewport graph from sampled points.
    ///
    /// Prints JSON {"num_nodes","k","edges","coords"} with lexicographically
    /// sorted directed edges and (lat, lon) coordinates in radians.
    Graph {
        /// Points file produced by `sample`.
        #[arg(long)]
        points: PathBuf,
        /// Neighbors per node, excluding the self-loop; must be below the
        /// number of points.
        #[arg(long)]
        k: usize,
        /// Write the JSON here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train the model on a dataset manifest and save the weights.
    ///
    /// Prints the final epoch's mean loss as `loss=<v>`.
    Train {
        /// CSV manifest with header path,mos,split.
        #[arg(long)]
        manifest: PathBuf,
        /// Where to write the trained weights.
        #[arg(long)]
        out: PathBuf,
        /// Seed for initialization and shuffling (overrides the
        /// configuration's seed).
        #[arg(long)]
        seed: Option<u64>,
        /// JSON configuration overrides.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Evaluate trained weights against a manifest split.
    ///
    /// Prints PLCC=<v>, SRCC=<v>, RMSE=<v>, one per line, 6 decimals.
    Eval {
        /// CSV manifest with header path,mos,split.
        #[arg(long)]
        manifest: PathBuf,
        /// Weights file written by `train`.
        #[arg(long)]
        weights: PathBuf,
        /// Which split to evaluate.
        #[arg(long, default_value = "test", value_parser = ["train", "test"])]
        split: String,
        /// Fit a four-parameter logistic remap before PLCC and RMSE.
        #[arg(long)]
        remap: bool,
        /// JSON configuration overrides.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score a single equirectangular image.
    ///
    /// Prints score=<v> with 6 decimals.
    Score {
        /// Equirectangular image (PNG or JPEG).
        #[arg(long)]
        image: PathBuf,
        /// Weights file written by `train`.
        #[arg(long)]
        weights: PathBuf,
        /// JSON configuration overrides.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Audit analytic gradients against central finite differences.
    ///
    /// Runs on the reduced verification configuration unless overridden and
    /// prints a CSV table of per-group maximum relative errors; fails if any
    /// group reaches 1e-3.
    Gradcheck {
        /// Seed for parameters and probe inputs.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Entries sampled per parameter tensor.
        #[arg(long, default_value_t = 4)]
        entries: usize,
        /// JSON configuration overrides (applied to the reduced
        /// configuration).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare nearest-neighbor uniformity of the spiral sampler against an
    /// equiangular grid of the same size.
    ///
    /// Prints a CSV table of nearest-neighbor distance statistics.
    UniformityReport {
        /// Number of points per sampler.
        #[arg(long, default_value_t = 20)]
        count: usize,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

/// Optional overrides mirroring the model configuration plus the training
/// hyperparameters; unknown keys are rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FileConfig {
    num_viewports: Option<usize>,
    k: Option<usize>,
    node_dim: Option<usize>,
    gat_layers: Option<usize>,
    heads: Option<usize>,
    encoder_layers: Option<usize>,
    fov_deg: Option<f64>,
    viewport_size: Option<usize>,
    pe_frequencies: Option<usize>,
    backbone_channels: Option<[usize; 4]>,
    head_hidden: Option<usize>,
    seed: Option<u64>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    epochs: Option<usize>,
    weight_decay: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    eps: Option<f64>,
    max_steps: Option<usize>,
}

impl FileConfig {
    fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    fn apply(&self, model: &mut ModelConfig, tc: &mut TrainConfig) {
        macro_rules! set {
            ($target:expr, $field:ident) => {
                if let Some(v) = self.$field {
                    $target.$field = v;
                }
            };
        }
        set!(model, num_viewports);
        set!(model, k);
        set!(model, node_dim);
        set!(model, gat_layers);
        set!(model, heads);
        set!(model, encoder_layers);
        set!(model, fov_deg);
        set!(model, viewport_size);
        set!(model, pe_frequencies);
        set!(model, backbone_channels);
        set!(model, head_hidden);
        set!(model, seed);
        set!(tc, lr);
        set!(tc, batch_size);
        set!(tc, epochs);
        set!(tc, weight_decay);
        set!(tc, beta1);
        set!(tc, beta2);
        set!(tc, eps);
        if self.max_steps.is_some() {
            tc.max_steps = self.max_steps;
        }
    }
}

/// Applies optional file overrides onto a base configuration and validates.
fn configure(base: ModelConfig, path: Option<&Path>) -> Result<(ModelConfig, TrainConfig)> {
    let mut model = base;
    let mut tc = TrainConfig::default();
    if let Some(p) = path {
        FileConfig::load(p)?.apply(&mut model, &mut tc);
    }
    model.validate()?;
    Ok((model, tc))
}

/// One record of a `sample` points file.
#[derive(Deserialize)]
struct PointRecord {
    k: usize,
    #[allow(dead_code)]
    theta: f64,
    #[allow(dead_code)]
    psi: f64,
    lat: f64,
    lon: f64,
    #[allow(dead_code)]
    xyz: [f64; 3],
}

fn load_points(path: &Path) -> Result<Vec<PointRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let points: Vec<PointRecord> =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    if points.is_empty() {
        return Err(Error::format(path, "points file is empty"));
    }
    Ok(points)
}

fn write_or_print(output: Option<&Path>, content: &str) -> Result<()> {
    match output {
        Some(path) => std::fs::write(path, content).map_err(|e| Error::io(path, e)),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

/// 17-significant-digit decimal serialization, round-trip exact for f64.
fn num17(v: f64) -> String {
    format!("{v:.16e}")
}

fn run_sample(count: usize, output: Option<&Path>) -> Result<()> {
    let points = fibonacci_sample(count)?;
    let mut json = String::from("[\n");
    for (i, p) in points.iter().enumerate() {
        let sep = if i + 1 == points.len() { "" } else { "," };
        writeln!(
            json,
            "{{\"k\":{},\"theta\":{},\"psi\":{},\"lat\":{},\"lon\":{},\"xyz\":[{},{},{}]}}{sep}",
            p.index,
            num17(p.theta),
            num17(p.psi),
            num17(p.lat_deg),
            num17(p.lon_deg),
            num17(p.xyz[0]),
            num17(p.xyz[1]),
            num17(p.xyz[2]),
        )
        .expect("writing to a String cannot fail");
    }
    json.push_str("]\n");
    write_or_print(output, &json)
}

fn run_extract(
    input: &Path,
    points_path: &Path,
    fov: Option<f64>,
    size: Option<usize>,
    outdir: &Path,
    config: Option<&Path>,
) -> Result<()> {
    let (model, _) = configure(ModelConfig::default(), config)?;
    let fov = fov.unwrap_or(model.fov_deg);
    let size = size.unwrap_or(model.viewport_size);
    let erp = ErpImage::from_path(input)?;
    let points = load_points(points_path)?;
    std::fs::create_dir_all(outdir).map_err(|e| Error::io(outdir, e))?;
    let mut files = Vec::with_capacity(points.len());
    for p in &points {
        let viewport = gnomonic_extract(&erp, (p.lat, p.lon), fov, size)?;
        let name = format!("vp_{}.png", p.k);
        viewport.save_png(&outdir.join(&name))?;
        files.push(name);
    }
    let manifest = serde_json::json!({
        "fov_deg": fov,
        "size": size,
        "centers": points.iter().map(|p| [p.lat, p.lon]).collect::<Vec<_>>(),
        "files": files,
    });
    let manifest_path = outdir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)
        .expect("manifest serialization cannot fail");
    std::fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    println!("{}", manifest_path.display());
    Ok(())
}

fn run_graph(points_path: &Path, k: usize, output: Option<&Path>) -> Result<()> {
    let points = load_points(points_path)?;
    let coords: Vec<(f64, f64)> = points
        .iter()
        .map(|p| (p.lat.to_radians(), p.lon.to_radians()))
        .collect();
    let graph = build_graph_from_coords(&coords, k)?;
    let json = serde_json::json!({
        "num_nodes": graph.num_nodes,
        "k": graph.k,
        "edges": graph.edges,
        "coords": graph.coords,
    });
    let mut text =
        serde_json::to_string_pretty(&json).expect("graph serialization cannot fail");
    text.push('\n');
    write_or_print(output, &text)
}

fn run_train(
    manifest_path: &Path,
    out: &Path,
    seed: Option<u64>,
    config: Option<&Path>,
) -> Result<()> {
    let (mut model, mut tc) = configure(ModelConfig::default(), config)?;
    if let Some(s) = seed {
        model.seed = s;
        tc.seed = s;
    } else {
        tc.seed = model.seed;
    }
    let manifest = DatasetManifest::load(manifest_path)?;
    let outcome = train(&manifest, &model, &tc)?;
    outcome.params.save(out)?;
    log::info!("saved weights to {} after {} steps", out.display(), outcome.steps);
    let final_loss = outcome.epoch_losses.last().copied().unwrap_or(f64::NAN);
    println!("loss={final_loss:.6}");
    Ok(())
}

fn run_eval(
    manifest_path: &Path,
    weights: &Path,
    split: &str,
    remap: bool,
    config: Option<&Path>,
) -> Result<()> {
    let (model, _) = configure(ModelConfig::default(), config)?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let params = ModelParams::load(weights)?;
    let report = evaluate(&manifest, Split::parse(split)?, &params, &model, remap)?;
    println!("PLCC={:.6}", report.plcc);
    println!("SRCC={:.6}", report.srcc);
    println!("RMSE={:.6}", report.rmse);
    Ok(())
}

fn run_score(image: &Path, weights: &Path, config: Option<&Path>) -> Result<()> {
    let (model, _) = configure(ModelConfig::default(), config)?;
    let params = ModelParams::load(weights)?;
    let erp = ErpImage::from_path(image)?;
    let score = forward(&erp, &params, &model)?;
    println!("score={score:.6}");
    Ok(())
}

fn run_gradcheck(seed: u64, entries: usize, config: Option<&Path>) -> Result<()> {
    let (model, _) = configure(ModelConfig::desk(), config)?;
    if entries == 0 {
        return Err(Error::Config("entries must be positive".into()));
    }
    let reports = gradient_check(&model, &[seed], entries)?;
    println!("group,tensors,entries,refined,max_rel_err");
    let mut failed = Vec::new();
    for r in &reports {
        println!(
            "{},{},{},{},{:.6e}",
            r.group, r.tensors, r.entries_checked, r.entries_refined, r.max_rel_err
        );
        if r.max_rel_err >= GRADCHECK_TOLERANCE {
            failed.push(r.group.clone());
        }
    }
    if !failed.is_empty() {
        return Err(Error::numeric(
            "gradcheck",
            format!(
                "groups {} exceed the {GRADCHECK_TOLERANCE:e} relative-error tolerance",
                failed.join(", ")
            ),
        ));
    }
    Ok(())
}

/// Factors `n` into rings x columns with the column-to-ring ratio closest to
/// the 2:1 equirectangular aspect.
fn grid_shape(n: usize) -> (usize, usize) {
    let mut best = (1, n);
    let mut best_score = f64::INFINITY;
    for rings in 1..=n {
        if n % rings != 0 {
            continue;
        }
        let cols = n / rings;
        let score = ((cols as f64 / rings as f64) / 2.0).ln().abs();
        if score < best_score {
            best_score = score;
            best = (rings, cols);
        }
    }
    best
}

fn run_uniformity_report(count: usize, output: Option<&Path>) -> Result<()> {
    let points = fibonacci_sample(count)?;
    let spiral_coords: Vec<(f64, f64)> =
        points.iter().map(|p| (p.lat_rad(), p.lon_rad())).collect();
    let (rings, cols) = grid_shape(count);
    let grid_coords = equiangular_grid(rings, cols);
    let mut csv =
        String::from("sampler,count,nn_min,nn_mean,nn_max,nn_cv,nn_ratio,min_pairwise\n");
    for (name, coords) in [("fibonacci", &spiral_coords), ("grid", &grid_coords)] {
        let stats = neighbor_stats(coords)?;
        writeln!(
            csv,
            "{name},{},{},{},{},{},{},{}",
            coords.len(),
            num17(stats.nn_min),
            num17(stats.nn_mean),
            num17(stats.nn_max),
            num17(stats.nn_cv),
            num17(stats.nn_ratio),
            num17(stats.min_pairwise),
        )
        .expect("writing to a String cannot fail");
    }
    write_or_print(output, &csv)
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Sample { count, output } => run_sample(count, output.as_deref()),
        Command::Extract { input, points, fov, size, outdir, config } => {
            run_extract(&input, &points, fov, size, &outdir, config.as_deref())
        }
        Command::Graph { points, k, output } => run_graph(&points, k, output.as_deref()),
        Command::Train { manifest, out, seed, config } => {
            run_train(&manifest, &out, seed, config.as_deref())
        }
        Command::Eval { manifest, weights, split, remap, config } => {
            run_eval(&manifest, &weights, &split, remap, config.as_deref())
        }
        Command::Score { image, weights, config } => {
            run_score(&image, &weights, config.as_deref())
        }
        Command::Gradcheck { seed, entries, config } => {
            run_gradcheck(seed, entries, config.as_deref())
        }
        Command::UniformityReport { count, output } => {
            run_uniformity_report(count, output.as_deref())
        }
    }
}

struct StderrLogger;

impl log::Log for StderrLogger {
    fn enabled(&self, metadata: &log::Metadata) -> bool {
        metadata.level() <= log::Level::Info
    }

    fn log(&self, record: &log::Record) {
        if self.enabled(record.metadata()) {
            eprintln!("[{}] {}", record.level().as_str().to_lowercase(), record.args());
        }
    }

    fn flush(&self) {}
}

static LOGGER: StderrLogger = StderrLogger;

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if log::set_logger(&LOGGER).is_ok() {
        log::set_max_level(log::LevelFilter::Info);
    }
    oiqa_core::configure_threads_from_env();
    match dispatch(cli.command) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(1);
        }
    }
}
