//! Dataset ingestion, the AdamW optimizer, the training loop, and model
//! evaluation against mean-opinion-score ground truth.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom as _;
use rand::{Rng as _, SeedableRng as _};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::{logistic_remap, plcc, rmse, srcc};
use crate::model::{
    extract_viewport_tensors, forward_with_gradients, score_features, GraphContext, ModelConfig,
    ModelParams, SampleFeatures, TrainingSample,
};
use crate::projection::ErpImage;
use crate::tensor::Tensor;

/// AdamW hyperparameters (decoupled weight decay).
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW { lr: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First and second moment estimates plus the step count.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub step: usize,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    #[must_use]
    pub fn new(params: &ModelParams) -> Self {
        let zeros = |src: &BTreeMap<String, Tensor>| {
            src.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect()
        };
        OptimizerState { step: 0, m: zeros(&params.tensors), v: zeros(&params.tensors) }
    }
}

/// One bias-corrected AdamW update. Weight decay is decoupled: it scales the
/// pre-update parameter value and never enters the moment estimates.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    hyper: &AdamW,
) -> Result<()> {
    state.step += 1;
    let bc1 = 1.0 - hyper.beta1.powi(state.step as i32);
    let bc2 = 1.0 - hyper.beta2.powi(state.step as i32);
    for (name, p) in params.tensors.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Config(format!("no gradient for parameter {name}")))?;
        if g.shape() != p.shape() {
            return Err(Error::Shape(format!(
                "gradient for {name} has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let m = state.m.get_mut(name).expect("state built from the same registry");
        let v = state.v.get_mut(name).expect("state built from the same registry");
        let (pd, gd) = (p.data_mut(), g.data());
        let (md, vd) = (m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            md[i] = hyper.beta1 * md[i] + (1.0 - hyper.beta1) * gd[i];
            vd[i] = hyper.beta2 * vd[i] + (1.0 - hyper.beta2) * gd[i] * gd[i];
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] -= hyper.lr * (m_hat / (v_hat.sqrt() + hyper.eps) + hyper.weight_decay * pd[i]);
        }
    }
    Ok(())
}

/// Training-loop hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Optional hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    /// Seed for the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-5,
            batch_size: 4,
            epochs: 30,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_steps: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Dataset split tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Domain(format!(
                "split must be \"train\" or \"test\", got \"{other}\""
            ))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// One manifest row: an image path (resolved), its mean opinion score, and
/// its split.
#[derive(Clone, Debug)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub mos: f64,
    pub split: Split,
}

/// A dataset manifest loaded from CSV with header `path,mos,split`. Image
/// paths are resolved relative to the manifest's directory and must exist;
/// scores must be finite.
#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::Io {
                path: path.to_path_buf(),
                source: std::io::Error::other(e.to_string()),
            },
            _ => Error::format(path, e.to_string()),
        })?;
        let headers = reader.headers().map_err(|e| Error::format(path, e.to_string()))?;
        let expected = ["path", "mos", "split"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::format(
                path,
                format!("manifest header must be path,mos,split, got {headers:?}"),
            ));
        }
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut entries = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::format(path, e.to_string()))?;
            if record.len() != 3 {
                return Err(Error::format(
                    path,
                    format!("row {} has {} fields, expected 3", line + 2, record.len()),
                ));
            }
            let raw_path = Path::new(&record[0]);
            let image_path = if raw_path.is_absolute() {
                raw_path.to_path_buf()
            } else {
                base.join(raw_path)
            };
            if !image_path.is_file() {
                return Err(Error::format(
                    path,
                    format!("row {}: image {} does not exist", line + 2, image_path.display()),
                ));
            }
            let mos: f64 = record[1].parse().map_err(|_| {
                Error::format(path, format!("row {}: mos is not a number", line + 2))
            })?;
            if !mos.is_finite() {
                return Err(Error::format(
                    path,
                    format!("row {}: mos must be finite", line + 2),
                ));
            }
            let split = Split::parse(&record[2])
                .map_err(|e| Error::format(path, format!("row {}: {e}", line + 2)))?;
            entries.push(ManifestEntry { path: image_path, mos, split });
        }
        Ok(DatasetManifest { entries })
    }

    #[must_use]
    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }
}

/// Parameters of the procedural dataset: equirectangular renders of smooth
/// wrap-continuous color fields, degraded by block noise whose magnitude
/// defines the score (magnitude 0 → 5.0, magnitude 1 → 1.0).
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub train_count: usize,
    pub test_count: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

impl Default for SyntheticDataset {
    fn default() -> Self {
        SyntheticDataset { train_count: 16, test_count: 4, width: 256, height: 128, seed: 0 }
    }
}

impl SyntheticDataset {
    /// Renders the images into `dir`, writes `manifest.csv` beside them, and
    /// returns the manifest path. Deterministic in `seed`.
    pub fn generate(&self, dir: &Path) -> Result<PathBuf> {
        if self.train_count + self.test_count == 0 {
            return Err(Error::Config("synthetic dataset needs at least one image".into()));
        }
        if self.width < 2 || self.height < 2 {
            return Err(Error::Config("synthetic images must be at least 2x2".into()));
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut rows = String::from("path,mos,split\n");
        let splits = [(Split::Train, self.train_count), (Split::Test, self.test_count)];
        let mut index = 0usize;
        for (split, count) in splits {
            for i in 0..count {
                let magnitude = if count > 1 { i as f64 / (count - 1) as f64 } else { 0.0 };
                let mos = 5.0 - 4.0 * magnitude;
                let name = format!("img_{index:03}.png");
                self.render(&mut rng, magnitude, &dir.join(&name))?;
                rows.push_str(&format!("{name},{mos:.6},{split}\n"));
                index += 1;
            }
        }
        let manifest = dir.join("manifest.csv");
        std::fs::write(&manifest, rows).map_err(|e| Error::io(&manifest, e))?;
        Ok(manifest)
    }

    fn render(&self, rng: &mut ChaCha8Rng, magnitude: f64, path: &Path) -> Result<()> {
        const BLOCK: usize = 8;
        let (w, h) = (self.width, self.height);
        // Base field: integer horizontal frequencies keep the left and right
        // edges continuous across the wrap seam.
        let freq_u: [f64; 3] = [
            rng.gen_range(1..4) as f64,
            rng.gen_range(1..4) as f64,
            rng.gen_range(1..4) as f64,
        ];
        let freq_v: [f64; 3] = [
            rng.gen_range(1..3) as f64,
            rng.gen_range(1..3) as f64,
            rng.gen_range(1..3) as f64,
        ];
        let phase: [f64; 3] = [
            rng.gen_range(0.0..std::f64::consts::TAU),
            rng.gen_range(0.0..std::f64::consts::TAU),
            rng.gen_range(0.0..std::f64::consts::TAU),
        ];
        let blocks_x = w.div_ceil(BLOCK);
        let blocks_y = h.div_ceil(BLOCK);
        let noise: Vec<f64> =
            (0..blocks_x * blocks_y * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            let v = y as f64 / h as f64;
            for x in 0..w {
                let u = x as f64 / w as f64;
                let block = (y / BLOCK) * blocks_x + x / BLOCK;
                let mut px = [0u8; 3];
                for c in 0..3 {
                    let base = 0.55
                        + 0.35
                            * (std::f64::consts::TAU * freq_u[c] * u + phase[c]).sin()
                            * (std::f64::consts::PI * freq_v[c] * v).cos();
                    let value = base + 0.45 * magnitude * noise[block * 3 + c];
                    px[c] = (value.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        img.save(path).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Loads each image of a split and extracts its viewports once, returning
/// cached training samples in manifest order.
pub fn prepare_samples(
    manifest: &DatasetManifest,
    split: Split,
    config: &ModelConfig,
    ctx: &GraphContext,
) -> Result<Vec<TrainingSample>> {
    let entries = manifest.split(split);
    entries
        .par_iter()
        .map(|entry| {
            let erp = ErpImage::from_path(&entry.path)?;
            let viewports = extract_viewport_tensors(&erp, ctx, config)?;
            Ok(TrainingSample {
                features: SampleFeatures::Pixels(viewports),
                target: entry.mos,
            })
        })
        .collect()
}

/// Trained parameters plus the per-epoch mean loss log.
pub struct TrainOutcome {
    pub params: ModelParams,
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Trains from scratch on the manifest's train split. Deterministic given
/// the configuration seeds: initialization follows `model_config.seed`, the
/// per-epoch shuffle follows `train_config.seed`, and batch gradients are
/// summed in sample order.
pub fn train(
    manifest: &DatasetManifest,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<TrainOutcome> {
    model_config.validate()?;
    train_config.validate()?;
    let ctx = GraphContext::new(model_config)?;
    let samples = prepare_samples(manifest, Split::Train, model_config, &ctx)?;
    if samples.is_empty() {
        return Err(Error::Domain("manifest has no train rows".into()));
    }
    let mut params = ModelParams::init(model_config)?;
    let mut state = OptimizerState::new(&params);
    let hyper = train_config.optimizer();
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(train_config.epochs);
    let mut steps = 0usize;
    'epochs: for epoch in 0..train_config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(train_config.batch_size) {
            if train_config.max_steps.is_some_and(|cap| steps >= cap) {
                if seen > 0 {
                    epoch_losses.push(loss_sum / seen as f64);
                }
                break 'epochs;
            }
            let batch: Vec<TrainingSample> =
                chunk.iter().map(|&i| samples[i].clone()).collect();
            let (loss, grads) = forward_with_gradients(&batch, &params, model_config, &ctx)?;
            adamw_step(&mut params, &grads, &mut state, &hyper)?;
            steps += 1;
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let epoch_loss = loss_sum / seen as f64;
        log::info!("epoch {epoch}: loss {epoch_loss:.6} ({steps} steps)");
        epoch_losses.push(epoch_loss);
    }
    Ok(TrainOutcome { params, epoch_losses, steps })
}

/// Correlation and error metrics of a model on one split.
#[derive(Clone, Copy, Debug)]
pub struct EvalReport {
    pub plcc: f64,
    pub srcc: f64,
    pub rmse: f64,
}

/// Scores every image in the split and returns `(predictions, scores)` in
/// manifest order.
pub fn predict(
    manifest: &DatasetManifest,
    split: Split,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    config.validate()?;
    params.validate_against(config)?;
    let ctx = GraphContext::new(config)?;
    let samples = prepare_samples(manifest, split, config, &ctx)?;
    if samples.is_empty() {
        return Err(Error::Domain(format!("manifest has no {split} rows")));
    }
    let predictions = samples
        .par_iter()
        .map(|s| score_features(params, config, &ctx, &s.features))
        .collect::<Result<Vec<f64>>>()?;
    let truth = samples.iter().map(|s| s.target).collect();
    Ok((predictions, truth))
}

/// Evaluates a model on one split. With `remap` set, predictions pass
/// through the four-parameter logistic fit before the linear correlation and
/// error metrics, as is conventional for cross-method IQA comparison.
pub fn evaluate(
    manifest: &DatasetManifest,
    split: Split,
    params: &ModelParams,
    config: &ModelConfig,
    remap: bool,
) -> Result<EvalReport> {
    let (mut predictions, truth) = predict(manifest, split, params, config)?;
    let srcc = srcc(&predictions, &truth)?;
    if remap {
        predictions = logistic_remap(&predictions, &truth)?;
    }
    Ok(EvalReport {
        plcc: plcc(&predictions, &truth)?,
        srcc,
        rmse: rmse(&predictions, &truth)?,
    })
}
