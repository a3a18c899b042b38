//! End-to-end quality model: viewport sampling context, the named parameter
//! registry, forward scoring, batched gradients, weight serialization, and a
//! finite-difference audit of the whole differentiation path.
//!
//! The pipeline per image: sample viewport centers, extract viewports, embed
//! each viewport (backbone + fusion), add the spherical position code, run
//! the local graph-attention stack, run the globally connected biased
//! encoder, mean-pool the nodes, and regress a scalar score with a two-layer
//! GELU head.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read as _, Write as _};
use std::path::Path;

use rand::{Rng as _, SeedableRng as _};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{backbone_tape, fuse_tape, StageMaps};
use crate::gat::gat_forward_tape;
use crate::geometry::{build_graph_from_coords, distance_matrix, DistanceMatrix, ViewportGraph};
use crate::position::encode_position;
use crate::projection::{extract_all, ErpImage};
use crate::sphere::{fibonacci_sample, SpherePoint};
use crate::tape::{ParamIds, Tape, VarId};
use crate::tensor::Tensor;
use crate::transformer::graphormer_forward_tape;

const WEIGHTS_MAGIC: &[u8; 4] = b"OIQW";
const WEIGHTS_VERSION: u32 = 1;

/// Hyperparameters of the full model. The default instance is the
/// publication-scale configuration; [`ModelConfig::desk`] is the reduced
/// configuration every gradient and oracle test runs on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Viewports sampled per omnidirectional image.
    pub num_viewports: usize,
    /// Nearest neighbors per node in the viewport graph.
    pub k: usize,
    /// Node embedding width; must equal 4x the fusion width, 6x the position
    /// frequencies, and a multiple of the head count.
    pub node_dim: usize,
    /// Depth of the local graph-attention stack.
    pub gat_layers: usize,
    /// Attention heads (shared by the GAT stack and the encoder).
    pub heads: usize,
    /// Depth of the globally connected encoder.
    pub encoder_layers: usize,
    /// Viewport field of view in degrees.
    pub fov_deg: f64,
    /// Square viewport resolution; must be divisible by 32.
    pub viewport_size: usize,
    /// Sinusoid frequencies per coordinate axis in the position code.
    pub pe_frequencies: usize,
    /// Stage widths of the built-in convolutional backbone.
    pub backbone_channels: [usize; 4],
    /// Hidden width of the regression head.
    pub head_hidden: usize,
    /// Seed for deterministic parameter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_viewports: 20,
            k: 5,
            node_dim: 768,
            gat_layers: 3,
            heads: 4,
            encoder_layers: 2,
            fov_deg: 90.0,
            viewport_size: 224,
            pe_frequencies: 128,
            backbone_channels: [32, 64, 128, 128],
            head_hidden: 256,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Reduced configuration for fast exact testing: 6 viewports of 32x32,
    /// 24-wide nodes, 2 heads, 1 encoder layer.
    #[must_use]
    pub fn desk() -> Self {
        ModelConfig {
            num_viewports: 6,
            k: 5,
            node_dim: 24,
            heads: 2,
            encoder_layers: 1,
            viewport_size: 32,
            pe_frequencies: 4,
            head_hidden: 32,
            ..ModelConfig::default()
        }
    }

    /// Width each fused stage contributes to the node embedding.
    #[must_use]
    pub fn fcs_width(&self) -> usize {
        self.node_dim / 4
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.num_viewports < 2 {
            return fail(format!(
                "need at least 2 viewports, got {}",
                self.num_viewports
            ));
        }
        if self.k == 0 || self.k >= self.num_viewports {
            return fail(format!(
                "k must satisfy 1 <= k < num_viewports: k = {}, V = {}",
                self.k, self.num_viewports
            ));
        }
        if self.node_dim == 0 || self.node_dim % 4 != 0 {
            return fail(format!(
                "node_dim must be a positive multiple of 4 (four fused stages), got {}",
                self.node_dim
            ));
        }
        if self.heads == 0 || self.node_dim % self.heads != 0 {
            return fail(format!(
                "node_dim {} must be divisible by heads {}",
                self.node_dim, self.heads
            ));
        }
        if 6 * self.pe_frequencies != self.node_dim {
            return fail(format!(
                "position code dimension 6 * {} must equal node_dim {}",
                self.pe_frequencies, self.node_dim
            ));
        }
        if self.pe_frequencies < 2 {
            return fail("pe_frequencies must be at least 2".to_string());
        }
        if self.viewport_size == 0 || self.viewport_size % 32 != 0 {
            return fail(format!(
                "viewport_size must be a positive multiple of 32, got {}",
                self.viewport_size
            ));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg <= 120.0) {
            return fail(format!(
                "field of view must lie in (0, 120] degrees, got {}",
                self.fov_deg
            ));
        }
        if self.gat_layers == 0 || self.encoder_layers == 0 {
            return fail("layer counts must be positive".to_string());
        }
        if self.backbone_channels[0] % 4 != 0 || self.backbone_channels.contains(&0) {
            return fail(format!(
                "backbone channels must be positive with the first a multiple of 4, got {:?}",
                self.backbone_channels
            ));
        }
        if self.head_hidden == 0 {
            return fail("head_hidden must be positive".to_string());
        }
        Ok(())
    }
}

/// Everything about the sampled viewport layout that is fixed given a
/// configuration: the points, the graph, the distance matrix, and the
/// position-code matrix.
pub struct GraphContext {
    pub points: Vec<SpherePoint>,
    pub graph: ViewportGraph,
    pub distances: DistanceMatrix,
    /// `[V, node_dim]` position codes, row v for viewport v.
    pub pe: Tensor,
}

impl GraphContext {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let points = fibonacci_sample(config.num_viewports)?;
        Self::from_points(points, config)
    }

    /// Builds the context for an explicit point ordering (used by the
    /// permutation tests; [`GraphContext::new`] is the production path).
    pub fn from_points(points: Vec<SpherePoint>, config: &ModelConfig) -> Result<Self> {
        if points.len() != config.num_viewports {
            return Err(Error::Config(format!(
                "{} points supplied for a {}-viewport configuration",
                points.len(),
                config.num_viewports
            )));
        }
        let coords: Vec<(f64, f64)> = points.iter().map(|p| (p.lat_rad(), p.lon_rad())).collect();
        let distances = distance_matrix(&points)?;
        let graph = build_graph_from_coords(&coords, config.k)?;
        let mut pe_rows = Vec::with_capacity(points.len() * config.node_dim);
        for p in &points {
            pe_rows.extend(encode_position(p.xyz, config.pe_frequencies)?);
        }
        let pe = Tensor::from_vec(&[points.len(), config.node_dim], pe_rows)
            .expect("code width checked by validate");
        Ok(GraphContext { points, graph, distances, pe })
    }
}

/// Per-image model input: either raw viewport pixel tensors (`[3, s, s]`
/// each) or precomputed stage maps from an external backbone.
#[derive(Clone)]
pub enum SampleFeatures {
    Pixels(Vec<Tensor>),
    Maps(Vec<StageMaps>),
}

/// One training example.
#[derive(Clone)]
pub struct TrainingSample {
    pub features: SampleFeatures,
    pub target: f64,
}

/// Named model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// The full name registry with expected shapes for a configuration.
    #[must_use]
    pub fn expected_shapes(config: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
        let c = config.node_dim;
        let f = config.fcs_width();
        let cr = (f / 4).max(1);
        let [c1, c2, c3, c4] = config.backbone_channels;
        let mut shapes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut put = |name: String, shape: Vec<usize>| {
            shapes.insert(name, shape);
        };

        let widths = [
            ("backbone.stem0", c1 / 4, 3),
            ("backbone.stem1", c1 / 2, c1 / 4),
            ("backbone.stem2", c1, c1 / 2),
            ("backbone.stage2", c2, c1),
            ("backbone.stage3", c3, c2),
            ("backbone.stage4", c4, c3),
        ];
        for (name, co, ci) in widths {
            put(format!("{name}.w"), vec![co, ci, 3, 3]);
            put(format!("{name}.b"), vec![co]);
        }
        for (stage, &cin) in [c1, c2, c3, c4].iter().enumerate() {
            put(format!("fcs.{stage}.proj.w"), vec![f, cin, 1, 1]);
            put(format!("fcs.{stage}.proj.b"), vec![f]);
            put(format!("fcs.{stage}.ca.fc1.w"), vec![f, cr]);
            put(format!("fcs.{stage}.ca.fc1.b"), vec![cr]);
            put(format!("fcs.{stage}.ca.fc2.w"), vec![cr, f]);
            put(format!("fcs.{stage}.ca.fc2.b"), vec![f]);
            put(format!("fcs.{stage}.sa.conv.w"), vec![1, 2, 7, 7]);
            put(format!("fcs.{stage}.sa.conv.b"), vec![1]);
        }
        for l in 0..config.gat_layers {
            put(format!("gat.{l}.w"), vec![c, c]);
            put(format!("gat.{l}.a"), vec![config.heads, 2 * (c / config.heads)]);
            put(format!("gat.{l}.ln.scale"), vec![c]);
            put(format!("gat.{l}.ln.shift"), vec![c]);
        }
        for l in 0..config.encoder_layers {
            put(format!("enc.{l}.ln1.scale"), vec![c]);
            put(format!("enc.{l}.ln1.shift"), vec![c]);
            for name in ["wq", "wk", "wv", "wo"] {
                put(format!("enc.{l}.{name}"), vec![c, c]);
            }
            put(format!("enc.{l}.ln2.scale"), vec![c]);
            put(format!("enc.{l}.ln2.shift"), vec![c]);
            put(format!("enc.{l}.ffn1.w"), vec![c, 4 * c]);
            put(format!("enc.{l}.ffn1.b"), vec![4 * c]);
            put(format!("enc.{l}.ffn2.w"), vec![4 * c, c]);
            put(format!("enc.{l}.ffn2.b"), vec![c]);
        }
        put("head.fc1.w".to_string(), vec![c, config.head_hidden]);
        put("head.fc1.b".to_string(), vec![config.head_hidden]);
        put("head.fc2.w".to_string(), vec![config.head_hidden, 1]);
        put("head.fc2.b".to_string(), vec![1]);
        shapes
    }

    /// Deterministic initialization: Xavier-uniform weights (quantized to f32
    /// so the weights file round-trips bitwise), ones for norm scales, zeros
    /// for biases and shifts. A single seed fixes every tensor; draws follow
    /// lexicographic name order.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut tensors = BTreeMap::new();
        for (name, shape) in Self::expected_shapes(config) {
            let tensor = if name.ends_with(".scale") {
                Tensor::full(&shape, 1.0)
            } else if name.ends_with(".b") || name.ends_with(".shift") {
                Tensor::zeros(&shape)
            } else {
                let (fan_in, fan_out) = match shape.len() {
                    2 => (shape[0], shape[1]),
                    4 => (shape[1] * shape[2] * shape[3], shape[0] * shape[2] * shape[3]),
                    _ => (shape.iter().product(), 1),
                };
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..shape.iter().product::<usize>())
                    .map(|_| rng.gen_range(-limit..limit) as f32 as f64)
                    .collect();
                Tensor::from_vec(&shape, data).expect("registry shapes are consistent")
            };
            tensors.insert(name, tensor);
        }
        Ok(ModelParams { tensors })
    }

    /// Checks that the parameter names and shapes exactly match the registry
    /// for `config`.
    pub fn validate_against(&self, config: &ModelConfig) -> Result<()> {
        let expected = Self::expected_shapes(config);
        for (name, shape) in &expected {
            match self.tensors.get(name) {
                None => {
                    return Err(Error::Config(format!("missing model parameter {name}")));
                }
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Shape(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )));
                }
                Some(_) => {}
            }
        }
        for name in self.tensors.keys() {
            if !expected.contains_key(name) {
                return Err(Error::Config(format!(
                    "unexpected parameter {name} for this configuration"
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing model parameter {name}")))
    }

    /// Serializes to the weights format: magic, version, tensor count, then
    /// per tensor (in lexicographic name order) the name, rank, dimensions,
    /// and row-major little-endian f32 data.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
        put(WEIGHTS_MAGIC)?;
        put(&WEIGHTS_VERSION.to_le_bytes())?;
        let count = u32::try_from(self.tensors.len())
            .map_err(|_| Error::Config("too many tensors to serialize".into()))?;
        put(&count.to_le_bytes())?;
        for (name, tensor) in &self.tensors {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Config(format!("parameter name too long: {name}")))?;
            put(&name_len.to_le_bytes())?;
            put(name.as_bytes())?;
            let rank = u8::try_from(tensor.rank())
                .map_err(|_| Error::Shape(format!("rank of {name} exceeds u8")))?;
            put(&[rank])?;
            for dim in tensor.shape() {
                let d = u32::try_from(*dim)
                    .map_err(|_| Error::Shape(format!("dimension of {name} exceeds u32")))?;
                put(&d.to_le_bytes())?;
            }
            for &v in tensor.data() {
                put(&(v as f32).to_le_bytes())?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a weights file written by [`ModelParams::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let exact = |r: &mut BufReader<File>, buf: &mut [u8]| -> Result<()> {
            r.read_exact(buf)
                .map_err(|_| Error::format(path, "truncated weights file"))
        };
        let mut magic = [0u8; 4];
        exact(&mut r, &mut magic)?;
        if &magic != WEIGHTS_MAGIC {
            return Err(Error::format(path, "not a weights file (bad magic)"));
        }
        let mut u32buf = [0u8; 4];
        exact(&mut r, &mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != WEIGHTS_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported weights version {version}"),
            ));
        }
        exact(&mut r, &mut u32buf)?;
        let count = u32::from_le_bytes(u32buf) as usize;
        let mut tensors = BTreeMap::new();
        let mut prev_name: Option<String> = None;
        for _ in 0..count {
            let mut u16buf = [0u8; 2];
            exact(&mut r, &mut u16buf)?;
            let name_len = u16::from_le_bytes(u16buf) as usize;
            let mut name_bytes = vec![0u8; name_len];
            exact(&mut r, &mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::format(path, "parameter name is not UTF-8"))?;
            if let Some(prev) = &prev_name {
                if *prev >= name {
                    return Err(Error::format(path, "tensor names out of order"));
                }
            }
            let mut rank_buf = [0u8; 1];
            exact(&mut r, &mut rank_buf)?;
            let mut shape = Vec::with_capacity(rank_buf[0] as usize);
            for _ in 0..rank_buf[0] {
                exact(&mut r, &mut u32buf)?;
                let dim = u32::from_le_bytes(u32buf) as usize;
                if dim == 0 {
                    return Err(Error::format(path, format!("zero dimension in {name}")));
                }
                shape.push(dim);
            }
            let numel = shape.iter().product::<usize>();
            let mut bytes = vec![0u8; numel * 4];
            exact(&mut r, &mut bytes)?;
            let data: Vec<f64> = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::format(path, format!("non-finite value in {name}")));
            }
            let tensor = Tensor::from_vec(&shape, data).expect("shape matches data");
            tensors.insert(name.clone(), tensor);
            prev_name = Some(name);
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
            return Err(Error::format(path, "trailing bytes after tensor data"));
        }
        Ok(ModelParams { tensors })
    }
}

/// Records one image's full score computation on the tape.
pub fn build_score_tape(
    tape: &mut Tape,
    ids: &ParamIds,
    ctx: &GraphContext,
    features: &SampleFeatures,
    config: &ModelConfig,
) -> Result<VarId> {
    let v = config.num_viewports;
    let embeddings: Vec<VarId> = match features {
        SampleFeatures::Pixels(viewports) => {
            if viewports.len() != v {
                return Err(Error::Shape(format!(
                    "{} viewports supplied, configuration wants {v}",
                    viewports.len()
                )));
            }
            let s = config.viewport_size;
            let mut out = Vec::with_capacity(v);
            for vp in viewports {
                if vp.shape() != [3, s, s] {
                    return Err(Error::Shape(format!(
                        "viewport tensor must be [3, {s}, {s}], got {:?}",
                        vp.shape()
                    )));
                }
                let x = tape.leaf(vp.clone());
                let maps = backbone_tape(tape, ids, x)?;
                out.push(fuse_tape(tape, ids, &maps)?);
            }
            out
        }
        SampleFeatures::Maps(stage_maps) => {
            if stage_maps.len() != v {
                return Err(Error::Shape(format!(
                    "{} stage-map sets supplied, configuration wants {v}",
                    stage_maps.len()
                )));
            }
            let mut out = Vec::with_capacity(v);
            for maps in stage_maps {
                if maps.channels() != config.backbone_channels {
                    return Err(Error::Shape(format!(
                        "stage maps have channels {:?}, configuration wants {:?}",
                        maps.channels(),
                        config.backbone_channels
                    )));
                }
                let map_ids = [
                    tape.leaf(maps.maps[0].clone()),
                    tape.leaf(maps.maps[1].clone()),
                    tape.leaf(maps.maps[2].clone()),
                    tape.leaf(maps.maps[3].clone()),
                ];
                out.push(fuse_tape(tape, ids, &map_ids)?);
            }
            out
        }
    };

    let stacked = tape.stack_rows(&embeddings);
    let pe = tape.leaf(ctx.pe.clone());
    let x = tape.add(stacked, pe);
    let local = gat_forward_tape(tape, ids, x, &ctx.graph, config.heads, config.gat_layers)?;
    let global = graphormer_forward_tape(
        tape,
        ids,
        local,
        &ctx.distances,
        &ctx.graph.knn_mask(),
        config.heads,
        config.encoder_layers,
    )?;
    let pooled = tape.mean_rows(global);
    let fc1w = ids.get("head.fc1.w")?;
    let fc1b = ids.get("head.fc1.b")?;
    let fc2w = ids.get("head.fc2.w")?;
    let fc2b = ids.get("head.fc2.b")?;
    let h = tape.matmul(pooled, fc1w);
    let h = tape.add_row_bias(h, fc1b);
    let h = tape.gelu(h);
    let s = tape.matmul(h, fc2w);
    Ok(tape.add_row_bias(s, fc2b))
}

/// Scores one image given already-built features and context.
pub fn score_features(
    params: &ModelParams,
    config: &ModelConfig,
    ctx: &GraphContext,
    features: &SampleFeatures,
) -> Result<f64> {
    let mut tape = Tape::new();
    let ids = tape.leaf_params(&params.tensors);
    let score = build_score_tape(&mut tape, &ids, ctx, features, config)?;
    let value = tape.value(score).data()[0];
    if !value.is_finite() {
        return Err(Error::numeric("head", "score is not finite"));
    }
    Ok(value)
}

/// Extracts the configured viewports of an image as `[3, s, s]` tensors.
pub fn extract_viewport_tensors(
    erp: &ErpImage,
    ctx: &GraphContext,
    config: &ModelConfig,
) -> Result<Vec<Tensor>> {
    let viewports = extract_all(erp, &ctx.points, config.fov_deg, config.viewport_size)?;
    Ok(viewports.iter().map(|v| v.to_chw_tensor()).collect())
}

/// Full deterministic forward pass from an equirectangular image to a score.
pub fn forward(erp: &ErpImage, params: &ModelParams, config: &ModelConfig) -> Result<f64> {
    params.validate_against(config)?;
    let ctx = GraphContext::new(config)?;
    let viewports = extract_viewport_tensors(erp, &ctx, config)?;
    score_features(params, config, &ctx, &SampleFeatures::Pixels(viewports))
}

/// Mean-squared-error loss and per-parameter gradients over a batch.
///
/// Per-sample passes run in parallel; gradient summation follows sample
/// order, so results are bitwise independent of thread count. The returned
/// map has exactly the parameter registry's keys.
pub fn forward_with_gradients(
    samples: &[TrainingSample],
    params: &ModelParams,
    config: &ModelConfig,
    ctx: &GraphContext,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    if samples.is_empty() {
        return Err(Error::Domain("gradient pass needs a nonempty batch".into()));
    }
    params.validate_against(config)?;
    let n = samples.len() as f64;
    let per_sample: Vec<(f64, BTreeMap<String, Tensor>)> = samples
        .par_iter()
        .map(|sample| -> Result<(f64, BTreeMap<String, Tensor>)> {
            let mut tape = Tape::new();
            let ids = tape.leaf_params(&params.tensors);
            let score = build_score_tape(&mut tape, &ids, ctx, &sample.features, config)?;
            let s = tape.value(score).data()[0];
            if !s.is_finite() {
                return Err(Error::numeric("forward", "score is not finite"));
            }
            let diff = s - sample.target;
            let seed = Tensor::from_vec(&[1, 1], vec![2.0 * diff / n]).expect("scalar seed");
            let grads = tape.backward_with_seed(score, seed);
            let mut map = BTreeMap::new();
            for (name, id) in ids.iter() {
                map.insert(
                    name.to_string(),
                    grads.get_or_zeros(id, tape.value(id).shape()),
                );
            }
            Ok((diff * diff, map))
        })
        .collect::<Result<_>>()?;

    let mut loss = 0.0;
    let mut total: BTreeMap<String, Tensor> = BTreeMap::new();
    for (sample_loss, map) in per_sample {
        loss += sample_loss / n;
        for (name, grad) in map {
            match total.get_mut(&name) {
                Some(acc) => acc.accumulate(&grad)?,
                None => {
                    total.insert(name, grad);
                }
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::numeric("loss", "mean squared error is not finite"));
    }
    Ok((loss, total))
}

/// Batch loss without gradients (used by the finite-difference audit).
pub fn batch_loss(
    samples: &[TrainingSample],
    params: &ModelParams,
    config: &ModelConfig,
    ctx: &GraphContext,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Domain("loss needs a nonempty batch".into()));
    }
    let n = samples.len() as f64;
    let mut loss = 0.0;
    for sample in samples {
        let s = score_features(params, config, ctx, &sample.features)?;
        loss += (s - sample.target) * (s - sample.target) / n;
    }
    Ok(loss)
}

/// Result of the finite-difference audit for one parameter group (the first
/// dot-separated name segment).
#[derive(Clone, Debug)]
pub struct GradientCheckReport {
    pub group: String,
    pub tensors: usize,
    pub entries_checked: usize,
    /// Entries whose primary probe straddled a non-smooth point and were
    /// re-measured at a smaller step.
    pub entries_refined: usize,
    pub max_rel_err: f64,
}

/// Audits analytic gradients against central finite differences (step 1e-4)
/// on randomly generated inputs, sampling up to `entries_per_tensor` entries
/// of every parameter tensor per seed.
///
/// Two measurement hazards are handled explicitly. Entries where both slopes
/// are below 1e-6 are skipped: the loss carries about 1e-12 of f64
/// evaluation noise, so no finite step resolves such slopes against a
/// relative tolerance. And a central difference whose interval straddles a
/// non-smooth point (the rectifier kinks and the per-position channel max)
/// measures a chord across two facets, not the derivative; an entry that
/// disagrees at the primary step is re-measured at steps 1e-5 then 1e-6,
/// which shrink the straddle window tenfold each time. A genuinely wrong
/// gradient disagrees at every step and still fails.
pub fn gradient_check(
    config: &ModelConfig,
    seeds: &[u64],
    entries_per_tensor: usize,
) -> Result<Vec<GradientCheckReport>> {
    const STEP: f64 = 1e-4;
    const REFINED_STEPS: [f64; 2] = [1e-5, 1e-6];
    const REFINE_TRIGGER: f64 = 1e-3;
    const NEGLIGIBLE: f64 = 1e-6;
    config.validate()?;
    let ctx = GraphContext::new(config)?;
    let mut by_group: BTreeMap<String, GradientCheckReport> = BTreeMap::new();

    for &seed in seeds {
        let cfg = ModelConfig { seed, ..config.clone() };
        let params = ModelParams::init(&cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_F00D);
        let s = config.viewport_size;
        let viewports: Vec<Tensor> = (0..config.num_viewports)
            .map(|_| {
                let data = (0..3 * s * s).map(|_| rng.gen_range(0.0..1.0)).collect();
                Tensor::from_vec(&[3, s, s], data).expect("viewport shape")
            })
            .collect();
        let sample = TrainingSample {
            features: SampleFeatures::Pixels(viewports),
            target: rng.gen_range(1.0..5.0),
        };
        let batch = [sample];
        let (_, grads) = forward_with_gradients(&batch, &params, &cfg, &ctx)?;

        let mut probe = params.clone();
        for (name, tensor) in &params.tensors {
            let numel = tensor.numel();
            let mut entries: Vec<usize> = if numel <= entries_per_tensor {
                (0..numel).collect()
            } else {
                let mut picks: Vec<usize> =
                    (0..entries_per_tensor).map(|_| rng.gen_range(0..numel)).collect();
                picks.sort_unstable();
                picks.dedup();
                picks
            };
            let group = name.split('.').next().unwrap_or("?").to_string();
            let report = by_group.entry(group.clone()).or_insert(GradientCheckReport {
                group,
                tensors: 0,
                entries_checked: 0,
                entries_refined: 0,
                max_rel_err: 0.0,
            });
            report.tensors += 1;
            for e in entries.drain(..) {
                let original = tensor.data()[e];
                let fd_at = |step: f64, probe: &mut ModelParams| -> Result<f64> {
                    let slot = probe.tensors.get_mut(name).expect("same registry");
                    slot.data_mut()[e] = original + step;
                    let plus = batch_loss(&batch, probe, &cfg, &ctx)?;
                    let slot = probe.tensors.get_mut(name).expect("same registry");
                    slot.data_mut()[e] = original - step;
                    let minus = batch_loss(&batch, probe, &cfg, &ctx)?;
                    let slot = probe.tensors.get_mut(name).expect("same registry");
                    slot.data_mut()[e] = original;
                    Ok((plus - minus) / (2.0 * step))
                };
                let an = grads[name].data()[e];
                let mut fd = fd_at(STEP, &mut probe)?;
                if fd.abs().max(an.abs()) < NEGLIGIBLE {
                    continue;
                }
                let mut rel = (fd - an).abs() / fd.abs().max(an.abs());
                if rel > REFINE_TRIGGER {
                    report.entries_refined += 1;
                    for step in REFINED_STEPS {
                        fd = fd_at(step, &mut probe)?;
                        rel = (fd - an).abs() / fd.abs().max(an.abs()).max(NEGLIGIBLE);
                        if rel <= REFINE_TRIGGER {
                            break;
                        }
                    }
                }
                report.entries_checked += 1;
                if rel > report.max_rel_err {
                    report.max_rel_err = rel;
                }
            }
        }
    }
    Ok(by_group.into_values().collect())
}
