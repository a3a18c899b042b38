//! Per-viewport feature extraction: a pluggable backbone that yields four
//! multi-resolution stage maps, and the fusion module that turns those maps
//! into one node embedding.
//!
//! The backbone is an interface ([`StageMapProvider`]) so precomputed
//! features from a stronger network can be injected from files. The built-in
//! provider is a small strided convolutional network: three stride-2 stem
//! convolutions down to 1/8 resolution, then three stage convolutions at
//! strides 2, 2, 1, giving maps at 1/8, 1/16, 1/32, 1/32 of the input. Each
//! convolution is 3x3 with padding 1 and a GELU activation.
//!
//! Fusion runs per stage: a 1x1 projection to the shared width, a
//! squeeze-excitation channel gate, a mean/max spatial gate with a 7x7
//! convolution, then global average pooling; the four pooled vectors are
//! concatenated into the node embedding.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read as _, Write as _};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tape::{ParamIds, Tape, VarId};
use crate::tensor::Tensor;

/// Stage index, stride, and parameter name for each backbone convolution.
/// The first three entries form the stem (input at 1/1 to features at 1/8);
/// the stage outputs are taken after entries 2, 3, 4, 5.
const BACKBONE_LAYERS: [(&str, usize); 6] = [
    ("backbone.stem0", 2),
    ("backbone.stem1", 2),
    ("backbone.stem2", 2),
    ("backbone.stage2", 2),
    ("backbone.stage3", 2),
    ("backbone.stage4", 1),
];

/// Spatial downsampling factor of each stage map relative to the input.
pub const STAGE_SCALES: [usize; 4] = [8, 16, 32, 32];

/// Magic bytes of the external stage-map file format.
const STAGE_MAP_MAGIC: &[u8; 4] = b"OIQF";
const STAGE_MAP_VERSION: u32 = 1;

/// Four feature maps `[c_i, h_i, w_i]` at 1/8, 1/16, 1/32, 1/32 of the
/// viewport resolution.
#[derive(Clone, Debug)]
pub struct StageMaps {
    pub maps: [Tensor; 4],
}

impl StageMaps {
    /// Validates ranks and the stage spatial contract for a square input of
    /// side `input_size`.
    pub fn validate_for_input(&self, input_size: usize) -> Result<()> {
        for (i, map) in self.maps.iter().enumerate() {
            if map.rank() != 3 {
                return Err(Error::Shape(format!(
                    "stage map {i} must be [channels, h, w], got rank {}",
                    map.rank()
                )));
            }
            let want = input_size / STAGE_SCALES[i];
            let (h, w) = (map.shape()[1], map.shape()[2]);
            if h != want || w != want {
                return Err(Error::Shape(format!(
                    "stage map {i} is {h}x{w}, expected {want}x{want} for input {input_size}"
                )));
            }
        }
        Ok(())
    }

    /// Channel counts of the four maps.
    #[must_use]
    pub fn channels(&self) -> [usize; 4] {
        [
            self.maps[0].shape()[0],
            self.maps[1].shape()[0],
            self.maps[2].shape()[0],
            self.maps[3].shape()[0],
        ]
    }
}

/// Source of stage maps for one viewport: either computed from pixels or
/// loaded from files prepared by an external network.
pub trait StageMapProvider {
    /// Stage maps for the viewport at `index` with pixel tensor `viewport`
    /// (`[3, s, s]`, values in [0,1]).
    fn stage_maps(&self, index: usize, viewport: &Tensor) -> Result<StageMaps>;
}

/// The built-in trainable convolutional backbone over a parameter map.
pub struct ConvBackbone<'a> {
    pub params: &'a BTreeMap<String, Tensor>,
}

impl StageMapProvider for ConvBackbone<'_> {
    fn stage_maps(&self, _index: usize, viewport: &Tensor) -> Result<StageMaps> {
        backbone_forward(self.params, viewport)
    }
}

/// Precomputed per-viewport stage maps on disk.
pub struct FileStageMaps {
    pub paths: Vec<PathBuf>,
}

impl StageMapProvider for FileStageMaps {
    fn stage_maps(&self, index: usize, _viewport: &Tensor) -> Result<StageMaps> {
        let path = self.paths.get(index).ok_or_else(|| {
            Error::Config(format!(
                "no stage-map file for viewport {index} (have {})",
                self.paths.len()
            ))
        })?;
        read_stage_maps(path)
    }
}

// ==================== backbone ====================

/// Records the backbone on a tape. `x` is a `[3, s, s]` viewport with `s`
/// divisible by 32; returns the four stage-map nodes.
pub fn backbone_tape(tape: &mut Tape, params: &ParamIds, x: VarId) -> Result<[VarId; 4]> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 3 || shape[0] != 3 || shape[1] != shape[2] {
        return Err(Error::Shape(format!(
            "backbone input must be [3, s, s], got {shape:?}"
        )));
    }
    if shape[1] % 32 != 0 {
        return Err(Error::Config(format!(
            "viewport size {} is not divisible by 32",
            shape[1]
        )));
    }
    let mut cur = x;
    let mut stages = Vec::with_capacity(4);
    for (i, (name, stride)) in BACKBONE_LAYERS.iter().enumerate() {
        let w = params.get(&format!("{name}.w"))?;
        let b = params.get(&format!("{name}.b"))?;
        let conv = tape.conv2d(cur, w, b, *stride, 1);
        cur = tape.gelu(conv);
        if i >= 2 {
            stages.push(cur);
        }
    }
    Ok([stages[0], stages[1], stages[2], stages[3]])
}

/// Runs the backbone outside any caller-owned tape and returns plain maps.
pub fn backbone_forward(
    params: &BTreeMap<String, Tensor>,
    viewport: &Tensor,
) -> Result<StageMaps> {
    let mut tape = Tape::new();
    let ids = tape.leaf_params(params);
    let x = tape.leaf(viewport.clone());
    let stages = backbone_tape(&mut tape, &ids, x)?;
    Ok(StageMaps {
        maps: stages.map(|id| tape.value(id).clone()),
    })
}

// ==================== fusion ====================

/// Records one stage of the fusion module on a tape: 1x1 projection, channel
/// gate, spatial gate, global average pool. Returns a `[1, F]` node where `F`
/// is the projection width.
pub fn fcs_stage_tape(
    tape: &mut Tape,
    params: &ParamIds,
    stage: usize,
    map: VarId,
) -> Result<VarId> {
    let proj_w = params.get(&format!("fcs.{stage}.proj.w"))?;
    let proj_b = params.get(&format!("fcs.{stage}.proj.b"))?;
    let projected = tape.conv2d(map, proj_w, proj_b, 1, 0);

    // Channel gate: squeeze to per-channel means, two-layer bottleneck,
    // sigmoid, scale.
    let fc1_w = params.get(&format!("fcs.{stage}.ca.fc1.w"))?;
    let fc1_b = params.get(&format!("fcs.{stage}.ca.fc1.b"))?;
    let fc2_w = params.get(&format!("fcs.{stage}.ca.fc2.w"))?;
    let fc2_b = params.get(&format!("fcs.{stage}.ca.fc2.b"))?;
    let squeeze = tape.global_avg_pool(projected);
    let h1 = tape.matmul(squeeze, fc1_w);
    let h1 = tape.add_row_bias(h1, fc1_b);
    let h1 = tape.relu(h1);
    let h2 = tape.matmul(h1, fc2_w);
    let h2 = tape.add_row_bias(h2, fc2_b);
    let channel_gate = tape.sigmoid(h2);
    let gated = tape.scale_channels(projected, channel_gate);

    // Spatial gate: channel mean and max planes, 7x7 convolution, sigmoid,
    // scale.
    let sa_w = params.get(&format!("fcs.{stage}.sa.conv.w"))?;
    let sa_b = params.get(&format!("fcs.{stage}.sa.conv.b"))?;
    let stats = tape.channel_stats(gated);
    let sa = tape.conv2d(stats, sa_w, sa_b, 1, 3);
    let spatial_gate = tape.sigmoid(sa);
    let gated = tape.scale_positions(gated, spatial_gate);

    Ok(tape.global_avg_pool(gated))
}

/// Records the full fusion of four stage maps: per-stage chains concatenated
/// into a `[1, 4F]` embedding node.
pub fn fuse_tape(
    tape: &mut Tape,
    params: &ParamIds,
    maps: &[VarId; 4],
) -> Result<VarId> {
    let mut pooled = Vec::with_capacity(4);
    for (stage, &map) in maps.iter().enumerate() {
        pooled.push(fcs_stage_tape(tape, params, stage, map)?);
    }
    Ok(tape.concat_cols(&pooled))
}

/// Fuses plain stage maps into an embedding vector outside any caller tape.
pub fn fcs_fuse(params: &BTreeMap<String, Tensor>, maps: &StageMaps) -> Result<Vec<f64>> {
    for (stage, map) in maps.maps.iter().enumerate() {
        let proj = params
            .get(&format!("fcs.{stage}.proj.w"))
            .ok_or_else(|| Error::Config(format!("missing model parameter fcs.{stage}.proj.w")))?;
        if map.rank() != 3 || proj.shape()[1] != map.shape()[0] {
            return Err(Error::Shape(format!(
                "stage {stage} map has {} channels, projection expects {}",
                map.shape().get(0).copied().unwrap_or(0),
                proj.shape()[1]
            )));
        }
    }
    let mut tape = Tape::new();
    let ids = tape.leaf_params(params);
    let map_ids = [
        tape.leaf(maps.maps[0].clone()),
        tape.leaf(maps.maps[1].clone()),
        tape.leaf(maps.maps[2].clone()),
        tape.leaf(maps.maps[3].clone()),
    ];
    let fused = fuse_tape(&mut tape, &ids, &map_ids)?;
    Ok(tape.value(fused).data().to_vec())
}

// ==================== external stage-map files ====================

/// Writes stage maps in the interchange format: magic, version, four
/// (channels, h, w) headers, then the four maps row-major as little-endian
/// f32.
pub fn write_stage_maps(path: &Path, maps: &StageMaps) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(STAGE_MAP_MAGIC)?;
    put(&STAGE_MAP_VERSION.to_le_bytes())?;
    for map in &maps.maps {
        if map.rank() != 3 {
            return Err(Error::Shape(format!(
                "stage maps must be [c, h, w] to serialize, got rank {}",
                map.rank()
            )));
        }
        for dim in map.shape() {
            let v = u32::try_from(*dim)
                .map_err(|_| Error::Shape(format!("dimension {dim} exceeds u32")))?;
            put(&v.to_le_bytes())?;
        }
    }
    for map in &maps.maps {
        for &v in map.data() {
            put(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads stage maps written by [`write_stage_maps`].
pub fn read_stage_maps(path: &Path) -> Result<StageMaps> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format(path, "truncated header"))?;
    if &magic != STAGE_MAP_MAGIC {
        return Err(Error::format(path, "not a stage-map file (bad magic)"));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32> {
        r.read_exact(&mut u32buf)
            .map_err(|_| Error::format(path, "truncated header"))?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let version = read_u32(&mut r)?;
    if version != STAGE_MAP_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported stage-map version {version}"),
        ));
    }
    let mut shapes = Vec::with_capacity(4);
    for _ in 0..4 {
        let c = read_u32(&mut r)? as usize;
        let h = read_u32(&mut r)? as usize;
        let w = read_u32(&mut r)? as usize;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::format(path, "zero-sized stage map"));
        }
        shapes.push([c, h, w]);
    }
    let mut maps = Vec::with_capacity(4);
    for shape in &shapes {
        let numel = shape.iter().product::<usize>();
        let mut bytes = vec![0u8; numel * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::format(path, "truncated map data"))?;
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(path, "non-finite stage-map value"));
        }
        maps.push(Tensor::from_vec(shape, data).expect("shape matches data"));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::format(path, "trailing bytes after map data"));
    }
    Ok(StageMaps {
        maps: [
            maps.remove(0),
            maps.remove(0),
            maps.remove(0),
            maps.remove(0),
        ],
    })
}
