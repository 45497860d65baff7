//! Checkpoint container: every parameter tensor plus the architecture that
//! produced it, in one deterministic little-endian binary file.
//!
//! Layout:
//!
//! ```text
//! "VIGAGE01"                                    8-byte magic
//! repeated entries until EOF:
//!   u32  name length        utf-8 name bytes
//!   u32  rank               rank × u32 extents
//!   f64  values             (product of extents, row-major)
//! ```
//!
//! Entries are written in a fixed order — `config.*` scalars first, then
//! tensors in [`Parameters`](crate::numerics::Parameters) visitor order —
//! so saving the same model twice yields byte-identical files, and a
//! save → load → save cycle round-trips exactly.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{init_params, ModelConfig, ModelParams};
use crate::numerics::Parameters;
use crate::patchgraph::Metric;

const MAGIC: &[u8; 8] = b"VIGAGE01";
/// Anything longer is corruption, not a real tensor name.
const MAX_NAME: usize = 4096;
const MAX_RANK: usize = 8;

// ── writing ──────────────────────────────────────────────────────────────

fn push_entry(buf: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f64]) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &e in shape {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_scalar(buf: &mut Vec<u8>, name: &str, value: f64) {
    push_entry(buf, name, &[1], &[value]);
}

fn metric_code(m: Metric) -> f64 {
    match m {
        Metric::Cosine => 0.0,
        Metric::Euclidean => 1.0,
    }
}

/// Serializes a model into checkpoint bytes. The seed survives exactly for
/// values below 2^53 (it is stored as an f64 like everything else).
pub fn checkpoint_bytes(params: &ModelParams, config: &ModelConfig) -> Result<Vec<u8>> {
    config.validate()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    push_scalar(&mut buf, "config.grid_side", config.grid_side as f64);
    push_scalar(&mut buf, "config.knn", config.knn as f64);
    push_scalar(&mut buf, "config.metric", metric_code(config.metric));
    push_scalar(&mut buf, "config.feature_dim", config.feature_dim as f64);
    push_scalar(&mut buf, "config.gc_heads", config.gc_heads as f64);
    push_scalar(&mut buf, "config.attn_heads", config.attn_heads as f64);
    push_scalar(&mut buf, "config.blocks", config.blocks as f64);
    push_scalar(&mut buf, "config.stages", config.stages as f64);
    let flags: Vec<f64> = config
        .downsample_between
        .iter()
        .map(|&f| if f { 1.0 } else { 0.0 })
        .collect();
    push_entry(&mut buf, "config.downsample_between", &[flags.len()], &flags);
    push_scalar(&mut buf, "config.use_attention", config.use_attention as u8 as f64);
    push_scalar(&mut buf, "config.scaled_attention", config.scaled_attention as u8 as f64);
    push_scalar(&mut buf, "config.normalize_step2", config.normalize_step2 as u8 as f64);
    push_scalar(&mut buf, "config.static_graph", config.static_graph as u8 as f64);
    push_scalar(&mut buf, "config.residuals", config.residuals as u8 as f64);
    push_scalar(&mut buf, "config.image_h", config.image_h as f64);
    push_scalar(&mut buf, "config.image_w", config.image_w as f64);
    push_scalar(&mut buf, "config.channels", config.channels as f64);
    push_scalar(&mut buf, "config.seed", config.seed as f64);
    for (name, tensor) in params.named_tensors() {
        push_entry(&mut buf, &name, tensor.shape(), tensor.data());
    }
    Ok(buf)
}

/// Writes a checkpoint file (see [`checkpoint_bytes`]).
pub fn save_checkpoint(path: impl AsRef<Path>, params: &ModelParams, config: &ModelConfig) -> Result<()> {
    let bytes = checkpoint_bytes(params, config)?;
    fs::write(path, bytes)?;
    Ok(())
}

// ── reading ──────────────────────────────────────────────────────────────

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse {
                offset: self.pos,
                message: format!(
                    "unexpected end of checkpoint (wanted {n} more bytes, {} left)",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4-byte slice")))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8-byte slice")))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

struct Entry {
    shape: Vec<usize>,
    values: Vec<f64>,
}

fn read_entry(r: &mut Reader) -> Result<(String, Entry)> {
    let name_offset = r.pos;
    let name_len = r.u32()? as usize;
    if name_len == 0 || name_len > MAX_NAME {
        return Err(Error::Parse {
            offset: name_offset,
            message: format!("implausible name length {name_len}"),
        });
    }
    let name = std::str::from_utf8(r.take(name_len)?)
        .map_err(|_| Error::Parse {
            offset: name_offset + 4,
            message: "tensor name is not valid UTF-8".into(),
        })?
        .to_string();
    let rank_offset = r.pos;
    let rank = r.u32()? as usize;
    if rank > MAX_RANK {
        return Err(Error::Parse {
            offset: rank_offset,
            message: format!("implausible rank {rank} for {name:?}"),
        });
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32()? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut values = Vec::with_capacity(numel);
    for _ in 0..numel {
        values.push(r.f64()?);
    }
    Ok((name, Entry { shape, values }))
}

fn scalar_field(map: &mut Vec<(String, Entry)>, key: &str) -> Result<f64> {
    let idx = map
        .iter()
        .position(|(n, _)| n == key)
        .ok_or_else(|| Error::Load(format!("checkpoint is missing {key}")))?;
    let (_, e) = map.remove(idx);
    if e.values.len() != 1 {
        return Err(Error::Load(format!("{key} must hold exactly one value")));
    }
    Ok(e.values[0])
}

fn usize_field(map: &mut Vec<(String, Entry)>, key: &str) -> Result<usize> {
    let v = scalar_field(map, key)?;
    if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
        return Err(Error::Load(format!("{key} holds {v}, not a valid count")));
    }
    Ok(v as usize)
}

fn bool_field(map: &mut Vec<(String, Entry)>, key: &str) -> Result<bool> {
    match scalar_field(map, key)? {
        v if v == 0.0 => Ok(false),
        v if v == 1.0 => Ok(true),
        v => Err(Error::Load(format!("{key} holds {v}, expected 0 or 1"))),
    }
}

fn config_from_entries(mut entries: Vec<(String, Entry)>) -> Result<ModelConfig> {
    let metric = match scalar_field(&mut entries, "config.metric")? {
        v if v == 0.0 => Metric::Cosine,
        v if v == 1.0 => Metric::Euclidean,
        v => return Err(Error::Load(format!("config.metric holds {v}, expected 0 or 1"))),
    };
    let flags_idx = entries
        .iter()
        .position(|(n, _)| n == "config.downsample_between")
        .ok_or_else(|| Error::Load("checkpoint is missing config.downsample_between".into()))?;
    let (_, flags_entry) = entries.remove(flags_idx);
    let downsample_between = flags_entry
        .values
        .iter()
        .map(|&v| match v {
            v if v == 0.0 => Ok(false),
            v if v == 1.0 => Ok(true),
            v => Err(Error::Load(format!(
                "config.downsample_between holds {v}, expected 0 or 1"
            ))),
        })
        .collect::<Result<Vec<bool>>>()?;
    let seed = scalar_field(&mut entries, "config.seed")?;
    if seed < 0.0 || seed.fract() != 0.0 {
        return Err(Error::Load(format!("config.seed holds {seed}, not a valid seed")));
    }
    let config = ModelConfig {
        grid_side: usize_field(&mut entries, "config.grid_side")?,
        knn: usize_field(&mut entries, "config.knn")?,
        metric,
        feature_dim: usize_field(&mut entries, "config.feature_dim")?,
        gc_heads: usize_field(&mut entries, "config.gc_heads")?,
        attn_heads: usize_field(&mut entries, "config.attn_heads")?,
        blocks: usize_field(&mut entries, "config.blocks")?,
        stages: usize_field(&mut entries, "config.stages")?,
        downsample_between,
        use_attention: bool_field(&mut entries, "config.use_attention")?,
        scaled_attention: bool_field(&mut entries, "config.scaled_attention")?,
        normalize_step2: bool_field(&mut entries, "config.normalize_step2")?,
        static_graph: bool_field(&mut entries, "config.static_graph")?,
        residuals: bool_field(&mut entries, "config.residuals")?,
        image_h: usize_field(&mut entries, "config.image_h")?,
        image_w: usize_field(&mut entries, "config.image_w")?,
        channels: usize_field(&mut entries, "config.channels")?,
        seed: seed as u64,
    };
    if let Some((name, _)) = entries.first() {
        return Err(Error::Load(format!("unknown config entry {name:?}")));
    }
    config.validate()?;
    Ok(config)
}

/// Parses checkpoint bytes back into a model and its architecture.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<(ModelParams, ModelConfig)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(8).map_err(|_| Error::Parse {
        offset: 0,
        message: "file too short to hold the checkpoint magic".into(),
    })?;
    if magic != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let mut config_entries = Vec::new();
    let mut tensor_entries: Vec<(String, Entry)> = Vec::new();
    while !r.done() {
        let (name, entry) = read_entry(&mut r)?;
        let bucket = if name.starts_with("config.") {
            &mut config_entries
        } else {
            &mut tensor_entries
        };
        if bucket.iter().any(|(n, _)| *n == name) {
            return Err(Error::Load(format!("duplicate checkpoint entry {name:?}")));
        }
        bucket.push((name, entry));
    }
    let config = config_from_entries(config_entries)?;

    // Materialize the parameter tree for this architecture, then overwrite
    // every tensor with the stored values.
    let mut params = init_params(&config)?;
    for (name, tensor) in params.named_tensors_mut() {
        let idx = tensor_entries
            .iter()
            .position(|(n, _)| *n == name)
            .ok_or_else(|| Error::Load(format!("checkpoint is missing tensor {name:?}")))?;
        let (_, entry) = tensor_entries.remove(idx);
        if entry.shape != tensor.shape() {
            return Err(Error::Load(format!(
                "tensor {name:?} has shape {:?}, expected {:?}",
                entry.shape,
                tensor.shape()
            )));
        }
        tensor.set_data(entry.values)?;
    }
    if let Some((name, _)) = tensor_entries.first() {
        return Err(Error::Load(format!("unexpected tensor {name:?} in checkpoint")));
    }
    Ok((params, config))
}

/// Reads a checkpoint file (see [`parse_checkpoint`]).
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParams, ModelConfig)> {
    let bytes = fs::read(path)?;
    parse_checkpoint(&bytes)
}
