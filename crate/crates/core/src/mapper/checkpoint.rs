//! Binary map checkpoints (`.nrlf`), little-endian throughout.
//!
//! ```text
//! magic            4 bytes   "NRLF"
//! version          u32       1
//! levels           u32
//! table_size       u32
//! features         u32       per level
//! base_resolution  u32
//! growth_factor    f64
//! primes           3 x u32
//! bounds           6 x f64   min xyz, max xyz
//! background       3 x f64
//! iterations       u64       training metadata
//! final_loss       f64
//! seed             u64
//! mlp_layers       u32       always 5
//!   per layer:     u32 inputs, u32 outputs, f32 weights[outputs*inputs]
//!                  (row-major), f32 bias[outputs]
//! table_len        u64       levels * table_size * features
//! tables           f32 x table_len, level-major, then row, then feature
//! ```

use std::fs;
use std::path::Path;

use crate::decoder::{Dense, MlpParams};
use crate::field::RadianceField;
use crate::geometry::Aabb;
use crate::hash_field::{HashGrid, HashGridConfig};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NRLF";
pub const CHECKPOINT_VERSION: u32 = 1;
const MLP_LAYERS: u32 = 5;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a map checkpoint (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("checkpoint truncated: needed {needed} bytes at offset {offset}, file has {len}")]
    Truncated { needed: usize, offset: usize, len: usize },
    #[error("checkpoint has {0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("invalid checkpoint contents: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrainMeta {
    pub iterations: u64,
    pub final_loss: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub field: RadianceField<f32>,
    pub meta: TrainMeta,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = &self.field.grid.config;
        let mut out = Vec::with_capacity(64 + 4 * cfg.parameter_count());
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, cfg.levels as u32);
        put_u32(&mut out, cfg.table_size as u32);
        put_u32(&mut out, cfg.features_per_level as u32);
        put_u32(&mut out, cfg.base_resolution);
        put_f64(&mut out, cfg.growth_factor);
        cfg.primes.iter().for_each(|&p| put_u32(&mut out, p));
        cfg.bounds.min.iter().chain(&cfg.bounds.max).for_each(|&v| put_f64(&mut out, v));
        self.field.background.iter().for_each(|&v| put_f64(&mut out, v));
        put_u64(&mut out, self.meta.iterations);
        put_f64(&mut out, self.meta.final_loss);
        put_u64(&mut out, self.meta.seed);
        put_u32(&mut out, MLP_LAYERS);
        for layer in self.field.mlp.layers() {
            put_u32(&mut out, layer.inputs as u32);
            put_u32(&mut out, layer.outputs as u32);
            layer.weights.iter().chain(&layer.bias).for_each(|&v| put_f32(&mut out, v));
        }
        put_u64(&mut out, self.field.grid.tables.len() as u64);
        self.field.grid.tables.iter().for_each(|&v| put_f32(&mut out, v));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic).into());
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion {
                found: version,
                supported: CHECKPOINT_VERSION,
            }
            .into());
        }
        let levels = r.u32()? as usize;
        let table_size = r.u32()? as usize;
        let features_per_level = r.u32()? as usize;
        let base_resolution = r.u32()?;
        let growth_factor = r.f64()?;
        let primes = [r.u32()?, r.u32()?, r.u32()?];
        let mut b = [0.0; 6];
        for v in b.iter_mut() {
            *v = r.f64()?;
        }
        let bounds = Aabb {
            min: [b[0], b[1], b[2]],
            max: [b[3], b[4], b[5]],
        };
        let background = [r.f64()?, r.f64()?, r.f64()?];
        let meta = TrainMeta {
            iterations: r.u64()?,
            final_loss: r.f64()?,
            seed: r.u64()?,
        };
        let config = HashGridConfig {
            levels,
            table_size,
            features_per_level,
            base_resolution,
            growth_factor,
            primes,
            bounds,
        };
        config.validate().map_err(invalid)?;
        let n_layers = r.u32()?;
        if n_layers != MLP_LAYERS {
            return Err(CheckpointError::Invalid(format!("expected {MLP_LAYERS} MLP layers, found {n_layers}")).into());
        }
        let mut layers = Vec::with_capacity(MLP_LAYERS as usize);
        for _ in 0..MLP_LAYERS {
            let inputs = r.u32()? as usize;
            let outputs = r.u32()? as usize;
            let n = inputs
                .checked_mul(outputs)
                .filter(|n| *n <= r.remaining() / 4)
                .ok_or_else(|| r.truncated(inputs.saturating_mul(outputs).saturating_mul(4)))?;
            let weights = r.f32s(n)?;
            let bias = r.f32s(outputs)?;
            layers.push(Dense {
                inputs,
                outputs,
                weights,
                bias,
            });
        }
        let mut it = layers.into_iter();
        let mut next = || it.next().expect("five layers");
        let mlp = MlpParams {
            base: [next(), next()],
            head: [next(), next(), next()],
        };
        let table_len = r.u64()? as usize;
        if table_len != config.parameter_count() {
            return Err(CheckpointError::Invalid(format!(
                "table length {table_len} does not match the grid configuration ({})",
                config.parameter_count()
            ))
            .into());
        }
        if table_len > r.remaining() / 4 {
            return Err(r.truncated(table_len * 4));
        }
        let tables = r.f32s(table_len)?;
        if r.remaining() != 0 {
            return Err(CheckpointError::TrailingBytes(r.remaining()).into());
        }
        let field = RadianceField {
            grid: HashGrid::from_tables(config, tables).map_err(invalid)?,
            mlp,
            background,
        };
        field.validate().map_err(invalid)?;
        if field.grid.tables.iter().any(|v| !v.is_finite()) {
            return Err(CheckpointError::Invalid("non-finite hash table entries".into()).into());
        }
        Ok(Self { field, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

fn invalid(e: Error) -> Error {
    CheckpointError::Invalid(e.to_string()).into()
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32(out: &mut Vec<u8>, v: f32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn truncated(&self, needed: usize) -> Error {
        CheckpointError::Truncated {
            needed,
            offset: self.pos,
            len: self.bytes.len(),
        }
        .into()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(self.truncated(n));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}
