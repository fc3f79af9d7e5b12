//! Binary checkpoints: `FXCP`, a u16 version, the model config as u32
//! fields, then `(name len, name, rank, dims.., f32 payload)` records.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};

const MAGIC: &[u8; 4] = b"FXCP";
pub const VERSION: u16 = 1;
const CONFIG_FIELDS: usize = 10;

fn config_fields(cfg: &ModelConfig) -> [u32; CONFIG_FIELDS] {
    [
        cfg.image_size,
        cfg.patch,
        cfg.d_model,
        cfg.enc_layers,
        cfg.dec_layers,
        cfg.heads,
        cfg.vocab,
        cfg.max_len,
        cfg.ff_dim,
        cfg.loss_on_first as usize,
    ]
    .map(|v| v as u32)
}

fn config_from_fields(f: [u32; CONFIG_FIELDS]) -> ModelConfig {
    let f = f.map(|v| v as usize);
    ModelConfig {
        image_size: f[0],
        patch: f[1],
        d_model: f[2],
        enc_layers: f[3],
        dec_layers: f[4],
        heads: f[5],
        vocab: f[6],
        max_len: f[7],
        ff_dim: f[8],
        loss_on_first: f[9] != 0,
    }
}

pub fn encode_checkpoint(params: &ModelParams<f32>, cfg: &ModelConfig) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 4 * params.num_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in config_fields(cfg) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (name, t) in params.tensors() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(params: &ModelParams<f32>, cfg: &ModelConfig, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&encode_checkpoint(params, cfg))?;
    w.flush()?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Header(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, ModelParams<f32>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Header("not a checkpoint (bad magic)".into()));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::Header(format!("checkpoint version {version}, expected {VERSION}")));
    }
    let mut fields = [0u32; CONFIG_FIELDS];
    for f in fields.iter_mut() {
        *f = r.u32()?;
    }
    let cfg = config_from_fields(fields);
    cfg.validate().map_err(|e| Error::Header(format!("checkpoint config: {e}")))?;

    let mut params = ModelParams::<f32>::zeros(&cfg);
    for (name, t) in params.tensors_mut() {
        let stored_len = r.u32()? as usize;
        let stored = String::from_utf8_lossy(r.take(stored_len)?).into_owned();
        if stored != name {
            return Err(Error::Shape(format!("expected tensor {name}, found {stored}")));
        }
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if dims != t.shape() {
            return Err(Error::Shape(format!("{name}: stored shape {dims:?}, model needs {:?}", t.shape())));
        }
        for v in t.data_mut() {
            *v = f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Shape(format!("{} trailing bytes after last tensor", bytes.len() - r.pos)));
    }
    Ok((cfg, params))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams<f32>)> {
    decode_checkpoint(&fs::read(path)?)
}

/// Loads a checkpoint that must match `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<ModelParams<f32>> {
    let (cfg, params) = load_checkpoint(path)?;
    if cfg != *expected {
        return Err(Error::Shape(format!("checkpoint config {cfg:?} does not match {expected:?}")));
    }
    Ok(params)
}
