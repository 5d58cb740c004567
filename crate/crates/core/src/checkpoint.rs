//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            8 bytes  "STOSACKP"
//! version          u32      currently 1
//! config_len       u32      followed by that many bytes of config JSON
//! vocab            u64      number of real items
//! scalar_count     u64      total trainable scalars (consistency check)
//! n_tensors        u32
//! per tensor:
//!   name_len       u16      followed by the UTF-8 name
//!   ndim           u8
//!   dims           u64 * ndim
//!   data           f64 * prod(dims), IEEE-754 bit patterns
//! ```
//!
//! Writing the exact f64 bit patterns makes save/load round trips bit-exact.

use crate::config::RunConfig;
use crate::error::{CoreError, Result};
use crate::model::ModelParams;
use crate::params::ParamSet;
use crate::tensor::Tensor;
use std::path::Path;

const MAGIC: &[u8; 8] = b"STOSACKP";
const VERSION: u32 = 1;

pub fn save(model: &ModelParams, path: &Path) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let config_json = serde_json::to_vec(&model.config)
        .map_err(|e| CoreError::Checkpoint(format!("config serialization failed: {e}")))?;
    out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&config_json);
    out.extend_from_slice(&(model.vocab as u64).to_le_bytes());
    out.extend_from_slice(&(model.set.scalar_count() as u64).to_le_bytes());
    out.extend_from_slice(&(model.set.len() as u32).to_le_bytes());
    for (_, name, tensor) in model.set.iter() {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(tensor.shape.len() as u8);
        for &d in &tensor.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &tensor.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CoreError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let buf = std::fs::read(path)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(CoreError::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(CoreError::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let config_len = c.u32()? as usize;
    let config: RunConfig = serde_json::from_slice(c.take(config_len)?)
        .map_err(|e| CoreError::Checkpoint(format!("bad config snapshot: {e}")))?;
    let vocab = c.u64()? as usize;
    let scalar_count = c.u64()? as usize;
    let n_tensors = c.u32()? as usize;

    let mut set = ParamSet::new();
    for _ in 0..n_tensors {
        let name_len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| CoreError::Checkpoint("non-utf8 tensor name".into()))?
            .to_string();
        let ndim = c.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = c.take(len * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        set.add(&name, Tensor::from_vec(&shape, data));
    }
    if set.scalar_count() != scalar_count {
        return Err(CoreError::Checkpoint(format!(
            "scalar count mismatch: header {scalar_count}, tensors {}",
            set.scalar_count()
        )));
    }
    ModelParams::from_set(config, vocab, set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;

    fn cfg(variant: Variant) -> RunConfig {
        RunConfig {
            variant,
            d: 8,
            n: 4,
            layers: 1,
            dropout: 0.0,
            allow_nonstandard: true,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for variant in [Variant::Stosa, Variant::DotBaseline] {
            let model = ModelParams::init(&cfg(variant), 9).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("model.ckpt");
            save(&model, &path).unwrap();
            let back = load(&path).unwrap();
            assert_eq!(model.set, back.set);
            assert_eq!(model.config, back.config);
            assert_eq!(model.vocab, back.vocab);
            // saving again produces identical bytes
            let path2 = dir.path().join("model2.ckpt");
            save(&back, &path2).unwrap();
            assert_eq!(
                std::fs::read(&path).unwrap(),
                std::fs::read(&path2).unwrap()
            );
        }
    }

    #[test]
    fn corrupted_magic_rejected() {
        let model = ModelParams::init(&cfg(Variant::Stosa), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        assert!(load(&path).is_err());
    }

    #[test]
    fn config_snapshot_reparses_equal() {
        let config = cfg(Variant::Stosa);
        let model = ModelParams::init(&config, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&model, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.config, config);
    }
}
