//! Binary checkpoint container.
//!
//! All integers are little-endian:
//!
//! ```text
//! magic        4 bytes  "NNAD"
//! version      u32      1
//! meta_len     u64
//! meta         meta_len bytes of UTF-8 JSON; must contain "model": ModelConfig
//! count        u32
//! count × { name_len u32, name bytes, rank u32, dims u64 × rank, values f64 × Π dims }
//! ```

use std::io::{Read, Write};

use serde_json::Value;

use super::model::{Model, ModelConfig};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"NNAD";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_NAME_LEN: usize = 4096;
const MAX_ELEMENTS: u64 = 1 << 31;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Captures every parameter (including batch-norm statistics) of `model`.
    /// The model config is stored under `meta["model"]`.
    pub fn from_model(meta: Value, model: &Model) -> Result<Self> {
        let mut meta = match meta {
            Value::Object(map) => map,
            Value::Null => serde_json::Map::new(),
            _ => return Err(Error::invalid("meta", "checkpoint metadata must be a JSON object")),
        };
        meta.insert("model".into(), serde_json::to_value(model.config())?);
        let tensors = model
            .params()
            .into_iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        Ok(Checkpoint {
            meta: Value::Object(meta),
            tensors,
        })
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let cfg = self
            .meta
            .get("model")
            .ok_or_else(|| Error::format("checkpoint", "metadata has no `model` entry"))?;
        Ok(serde_json::from_value(cfg.clone())?)
    }

    pub fn build_model(&self) -> Result<Model> {
        let mut model = Model::new(self.model_config()?, 0)?;
        model.load_tensors(&self.tensors)?;
        Ok(model)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let meta = serde_json::to_vec(&self.meta)?;
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&4u32.to_le_bytes())?;
            for d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(8 * t.len());
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::format("checkpoint", "bad magic bytes"));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                "checkpoint",
                format!("unsupported version {version}"),
            ));
        }
        let meta_len = read_u64(&mut r)?;
        if meta_len > 1 << 26 {
            return Err(Error::format("checkpoint", "metadata too large"));
        }
        let mut meta = vec![0u8; meta_len as usize];
        r.read_exact(&mut meta)?;
        let meta: Value = serde_json::from_slice(&meta)?;

        let count = read_u32(&mut r)?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            if name_len > MAX_NAME_LEN {
                return Err(Error::format("checkpoint", "tensor name too long"));
            }
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::format("checkpoint", "tensor name is not UTF-8"))?;
            let rank = read_u32(&mut r)?;
            if rank != 4 {
                return Err(Error::format(
                    "checkpoint",
                    format!("tensor {name} has rank {rank}, expected 4"),
                ));
            }
            let mut shape = [0usize; 4];
            let mut total: u64 = 1;
            for d in &mut shape {
                let v = read_u64(&mut r)?;
                total = total.saturating_mul(v);
                *d = v as usize;
            }
            if total > MAX_ELEMENTS {
                return Err(Error::format("checkpoint", format!("tensor {name} too large")));
            }
            let mut raw = vec![0u8; 8 * total as usize];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((name, Tensor::from_vec(shape, data)?));
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(Error::format("checkpoint", "trailing bytes after last tensor"));
        }
        Ok(Checkpoint { meta, tensors })
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::BlockSpec;

    fn small_model(seed: u64) -> Model {
        let mut c = ModelConfig::toy(3, 2, 2, 2);
        c.stem_channels = 4;
        c.stage1 = vec![BlockSpec::new(4, 1)];
        c.stage2 = vec![BlockSpec::new(4, 2)];
        c.seg_blocks = vec![BlockSpec::new(4, 1); 3];
        c.seg_upsample_channels = [4, 4, 4];
        c.det_shared = vec![BlockSpec::new(4, 1); 3];
        c.det_branch_channels = 4;
        Model::new(c, seed).unwrap()
    }

    #[test]
    fn round_trip_restores_outputs() {
        let model = small_model(5);
        let ck = Checkpoint::from_model(serde_json::json!({"note": "x"}), &model).unwrap();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"NNAD");
        let back = Checkpoint::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        let restored = back.build_model().unwrap();
        let x = Tensor::filled([1, 3, 16, 16], 0.3);
        assert_eq!(restored.forward(&x).unwrap(), model.forward(&x).unwrap());
    }

    #[test]
    fn rejects_unknown_version_and_garbage() {
        let ck = Checkpoint::from_model(Value::Null, &small_model(1)).unwrap();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[4] = 2;
        assert!(Checkpoint::read_from(bad.as_slice()).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(Checkpoint::read_from(bad.as_slice()).is_err());
        assert!(Checkpoint::read_from(&buf[..buf.len() - 3]).is_err());
        let mut long = buf;
        long.push(0);
        assert!(Checkpoint::read_from(long.as_slice()).is_err());
    }
}
