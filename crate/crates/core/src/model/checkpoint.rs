//! Binary checkpoint container.
//!
//! All integers are little-endian.
//!
//! | field | encoding |
//! |---|---|
//! | magic | 8 bytes `STLBCKPT` |
//! | format version | `u32` |
//! | config | `u32` byte length, then UTF-8 JSON of the model configuration |
//! | tensor count | `u32` |
//! | each tensor | `u16` name length, UTF-8 name, `u8` rank, `u64` per dimension, `f64` values row-major |
//! | principle count | `u32` (0 when no doctrine set is attached) |
//! | each principle | `u16` name length, UTF-8 name, `u32` width, `f64` values |
//! | checksum | 32-byte SHA-256 of every preceding byte |

use super::{Model, ModelConfig, ParamStore};
use crate::error::{bail, Result};
use crate::strategic::DoctrineEmbeddingSet;
use crate::tensor::Tensor;
use sha2::{Digest, Sha256};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STLBCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_name(out: &mut Vec<u8>, name: &str) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| crate::Error::Format(format!("name too long: {name}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    Ok(())
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Serialises a model to checkpoint bytes.
pub fn write_checkpoint(model: &Model) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&model.cfg)?;
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, t) in model.params.iter() {
        put_name(&mut out, name)?;
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        put_f64s(&mut out, t.data());
    }
    match &model.doctrine {
        None => out.extend_from_slice(&0u32.to_le_bytes()),
        Some(set) => {
            out.extend_from_slice(&(set.len() as u32).to_le_bytes());
            for (name, emb) in set.iter() {
                put_name(&mut out, name)?;
                out.extend_from_slice(&(emb.len() as u32).to_le_bytes());
                put_f64s(&mut out, emb);
            }
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            bail!(Format, "checkpoint truncated at byte {}", self.pos);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| crate::Error::Format(e.to_string()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| crate::Error::Format("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

/// Parses and verifies checkpoint bytes.
pub fn read_checkpoint(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 4 + 32 {
        bail!(Format, "checkpoint too short ({} bytes)", bytes.len());
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        bail!(Format, "checkpoint checksum mismatch");
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        bail!(Format, "not a checkpoint (bad magic)");
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        bail!(Format, "unsupported checkpoint version {version}");
    }
    let cfg_len = r.u32()? as usize;
    let cfg: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)?;
    cfg.validate()?;
    let mut params = ParamStore::new();
    for _ in 0..r.u32()? {
        let name = r.name()?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        params.insert(name, Tensor::new(shape, r.f64s(n)?)?);
    }
    let n_principles = r.u32()?;
    let doctrine = if n_principles == 0 {
        None
    } else {
        let mut items = Vec::new();
        for _ in 0..n_principles {
            let name = r.name()?;
            let width = r.u32()? as usize;
            items.push((name, r.f64s(width)?));
        }
        Some(DoctrineEmbeddingSet::new(items)?)
    };
    if r.pos != body.len() {
        bail!(Format, "{} trailing bytes before checksum", body.len() - r.pos);
    }
    let reference = Model::init(cfg.clone())?;
    for (name, t) in reference.params.iter() {
        if params.get(name)?.shape() != t.shape() {
            bail!(Format, "parameter '{name}' has shape {:?}, expected {:?}", params.get(name)?.shape(), t.shape());
        }
    }
    Ok(Model { cfg, params, doctrine })
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, write_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    read_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::doctrine_principles;
    use crate::tokenizer::Vocabulary;

    fn model() -> Model {
        let mut m = Model::init(ModelConfig::tiny(120)).unwrap();
        m.attach_doctrine(&doctrine_principles(), &Vocabulary::character_level()).unwrap();
        m
    }

    #[test]
    fn roundtrip_is_exact() {
        let m = model();
        let bytes = write_checkpoint(&m).unwrap();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        let back = read_checkpoint(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(write_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn corruption_detected() {
        let mut bytes = write_checkpoint(&model()).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(read_checkpoint(&bytes), Err(crate::Error::Format(_))));
        assert!(matches!(read_checkpoint(&bytes[..20]), Err(crate::Error::Format(_))));
    }
}
