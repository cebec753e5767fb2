//! "NNP1" checkpoint files: named `f32` blocks bound to a config digest.
//!
//! Layout (little-endian): magic `NNP1`, u32 version, 32-byte digest,
//! u32 block count, then per block u32 name length, name bytes, u32 rank,
//! u64 per dimension, and the values.

use std::path::Path;

use super::model::{EncoderConfig, EncoderParams, ParamSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"NNP1";
const VERSION: u32 = 1;
const BUFFER_PREFIX: &str = "buffer:";

pub fn save_blocks(path: &Path, digest: &[u8; 32], blocks: &[(String, &Tensor<f32>)]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(digest);
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, t) in blocks {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Truncated(format!("checkpoint at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Reads all blocks, rejecting files written for a different config.
pub fn load_blocks(path: &Path, digest: &[u8; 32]) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: *MAGIC,
            found: magic.try_into().unwrap(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let found = r.take(32)?;
    if found != digest {
        return Err(Error::DigestMismatch {
            expected: hex::encode(digest),
            found: hex::encode(found),
        });
    }
    let n = r.u32()? as usize;
    let mut blocks = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u32()? as usize;
        let name = String::from_utf8_lossy(r.take(len)?).into_owned();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let raw = r.take(count.checked_mul(4).ok_or_else(|| Error::Truncated(name.clone()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        blocks.push((name, Tensor::new(shape, data)));
    }
    Ok(blocks)
}

impl EncoderParams<f32> {
    pub fn save(&self, path: &Path, cfg: &EncoderConfig) -> Result<()> {
        let mut blocks: Vec<(String, &Tensor<f32>)> = self
            .params
            .names
            .iter()
            .cloned()
            .zip(&self.params.tensors)
            .collect();
        for (n, t) in self.buffers.names.iter().zip(&self.buffers.tensors) {
            blocks.push((format!("{BUFFER_PREFIX}{n}"), t));
        }
        save_blocks(path, &cfg.digest(), &blocks)
    }

    pub fn load(path: &Path, cfg: &EncoderConfig) -> Result<Self> {
        let mut params = ParamSet::default();
        let mut buffers = ParamSet::default();
        for (name, t) in load_blocks(path, &cfg.digest())? {
            match name.strip_prefix(BUFFER_PREFIX) {
                Some(b) => buffers.push(b, t),
                None => params.push(name, t),
            };
        }
        let expected = EncoderParams::<f32>::init(cfg, 0)?;
        let same_layout = |a: &ParamSet<f32>, b: &ParamSet<f32>| {
            a.names == b.names && a.tensors.iter().zip(&b.tensors).all(|(x, y)| x.shape == y.shape)
        };
        if !same_layout(&params, &expected.params) || !same_layout(&buffers, &expected.buffers) {
            return Err(Error::Shape(format!(
                "checkpoint {} does not match the encoder layout",
                path.display()
            )));
        }
        Ok(EncoderParams { params, buffers })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_digest_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.nnp");
        let cfg = EncoderConfig {
            widths: vec![4, 8],
            ..Default::default()
        };
        let p = EncoderParams::<f32>::init(&cfg, 11).unwrap();
        p.save(&path, &cfg).unwrap();
        assert_eq!(EncoderParams::load(&path, &cfg).unwrap(), p);

        let other = EncoderConfig {
            widths: vec![4, 9],
            ..Default::default()
        };
        assert!(matches!(
            EncoderParams::load(&path, &other),
            Err(Error::DigestMismatch { .. })
        ));
    }
}
