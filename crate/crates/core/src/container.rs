//! Binary container shared by checkpoints and latent files.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic          4 bytes  "YSND"
//! version        u32      FORMAT_VERSION
//! kind           u32      1 = checkpoint, 2 = tensor bundle
//! [kind == 1]    ModelConfig: d_model, n_layers, n_heads, d_audio_latent,
//!                d_video_feat, d_text, t_audio as u64, guidance_scale as f64
//! record_count   u32
//! record *       name_len u32, name (UTF-8), ndim u32, dims u64 * ndim,
//!                data f64 * product(dims)
//! ```
//! Floats are stored bit-for-bit, so a write/read round trip is exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"YSND";
pub const FORMAT_VERSION: u32 = 1;

const KIND_CHECKPOINT: u32 = 1;
const KIND_TENSORS: u32 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// A checkpoint (with model config) or a plain bundle of named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub config: Option<ModelConfig>,
    pub records: Vec<Record>,
}

impl Container {
    pub fn checkpoint(config: ModelConfig) -> Self {
        Self {
            config: Some(config),
            records: Vec::new(),
        }
    }

    pub fn tensors() -> Self {
        Self::default()
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.records.push(Record {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|x| x.as_f64()).collect(),
        });
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Option<Tensor<T>> {
        self.get(name).map(|r| {
            Tensor::from_vec(r.shape.clone(), r.data.iter().map(|&x| T::of(x)).collect())
                .expect("record shape validated on read")
        })
    }

    pub fn require<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        self.tensor(name)
            .ok_or_else(|| Error::format(format!("missing record {name}")))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        match &self.config {
            Some(c) => {
                w.write_all(&KIND_CHECKPOINT.to_le_bytes())?;
                for v in [c.d_model, c.n_layers, c.n_heads, c.d_audio_latent, c.d_video_feat, c.d_text, c.t_audio] {
                    w.write_all(&(v as u64).to_le_bytes())?;
                }
                w.write_all(&c.guidance_scale.to_le_bytes())?;
            }
            None => w.write_all(&KIND_TENSORS.to_le_bytes())?,
        }
        w.write_all(&u32::try_from(self.records.len()).map_err(|_| Error::format("too many records"))?.to_le_bytes())?;
        for r in &self.records {
            let name = r.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(r.shape.len() as u32).to_le_bytes())?;
            for &d in &r.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &x in &r.data {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format("bad magic, not a YSND file"));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(Error::format(format!("unsupported format version {version}")));
        }
        let config = match read_u32(r)? {
            KIND_CHECKPOINT => {
                let mut v = [0usize; 7];
                for x in &mut v {
                    *x = read_u64(r)? as usize;
                }
                let cfg = ModelConfig {
                    d_model: v[0],
                    n_layers: v[1],
                    n_heads: v[2],
                    d_audio_latent: v[3],
                    d_video_feat: v[4],
                    d_text: v[5],
                    t_audio: v[6],
                    guidance_scale: f64::from_bits(read_u64(r)?),
                };
                cfg.validate()?;
                Some(cfg)
            }
            KIND_TENSORS => None,
            k => return Err(Error::format(format!("unknown container kind {k}"))),
        };
        let count = read_u32(r)?;
        let mut records = Vec::with_capacity(count.min(4096) as usize);
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::format("record name is not UTF-8"))?;
            let ndim = read_u32(r)? as usize;
            let shape = (0..ndim).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::format("record too large"))?;
            let data = (0..n).map(|_| read_u64(r).map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
            records.push(Record { name, shape, data });
        }
        Ok(Self { config, records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_fixed() {
        let c = Container::tensors();
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        assert_eq!(buf, [b'Y', b'S', b'N', b'D', 1, 0, 0, 0, 2, 0, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn rejects_foreign_bytes() {
        assert!(Container::read_from(&mut &b"NOPE\x01\x00\x00\x00"[..]).is_err());
        assert!(Container::read_from(&mut &b"YSND\x09\x00\x00\x00"[..]).is_err());
    }
}
