//! Single-file binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"LCRGCKPT"  u32 version  u64 iteration
//! u32 len, model config as JSON
//! u32 count, then per tensor: u32 len, name, u32 ndim, u64 dims.., f64 payload
//! u8 flag, latent stats      (when flag = 1)
//! u8 flag, class stats       (when flag = 1)
//! ```
//!
//! A stats block is `u32 categories, u32 dim`, then per category
//! `u64 n, f64 mean[dim], f64 cov[dim·dim]`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::latent_isda::{CategoryStats, Moments};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"LCRGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelParams,
    pub latent_stats: Option<CategoryStats>,
    pub class_stats: Option<CategoryStats>,
    pub iteration: u64,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_stats(buf: &mut Vec<u8>, stats: Option<&CategoryStats>) {
    let Some(stats) = stats else {
        buf.push(0);
        return;
    };
    buf.push(1);
    put_u32(buf, stats.num_categories());
    put_u32(buf, stats.dim());
    for m in stats.categories() {
        buf.extend_from_slice(&m.n.to_le_bytes());
        for v in m.mean.iter().chain(&m.cov) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&ckpt.iteration.to_le_bytes());
    let config = serde_json::to_vec(&ckpt.model.config)?;
    put_u32(&mut buf, config.len());
    buf.extend_from_slice(&config);
    put_u32(&mut buf, ckpt.model.store.len());
    for p in ckpt.model.store.iter() {
        put_u32(&mut buf, p.name.len());
        buf.extend_from_slice(p.name.as_bytes());
        put_u32(&mut buf, p.value.shape().len());
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    put_stats(&mut buf, ckpt.latent_stats.as_ref());
    put_stats(&mut buf, ckpt.class_stats.as_ref());
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated file")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let raw = self.take(n.checked_mul(8).ok_or("size overflow")?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn stats(&mut self) -> std::result::Result<Option<CategoryStats>, String> {
        match self.u8()? {
            0 => return Ok(None),
            1 => {}
            f => return Err(format!("bad stats flag {f}")),
        }
        let (cats, dim) = (self.u32()?, self.u32()?);
        let mut moments = Vec::with_capacity(cats);
        for _ in 0..cats {
            let n = self.u64()?;
            let mean = self.f64s(dim)?;
            let cov = self.f64s(dim * dim)?;
            moments.push(Moments { n, mean, cov });
        }
        CategoryStats::from_parts(dim, moments).map(Some).map_err(|e| e.to_string())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err("not a checkpoint".into());
    }
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let iteration = r.u64()?;
    let len = r.u32()?;
    let config: ModelConfig = serde_json::from_slice(r.take(len)?).map_err(|e| e.to_string())?;
    let mut model = ModelParams::init(config, &mut ChaCha8Rng::seed_from_u64(0)).map_err(|e| e.to_string())?;
    let count = r.u32()?;
    if count != model.store.len() {
        return Err(format!("{count} tensors for a model with {}", model.store.len()));
    }
    for p in model.store.iter_mut() {
        let name_len = r.u32()?;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|e| e.to_string())?;
        if name != p.name {
            return Err(format!("expected tensor {}, found {name}", p.name));
        }
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        if shape != p.value.shape() {
            return Err(format!("tensor {name} has shape {shape:?}, expected {:?}", p.value.shape()));
        }
        let data = r.f64s(p.value.numel())?;
        p.value = Tensor::new(shape, data).map_err(|e| e.to_string())?;
    }
    let latent_stats = r.stats()?;
    let class_stats = r.stats()?;
    if r.pos != bytes.len() {
        return Err("trailing bytes".into());
    }
    Ok(Checkpoint {
        model,
        latent_stats,
        class_stats,
        iteration,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|d| Error::format(path, d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::longtail_data::SampleShape;
    use crate::model::EncoderConfig;

    fn sample() -> Checkpoint {
        let config = ModelConfig {
            encoder: EncoderConfig {
                input: SampleShape::Vector { dim: 4 },
                hidden: vec![5],
                feature_dim: 3,
                grid: (1, 2),
            },
            num_classes: 3,
            num_latents: Some(2),
        };
        let model = ModelParams::init(config, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let mut stats = CategoryStats::new(2, 3);
        stats.update(0, &[[1.0, 2.0, 3.0], [0.5, -1.0, 2.0]]).unwrap();
        Checkpoint {
            model,
            latent_stats: Some(stats),
            class_stats: None,
            iteration: 42,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ckpt = sample();
        let bytes = encode_checkpoint(&ckpt).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn corruption_detected() {
        let bytes = encode_checkpoint(&sample()).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
    }
}
