//! On-disk corpus format and the content-addressed dataset cache.
//!
//! A corpus directory holds three files:
//!
//! * `meta.json`: `{"format": "lcreg-corpus/1", "num_classes": C, "count": N,
//!   "sample": {"kind": "vector", "dim": D} | {"kind": "image", "channels": c,
//!   "height": h, "width": w}, "counts": [...], "seed": s}`
//! * `samples.f32`: `N × numel` little-endian IEEE-754 `f32`, row-major, one
//!   sample after another
//! * `labels.u32`: `N` little-endian `u32` class indices
//!
//! A cache entry is a directory named `lt-<16 hex digits of sha256(recipe)>`
//! holding `recipe.json` plus `train/` and `val/` corpora.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::dataset::{
    subsample_corpus, synthesize_mixture_as, LongTailDataset, MixtureSpec, SampleShape,
};
use super::profile::ImbalanceProfile;
use crate::error::{Error, Result};

pub const CORPUS_FORMAT: &str = "lcreg-corpus/1";
pub const CACHE_ENV: &str = "LCREG_CACHE_DIR";
pub const DEFAULT_CACHE_DIR: &str = ".lcreg-cache";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct CorpusMeta {
    format: String,
    num_classes: usize,
    count: usize,
    sample: SampleShape,
    counts: Vec<usize>,
    seed: u64,
}

pub fn write_corpus(dir: &Path, ds: &LongTailDataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = CorpusMeta {
        format: CORPUS_FORMAT.to_string(),
        num_classes: ds.num_classes(),
        count: ds.len(),
        sample: ds.shape,
        counts: ds.counts.clone(),
        seed: ds.seed,
    };
    let meta_path = dir.join("meta.json");
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&meta_path, e))?;

    let samples: Vec<u8> = ds.data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    let sp = dir.join("samples.f32");
    fs::write(&sp, samples).map_err(|e| Error::io(&sp, e))?;

    let labels: Vec<u8> = ds.labels.iter().flat_map(|&l| (l as u32).to_le_bytes()).collect();
    let lp = dir.join("labels.u32");
    fs::write(&lp, labels).map_err(|e| Error::io(&lp, e))?;
    Ok(())
}

pub fn read_corpus(dir: &Path) -> Result<LongTailDataset> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CorpusMeta =
        serde_json::from_str(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
    if meta.format != CORPUS_FORMAT {
        return Err(Error::format(&meta_path, format!("unsupported format {:?}", meta.format)));
    }
    let numel = meta.sample.numel();

    let sp = dir.join("samples.f32");
    let raw = fs::read(&sp).map_err(|e| Error::io(&sp, e))?;
    if raw.len() != meta.count * numel * 4 {
        return Err(Error::format(
            &sp,
            format!("expected {} bytes, found {}", meta.count * numel * 4, raw.len()),
        ));
    }
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();

    let lp = dir.join("labels.u32");
    let raw = fs::read(&lp).map_err(|e| Error::io(&lp, e))?;
    if raw.len() != meta.count * 4 {
        return Err(Error::format(&lp, format!("expected {} bytes, found {}", meta.count * 4, raw.len())));
    }
    let labels = raw
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();

    let ds = LongTailDataset::new(meta.sample, data, labels, meta.num_classes, meta.seed)
        .map_err(|e| Error::format(dir, e.to_string()))?;
    if ds.counts != meta.counts {
        return Err(Error::format(&meta_path, "counts disagree with labels"));
    }
    Ok(ds)
}

/// Where samples come from before the imbalance profile is applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    /// Gaussian mixture whose class means share part vectors.
    Mixture {
        sample: SampleShape,
        num_parts: usize,
        parts_per_class: usize,
        scale: f64,
        stdev: f64,
    },
    /// A balanced corpus directory on disk.
    Corpus { path: PathBuf },
}

/// Everything that determines a cached train/val pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecipe {
    pub data: DataSource,
    pub profile: ImbalanceProfile,
    /// Balanced validation set size per class.
    pub val_per_class: usize,
    pub seed: u64,
}

impl DatasetRecipe {
    /// First 16 hex digits of the SHA-256 of the canonical recipe JSON.
    pub fn key(&self) -> String {
        let canon = serde_json::to_string(self).expect("recipe serializes");
        let digest = Sha256::digest(canon.as_bytes());
        format!("lt-{}", &hex::encode(digest)[..16])
    }

    pub fn mixture_spec(&self) -> Result<Option<MixtureSpec>> {
        match &self.data {
            DataSource::Mixture {
                sample,
                num_parts,
                parts_per_class,
                scale,
                stdev,
            } => MixtureSpec::shared_parts(
                self.profile.num_classes,
                sample.numel(),
                *num_parts,
                *parts_per_class,
                *scale,
                *stdev,
                self.seed,
            )
            .map(Some),
            DataSource::Corpus { .. } => Ok(None),
        }
    }

    /// Builds `(train, val)`; train follows the profile, val is balanced.
    pub fn build(&self) -> Result<(LongTailDataset, LongTailDataset)> {
        let counts = self.profile.counts();
        match &self.data {
            DataSource::Mixture { sample, .. } => {
                let spec = self.mixture_spec()?.expect("mixture source");
                let train = synthesize_mixture_as(&spec, &counts, *sample)?;
                let val_spec = spec.with_seed(self.seed.wrapping_add(0x7a11_da7a));
                let val = synthesize_mixture_as(&val_spec, &vec![self.val_per_class; counts.len()], *sample)?;
                Ok((train, val))
            }
            DataSource::Corpus { path } => {
                let corpus = read_corpus(path)?;
                if corpus.num_classes() != counts.len() {
                    return Err(Error::invalid(format!(
                        "corpus has {} classes, profile expects {}",
                        corpus.num_classes(),
                        counts.len()
                    )));
                }
                let (val, rest) = hold_out(&corpus, self.val_per_class, self.seed)?;
                let train = subsample_corpus(&rest, &counts, self.seed)?;
                Ok((train, val))
            }
        }
    }
}

/// Splits off `per_class` samples of every class (seeded choice).
fn hold_out(corpus: &LongTailDataset, per_class: usize, seed: u64) -> Result<(LongTailDataset, LongTailDataset)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0b5e_55ed);
    let d = corpus.shape.numel();
    let (mut vd, mut vl, mut rd, mut rl) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (c, mut idx) in corpus.class_indices().into_iter().enumerate() {
        if idx.len() < per_class {
            return Err(Error::invalid(format!(
                "class {c} has {} samples, cannot hold out {per_class}",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let (held, kept) = idx.split_at(per_class);
        let (mut held, mut kept) = (held.to_vec(), kept.to_vec());
        held.sort_unstable();
        kept.sort_unstable();
        for i in held {
            vd.extend_from_slice(&corpus.data[i * d..(i + 1) * d]);
            vl.push(c);
        }
        for i in kept {
            rd.extend_from_slice(&corpus.data[i * d..(i + 1) * d]);
            rl.push(c);
        }
    }
    let c = corpus.num_classes();
    Ok((
        LongTailDataset::new(corpus.shape, vd, vl, c, seed)?,
        LongTailDataset::new(corpus.shape, rd, rl, c, seed)?,
    ))
}

/// Cache root: `$LCREG_CACHE_DIR`, else `.lcreg-cache`.
pub fn cache_root() -> PathBuf {
    std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_CACHE_DIR))
}

/// A materialized cache entry.
#[derive(Debug, Clone)]
pub struct CachedDataset {
    pub dir: PathBuf,
    pub recipe: DatasetRecipe,
    pub train: LongTailDataset,
    pub val: LongTailDataset,
    /// False when the entry already existed and was only read back.
    pub built: bool,
}

/// Returns the cache entry for `recipe`, building it only when absent.
pub fn ensure_cached(root: &Path, recipe: &DatasetRecipe) -> Result<CachedDataset> {
    let dir = root.join(recipe.key());
    if dir.join("recipe.json").exists() {
        let mut cached = load_cached(&dir)?;
        cached.built = false;
        return Ok(cached);
    }
    let (train, val) = recipe.build()?;
    let tmp = root.join(format!("{}.partial", recipe.key()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    write_corpus(&tmp.join("train"), &train)?;
    write_corpus(&tmp.join("val"), &val)?;
    let rp = tmp.join("recipe.json");
    fs::write(&rp, serde_json::to_string_pretty(recipe)? + "\n").map_err(|e| Error::io(&rp, e))?;
    fs::rename(&tmp, &dir).map_err(|e| Error::io(&dir, e))?;
    Ok(CachedDataset {
        dir,
        recipe: recipe.clone(),
        train,
        val,
        built: true,
    })
}

/// Reads a cache entry directory.
pub fn load_cached(dir: &Path) -> Result<CachedDataset> {
    let rp = dir.join("recipe.json");
    let text = fs::read_to_string(&rp).map_err(|e| Error::io(&rp, e))?;
    let recipe: DatasetRecipe = serde_json::from_str(&text).map_err(|e| Error::format(&rp, e.to_string()))?;
    Ok(CachedDataset {
        dir: dir.to_path_buf(),
        recipe,
        train: read_corpus(&dir.join("train"))?,
        val: read_corpus(&dir.join("val"))?,
        built: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::longtail_data::{synthesize_mixture, ProfileKind};

    fn recipe(seed: u64) -> DatasetRecipe {
        DatasetRecipe {
            data: DataSource::Mixture {
                sample: SampleShape::Vector { dim: 4 },
                num_parts: 4,
                parts_per_class: 2,
                scale: 2.0,
                stdev: 1.0,
            },
            profile: ImbalanceProfile::new(3, 40, 10.0, ProfileKind::Exponential).unwrap(),
            val_per_class: 5,
            seed,
        }
    }

    #[test]
    fn corpus_roundtrip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let spec = MixtureSpec::random(3, 5, 2.0, 1.0, 1).unwrap();
        let ds = synthesize_mixture(&spec, &[4, 2, 1]).unwrap();
        write_corpus(dir.path(), &ds).unwrap();
        assert_eq!(read_corpus(dir.path()).unwrap(), ds);
        assert_eq!(fs::metadata(dir.path().join("samples.f32")).unwrap().len(), 7 * 5 * 4);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let spec = MixtureSpec::random(2, 3, 2.0, 1.0, 1).unwrap();
        write_corpus(dir.path(), &synthesize_mixture(&spec, &[2, 2]).unwrap()).unwrap();
        fs::write(dir.path().join("labels.u32"), [0u8; 6]).unwrap();
        assert!(matches!(read_corpus(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn cache_key_tracks_recipe() {
        assert_eq!(recipe(1).key(), recipe(1).key());
        assert_ne!(recipe(1).key(), recipe(2).key());
    }

    #[test]
    fn cache_is_reused() {
        let root = tempfile::tempdir().unwrap();
        let first = ensure_cached(root.path(), &recipe(3)).unwrap();
        assert!(first.built);
        let second = ensure_cached(root.path(), &recipe(3)).unwrap();
        assert!(!second.built);
        assert_eq!(first.train, second.train);
        assert_eq!(second.val.counts, [5, 5, 5]);
    }

    #[test]
    fn corpus_source_holds_out_balanced_val() {
        let root = tempfile::tempdir().unwrap();
        let spec = MixtureSpec::random(3, 2, 2.0, 1.0, 1).unwrap();
        let corpus_dir = root.path().join("corpus");
        write_corpus(&corpus_dir, &synthesize_mixture(&spec, &[60, 60, 60]).unwrap()).unwrap();
        let r = DatasetRecipe {
            data: DataSource::Corpus { path: corpus_dir },
            ..recipe(0)
        };
        let (train, val) = r.build().unwrap();
        assert_eq!(val.counts, [5, 5, 5]);
        assert_eq!(train.counts, r.profile.counts());
    }
}
