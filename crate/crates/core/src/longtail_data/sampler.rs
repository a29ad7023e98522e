use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::LongTailDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Uniform over samples.
    InstanceBalanced,
    /// Uniform over classes, then uniform within the class.
    ClassBalanced,
}

/// Infinite, seeded stream of sample indices.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    mode: SamplingMode,
    rng: ChaCha8Rng,
    len: usize,
    by_class: Vec<Vec<usize>>,
}

impl BatchSampler {
    pub fn new(dataset: &LongTailDataset, mode: SamplingMode, seed: u64) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::invalid("cannot sample from an empty dataset"));
        }
        let by_class = dataset
            .class_indices()
            .into_iter()
            .filter(|v| !v.is_empty())
            .collect();
        Ok(Self {
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            len: dataset.len(),
            by_class,
        })
    }

    pub fn next_index(&mut self) -> usize {
        match self.mode {
            SamplingMode::InstanceBalanced => self.rng.random_range(0..self.len),
            SamplingMode::ClassBalanced => {
                let c = self.rng.random_range(0..self.by_class.len());
                let members = &self.by_class[c];
                members[self.rng.random_range(0..members.len())]
            }
        }
    }

    pub fn next_batch(&mut self, batch: usize) -> Result<Vec<usize>> {
        if batch == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        Ok((0..batch).map(|_| self.next_index()).collect())
    }
}

impl Iterator for BatchSampler {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        Some(self.next_index())
    }
}
