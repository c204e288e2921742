use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::AnnotatedImage;
use crate::error::{Error, Result};
use crate::rng;

/// Size of a labeled fine-tuning subset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubsetSize {
    #[default]
    All,
    #[serde(untagged)]
    N(usize),
}

impl SubsetSize {
    pub fn resolve(self, available: usize) -> usize {
        match self {
            SubsetSize::All => available,
            SubsetSize::N(n) => n,
        }
    }
}

impl std::fmt::Display for SubsetSize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SubsetSize::All => f.write_str("all"),
            SubsetSize::N(n) => write!(f, "{n}"),
        }
    }
}

/// Uniform sample without replacement, returned in the dataset's order.
pub fn subset_sampler(dataset: &[AnnotatedImage], n: SubsetSize, seed: u64) -> Result<Vec<AnnotatedImage>> {
    let k = n.resolve(dataset.len());
    if k > dataset.len() {
        return Err(Error::Config(format!("subset of {k} requested from {} images", dataset.len())));
    }
    let mut r = rng::rng_for(seed, &[rng::str_id("subset")]);
    let mut picked = index::sample(&mut r, dataset.len(), k).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| dataset[i].clone()).collect())
}
