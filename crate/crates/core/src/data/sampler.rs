//! P x K batch sampling.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::data::manifest::{Dataset, LabeledImage};
use crate::error::{Error, Result};
use crate::rng::stream;

const TAG_BATCH: u64 = 0xba7c;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchSpec {
    pub p: usize,
    pub k: usize,
    pub seed: u64,
}

impl BatchSpec {
    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }
}

/// Record indices of one batch, grouped identity by identity. Identities are
/// drawn without replacement; within an identity, images are drawn without
/// replacement while they last and the remaining slots are filled with
/// replacement.
pub fn pk_indices(identities: &[Vec<usize>], spec: &BatchSpec, epoch: usize, step: usize) -> Result<Vec<usize>> {
    if spec.p == 0 || spec.k == 0 {
        return Err(Error::Sampling("P and K must be positive".into()));
    }
    let populated: Vec<&Vec<usize>> = identities.iter().filter(|v| !v.is_empty()).collect();
    if populated.len() < spec.p {
        return Err(Error::Sampling(format!(
            "batch needs {} identities but the dataset has {}",
            spec.p,
            populated.len()
        )));
    }
    let mut rng = stream(&[spec.seed, TAG_BATCH, epoch as u64, step as u64]);
    let chosen: Vec<&Vec<usize>> = populated.choose_multiple(&mut rng, spec.p).copied().collect();
    let mut out = Vec::with_capacity(spec.batch_size());
    for images in chosen {
        let mut pool = images.clone();
        pool.shuffle(&mut rng);
        let take = spec.k.min(pool.len());
        out.extend_from_slice(&pool[..take]);
        for _ in take..spec.k {
            out.push(images[rng.random_range(0..images.len())]);
        }
    }
    Ok(out)
}

/// Draws a batch from `dataset`, fully determined by `(spec.seed, epoch, step)`.
pub fn pk_sample(dataset: &Dataset, spec: &BatchSpec, epoch: usize, step: usize) -> Result<Vec<LabeledImage>> {
    pk_indices(&dataset.identity_index(), spec, epoch, step)?
        .into_iter()
        .map(|i| dataset.image(i))
        .collect()
}
