use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::SplitManifest;
use crate::error::{GctError, Result};

/// Ids of one mixed batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SslBatch {
    pub labeled: Vec<u64>,
    pub unlabeled: Vec<u64>,
}

/// One epoch of mixed batches: the unlabeled ids are shuffled and visited
/// exactly once in chunks of `b_u`; labeled ids are drawn from a shuffled queue
/// that is reshuffled whenever it runs out.
pub fn compose_batches(manifest: &SplitManifest, b_l: usize, b_u: usize, epoch_seed: u64) -> Result<Vec<SslBatch>> {
    if b_l == 0 || b_u == 0 {
        return Err(GctError::config("batch_size", "labeled and unlabeled batch parts must be >= 1"));
    }
    if manifest.unlabeled_ids.is_empty() {
        return Err(GctError::config("ratio", "no unlabeled data to train with"));
    }
    if manifest.labeled_ids.is_empty() {
        return Err(GctError::config("ratio", "no labeled data to train with"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    let mut unlabeled = manifest.unlabeled_ids.clone();
    unlabeled.shuffle(&mut rng);
    let mut queue: Vec<u64> = Vec::new();
    let mut next_labeled = || {
        if queue.is_empty() {
            queue = manifest.labeled_ids.clone();
            queue.shuffle(&mut rng);
            queue.reverse();
        }
        queue.pop().expect("refilled")
    };
    Ok(unlabeled
        .chunks(b_u)
        .map(|chunk| SslBatch {
            labeled: (0..b_l).map(|_| next_labeled()).collect(),
            unlabeled: chunk.to_vec(),
        })
        .collect())
}

/// One epoch over `ids` alone, shuffled, in chunks of `b`.
pub fn supervised_batches(ids: &[u64], b: usize, epoch_seed: u64) -> Result<Vec<Vec<u64>>> {
    if b == 0 {
        return Err(GctError::config("batch_size", "must be >= 1"));
    }
    if ids.is_empty() {
        return Err(GctError::config("ratio", "no labeled data to train with"));
    }
    let mut ids = ids.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    Ok(ids.chunks(b).map(<[u64]>::to_vec).collect())
}

/// Total samples drawn: epochs times iterations per epoch times batch size.
pub fn sample_budget(epochs: u64, iterations: u64, batch: u64) -> u64 {
    epochs * iterations * batch
}
