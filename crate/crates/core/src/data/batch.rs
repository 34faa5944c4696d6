use rand::seq::SliceRandom;

use super::{Corpus, Split};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Record indices of `split`, shuffled by `epoch_seed` and cut into
/// batches of `batch_size`. The last batch may be short.
pub fn batch_iter(corpus: &Corpus, split: Split, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
    }
    let mut idx = corpus.split_indices(split);
    if idx.is_empty() {
        return Err(Error::InsufficientData(format!("split `{split}` is empty")));
    }
    idx.shuffle(&mut rng::stream(epoch_seed, Stream::Shuffle, 0));
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
