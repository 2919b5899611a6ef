use rand::seq::SliceRandom;

use crate::error::{invalid, Error, Result};
use crate::seeding::{self, tag};

/// Local mini-batch schedule: each epoch reshuffles the client's indices and
/// cuts them into `ceil(n / batch_size)` batches, the last possibly short.
/// The schedule length is the number of local steps `T`.
pub fn epoch_batches(
    indices: &[usize],
    batch_size: usize,
    epochs: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if indices.is_empty() {
        return Err(Error::Empty("client index list"));
    }
    if batch_size == 0 {
        return Err(invalid("batch_size", "must be >= 1"));
    }
    if epochs == 0 {
        return Err(invalid("epochs", "must be >= 1"));
    }
    let mut rng = seeding::stream(seed, &[tag::BATCHES]);
    let mut order = indices.to_vec();
    let mut out = Vec::with_capacity(epochs * indices.len().div_ceil(batch_size));
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        out.extend(order.chunks(batch_size).map(<[usize]>::to_vec));
    }
    Ok(out)
}
