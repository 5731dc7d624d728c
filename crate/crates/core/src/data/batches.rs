use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Training permutation for one epoch.
///
/// The generator is ChaCha8 keyed by `seed`, on stream `epoch`, so every
/// (seed, epoch) pair yields its own reproducible order regardless of what
/// other epochs were drawn.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

/// Shuffled index batches; the last batch keeps the remainder.
pub fn epoch_batches(len: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    epoch_order(len, seed, epoch).chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Unshuffled batches in file order, used for evaluation.
pub fn sequential_batches(len: usize, batch_size: usize) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    (0..len).collect::<Vec<_>>().chunks(batch_size).map(<[usize]>::to_vec).collect()
}
