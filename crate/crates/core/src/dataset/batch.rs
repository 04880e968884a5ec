use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Seeded permutation of `0..n` cut into batches of `batch_size`; the last
/// batch may be short.
pub fn batches(n: usize, batch_size: usize, shuffle_seed: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::input("cannot batch an empty dataset"));
    }
    if batch_size == 0 {
        return Err(Error::config("batch size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sizes(b: &[Vec<usize>]) -> Vec<usize> {
        b.iter().map(Vec::len).collect()
    }

    #[test]
    fn batch_sizes() {
        assert_eq!(sizes(&batches(10, 4, 0).unwrap()), [4, 4, 2]);
        assert_eq!(sizes(&batches(1000, 256, 0).unwrap()), [256, 256, 256, 232]);
        assert!(matches!(batches(0, 4, 0), Err(Error::InvalidInput(_))));
        assert!(matches!(batches(3, 0, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn epochs_permute_the_same_multiset() {
        let a: Vec<usize> = batches(50, 8, 1).unwrap().concat();
        let b: Vec<usize> = batches(50, 8, 2).unwrap().concat();
        assert_ne!(a, b);
        let (mut sa, mut sb) = (a.clone(), b);
        sa.sort_unstable();
        sb.sort_unstable();
        assert_eq!(sa, sb);
        assert_eq!(sa, (0..50).collect::<Vec<_>>());
        assert_eq!(batches(50, 8, 1).unwrap().concat(), a);
    }
}
