use crate::error::{PcsrError, Result};
use crate::numerics::Rng;

/// Shuffles `indices` with a stream keyed by `(seed, epoch)` and cuts it into
/// batches of `batch_size`. A short final batch is kept when it holds at least
/// two items (triplet losses need an in-batch negative), otherwise dropped.
pub fn batch_iter(
    indices: &[usize],
    batch_size: usize,
    epoch: u64,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(PcsrError::config(format!(
            "batch size must be at least 2, got {batch_size}"
        )));
    }
    let mut order = indices.to_vec();
    Rng::for_stream(seed, epoch).shuffle(&mut order);
    Ok(order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_with_short_tail() {
        let idx: Vec<usize> = (0..10).collect();
        let sizes: Vec<usize> = batch_iter(&idx, 4, 0, 1).unwrap().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let idx: Vec<usize> = (0..9).collect();
        let sizes: Vec<usize> = batch_iter(&idx, 4, 0, 1).unwrap().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 4]);
    }

    #[test]
    fn epochs_permute_the_same_multiset() {
        let idx: Vec<usize> = (0..50).collect();
        let a: Vec<usize> = batch_iter(&idx, 8, 0, 3).unwrap().concat();
        let b: Vec<usize> = batch_iter(&idx, 8, 1, 3).unwrap().concat();
        assert_ne!(a, b);
        let (mut sa, mut sb) = (a.clone(), b.clone());
        sa.sort_unstable();
        sb.sort_unstable();
        assert_eq!(sa, sb);
        assert_eq!(a, batch_iter(&idx, 8, 0, 3).unwrap().concat());
    }

    #[test]
    fn tiny_batch_rejected() {
        assert!(batch_iter(&[0, 1, 2], 1, 0, 0).is_err());
    }
}
