use rand::seq::SliceRandom;
use rand::Rng;

use super::LabeledDataset;
use crate::error::{domain, Error, Result};

/// Disjoint, equal-size index sets, one per client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub shards: Vec<Vec<usize>>,
    pub shard_size: usize,
}

impl Partition {
    pub fn n_clients(&self) -> usize {
        self.shards.len()
    }

    /// Materializes each shard as its own dataset.
    pub fn materialize(&self, data: &LabeledDataset) -> Vec<LabeledDataset> {
        self.shards.iter().map(|s| data.subset(s)).collect()
    }
}

/// Cuts a uniformly random permutation into `n_clients` shards of exactly
/// `shard_size` samples; the remainder is discarded.
pub fn partition_iid<R: Rng + ?Sized>(
    data: &LabeledDataset,
    n_clients: usize,
    shard_size: usize,
    rng: &mut R,
) -> Result<Partition> {
    if n_clients == 0 || shard_size == 0 {
        return Err(domain("partition needs positive client count and shard size"));
    }
    let needed = n_clients * shard_size;
    if needed > data.len() {
        return Err(Error::InsufficientData {
            needed,
            available: data.len(),
        });
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let shards = order[..needed].chunks(shard_size).map(<[usize]>::to_vec).collect();
    Ok(Partition { shards, shard_size })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use std::collections::HashSet;

    fn dummy(n: usize) -> LabeledDataset {
        LabeledDataset::new((0..n).map(|i| i as f64).collect(), vec![0; n], 1, 1).unwrap()
    }

    #[test]
    fn exact_cover_for_mnist_split() {
        let data = dummy(60_000);
        let p = partition_iid(&data, 50, 1200, &mut stream(3, Purpose::Partition, 0, 0)).unwrap();
        let all: HashSet<usize> = p.shards.iter().flatten().copied().collect();
        assert_eq!(all.len(), 60_000);
        assert!(p.shards.iter().all(|s| s.len() == 1200));
    }

    #[test]
    fn tail_discarded() {
        let p = partition_iid(&dummy(3), 2, 1, &mut stream(3, Purpose::Partition, 0, 0)).unwrap();
        assert_eq!(p.shards.len(), 2);
        assert_eq!(p.shards[0].len(), 1);
        assert_ne!(p.shards[0][0], p.shards[1][0]);
    }

    #[test]
    fn insufficient_data() {
        let err = partition_iid(&dummy(5), 2, 3, &mut stream(3, Purpose::Partition, 0, 0)).unwrap_err();
        assert!(matches!(err, Error::InsufficientData { needed: 6, available: 5 }));
    }

    #[test]
    fn seed_reproducible_and_disjoint() {
        let data = dummy(1000);
        let a = partition_iid(&data, 7, 100, &mut stream(4, Purpose::Partition, 0, 0)).unwrap();
        let b = partition_iid(&data, 7, 100, &mut stream(4, Purpose::Partition, 0, 0)).unwrap();
        assert_eq!(a, b);
        let flat: Vec<usize> = a.shards.iter().flatten().copied().collect();
        let unique: HashSet<usize> = flat.iter().copied().collect();
        assert_eq!(unique.len(), flat.len());
    }
}
