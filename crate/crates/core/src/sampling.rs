//! Seeded random source and categorical samplers.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dist::{check_simplex, LatentDist, TwoStageDist};
use crate::error::Result;

/// Seedable generator; identical seeds give identical streams.
#[derive(Clone, Debug)]
pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn seed_from(seed: u64) -> Self {
        Rng(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Uniform draw from `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.0.gen::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform index in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.0.gen_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.gen()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.0);
    }
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_categorical(probs: &[f64], rng: &mut Rng) -> Result<usize> {
    check_simplex(probs, "sample_categorical")?;
    let u = rng.uniform();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    // Rounding left u beyond the accumulated mass.
    Ok(probs.iter().rposition(|&p| p > 0.0).unwrap())
}

/// Draws a cluster, then a member of that cluster. Returns `(cluster, z)`.
pub fn two_stage_sample(dist: &TwoStageDist, rng: &mut Rng) -> Result<(usize, usize)> {
    let k = sample_categorical(dist.cluster_probs(), rng)?;
    let j = sample_categorical(dist.word_probs(k), rng)?;
    Ok((k, dist.partition().members(k)[j]))
}

/// A drawn latent value; `cluster` is set only for two-stage distributions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatentSample {
    pub z: usize,
    pub cluster: Option<usize>,
}

pub fn sample_latent(dist: &LatentDist, rng: &mut Rng) -> Result<Option<LatentSample>> {
    match dist {
        LatentDist::TwoStage(d) => {
            let (k, z) = two_stage_sample(d, rng)?;
            Ok(Some(LatentSample { z, cluster: Some(k) }))
        }
        LatentDist::Flat(d) => {
            let j = sample_categorical(d.probs(), rng)?;
            Ok(Some(LatentSample {
                z: d.ids()[j],
                cluster: None,
            }))
        }
        LatentDist::Absent => Ok(None),
    }
}

/// Total-variation distance between two vectors of equal length.
pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::cluster::Partition;

    #[test]
    fn degenerate_categoricals() {
        let mut rng = Rng::seed_from(1);
        for _ in 0..1000 {
            assert_eq!(sample_categorical(&[1.0], &mut rng).unwrap(), 0);
            assert_eq!(sample_categorical(&[0.0, 1.0, 0.0], &mut rng).unwrap(), 1);
        }
    }

    #[test]
    fn rejects_non_simplex() {
        let mut rng = Rng::seed_from(1);
        assert!(sample_categorical(&[0.5, 0.4], &mut rng).is_err());
        assert!(sample_categorical(&[1.5, -0.5], &mut rng).is_err());
        assert!(sample_categorical(&[], &mut rng).is_err());
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::seed_from(77);
        let mut b = Rng::seed_from(77);
        for _ in 0..100 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }

    #[test]
    fn one_hot_cluster_stays_in_support() {
        let part = Arc::new(Partition::from_assignment(&[(4, 0), (5, 1), (6, 0), (7, 1)]).unwrap());
        let d = TwoStageDist::new(vec![0.0, 1.0], vec![vec![0.5, 0.5], vec![0.3, 0.7]], part.clone()).unwrap();
        let mut rng = Rng::seed_from(3);
        for _ in 0..1000 {
            let (k, z) = two_stage_sample(&d, &mut rng).unwrap();
            assert_eq!(k, 1);
            assert_eq!(part.cluster_of(z).unwrap(), 1);
        }
    }
}

#[cfg(test)]
mod props {
    use proptest::prelude::*;

    use super::*;
    use super::Rng;

    proptest! {
        #[test]
        fn draws_stay_in_support(w in prop::collection::vec(prop_oneof![Just(0.0), 0.01f64..1.0], 1..12), seed in any::<u64>()) {
            prop_assume!(w.iter().any(|&x| x > 0.0));
            let s: f64 = w.iter().sum();
            let p: Vec<f64> = w.iter().map(|x| x / s).collect();
            let mut rng = Rng::seed_from(seed);
            for _ in 0..50 {
                let i = sample_categorical(&p, &mut rng).unwrap();
                prop_assert!(p[i] > 0.0);
            }
        }

        #[test]
        fn same_seed_same_stream(seed in any::<u64>()) {
            let (mut a, mut b) = (Rng::seed_from(seed), Rng::seed_from(seed));
            for _ in 0..20 {
                prop_assert_eq!(a.next_u64(), b.next_u64());
            }
        }
    }
}
