//! Latent distributions in factorized (cluster, word) and flat form.

use std::sync::Arc;

use crate::cluster::Partition;
use crate::error::{Error, Result};

/// Tolerance on the total mass of a probability vector.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Rejects vectors that are not finite, non-negative and summing to one.
pub fn check_simplex(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::invalid(format!("{what}: empty distribution")));
    }
    if let Some(x) = p.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(Error::invalid(format!("{what}: invalid probability {x}")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::invalid(format!("{what}: probabilities sum to {total}")));
    }
    Ok(())
}

/// A cluster-level categorical plus one within-cluster categorical per
/// cluster, each supported exactly on that cluster's members.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoStageDist {
    cluster: Vec<f64>,
    words: Vec<Vec<f64>>,
    partition: Arc<Partition>,
}

impl TwoStageDist {
    /// `words[k][j]` is the probability of `partition.members(k)[j]`.
    pub fn new(cluster: Vec<f64>, words: Vec<Vec<f64>>, partition: Arc<Partition>) -> Result<Self> {
        if cluster.len() != partition.k() || words.len() != partition.k() {
            return Err(Error::invalid(format!(
                "two-stage distribution has {} cluster probs and {} word stages for K = {}",
                cluster.len(),
                words.len(),
                partition.k()
            )));
        }
        check_simplex(&cluster, "cluster stage")?;
        for (k, w) in words.iter().enumerate() {
            if w.len() != partition.members(k).len() {
                return Err(Error::invalid(format!(
                    "word stage {k} has {} probs for {} members",
                    w.len(),
                    partition.members(k).len()
                )));
            }
            check_simplex(w, "word stage")?;
        }
        Ok(Self {
            cluster,
            words,
            partition,
        })
    }

    pub fn k(&self) -> usize {
        self.cluster.len()
    }

    pub fn cluster_probs(&self) -> &[f64] {
        &self.cluster
    }

    pub fn word_probs(&self, k: usize) -> &[f64] {
        &self.words[k]
    }

    pub fn partition(&self) -> &Arc<Partition> {
        &self.partition
    }

    /// Implied flat probability `q(c_z) * q(z | c_z)`; zero outside the latent space.
    pub fn prob(&self, z: usize) -> f64 {
        let Ok(k) = self.partition.cluster_of(z) else { return 0.0 };
        let j = self.partition.members(k).binary_search(&z).unwrap();
        self.cluster[k] * self.words[k][j]
    }

    /// Implied flat distribution as `(latent id, prob)` pairs, cluster by cluster.
    pub fn flatten(&self) -> Vec<(usize, f64)> {
        let mut out = Vec::with_capacity(self.partition.len());
        for k in 0..self.k() {
            for (j, &z) in self.partition.members(k).iter().enumerate() {
                out.push((z, self.cluster[k] * self.words[k][j]));
            }
        }
        out
    }

    /// Implied flat probabilities listed in the order of `ids`.
    pub fn flat_in_order(&self, ids: &[usize]) -> Vec<f64> {
        ids.iter().map(|&z| self.prob(z)).collect()
    }

    /// Most probable latent id under the implied flat distribution.
    pub fn argmax(&self) -> usize {
        argmax_pairs(&self.flatten())
    }
}

/// A single categorical over an ordered list of latent ids.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatDist {
    ids: Arc<Vec<usize>>,
    probs: Vec<f64>,
}

impl FlatDist {
    pub fn new(ids: Arc<Vec<usize>>, probs: Vec<f64>) -> Result<Self> {
        if ids.len() != probs.len() {
            return Err(Error::invalid(format!(
                "flat distribution has {} probs for {} ids",
                probs.len(),
                ids.len()
            )));
        }
        check_simplex(&probs, "flat distribution")?;
        Ok(Self { ids, probs })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, z: usize) -> f64 {
        self.ids
            .iter()
            .position(|&i| i == z)
            .map_or(0.0, |j| self.probs[j])
    }

    pub fn argmax(&self) -> usize {
        let pairs: Vec<(usize, f64)> = self.ids.iter().copied().zip(self.probs.iter().copied()).collect();
        argmax_pairs(&pairs)
    }
}

fn argmax_pairs(pairs: &[(usize, f64)]) -> usize {
    let mut best = pairs[0];
    for &(z, p) in &pairs[1..] {
        if p > best.1 || (p == best.1 && z < best.0) {
            best = (z, p);
        }
    }
    best.0
}

/// Latent distribution produced by a prior or posterior network.
#[derive(Clone, Debug, PartialEq)]
pub enum LatentDist {
    TwoStage(TwoStageDist),
    Flat(FlatDist),
    /// The model has no latent variable.
    Absent,
}

impl LatentDist {
    pub fn prob(&self, z: usize) -> f64 {
        match self {
            LatentDist::TwoStage(d) => d.prob(z),
            LatentDist::Flat(d) => d.prob(z),
            LatentDist::Absent => 0.0,
        }
    }

    pub fn argmax(&self) -> Option<usize> {
        match self {
            LatentDist::TwoStage(d) => Some(d.argmax()),
            LatentDist::Flat(d) => Some(d.argmax()),
            LatentDist::Absent => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn partition() -> Arc<Partition> {
        Arc::new(Partition::from_assignment(&[(4, 0), (5, 1), (6, 0), (7, 1), (8, 1)]).unwrap())
    }

    #[test]
    fn flatten_sums_to_one() {
        let d = TwoStageDist::new(vec![0.3, 0.7], vec![vec![0.5, 0.5], vec![0.2, 0.3, 0.5]], partition()).unwrap();
        let total: f64 = d.flatten().iter().map(|p| p.1).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!((d.prob(7) - 0.21).abs() < 1e-15);
        assert_eq!(d.prob(99), 0.0);
        assert_eq!(d.argmax(), 8);
    }

    #[test]
    fn rejects_wrong_support() {
        assert!(TwoStageDist::new(vec![0.3, 0.7], vec![vec![1.0], vec![0.2, 0.3, 0.5]], partition()).is_err());
        assert!(TwoStageDist::new(vec![0.3, 0.6], vec![vec![0.5, 0.5], vec![0.2, 0.3, 0.5]], partition()).is_err());
    }

    #[test]
    fn flat_argmax_ties_to_lower_id() {
        let d = FlatDist::new(Arc::new(vec![9, 4, 6]), vec![0.4, 0.4, 0.2]).unwrap();
        assert_eq!(d.argmax(), 4);
    }
}

#[cfg(test)]
mod props {
    use proptest::prelude::*;

    use super::*;
    use crate::objective::{kl_categorical, kl_two_stage};

    fn normalize(w: Vec<f64>) -> Vec<f64> {
        let s: f64 = w.iter().sum();
        w.into_iter().map(|x| x / s).collect()
    }

    /// A partition of ids 10.. into `k` non-empty clusters plus a pair of
    /// two-stage distributions over it.
    fn two_stage_pair() -> impl Strategy<Value = (TwoStageDist, TwoStageDist)> {
        (1usize..5, 0usize..12).prop_flat_map(|(k, extra)| {
            let n = k + extra;
            (prop::collection::vec(0..k, n), prop::collection::vec(0.01f64..1.0, 2 * (k + n))).prop_map(
                move |(labels, w)| {
                    let assignment: Vec<(usize, usize)> = labels
                        .iter()
                        .enumerate()
                        .map(|(i, &c)| (10 + i, if i < k { i } else { c }))
                        .collect();
                    let part = Arc::new(Partition::from_assignment(&assignment).unwrap());
                    let build = |w: &[f64]| {
                        let cluster = normalize(w[..k].to_vec());
                        let mut rest = &w[k..];
                        let words = (0..k)
                            .map(|c| {
                                let m = part.members(c).len();
                                let (head, tail) = rest.split_at(m);
                                rest = tail;
                                normalize(head.to_vec())
                            })
                            .collect();
                        TwoStageDist::new(cluster, words, part.clone()).unwrap()
                    };
                    (build(&w[..k + n]), build(&w[k + n..]))
                },
            )
        })
    }

    proptest! {
        #[test]
        fn flatten_is_a_distribution((q, _) in two_stage_pair()) {
            let flat = q.flatten();
            prop_assert_eq!(flat.len(), q.partition().len());
            prop_assert!((flat.iter().map(|(_, p)| p).sum::<f64>() - 1.0).abs() < 1e-12);
            for (z, p) in flat {
                prop_assert!((q.prob(z) - p).abs() < 1e-15);
            }
            let best = q.argmax();
            prop_assert!(q.flatten().iter().all(|&(_, p)| p <= q.prob(best)));
        }

        #[test]
        fn kl_nonnegative_and_decomposes((q, p) in two_stage_pair()) {
            let ids: Vec<usize> = q.flatten().iter().map(|&(z, _)| z).collect();
            let flat = kl_categorical(&q.flat_in_order(&ids), &p.flat_in_order(&ids)).unwrap();
            let staged = kl_two_stage(&q, &p).unwrap();
            prop_assert!(flat >= -1e-12);
            prop_assert!((flat - staged).abs() < 1e-10);
            prop_assert!(kl_two_stage(&q, &q).unwrap().abs() < 1e-12);
        }
    }
}
