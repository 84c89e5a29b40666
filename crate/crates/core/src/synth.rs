//! Synthetic one-to-many corpus with planted topic clusters.
//!
//! Every query template has `responses_per_query` valid responses. Each
//! response is fixed by its topic word: a three-word frame picked by the topic
//! with the topic inserted after the first frame word. Every token gets an
//! embedding near one of `clusters` orthogonal centres, so k-means on the
//! emitted embedding file recovers the planted grouping.

use std::collections::BTreeSet;

use crate::cluster::EmbeddingFile;
use crate::data::TextPair;
use crate::error::{Error, Result};
use crate::sampling::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub templates: usize,
    /// Valid responses per query (M).
    pub responses_per_query: usize,
    /// Number of topic words.
    pub topics: usize,
    pub clusters: usize,
    pub query_words: usize,
    pub query_len: usize,
    /// One filler token is appended to each query.
    pub fillers: usize,
    pub frames: usize,
    /// Training pairs.
    pub pairs: usize,
    /// Held-out queries; each contributes all of its valid responses.
    pub test_queries: usize,
    pub dim: usize,
    /// Distance of each cluster centre from the origin.
    pub radius: f64,
    /// Per-coordinate half-width of the noise around a centre.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            templates: 50,
            responses_per_query: 4,
            topics: 80,
            clusters: 4,
            query_words: 40,
            query_len: 3,
            fillers: 10,
            frames: 8,
            pairs: 2000,
            test_queries: 25,
            dim: 32,
            radius: 4.0,
            noise: 0.04,
            seed: 0,
        }
    }
}

const FRAME_LEN: usize = 3;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(format!("synthetic spec: {m}")));
        if self.responses_per_query < 2 {
            return fail(format!("need at least 2 responses per query, got {}", self.responses_per_query));
        }
        if self.clusters == 0 || self.clusters > self.topics {
            return fail(format!("{} clusters for {} topics", self.clusters, self.topics));
        }
        if self.responses_per_query > self.topics {
            return fail(format!("{} responses per query but only {} topics", self.responses_per_query, self.topics));
        }
        if self.templates == 0 || self.frames == 0 || self.fillers == 0 || self.query_len == 0 {
            return fail("templates, frames, fillers and query_len must be positive".into());
        }
        if self.query_len > self.query_words {
            return fail(format!("query_len {} exceeds {} query words", self.query_len, self.query_words));
        }
        let possible = (self.query_words as f64).powi(self.query_len as i32);
        if (self.templates as f64) > possible {
            return fail(format!("{} distinct templates requested, at most {possible} exist", self.templates));
        }
        if self.dim < self.clusters {
            return fail(format!("embedding dim {} below cluster count {}", self.dim, self.clusters));
        }
        if !(self.noise >= 0.0 && self.radius > 0.0) {
            return fail("noise must be non-negative and radius positive".into());
        }
        if self.pairs == 0 {
            return fail("pair count must be positive".into());
        }
        Ok(())
    }
}

/// Everything a synthetic run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub train: Vec<TextPair>,
    pub test: Vec<TextPair>,
    /// Gold topic word of each training pair.
    pub train_keywords: Vec<String>,
    pub test_keywords: Vec<String>,
    /// Planted cluster of every token.
    pub clusters: Vec<(String, usize)>,
    pub embeddings: EmbeddingFile,
}

impl SyntheticCorpus {
    pub fn topic_words(&self) -> BTreeSet<&str> {
        self.train_keywords.iter().chain(&self.test_keywords).map(String::as_str).collect()
    }

    pub fn cluster_of(&self, token: &str) -> Option<usize> {
        self.clusters.iter().find(|(t, _)| t == token).map(|&(_, c)| c)
    }
}

fn names(prefix: &str, n: usize) -> Vec<String> {
    let width = n.saturating_sub(1).to_string().len();
    (0..n).map(|i| format!("{prefix}{i:0width$}")).collect()
}

pub fn synthesize_corpus(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = Rng::seed_from(spec.seed);
    let query_words = names("q", spec.query_words);
    let fillers = names("u", spec.fillers);
    let topics = names("t", spec.topics);
    let frame_words = names("r", spec.frames * FRAME_LEN);
    let topic_cluster = |i: usize| i % spec.clusters;

    let mut templates: Vec<Vec<usize>> = Vec::with_capacity(spec.templates);
    let mut seen = BTreeSet::new();
    while templates.len() < spec.templates {
        let t: Vec<usize> = (0..spec.query_len).map(|_| rng.below(spec.query_words)).collect();
        if seen.insert(t.clone()) {
            templates.push(t);
        }
    }

    // Topic slots: slot m of template t draws from cluster (t + m) mod K,
    // cycling through a shuffled member list so topics are spread evenly.
    let mut pools: Vec<Vec<usize>> = (0..spec.clusters)
        .map(|k| (0..spec.topics).filter(|&i| topic_cluster(i) == k).collect())
        .collect();
    for p in &mut pools {
        rng.shuffle(p);
    }
    let mut cursors = vec![0usize; spec.clusters];
    let mut slots: Vec<Vec<usize>> = Vec::with_capacity(spec.templates);
    for t in 0..spec.templates {
        let mut chosen: Vec<usize> = Vec::with_capacity(spec.responses_per_query);
        let mut k = t % spec.clusters;
        while chosen.len() < spec.responses_per_query {
            let pool = &pools[k];
            for _ in 0..pool.len() {
                let cand = pool[cursors[k] % pool.len()];
                cursors[k] += 1;
                if !chosen.contains(&cand) {
                    chosen.push(cand);
                    break;
                }
            }
            k = (k + 1) % spec.clusters;
        }
        slots.push(chosen);
    }

    let query = |t: usize, filler: usize| -> String {
        let mut toks: Vec<&str> = templates[t].iter().map(|&w| query_words[w].as_str()).collect();
        toks.push(&fillers[filler]);
        toks.join(" ")
    };
    let response = |topic: usize| -> String {
        let f = topic % spec.frames;
        let w = |j: usize| frame_words[f * FRAME_LEN + j].as_str();
        [w(0), topics[topic].as_str(), w(1), w(2)].join(" ")
    };

    let combos = spec.templates * spec.responses_per_query;
    let mut order: Vec<usize> = Vec::new();
    let mut train = Vec::with_capacity(spec.pairs);
    let mut train_keywords = Vec::with_capacity(spec.pairs);
    for i in 0..spec.pairs {
        if i % combos == 0 {
            order = (0..combos).collect();
            rng.shuffle(&mut order);
        }
        let c = order[i % combos];
        let (t, m) = (c / spec.responses_per_query, c % spec.responses_per_query);
        let topic = slots[t][m];
        let q = query(t, rng.below(spec.fillers));
        train.push(TextPair::new(&q, &response(topic)));
        train_keywords.push(topics[topic].clone());
    }

    let mut test = Vec::new();
    let mut test_keywords = Vec::new();
    for _ in 0..spec.test_queries {
        let t = rng.below(spec.templates);
        let q = query(t, rng.below(spec.fillers));
        for &topic in &slots[t] {
            test.push(TextPair::new(&q, &response(topic)));
            test_keywords.push(topics[topic].clone());
        }
    }

    let mut clusters: Vec<(String, usize)> = Vec::new();
    for (i, t) in topics.iter().enumerate() {
        clusters.push((t.clone(), topic_cluster(i)));
    }
    for group in [&query_words, &fillers, &frame_words] {
        for (i, w) in group.iter().enumerate() {
            clusters.push((w.clone(), i % spec.clusters));
        }
    }
    clusters.sort();

    let mut embeddings = EmbeddingFile::new(spec.dim);
    for (tok, k) in &clusters {
        let v: Vec<f64> = (0..spec.dim)
            .map(|d| if d == *k { spec.radius } else { 0.0 } + rng.uniform_in(-spec.noise, spec.noise))
            .collect();
        embeddings.insert(tok.clone(), v)?;
    }

    Ok(SyntheticCorpus {
        train,
        test,
        train_keywords,
        test_keywords,
        clusters,
        embeddings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }

    #[test]
    fn counts_for_ten_templates() {
        let spec = SyntheticSpec {
            templates: 10,
            topics: 40,
            pairs: 40,
            ..Default::default()
        };
        let c = synthesize_corpus(&spec).unwrap();
        assert_eq!(c.train.len(), 40);
        assert_eq!(c.train_keywords.len(), 40);
        let distinct: BTreeSet<&String> = c.train_keywords.iter().collect();
        assert_eq!(distinct.len(), 40);
        for (p, kw) in c.train.iter().zip(&c.train_keywords) {
            assert!(p.response.contains(kw));
        }
    }

    #[test]
    fn planted_clusters_are_tight() {
        let c = synthesize_corpus(&SyntheticSpec::default()).unwrap();
        let e = &c.embeddings;
        let (mut within, mut between) = (0.0f64, f64::INFINITY);
        for (a, ka) in &c.clusters {
            for (b, kb) in &c.clusters {
                if a < b {
                    let d = dist(e.get(a).unwrap(), e.get(b).unwrap());
                    if ka == kb {
                        within = within.max(d);
                    } else {
                        between = between.min(d);
                    }
                }
            }
        }
        assert!(within < 0.1 * between, "{within} vs {between}");
    }

    #[test]
    fn each_query_has_m_responses() {
        let spec = SyntheticSpec::default();
        let c = synthesize_corpus(&spec).unwrap();
        assert_eq!(c.test.len(), spec.test_queries * spec.responses_per_query);
        for chunk in c.test.chunks(spec.responses_per_query) {
            let rs: BTreeSet<String> = chunk.iter().map(TextPair::response_text).collect();
            assert_eq!(rs.len(), spec.responses_per_query);
            assert!(chunk.iter().all(|p| p.query == chunk[0].query));
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synthesize_corpus(&SyntheticSpec::default()).unwrap();
        assert_eq!(a, synthesize_corpus(&SyntheticSpec::default()).unwrap());
        let b = synthesize_corpus(&SyntheticSpec {
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        assert_ne!(a.train, b.train);
    }

    #[test]
    fn rejects_inconsistent_arity() {
        for spec in [
            SyntheticSpec {
                responses_per_query: 1,
                ..Default::default()
            },
            SyntheticSpec {
                clusters: 100,
                ..Default::default()
            },
            SyntheticSpec {
                dim: 2,
                ..Default::default()
            },
            SyntheticSpec {
                query_words: 2,
                ..Default::default()
            },
        ] {
            assert!(synthesize_corpus(&spec).is_err());
        }
    }
}
