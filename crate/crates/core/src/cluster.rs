//! K-means partitioning of the latent word space over word embeddings.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::io::{read_utf8, write_atomic};
use crate::sampling::Rng;

/// Raw contents of an embedding text file, keyed by token string.
///
/// Format: one entry per line, the token followed by `dim` space-separated
/// floats.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingFile {
    dim: usize,
    entries: Vec<(String, Vec<f64>)>,
    index: HashMap<String, usize>,
}

impl EmbeddingFile {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, token: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        let token = token.into();
        if vector.len() != self.dim {
            return Err(Error::invalid(format!(
                "embedding for `{token}` has dim {}, expected {}",
                vector.len(),
                self.dim
            )));
        }
        if self.index.contains_key(&token) {
            return Err(Error::invalid(format!("duplicate embedding for `{token}`")));
        }
        self.index.insert(token.clone(), self.entries.len());
        self.entries.push((token, vector));
        Ok(())
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.index.get(token).map(|&i| self.entries[i].1.as_slice())
    }

    pub fn entries(&self) -> &[(String, Vec<f64>)] {
        &self.entries
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_utf8(path)?;
        let mut file: Option<EmbeddingFile> = None;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let token = parts.next().unwrap();
            let vector = parts
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::parse(path, i + 1, format!("bad float: {e}")))?;
            if vector.is_empty() {
                return Err(Error::parse(path, i + 1, "embedding line has no values"));
            }
            let f = file.get_or_insert_with(|| EmbeddingFile::new(vector.len()));
            f.insert(token, vector)
                .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        }
        file.ok_or_else(|| Error::parse(path, 0, "empty embedding file"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (tok, v) in &self.entries {
            out.push_str(tok);
            for x in v {
                write!(out, " {x}").unwrap();
            }
            out.push('\n');
        }
        write_atomic(path, out.as_bytes())
    }
}

/// Embedding vectors keyed by vocabulary id, all of dimension `dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct WordEmbeddings {
    dim: usize,
    vectors: BTreeMap<usize, Vec<f64>>,
}

impl WordEmbeddings {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn insert(&mut self, id: usize, v: Vec<f64>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::invalid(format!(
                "embedding for id {id} has dim {}, expected {}",
                v.len(),
                self.dim
            )));
        }
        self.vectors.insert(id, v);
        Ok(())
    }

    pub fn get(&self, id: usize) -> Option<&[f64]> {
        self.vectors.get(&id).map(Vec::as_slice)
    }

    /// Resolves file vectors for `ids`; ids whose token is absent from the
    /// file get vectors drawn from `U[-0.1, 0.1]`.
    pub fn resolve(file: &EmbeddingFile, vocab: &Vocab, ids: &[usize], rng: &mut Rng) -> Self {
        let mut out = Self::new(file.dim());
        for &id in ids {
            let v = match file.get(vocab.token(id)) {
                Some(v) => v.to_vec(),
                None => (0..file.dim()).map(|_| rng.uniform_in(-0.1, 0.1)).collect(),
            };
            out.vectors.insert(id, v);
        }
        out
    }

    /// Copy with every vector scaled to unit length (cosine geometry).
    pub fn normalized(&self) -> Self {
        let vectors = self
            .vectors
            .iter()
            .map(|(&id, v)| {
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                let v = if n > 0.0 { v.iter().map(|x| x / n).collect() } else { v.clone() };
                (id, v)
            })
            .collect();
        Self {
            dim: self.dim,
            vectors,
        }
    }
}

/// Exact partition of the latent space into `k` non-empty clusters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    members: Vec<Vec<usize>>,
    assignment: HashMap<usize, usize>,
}

impl Partition {
    /// Builds a partition from `(latent id, cluster)` pairs.
    pub fn from_assignment(pairs: &[(usize, usize)]) -> Result<Self> {
        let k = pairs.iter().map(|&(_, c)| c + 1).max().unwrap_or(0);
        if k == 0 {
            return Err(Error::invalid("partition over an empty latent space"));
        }
        let mut members = vec![Vec::new(); k];
        let mut assignment = HashMap::with_capacity(pairs.len());
        for &(id, c) in pairs {
            if assignment.insert(id, c).is_some() {
                return Err(Error::invalid(format!("latent id {id} assigned twice")));
            }
            members[c].push(id);
        }
        if let Some(empty) = members.iter().position(Vec::is_empty) {
            return Err(Error::invalid(format!("cluster {empty} is empty")));
        }
        for m in &mut members {
            m.sort_unstable();
        }
        Ok(Self {
            members,
            assignment,
        })
    }

    pub fn k(&self) -> usize {
        self.members.len()
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    /// Sorted latent ids of cluster `k`.
    pub fn members(&self, k: usize) -> &[usize] {
        &self.members[k]
    }

    pub fn all_members(&self) -> &[Vec<usize>] {
        &self.members
    }

    pub fn cluster_of(&self, z: usize) -> Result<usize> {
        self.assignment
            .get(&z)
            .copied()
            .ok_or_else(|| Error::invalid(format!("latent id {z} is not in the partition")))
    }

    pub fn contains(&self, z: usize) -> bool {
        self.assignment.contains_key(&z)
    }

    /// Cluster labels listed in the order of `ids`.
    pub fn labels(&self, ids: &[usize]) -> Result<Vec<usize>> {
        ids.iter().map(|&z| self.cluster_of(z)).collect()
    }

    /// True when this partition covers exactly `ids`.
    pub fn covers_exactly(&self, ids: &[usize]) -> bool {
        ids.len() == self.len() && ids.iter().all(|z| self.contains(*z))
    }

    /// Writes one `token cluster` line per id of `order`.
    pub fn save(&self, path: &Path, vocab: &Vocab, order: &[usize]) -> Result<()> {
        let mut out = String::new();
        for &z in order {
            writeln!(out, "{} {}", vocab.token(z), self.cluster_of(z)?).unwrap();
        }
        write_atomic(path, out.as_bytes())
    }

    pub fn load(path: &Path, vocab: &Vocab) -> Result<Self> {
        let text = read_utf8(path)?;
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(tok), Some(c), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::parse(path, i + 1, "expected `token cluster`"));
            };
            let id = vocab
                .id(tok)
                .ok_or_else(|| Error::parse(path, i + 1, format!("token `{tok}` not in vocabulary")))?;
            let c: usize = c
                .parse()
                .map_err(|e| Error::parse(path, i + 1, format!("bad cluster index: {e}")))?;
            pairs.push((id, c));
        }
        Partition::from_assignment(&pairs).map_err(|e| Error::parse(path, 0, e.to_string()))
    }
}

/// Fitted k-means model: centroids plus the induced partition.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    pub partition: Partition,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squared distances after every iteration.
    pub sse_history: Vec<f64>,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.partition.k()
    }

    pub fn cluster_of(&self, z: usize) -> Result<usize> {
        self.partition.cluster_of(z)
    }

    pub fn members(&self, k: usize) -> &[usize] {
        self.partition.members(k)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn plus_plus_init(points: &[&[f64]], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.below(n);
    chosen[first] = true;
    let mut centroids = vec![points[first].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, points[first])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let u = rng.uniform() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if d > 0.0 && u < acc {
                    pick = Some(i);
                    break;
                }
            }
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            // All remaining points coincide with a centre.
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.below(free.len())]
        };
        chosen[next] = true;
        centroids.push(points[next].to_vec());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, points[next]));
        }
    }
    centroids
}

/// Lloyd's k-means with k-means++ seeding over the vectors of `latent_ids`.
///
/// Empty clusters are repaired by moving in the point farthest from its
/// centroid. The within-cluster SSE is checked to be non-increasing after
/// every iteration.
pub fn kmeans(
    embeddings: &WordEmbeddings,
    latent_ids: &[usize],
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<ClusterModel> {
    if k == 0 {
        return Err(Error::invalid("kmeans: K must be positive"));
    }
    if k > latent_ids.len() {
        return Err(Error::invalid(format!(
            "kmeans: K = {k} exceeds the number of points ({})",
            latent_ids.len()
        )));
    }
    if max_iters == 0 {
        return Err(Error::invalid("kmeans: max_iters must be at least 1"));
    }
    let points: Vec<&[f64]> = latent_ids
        .iter()
        .map(|&id| {
            embeddings
                .get(id)
                .ok_or_else(|| Error::invalid(format!("kmeans: no embedding for latent id {id}")))
        })
        .collect::<Result<_>>()?;

    let mut rng = Rng::seed_from(seed);
    let mut centroids = plus_plus_init(&points, k, &mut rng);
    let n = points.len();
    let dim = embeddings.dim();
    let mut assign = vec![usize::MAX; n];
    let mut sse_history: Vec<f64> = Vec::new();

    for _ in 0..max_iters {
        let mut next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();

        // Repair empty clusters.
        loop {
            let mut sizes = vec![0usize; k];
            for &c in &next {
                sizes[c] += 1;
            }
            let Some(empty) = sizes.iter().position(|&s| s == 0) else { break };
            let mut far = None;
            let mut far_d = -1.0;
            for (i, p) in points.iter().enumerate() {
                if sizes[next[i]] > 1 {
                    let d = sq_dist(p, &centroids[next[i]]);
                    if d > far_d {
                        far_d = d;
                        far = Some(i);
                    }
                }
            }
            let i = far.expect("k <= n guarantees a donor cluster");
            next[i] = empty;
            centroids[empty] = points[i].to_vec();
        }

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            counts[next[i]] += 1;
            for (s, x) in sums[next[i]].iter_mut().zip(p.iter()) {
                *s += x;
            }
        }
        for c in 0..k {
            centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
        }
        let sse: f64 = points
            .iter()
            .enumerate()
            .map(|(i, p)| sq_dist(p, &centroids[next[i]]))
            .sum();
        if let Some(&prev) = sse_history.last() {
            if sse > prev + 1e-9 * prev.max(1.0) {
                return Err(Error::invalid(format!(
                    "kmeans: SSE increased from {prev} to {sse}"
                )));
            }
        }
        sse_history.push(sse);
        let converged = next == assign;
        assign = next;
        if converged {
            break;
        }
    }

    let pairs: Vec<(usize, usize)> = latent_ids.iter().copied().zip(assign).collect();
    Ok(ClusterModel {
        partition: Partition::from_assignment(&pairs)?,
        centroids,
        sse_history,
    })
}

fn choose2(n: usize) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

/// Adjusted Rand index between two labelings of the same points.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let n = a.len();
    let mut table: HashMap<(usize, usize), usize> = HashMap::new();
    let mut rows: HashMap<usize, usize> = HashMap::new();
    let mut cols: HashMap<usize, usize> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| choose2(c)).sum();
    let expected = sum_a * sum_b / choose2(n).max(1.0);
    let max_index = 0.5 * (sum_a + sum_b);
    let denom = max_index - expected;
    if denom.abs() < 1e-12 {
        // Both labelings trivial: identical structure scores 1.
        return if (index - expected).abs() < 1e-12 { 1.0 } else { 0.0 };
    }
    (index - expected) / denom
}
