//! Prior, posterior and generation networks.
//!
//! The prior `p(z|x)` and posterior `q(z|y,x)` each own their bi-GRU
//! encoders and scorers. In two-stage mode each produces a cluster
//! distribution and, per cluster, a distribution over that cluster's members;
//! the word stage scores `summary + P_s e_c[k]`. The generation network is an
//! attentional GRU encoder-decoder whose output layer also sees the latent
//! representation `h_z` at every step.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::cluster::{EmbeddingFile, Partition};
use crate::data::{Vocab, BOS, EOS};
use crate::dist::{FlatDist, LatentDist, TwoStageDist};
use crate::error::{Error, Result};
use crate::layers::{attend, attentional_state, gru_step, AttentionParams, BiGruEncoder, Encoded, GruParams, ScorerParams};
use crate::params::{Bound, ParamId, ParamStore};
use crate::sampling::{LatentSample, Rng};
use crate::tensor::{Tape, Tensor, Var};

/// How the latent variable is modelled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LatentMode {
    /// Cluster first, then a word inside the cluster.
    TwoStage,
    /// One softmax over the whole latent vocabulary.
    OneStage,
    /// One softmax over abstract indices with their own embeddings.
    CdVariant,
    /// Plain attentional encoder-decoder.
    NoLatent,
}

impl LatentMode {
    pub const ALL: [LatentMode; 4] = [
        LatentMode::TwoStage,
        LatentMode::OneStage,
        LatentMode::CdVariant,
        LatentMode::NoLatent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LatentMode::TwoStage => "two_stage",
            LatentMode::OneStage => "one_stage",
            LatentMode::CdVariant => "cd",
            LatentMode::NoLatent => "no_latent",
        }
    }
}

impl fmt::Display for LatentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LatentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_stage" => Ok(LatentMode::TwoStage),
            "one_stage" => Ok(LatentMode::OneStage),
            "cd" | "cd_variant" => Ok(LatentMode::CdVariant),
            "no_latent" => Ok(LatentMode::NoLatent),
            _ => Err(Error::invalid(format!(
                "unknown mode `{s}` (expected two_stage, one_stage, cd or no_latent)"
            ))),
        }
    }
}

/// Layer sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelDims {
    pub vocab: usize,
    pub d_word: usize,
    pub d_hidden: usize,
    pub d_cluster: usize,
    pub d_scorer: usize,
    /// Half-width of the uniform initializer.
    pub init_scale: f64,
}

impl ModelDims {
    pub fn new(vocab: usize) -> Self {
        Self {
            vocab,
            d_word: 32,
            d_hidden: 32,
            d_cluster: 32,
            d_scorer: 64,
            init_scale: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.vocab, self.d_word, self.d_hidden, self.d_cluster, self.d_scorer];
        if dims.contains(&0) {
            return Err(Error::invalid(format!("all model dimensions must be positive: {self:?}")));
        }
        if self.vocab <= crate::data::NUM_SPECIAL {
            return Err(Error::invalid("vocabulary holds only special tokens"));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::invalid("init scale must be positive"));
        }
        Ok(())
    }
}

/// Latent space handed to [`Dcvae::new`].
#[derive(Clone, Debug, PartialEq)]
pub enum LatentSetup {
    TwoStage { ids: Vec<usize>, partition: Partition },
    OneStage { ids: Vec<usize> },
    /// `m` abstract latent values.
    Cd { m: usize },
    NoLatent,
}

impl LatentSetup {
    pub fn mode(&self) -> LatentMode {
        match self {
            LatentSetup::TwoStage { .. } => LatentMode::TwoStage,
            LatentSetup::OneStage { .. } => LatentMode::OneStage,
            LatentSetup::Cd { .. } => LatentMode::CdVariant,
            LatentSetup::NoLatent => LatentMode::NoLatent,
        }
    }
}

#[derive(Clone, Debug)]
struct LatentIndex {
    ids: Arc<Vec<usize>>,
    pos: HashMap<usize, usize>,
    partition: Option<Arc<Partition>>,
    /// Scorer columns of each cluster's members, in member order.
    member_cols: Vec<Vec<usize>>,
    /// Latent ids cluster by cluster (flat ordering of two-stage heads).
    flat_ids: Vec<usize>,
}

#[derive(Clone, Debug)]
struct LatentNets {
    prior_enc: BiGruEncoder,
    post_x_enc: BiGruEncoder,
    post_y_enc: BiGruEncoder,
    prior_cluster: Option<ScorerParams>,
    post_cluster: Option<ScorerParams>,
    prior_word: ScorerParams,
    post_word: ScorerParams,
    cluster_emb: Option<ParamId>,
    /// `[d_cluster, 2*d_hidden]`: cluster embedding into scorer-input space.
    cluster_to_summary: Option<ParamId>,
    /// `[d_cluster, d_word]`: cluster embedding into word-embedding space.
    cluster_to_word: Option<ParamId>,
    abstract_emb: Option<ParamId>,
    bow: ScorerParams,
}

#[derive(Clone, Debug)]
struct GenNets {
    enc: BiGruEncoder,
    init_w: ParamId,
    init_b: ParamId,
    dec: GruParams,
    att: AttentionParams,
    out_w: ParamId,
    out_b: ParamId,
}

/// Log-probability heads of a prior or posterior network on a tape.
#[derive(Clone, Debug)]
pub enum Heads {
    TwoStage {
        /// `[1, K]` cluster log-probabilities.
        cluster: Var,
        /// Per cluster, `[1, |members(k)|]` word log-probabilities.
        words: Vec<Var>,
    },
    /// `[1, |Z|]` log-probabilities in latent-space order.
    Flat(Var),
    Absent,
}

/// Generation-network encoding of a query.
#[derive(Clone, Debug)]
pub struct QueryContext {
    pub encoded: Encoded,
    pub init_state: Var,
}

/// The full model: parameters plus their layout.
#[derive(Clone, Debug)]
pub struct Dcvae {
    mode: LatentMode,
    dims: ModelDims,
    setup: LatentSetup,
    store: ParamStore,
    word_emb: ParamId,
    gen: GenNets,
    latent: Option<LatentNets>,
    index: Option<LatentIndex>,
}

fn identity_or_uniform(
    store: &mut ParamStore,
    name: &str,
    rows: usize,
    cols: usize,
    scale: f64,
    rng: &mut Rng,
) -> Result<ParamId> {
    if rows == cols {
        let mut t = Tensor::zeros(&[rows, cols]);
        for i in 0..rows {
            t.data_mut()[i * cols + i] = 1.0;
        }
        store.add(name, t)
    } else {
        store.add_uniform(name, &[rows, cols], scale, rng)
    }
}

impl Dcvae {
    /// Builds a freshly initialized model; parameters are drawn from
    /// `U[-init_scale, init_scale]` with `seed`.
    pub fn new(dims: ModelDims, setup: LatentSetup, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mode = setup.mode();
        let index = match &setup {
            LatentSetup::TwoStage { ids, partition } => {
                if !partition.covers_exactly(ids) {
                    return Err(Error::invalid("cluster partition does not cover the latent space exactly"));
                }
                Some(Self::index_for(ids.clone(), Some(partition.clone()), dims.vocab)?)
            }
            LatentSetup::OneStage { ids } => Some(Self::index_for(ids.clone(), None, dims.vocab)?),
            LatentSetup::Cd { m } => {
                if *m == 0 {
                    return Err(Error::invalid("cd variant needs at least one latent value"));
                }
                Some(Self::index_for((0..*m).collect(), None, usize::MAX)?)
            }
            LatentSetup::NoLatent => None,
        };

        let s = dims.init_scale;
        let (dw, dh) = (dims.d_word, dims.d_hidden);
        let mut rng = Rng::seed_from(seed);
        let mut store = ParamStore::new();
        let word_emb = store.add_uniform("word_emb", &[dims.vocab, dw], s, &mut rng)?;

        let latent = match &index {
            None => None,
            Some(ix) => {
                let nz = ix.ids.len();
                let two = mode == LatentMode::TwoStage;
                let k = ix.partition.as_ref().map_or(0, |p| p.k());
                let r = &mut rng;
                let st = &mut store;
                let prior_enc = BiGruEncoder::register(st, "prior.enc", word_emb, dw, dh, s, r)?;
                let post_x_enc = BiGruEncoder::register(st, "post.enc_x", word_emb, dw, dh, s, r)?;
                let post_y_enc = BiGruEncoder::register(st, "post.enc_y", word_emb, dw, dh, s, r)?;
                let prior_cluster = if two {
                    Some(ScorerParams::register(st, "prior.cluster", 2 * dh, dims.d_scorer, k, s, r)?)
                } else {
                    None
                };
                let post_cluster = if two {
                    Some(ScorerParams::register(st, "post.cluster", 2 * dh, dims.d_scorer, k, s, r)?)
                } else {
                    None
                };
                let prior_word = ScorerParams::register(st, "prior.word", 2 * dh, dims.d_scorer, nz, s, r)?;
                let post_word = ScorerParams::register(st, "post.word", 2 * dh, dims.d_scorer, nz, s, r)?;
                let (cluster_emb, cluster_to_summary, cluster_to_word) = if two {
                    let dc = dims.d_cluster;
                    (
                        Some(st.add_uniform("cluster_emb", &[k, dc], s, r)?),
                        Some(identity_or_uniform(st, "cluster_to_summary", dc, 2 * dh, s, r)?),
                        Some(identity_or_uniform(st, "cluster_to_word", dc, dw, s, r)?),
                    )
                } else {
                    (None, None, None)
                };
                let abstract_emb = if mode == LatentMode::CdVariant {
                    Some(st.add_uniform("abstract_emb", &[nz, dw], s, r)?)
                } else {
                    None
                };
                let bow = ScorerParams::register(st, "bow", 2 * dh + dw, dims.d_scorer, dims.vocab, s, r)?;
                Some(LatentNets {
                    prior_enc,
                    post_x_enc,
                    post_y_enc,
                    prior_cluster,
                    post_cluster,
                    prior_word,
                    post_word,
                    cluster_emb,
                    cluster_to_summary,
                    cluster_to_word,
                    abstract_emb,
                    bow,
                })
            }
        };

        let gen = GenNets {
            enc: BiGruEncoder::register(&mut store, "gen.enc", word_emb, dw, dh, s, &mut rng)?,
            init_w: store.add_uniform("gen.init_w", &[2 * dh, dh], s, &mut rng)?,
            init_b: store.add_uniform("gen.init_b", &[1, dh], s, &mut rng)?,
            dec: GruParams::register(&mut store, "gen.dec", dw, dh, s, &mut rng)?,
            att: AttentionParams::register(&mut store, "gen.att", dh, s, &mut rng)?,
            out_w: store.add_uniform("gen.out_w", &[dh + dw, dims.vocab], s, &mut rng)?,
            out_b: store.add_uniform("gen.out_b", &[1, dims.vocab], s, &mut rng)?,
        };

        Ok(Self {
            mode,
            dims,
            setup,
            store,
            word_emb,
            gen,
            latent,
            index,
        })
    }

    fn index_for(ids: Vec<usize>, partition: Option<Partition>, vocab: usize) -> Result<LatentIndex> {
        if ids.is_empty() {
            return Err(Error::invalid("latent space is empty"));
        }
        let mut pos = HashMap::with_capacity(ids.len());
        for (i, &z) in ids.iter().enumerate() {
            if vocab != usize::MAX && (z >= vocab || crate::data::Vocab::is_special(z)) {
                return Err(Error::invalid(format!("latent id {z} is special or outside the vocabulary")));
            }
            if pos.insert(z, i).is_some() {
                return Err(Error::invalid(format!("latent id {z} listed twice")));
            }
        }
        let (member_cols, flat_ids) = match &partition {
            Some(p) => {
                let cols = p.all_members().iter().map(|m| m.iter().map(|z| pos[z]).collect()).collect();
                (cols, p.all_members().concat())
            }
            None => (Vec::new(), ids.clone()),
        };
        Ok(LatentIndex {
            ids: Arc::new(ids),
            pos,
            partition: partition.map(Arc::new),
            member_cols,
            flat_ids,
        })
    }

    pub fn mode(&self) -> LatentMode {
        self.mode
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn setup(&self) -> &LatentSetup {
        &self.setup
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn word_embedding_id(&self) -> ParamId {
        self.word_emb
    }

    /// Latent values in scorer-column order (vocab ids, or abstract indices).
    pub fn latent_ids(&self) -> &[usize] {
        self.index.as_ref().map_or(&[], |ix| ix.ids.as_slice())
    }

    pub fn partition(&self) -> Option<&Arc<Partition>> {
        self.index.as_ref().and_then(|ix| ix.partition.as_ref())
    }

    pub fn has_latent(&self) -> bool {
        self.latent.is_some()
    }

    /// True when latent values are vocabulary words.
    pub fn latent_is_word(&self) -> bool {
        matches!(self.mode, LatentMode::TwoStage | LatentMode::OneStage)
    }

    /// Parameters owned by the prior network.
    pub fn prior_params(&self) -> Vec<ParamId> {
        let Some(l) = &self.latent else { return Vec::new() };
        let mut ids = l.prior_enc.own_ids();
        if let Some(c) = &l.prior_cluster {
            ids.extend(c.ids());
        }
        ids.extend(l.prior_word.ids());
        ids
    }

    /// Parameters owned by the posterior network.
    pub fn posterior_params(&self) -> Vec<ParamId> {
        let Some(l) = &self.latent else { return Vec::new() };
        let mut ids = l.post_x_enc.own_ids();
        ids.extend(l.post_y_enc.own_ids());
        if let Some(c) = &l.post_cluster {
            ids.extend(c.ids());
        }
        ids.extend(l.post_word.ids());
        ids
    }

    /// Cluster-embedding parameters shared by prior, posterior and generation.
    pub fn cluster_params(&self) -> Vec<ParamId> {
        let Some(l) = &self.latent else { return Vec::new() };
        [l.cluster_emb, l.cluster_to_summary, l.cluster_to_word]
            .into_iter()
            .flatten()
            .collect()
    }

    /// Parameters owned by the generation network (including the BoW head).
    pub fn generation_params(&self) -> Vec<ParamId> {
        let g = &self.gen;
        let mut ids = g.enc.own_ids();
        ids.extend([g.init_w, g.init_b, g.out_w, g.out_b]);
        ids.extend(g.dec.ids());
        ids.extend(g.att.ids());
        if let Some(l) = &self.latent {
            ids.extend(l.bow.ids());
            ids.extend(l.abstract_emb);
        }
        ids
    }

    /// Copies file vectors into the word-embedding rows of matching tokens.
    /// Returns how many rows were loaded.
    pub fn load_word_embeddings(&mut self, file: &EmbeddingFile, vocab: &Vocab) -> Result<usize> {
        if file.dim() != self.dims.d_word {
            return Err(Error::invalid(format!(
                "embedding file has dim {}, model word dim is {}",
                file.dim(),
                self.dims.d_word
            )));
        }
        if vocab.len() != self.dims.vocab {
            return Err(Error::invalid(format!(
                "vocabulary has {} tokens, model expects {}",
                vocab.len(),
                self.dims.vocab
            )));
        }
        let d = self.dims.d_word;
        let table = self.store.get_mut(self.word_emb);
        let mut loaded = 0;
        for id in 0..vocab.len() {
            if let Some(v) = file.get(vocab.token(id)) {
                table.data_mut()[id * d..(id + 1) * d].copy_from_slice(v);
                loaded += 1;
            }
        }
        Ok(loaded)
    }

    fn nets(&self) -> Result<(&LatentNets, &LatentIndex)> {
        match (&self.latent, &self.index) {
            (Some(l), Some(ix)) => Ok((l, ix)),
            _ => Err(Error::invalid("model has no latent variable (no_latent mode)")),
        }
    }

    fn check_ids(&self, ids: &[usize], what: &str) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::invalid(format!("{what} is empty")));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.dims.vocab) {
            return Err(Error::invalid(format!("{what}: token id {bad} outside the vocabulary")));
        }
        Ok(())
    }

    fn heads_from(
        &self,
        tape: &Tape,
        p: &Bound,
        cluster: Option<&ScorerParams>,
        word: &ScorerParams,
        summary: Var,
    ) -> Result<Heads> {
        let (l, ix) = self.nets()?;
        match (cluster, &ix.partition) {
            (Some(cs), Some(_)) => {
                let cluster = tape.log_softmax(cs.score(tape, p, summary)?)?;
                let ce = p[l.cluster_emb.unwrap()];
                let shifted = tape.add(tape.matmul(ce, p[l.cluster_to_summary.unwrap()])?, summary)?;
                let all = word.score(tape, p, shifted)?;
                let words = ix
                    .member_cols
                    .iter()
                    .enumerate()
                    .map(|(k, cols)| tape.log_softmax(tape.gather(tape.lookup(all, &[k])?, cols)?))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Heads::TwoStage { cluster, words })
            }
            _ => Ok(Heads::Flat(tape.log_softmax(word.score(tape, p, summary)?)?)),
        }
    }

    /// Prior heads `p(z|x)`; [`Heads::Absent`] in no-latent mode.
    pub fn prior_heads(&self, tape: &Tape, p: &Bound, x: &[usize]) -> Result<Heads> {
        self.check_ids(x, "query")?;
        let Some(l) = &self.latent else { return Ok(Heads::Absent) };
        let h = l.prior_enc.encode(tape, p, x)?.summary;
        self.heads_from(tape, p, l.prior_cluster.as_ref(), &l.prior_word, h)
    }

    /// Posterior heads `q(z|y,x)`, scoring the sum of both summaries.
    pub fn posterior_heads(&self, tape: &Tape, p: &Bound, x: &[usize], y: &[usize]) -> Result<Heads> {
        self.check_ids(x, "query")?;
        self.check_ids(y, "response")?;
        let Some(l) = &self.latent else { return Ok(Heads::Absent) };
        let hx = l.post_x_enc.encode(tape, p, x)?.summary;
        let hy = l.post_y_enc.encode(tape, p, y)?.summary;
        let h = tape.add(hx, hy)?;
        self.heads_from(tape, p, l.post_cluster.as_ref(), &l.post_word, h)
    }

    /// Reads head values off the tape as a distribution.
    pub fn heads_to_dist(&self, tape: &Tape, heads: &Heads) -> Result<LatentDist> {
        let exp = |v: Var| -> Vec<f64> { tape.value(v).data().iter().map(|x| x.exp()).collect() };
        match heads {
            Heads::Absent => Ok(LatentDist::Absent),
            Heads::Flat(v) => {
                let (_, ix) = self.nets()?;
                Ok(LatentDist::Flat(FlatDist::new(Arc::clone(&ix.ids), exp(*v))?))
            }
            Heads::TwoStage { cluster, words } => {
                let (_, ix) = self.nets()?;
                let part = Arc::clone(ix.partition.as_ref().unwrap());
                Ok(LatentDist::TwoStage(TwoStageDist::new(
                    exp(*cluster),
                    words.iter().map(|&w| exp(w)).collect(),
                    part,
                )?))
            }
        }
    }

    pub fn prior_dist(&self, x: &[usize]) -> Result<LatentDist> {
        let tape = Tape::new();
        let p = self.store.bind_constant(&tape);
        let h = self.prior_heads(&tape, &p, x)?;
        self.heads_to_dist(&tape, &h)
    }

    pub fn posterior_dist(&self, x: &[usize], y: &[usize]) -> Result<LatentDist> {
        let tape = Tape::new();
        let p = self.store.bind_constant(&tape);
        let h = self.posterior_heads(&tape, &p, x, y)?;
        self.heads_to_dist(&tape, &h)
    }

    /// `h_z`: `P_w e_c[c] + e_z[z]` (two-stage), `e_z[z]` (one-stage), the
    /// abstract embedding (cd) or a zero vector (no latent).
    pub fn latent_repr(&self, tape: &Tape, p: &Bound, z: Option<usize>, c: Option<usize>) -> Result<Var> {
        match self.mode {
            LatentMode::NoLatent => Ok(tape.zeros(&[1, self.dims.d_word])),
            mode => {
                let (l, ix) = self.nets()?;
                let z = z.ok_or_else(|| Error::invalid("latent repr needs a latent value"))?;
                if !ix.pos.contains_key(&z) {
                    return Err(Error::invalid(format!("latent value {z} is outside the latent space")));
                }
                match mode {
                    LatentMode::TwoStage => {
                        let part = ix.partition.as_ref().unwrap();
                        let k = part.cluster_of(z)?;
                        match c {
                            Some(c) if c == k => {}
                            other => {
                                return Err(Error::invalid(format!(
                                    "latent {z} belongs to cluster {k}, got {other:?}"
                                )))
                            }
                        }
                        let ec = tape.matmul(tape.lookup(p[l.cluster_emb.unwrap()], &[k])?, p[l.cluster_to_word.unwrap()])?;
                        tape.add(ec, tape.lookup(p[self.word_emb], &[z])?)
                    }
                    LatentMode::OneStage => {
                        if c.is_some() {
                            return Err(Error::invalid("one-stage latent takes no cluster"));
                        }
                        tape.lookup(p[self.word_emb], &[z])
                    }
                    _ => {
                        if c.is_some() {
                            return Err(Error::invalid("cd latent takes no cluster"));
                        }
                        tape.lookup(p[l.abstract_emb.unwrap()], &[ix.pos[&z]])
                    }
                }
            }
        }
    }

    /// Probability-weighted mixture of every latent representation under `heads`.
    pub fn soft_repr(&self, tape: &Tape, p: &Bound, heads: &Heads) -> Result<Var> {
        let (l, ix) = self.nets()?;
        match heads {
            Heads::Absent => Err(Error::invalid("soft_repr: no latent heads")),
            Heads::Flat(logp) => {
                let q = tape.exp(*logp)?;
                let table = match l.abstract_emb {
                    Some(a) => p[a],
                    None => tape.lookup(p[self.word_emb], &ix.ids)?,
                };
                tape.matmul(q, table)
            }
            Heads::TwoStage { cluster, words } => {
                let qc = tape.exp(*cluster)?;
                let parts = words
                    .iter()
                    .enumerate()
                    .map(|(k, &w)| tape.mul(tape.exp(w)?, tape.gather(qc, &[k])?))
                    .collect::<Result<Vec<_>>>()?;
                let qz = tape.concat(&parts)?;
                let ez = tape.matmul(qz, tape.lookup(p[self.word_emb], &ix.flat_ids)?)?;
                let ec = tape.matmul(tape.matmul(qc, p[l.cluster_emb.unwrap()])?, p[l.cluster_to_word.unwrap()])?;
                tape.add(ez, ec)
            }
        }
    }

    /// `h_z` for a drawn sample. With `straight_through`, the forward value
    /// is the hard representation while gradients also reach `heads`
    /// through the soft mixture.
    pub fn sample_repr(
        &self,
        tape: &Tape,
        p: &Bound,
        heads: &Heads,
        sample: Option<LatentSample>,
        straight_through: bool,
    ) -> Result<Var> {
        let hard = self.latent_repr(tape, p, sample.map(|s| s.z), sample.and_then(|s| s.cluster))?;
        if straight_through && !matches!(heads, Heads::Absent) {
            tape.straight_through(hard, self.soft_repr(tape, p, heads)?)
        } else {
            Ok(hard)
        }
    }

    /// Encodes `x` with the generation encoder and derives the initial decoder state.
    pub fn encode_query(&self, tape: &Tape, p: &Bound, x: &[usize]) -> Result<QueryContext> {
        self.check_ids(x, "query")?;
        let encoded = self.gen.enc.encode(tape, p, x)?;
        let init_state = tape.tanh(tape.affine(encoded.summary, p[self.gen.init_w], p[self.gen.init_b])?)?;
        Ok(QueryContext { encoded, init_state })
    }

    /// One decoder step: returns `[1, V]` log-probabilities and the new state.
    pub fn decode_step(
        &self,
        tape: &Tape,
        p: &Bound,
        prev_token: usize,
        state: Var,
        memory: Var,
        h_z: Var,
    ) -> Result<(Var, Var)> {
        if prev_token >= self.dims.vocab {
            return Err(Error::invalid(format!("token id {prev_token} outside the vocabulary")));
        }
        let x = tape.lookup(p[self.word_emb], &[prev_token])?;
        let h = gru_step(tape, p, &self.gen.dec, x, state)?;
        let (ctx, _) = attend(tape, p, &self.gen.att, h, memory)?;
        let a = attentional_state(tape, p, &self.gen.att, ctx, h)?;
        let logits = tape.affine(tape.concat(&[a, h_z])?, p[self.gen.out_w], p[self.gen.out_b])?;
        Ok((tape.log_softmax(logits)?, h))
    }

    /// Teacher-forced negative log-likelihood of `y` followed by EOS.
    pub fn sequence_nll(&self, tape: &Tape, p: &Bound, ctx: &QueryContext, h_z: Var, y: &[usize]) -> Result<Var> {
        self.check_ids(y, "response")?;
        let mut state = ctx.init_state;
        let mut prev = BOS;
        let mut terms = Vec::with_capacity(y.len() + 1);
        for &target in y.iter().chain(std::iter::once(&EOS)) {
            let (logp, next) = self.decode_step(tape, p, prev, state, ctx.encoded.matrix, h_z)?;
            terms.push(tape.pick(logp, &[target])?);
            state = next;
            prev = target;
        }
        tape.scale(tape.sum(tape.concat(&terms)?)?, -1.0)
    }

    /// Bag-of-words logits `h^b` from the query summary and `h_z`.
    pub fn bow_logits(&self, tape: &Tape, p: &Bound, summary: Var, h_z: Var) -> Result<Var> {
        let (l, _) = self.nets()?;
        l.bow.score(tape, p, tape.concat(&[summary, h_z])?)
    }

    /// True when both models share mode, sizes and latent setup.
    pub fn same_layout(&self, other: &Dcvae) -> bool {
        self.mode == other.mode
            && self.dims == other.dims
            && self.setup == other.setup
            && self.store.len() == other.store.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn partition() -> Partition {
        Partition::from_assignment(&[(4, 0), (5, 1), (6, 0), (7, 2), (8, 1), (9, 2), (10, 0)]).unwrap()
    }

    fn model(mode: LatentMode) -> Dcvae {
        let mut dims = ModelDims::new(12);
        dims.d_word = 4;
        dims.d_hidden = 3;
        dims.d_cluster = 4;
        dims.d_scorer = 5;
        dims.init_scale = 0.5;
        let ids: Vec<usize> = (4..11).collect();
        let setup = match mode {
            LatentMode::TwoStage => LatentSetup::TwoStage { ids, partition: partition() },
            LatentMode::OneStage => LatentSetup::OneStage { ids },
            LatentMode::CdVariant => LatentSetup::Cd { m: 7 },
            LatentMode::NoLatent => LatentSetup::NoLatent,
        };
        Dcvae::new(dims, setup, 3).unwrap()
    }

    fn zero_scorers(m: &mut Dcvae) {
        let ids: Vec<ParamId> = m
            .store()
            .ids()
            .filter(|&id| {
                let n = m.store().name(id);
                n.starts_with("prior.cluster") || n.starts_with("prior.word") || n.starts_with("post.cluster") || n.starts_with("post.word")
            })
            .collect();
        for id in ids {
            m.store_mut().get_mut(id).data_mut().fill(0.0);
        }
    }

    #[test]
    fn mode_names_round_trip() {
        for m in LatentMode::ALL {
            assert_eq!(m.name().parse::<LatentMode>().unwrap(), m);
        }
        assert_eq!("cd_variant".parse::<LatentMode>().unwrap(), LatentMode::CdVariant);
        assert!("gaussian".parse::<LatentMode>().is_err());
    }

    #[test]
    fn zero_scorers_give_uniform_stages() {
        let mut m = model(LatentMode::TwoStage);
        zero_scorers(&mut m);
        for d in [m.prior_dist(&[4, 5]).unwrap(), m.posterior_dist(&[4, 5], &[6]).unwrap()] {
            let LatentDist::TwoStage(d) = d else { panic!() };
            for &c in d.cluster_probs() {
                assert!((c - 1.0 / 3.0).abs() < 1e-15);
            }
            for k in 0..3 {
                let w = d.word_probs(k);
                for &x in w {
                    assert!((x - 1.0 / w.len() as f64).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn flat_probability_sums_to_one() {
        let m = model(LatentMode::TwoStage);
        let LatentDist::TwoStage(d) = m.prior_dist(&[4, 7, 9]).unwrap() else { panic!() };
        let total: f64 = m.latent_ids().iter().map(|&z| d.prob(z)).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_inputs_rejected() {
        let m = model(LatentMode::TwoStage);
        assert!(m.prior_dist(&[]).is_err());
        assert!(m.posterior_dist(&[4], &[]).is_err());
        assert!(m.posterior_dist(&[], &[4]).is_err());
    }

    #[test]
    fn latent_repr_per_mode() {
        let tape = Tape::new();
        let m = model(LatentMode::NoLatent);
        let p = m.store().bind(&tape);
        let h = m.latent_repr(&tape, &p, None, None).unwrap();
        assert_eq!(tape.shape(h), vec![1, 4]);
        assert!(tape.value(h).data().iter().all(|&x| x == 0.0));

        let m = model(LatentMode::OneStage);
        let p = m.store().bind(&tape);
        let h = m.latent_repr(&tape, &p, Some(6), None).unwrap();
        assert_eq!(tape.value(h).data(), m.store().get(m.word_embedding_id()).row_slice(6));

        let m = model(LatentMode::TwoStage);
        let p = m.store().bind(&tape);
        let h = m.latent_repr(&tape, &p, Some(8), Some(1)).unwrap();
        assert!(m.latent_repr(&tape, &p, Some(8), Some(0)).is_err());
        assert!(m.latent_repr(&tape, &p, Some(3), Some(0)).is_err());
        let ez = m.store().get(m.word_embedding_id()).row_slice(8).to_vec();
        let ec = m.store().get(m.store().id("cluster_emb").unwrap()).row_slice(1).to_vec();
        for i in 0..4 {
            assert!((tape.value(h).data()[i] - ez[i] - ec[i]).abs() <= 1e-15);
        }
    }

    #[test]
    fn prior_and_posterior_are_disjoint() {
        let m = model(LatentMode::TwoStage);
        let prior: std::collections::HashSet<_> = m.prior_params().into_iter().collect();
        assert!(!prior.is_empty());
        assert!(m.posterior_params().iter().all(|id| !prior.contains(id)));
        assert!(m.generation_params().iter().all(|id| !prior.contains(id)));
    }

    #[test]
    fn decode_step_is_normalized() {
        let m = model(LatentMode::TwoStage);
        let tape = Tape::new();
        let p = m.store().bind(&tape);
        let ctx = m.encode_query(&tape, &p, &[4, 5, 6]).unwrap();
        let hz = m.latent_repr(&tape, &p, Some(7), Some(2)).unwrap();
        let (logp, _) = m.decode_step(&tape, &p, BOS, ctx.init_state, ctx.encoded.matrix, hz).unwrap();
        let total: f64 = tape.value(logp).data().iter().map(|x| x.exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(m.decode_step(&tape, &p, 99, ctx.init_state, ctx.encoded.matrix, hz).is_err());
    }

    #[test]
    fn partition_must_cover_latent_space() {
        let setup = LatentSetup::TwoStage {
            ids: (4..12).collect(),
            partition: partition(),
        };
        assert!(Dcvae::new(ModelDims::new(12), setup, 0).is_err());
    }
}
