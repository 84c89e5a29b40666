//! End-to-end stages shared by the command line and the acceptance suite:
//! vocabulary, clustering, keywords, model construction, training,
//! generation and evaluation.

use std::collections::HashMap;
use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::cluster::{kmeans, ClusterModel, EmbeddingFile, Partition, WordEmbeddings};
use crate::config::ConfigFile;
use crate::data::{assign_keywords, encode_all, Example, KeywordSource, LatentRestriction, LatentSpace, TextPair, Vocab};
use crate::decode::{generate_diverse, BeamConfig};
use crate::error::{Error, Result};
use crate::io::{read_utf8, write_atomic};
use crate::metrics::{evaluate, EvalReport, GeneratedLine};
use crate::model::{Dcvae, LatentMode, LatentSetup, ModelDims};
use crate::objective::LossBreakdown;
use crate::sampling::Rng;
use crate::synth::SyntheticSpec;
use crate::train::{pretrain, train, PretrainConfig, PretrainLoss, TrainConfig};

/// Every knob of a run. Defaults are sized for a desk-scale corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: LatentMode,
    pub seed: u64,
    pub vocab_size: usize,
    pub latent_top_k: Option<usize>,
    pub clusters: usize,
    pub kmeans_iters: usize,
    /// Cluster unit-normalized embeddings (cosine geometry).
    pub normalize_embeddings: bool,
    pub keyword_source: KeywordSource,
    pub smooth_idf: bool,
    pub hidden: usize,
    pub word_dim: usize,
    pub cluster_dim: usize,
    pub scorer_dim: usize,
    pub init_scale: f64,
    /// Abstract latent count in cd mode; defaults to the latent-space size.
    pub cd_m: Option<usize>,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Posterior samples per training example.
    pub train_samples: usize,
    pub straight_through: bool,
    pub clip: Option<f64>,
    pub beam: usize,
    pub max_len: usize,
    pub length_norm: bool,
    /// Prior samples per query at generation time.
    pub samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: LatentMode::TwoStage,
            seed: 0,
            vocab_size: 500,
            latent_top_k: None,
            clusters: 10,
            kmeans_iters: 100,
            normalize_embeddings: false,
            keyword_source: KeywordSource::Query,
            smooth_idf: false,
            hidden: 32,
            word_dim: 32,
            cluster_dim: 32,
            scorer_dim: 64,
            init_scale: 0.1,
            cd_m: None,
            pretrain_steps: 200,
            pretrain_lr: 1e-4,
            lr: 1e-4,
            batch: 128,
            epochs: 10,
            train_samples: 1,
            straight_through: true,
            clip: Some(5.0),
            beam: 10,
            max_len: 30,
            length_norm: false,
            samples: 10,
        }
    }
}

/// Config-file keys understood by [`RunConfig::apply`].
pub const RUN_KEYS: &[&str] = &[
    "mode",
    "seed",
    "vocab-size",
    "latent-top-k",
    "K",
    "kmeans-iters",
    "normalize-embeddings",
    "keyword-source",
    "smooth-idf",
    "hidden",
    "word-dim",
    "cluster-dim",
    "scorer-dim",
    "init-scale",
    "cd-m",
    "pretrain-steps",
    "pretrain-lr",
    "lr",
    "batch",
    "epochs",
    "train-samples",
    "straight-through",
    "clip",
    "beam",
    "max-len",
    "length-norm",
    "samples",
];

/// Config-file keys understood by [`apply_synth_config`].
pub const SYNTH_KEYS: &[&str] = &[
    "templates",
    "responses",
    "topics",
    "query-words",
    "fillers",
    "frames",
    "pairs",
    "test-queries",
    "dim",
    "radius",
    "noise",
];

fn set<T: std::str::FromStr>(cfg: &ConfigFile, key: &str, slot: &mut T) -> Result<()>
where
    T::Err: std::fmt::Display,
{
    if let Some(v) = cfg.get(key)? {
        *slot = v;
    }
    Ok(())
}

impl RunConfig {
    /// Overrides fields from a config file; unknown keys are ignored here
    /// (callers check them against the union of the key lists they accept).
    pub fn apply(&mut self, cfg: &ConfigFile) -> Result<()> {
        set(cfg, "mode", &mut self.mode)?;
        set(cfg, "seed", &mut self.seed)?;
        set(cfg, "vocab-size", &mut self.vocab_size)?;
        if let Some(k) = cfg.get("latent-top-k")? {
            self.latent_top_k = Some(k);
        }
        set(cfg, "K", &mut self.clusters)?;
        set(cfg, "kmeans-iters", &mut self.kmeans_iters)?;
        set(cfg, "normalize-embeddings", &mut self.normalize_embeddings)?;
        set(cfg, "keyword-source", &mut self.keyword_source)?;
        set(cfg, "smooth-idf", &mut self.smooth_idf)?;
        set(cfg, "hidden", &mut self.hidden)?;
        set(cfg, "word-dim", &mut self.word_dim)?;
        set(cfg, "cluster-dim", &mut self.cluster_dim)?;
        set(cfg, "scorer-dim", &mut self.scorer_dim)?;
        set(cfg, "init-scale", &mut self.init_scale)?;
        if let Some(m) = cfg.get("cd-m")? {
            self.cd_m = Some(m);
        }
        set(cfg, "pretrain-steps", &mut self.pretrain_steps)?;
        set(cfg, "pretrain-lr", &mut self.pretrain_lr)?;
        set(cfg, "lr", &mut self.lr)?;
        set(cfg, "batch", &mut self.batch)?;
        set(cfg, "epochs", &mut self.epochs)?;
        set(cfg, "train-samples", &mut self.train_samples)?;
        set(cfg, "straight-through", &mut self.straight_through)?;
        if let Some(c) = cfg.get::<f64>("clip")? {
            self.clip = (c > 0.0).then_some(c);
        }
        set(cfg, "beam", &mut self.beam)?;
        set(cfg, "max-len", &mut self.max_len)?;
        set(cfg, "length-norm", &mut self.length_norm)?;
        set(cfg, "samples", &mut self.samples)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab-size", self.vocab_size),
            ("K", self.clusters),
            ("hidden", self.hidden),
            ("word-dim", self.word_dim),
            ("cluster-dim", self.cluster_dim),
            ("scorer-dim", self.scorer_dim),
            ("batch", self.batch),
            ("train-samples", self.train_samples),
            ("beam", self.beam),
            ("max-len", self.max_len),
            ("samples", self.samples),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if self.latent_top_k == Some(0) || self.cd_m == Some(0) {
            return Err(Error::invalid("latent-top-k and cd-m must be positive"));
        }
        for (name, v) in [("lr", self.lr), ("pretrain-lr", self.pretrain_lr), ("init-scale", self.init_scale)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn restriction(&self) -> LatentRestriction {
        self.latent_top_k.map_or(LatentRestriction::All, LatentRestriction::TopK)
    }

    pub fn model_dims(&self, vocab: usize) -> ModelDims {
        ModelDims {
            vocab,
            d_word: self.word_dim,
            d_hidden: self.hidden,
            d_cluster: self.cluster_dim,
            d_scorer: self.scorer_dim,
            init_scale: self.init_scale,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch,
            epochs: self.epochs,
            samples: self.train_samples,
            seed: self.seed,
            straight_through: self.straight_through,
            clip: self.clip,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain_steps,
            batch_size: self.batch,
            lr: self.pretrain_lr,
            seed: self.seed,
            clip: self.clip,
        }
    }

    pub fn beam_config(&self) -> BeamConfig {
        BeamConfig {
            beam_size: self.beam,
            max_len: self.max_len,
            length_norm: self.length_norm,
            ..BeamConfig::default()
        }
    }
}

pub fn apply_synth_config(spec: &mut SyntheticSpec, cfg: &ConfigFile) -> Result<()> {
    set(cfg, "templates", &mut spec.templates)?;
    set(cfg, "responses", &mut spec.responses_per_query)?;
    set(cfg, "topics", &mut spec.topics)?;
    set(cfg, "query-words", &mut spec.query_words)?;
    set(cfg, "fillers", &mut spec.fillers)?;
    set(cfg, "frames", &mut spec.frames)?;
    set(cfg, "pairs", &mut spec.pairs)?;
    set(cfg, "test-queries", &mut spec.test_queries)?;
    set(cfg, "dim", &mut spec.dim)?;
    set(cfg, "radius", &mut spec.radius)?;
    set(cfg, "noise", &mut spec.noise)?;
    Ok(())
}

/// Latent-space file: one token per line, in latent order.
pub fn save_latent(latent: &LatentSpace, vocab: &Vocab, path: &Path) -> Result<()> {
    let text: String = latent.ids().iter().map(|&z| format!("{}\n", vocab.token(z))).collect();
    write_atomic(path, text.as_bytes())
}

pub fn load_latent(path: &Path, vocab: &Vocab) -> Result<LatentSpace> {
    let text = read_utf8(path)?;
    let mut ids = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let tok = line.trim();
        if tok.is_empty() {
            continue;
        }
        let id = vocab
            .id(tok)
            .ok_or_else(|| Error::parse(path, i + 1, format!("token `{tok}` is not in the vocabulary")))?;
        ids.push(id);
    }
    LatentSpace::from_ids(ids).map_err(|e| Error::parse(path, 0, e.to_string()))
}

/// Vocabulary and latent space of a training corpus.
pub fn prepare(pairs: &[TextPair], cfg: &RunConfig) -> Result<(Vocab, LatentSpace)> {
    let vocab = Vocab::build(pairs, cfg.vocab_size)?;
    let latent = LatentSpace::new(&vocab, cfg.restriction())?;
    Ok((vocab, latent))
}

/// k-means over the latent words. Words missing from `embeddings` (or all
/// of them when there is no file) get random vectors from the run seed.
pub fn cluster_latent(
    vocab: &Vocab,
    latent: &LatentSpace,
    embeddings: Option<&EmbeddingFile>,
    cfg: &RunConfig,
) -> Result<ClusterModel> {
    let empty = EmbeddingFile::new(cfg.word_dim);
    let file = embeddings.unwrap_or(&empty);
    let mut rng = Rng::seed_from(cfg.seed);
    let mut vectors = WordEmbeddings::resolve(file, vocab, latent.ids(), &mut rng);
    if cfg.normalize_embeddings {
        vectors = vectors.normalized();
    }
    kmeans(&vectors, latent.ids(), cfg.clusters, cfg.kmeans_iters, cfg.seed)
}

/// Fresh model for `cfg.mode`, with word embeddings copied from the file
/// when one is given.
pub fn build_model(
    cfg: &RunConfig,
    vocab: &Vocab,
    latent: &LatentSpace,
    partition: Option<Partition>,
    embeddings: Option<&EmbeddingFile>,
) -> Result<Dcvae> {
    cfg.validate()?;
    let ids = latent.ids().to_vec();
    let setup = match cfg.mode {
        LatentMode::TwoStage => LatentSetup::TwoStage {
            ids,
            partition: partition.ok_or_else(|| Error::invalid("two_stage mode needs a cluster partition"))?,
        },
        LatentMode::OneStage => LatentSetup::OneStage { ids },
        LatentMode::CdVariant => LatentSetup::Cd {
            m: cfg.cd_m.unwrap_or(latent.len()),
        },
        LatentMode::NoLatent => LatentSetup::NoLatent,
    };
    let mut model = Dcvae::new(cfg.model_dims(vocab.len()), setup, cfg.seed)?;
    if let Some(file) = embeddings {
        model.load_word_embeddings(file, vocab)?;
    }
    Ok(model)
}

/// TF-IDF keywords for `examples` (in place).
pub fn extract_keywords(examples: &mut [Example], latent: &LatentSpace, cfg: &RunConfig) {
    assign_keywords(examples, latent, cfg.keyword_source, cfg.smooth_idf);
}

/// Keyword pre-training when the mode supports it and steps are requested;
/// otherwise an empty log.
pub fn maybe_pretrain(model: &mut Dcvae, examples: &[Example], cfg: &RunConfig) -> Result<Vec<PretrainLoss>> {
    if cfg.pretrain_steps == 0 || !model.latent_is_word() {
        return Ok(Vec::new());
    }
    pretrain(model, examples, &cfg.pretrain_config())
}

/// Text of a sampled latent value for the generation file.
pub fn latent_label(model: &Dcvae, vocab: &Vocab, z: Option<usize>) -> String {
    match z {
        None => "-".into(),
        Some(z) if model.latent_is_word() => vocab.token(z).to_owned(),
        Some(z) => format!("#{z}"),
    }
}

/// Distinct queries of `pairs` in order of first appearance.
pub fn unique_queries(pairs: &[TextPair]) -> Vec<&TextPair> {
    let mut seen = HashMap::new();
    pairs
        .iter()
        .filter(|p| seen.insert(p.query_text(), ()).is_none())
        .collect()
}

/// `cfg.samples` prior samples per distinct query, each beam-decoded.
pub fn generate_lines(model: &Dcvae, vocab: &Vocab, pairs: &[TextPair], cfg: &RunConfig) -> Result<Vec<GeneratedLine>> {
    if vocab.len() != model.dims().vocab {
        return Err(Error::invalid("vocabulary does not match the model"));
    }
    let beam = cfg.beam_config();
    let mut rng = Rng::seed_from(cfg.seed);
    let mut out = Vec::new();
    for p in unique_queries(pairs) {
        let x = vocab.encode(&p.query);
        for g in generate_diverse(model, &x, cfg.samples, &beam, &mut rng)? {
            out.push(GeneratedLine {
                query: p.query_text(),
                z: latent_label(model, vocab, g.z),
                cluster: g.cluster.map_or("-".into(), |c| c.to_string()),
                response: vocab.decode(&g.response).join(" "),
                score: g.score,
            });
        }
    }
    Ok(out)
}

/// Fraction of examples whose posterior mode is the gold latent word.
pub fn posterior_accuracy(model: &Dcvae, examples: &[Example], gold: &[usize]) -> Result<f64> {
    if examples.len() != gold.len() || examples.is_empty() {
        return Err(Error::invalid(format!(
            "{} examples for {} gold keywords",
            examples.len(),
            gold.len()
        )));
    }
    let mut hits = 0;
    for (e, &g) in examples.iter().zip(gold) {
        if model.posterior_dist(&e.query, &e.response)?.argmax() == Some(g) {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

/// Outcome of a full run.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub checkpoint: Checkpoint,
    pub pretrain_log: Vec<PretrainLoss>,
    pub train_log: Vec<LossBreakdown>,
    pub generated: Vec<GeneratedLine>,
    pub report: EvalReport,
}

/// prep → cluster → keywords → pretrain → train → generate → evaluate.
pub fn run_experiment(
    cfg: &RunConfig,
    train_pairs: &[TextPair],
    test_pairs: &[TextPair],
    embeddings: Option<&EmbeddingFile>,
) -> Result<Experiment> {
    cfg.validate()?;
    let (vocab, latent) = prepare(train_pairs, cfg)?;
    let partition = match cfg.mode {
        LatentMode::TwoStage => Some(cluster_latent(&vocab, &latent, embeddings, cfg)?.partition),
        _ => None,
    };
    let mut model = build_model(cfg, &vocab, &latent, partition, embeddings)?;
    let mut examples = encode_all(train_pairs, &vocab)?;
    extract_keywords(&mut examples, &latent, cfg);
    let pretrain_log = maybe_pretrain(&mut model, &examples, cfg)?;
    let train_log = train(&mut model, &examples, cfg.train_config(), |_, _, _| Ok(()))?;
    let generated = generate_lines(&model, &vocab, test_pairs, cfg)?;
    let report = evaluate(&generated, test_pairs)?;
    Ok(Experiment {
        checkpoint: Checkpoint::new(vocab, model)?,
        pretrain_log,
        train_log,
        generated,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::synthesize_corpus;

    fn tiny() -> (RunConfig, crate::synth::SyntheticCorpus) {
        let spec = SyntheticSpec {
            templates: 4,
            topics: 8,
            clusters: 2,
            responses_per_query: 2,
            query_words: 6,
            fillers: 2,
            frames: 2,
            pairs: 16,
            test_queries: 2,
            dim: 4,
            ..Default::default()
        };
        let cfg = RunConfig {
            clusters: 2,
            hidden: 4,
            word_dim: 4,
            cluster_dim: 4,
            scorer_dim: 4,
            epochs: 1,
            batch: 8,
            pretrain_steps: 2,
            samples: 2,
            beam: 2,
            max_len: 6,
            ..Default::default()
        };
        (cfg, synthesize_corpus(&spec).unwrap())
    }

    #[test]
    fn every_mode_runs_end_to_end() {
        let (cfg, c) = tiny();
        for mode in LatentMode::ALL {
            let cfg = RunConfig { mode, ..cfg.clone() };
            let e = run_experiment(&cfg, &c.train, &c.test, Some(&c.embeddings)).unwrap();
            assert_eq!(e.generated.len(), unique_queries(&c.test).len() * cfg.samples);
            assert_eq!(e.train_log.len(), 1);
            assert_eq!(e.checkpoint.model.mode(), mode);
        }
    }

    #[test]
    fn no_latent_generations_are_identical() {
        let (cfg, c) = tiny();
        let cfg = RunConfig {
            mode: LatentMode::NoLatent,
            ..cfg
        };
        let e = run_experiment(&cfg, &c.train, &c.test, None).unwrap();
        for chunk in e.generated.chunks(cfg.samples) {
            assert!(chunk.iter().all(|g| g.response == chunk[0].response && g.z == "-"));
        }
    }

    #[test]
    fn config_keys_apply() {
        let mut cfg = RunConfig::default();
        let file = ConfigFile::parse("mode = one_stage\nK = 4\nclip = 0\nlatent-top-k = 7\n", Path::new("c")).unwrap();
        cfg.apply(&file).unwrap();
        assert_eq!(cfg.mode, LatentMode::OneStage);
        assert_eq!(cfg.clusters, 4);
        assert_eq!(cfg.clip, None);
        assert_eq!(cfg.restriction(), LatentRestriction::TopK(7));
        let bad = ConfigFile::parse("hidden = -3\n", Path::new("c")).unwrap();
        assert!(cfg.apply(&bad).is_err());
    }

    #[test]
    fn latent_file_round_trip() {
        let (cfg, c) = tiny();
        let (vocab, latent) = prepare(&c.train, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("latent.txt");
        save_latent(&latent, &vocab, &p).unwrap();
        assert_eq!(load_latent(&p, &vocab).unwrap(), latent);
    }
}
