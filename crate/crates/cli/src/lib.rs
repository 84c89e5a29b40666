//! Command-line front end. Every subcommand reads and writes plain UTF-8 text
//! files so stages can be run, inspected and rerun independently.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dcvae_core::checkpoint::Checkpoint;
use dcvae_core::cluster::{EmbeddingFile, Partition};
use dcvae_core::config::ConfigFile;
use dcvae_core::data::{encode_all, load_corpus, load_keywords, save_corpus, save_keywords, KeywordSource, LatentSpace, Vocab};
use dcvae_core::io::write_atomic;
use dcvae_core::metrics::{evaluate, load_generated, save_generated};
use dcvae_core::model::LatentMode;
use dcvae_core::pipeline::{
    apply_synth_config, build_model, cluster_latent, extract_keywords, generate_lines, load_latent, maybe_pretrain,
    prepare, run_experiment, save_latent, RunConfig, RUN_KEYS, SYNTH_KEYS,
};
use dcvae_core::synth::{synthesize_corpus, SyntheticSpec};
use dcvae_core::train::train;

#[derive(Parser, Debug)]
#[command(name = "dcvae", version, about = "Discrete conditional VAE for diverse short-text responses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic one-to-many corpus with planted topic clusters.
    Synth(SynthArgs),
    /// Build the vocabulary and latent word space from a training corpus.
    Prep(PrepArgs),
    /// Cluster the latent space with k-means over word embeddings.
    Cluster(ClusterArgs),
    /// Extract one TF-IDF keyword per training pair.
    Keywords(KeywordArgs),
    /// Build a model and pre-train its latent heads on keywords.
    Pretrain(PretrainArgs),
    /// Train on the full objective, checkpointing after every epoch.
    Train(TrainArgs),
    /// Sample latents from the prior and decode responses for test queries.
    Generate(GenerateArgs),
    /// Score generated responses against reference responses.
    Evaluate(EvaluateArgs),
    /// Run the whole pipeline for one latent mode.
    Ablate(AblateArgs),
}

/// Hyperparameters; each overrides the same key of `--config`.
#[derive(Args, Debug, Default, Clone)]
struct Hyper {
    /// `key = value` file; flags given on the command line take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// two_stage, one_stage, cd or no_latent.
    #[arg(long, global = true)]
    mode: Option<LatentMode>,
    #[arg(long, global = true)]
    vocab_size: Option<usize>,
    /// Restrict latent words to the N most frequent non-special tokens.
    #[arg(long, global = true)]
    latent_top_k: Option<usize>,
    /// Number of latent word clusters.
    #[arg(long = "K", global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    kmeans_iters: Option<usize>,
    #[arg(long, global = true)]
    normalize_embeddings: Option<bool>,
    /// query or response.
    #[arg(long, global = true)]
    keyword_source: Option<KeywordSource>,
    #[arg(long, global = true)]
    smooth_idf: Option<bool>,
    #[arg(long, global = true)]
    hidden: Option<usize>,
    #[arg(long, global = true)]
    word_dim: Option<usize>,
    #[arg(long, global = true)]
    cluster_dim: Option<usize>,
    #[arg(long, global = true)]
    scorer_dim: Option<usize>,
    #[arg(long, global = true)]
    init_scale: Option<f64>,
    /// Abstract latent count in cd mode.
    #[arg(long, global = true)]
    cd_m: Option<usize>,
    #[arg(long, global = true)]
    pretrain_steps: Option<usize>,
    #[arg(long, global = true)]
    pretrain_lr: Option<f64>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    batch: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    train_samples: Option<usize>,
    #[arg(long, global = true)]
    straight_through: Option<bool>,
    /// Global gradient-norm clip; 0 disables.
    #[arg(long, global = true)]
    clip: Option<f64>,
    #[arg(long, global = true)]
    beam: Option<usize>,
    #[arg(long, global = true)]
    max_len: Option<usize>,
    #[arg(long, global = true)]
    length_norm: Option<bool>,
    /// Prior samples per query at generation time.
    #[arg(long, global = true)]
    samples: Option<usize>,
}

impl Hyper {
    fn config_file(&self) -> Result<ConfigFile> {
        match &self.config {
            Some(p) => Ok(ConfigFile::load(p)?),
            None => Ok(ConfigFile::default()),
        }
    }

    /// Mode from the flags or config file only, without defaults.
    fn explicit_mode(&self) -> Result<Option<LatentMode>> {
        Ok(match self.mode {
            Some(m) => Some(m),
            None => self.config_file()?.get("mode")?,
        })
    }

    fn resolve(&self) -> Result<RunConfig> {
        let file = self.config_file()?;
        let known: Vec<&str> = RUN_KEYS.iter().chain(SYNTH_KEYS).copied().collect();
        file.check_keys(&known)?;
        let mut c = RunConfig::default();
        c.apply(&file)?;
        macro_rules! over {
            ($($flag:ident => $field:ident),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { c.$field = v; })*
            };
        }
        over!(
            seed => seed, mode => mode, vocab_size => vocab_size, k => clusters,
            kmeans_iters => kmeans_iters, normalize_embeddings => normalize_embeddings,
            keyword_source => keyword_source, smooth_idf => smooth_idf, hidden => hidden,
            word_dim => word_dim, cluster_dim => cluster_dim, scorer_dim => scorer_dim,
            init_scale => init_scale, pretrain_steps => pretrain_steps, pretrain_lr => pretrain_lr,
            lr => lr, batch => batch, epochs => epochs, train_samples => train_samples,
            straight_through => straight_through, beam => beam, max_len => max_len,
            length_norm => length_norm, samples => samples,
        );
        if self.latent_top_k.is_some() {
            c.latent_top_k = self.latent_top_k;
        }
        if self.cd_m.is_some() {
            c.cd_m = self.cd_m;
        }
        if let Some(clip) = self.clip {
            c.clip = (clip > 0.0).then_some(clip);
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    templates: Option<usize>,
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    topics: Option<usize>,
    #[arg(long)]
    test_queries: Option<usize>,
    #[command(flatten)]
    hyper: Hyper,
}

#[derive(Args, Debug)]
struct PrepArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory for vocab.tsv and latent.txt.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    hyper: Hyper,
}

#[derive(Args, Debug)]
struct ClusterArgs {
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    latent: PathBuf,
    /// Word vectors, `token v1 .. vd` per line. Missing words get random vectors.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Output `token cluster` file.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    hyper: Hyper,
}

#[derive(Args, Debug)]
struct KeywordArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    latent: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    hyper: Hyper,
}

/// Inputs that define a fresh model.
#[derive(Args, Debug)]
struct ModelInputs {
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    latent: Option<PathBuf>,
    /// Cluster file from `cluster`; required in two_stage mode.
    #[arg(long)]
    clusters: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Keyword file from `keywords`, aligned with the corpus.
    #[arg(long)]
    keywords: PathBuf,
    #[command(flatten)]
    inputs: ModelInputs,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    hyper: Hyper,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    inputs: ModelInputs,
    /// Checkpoint written after every epoch.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss table; defaults to `<out>.epochs.tsv`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    hyper: Hyper,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus whose distinct queries are answered.
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    hyper: Hyper,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    generated: PathBuf,
    /// Reference corpus.
    #[arg(long)]
    test: PathBuf,
    /// Report file of `metric<TAB>value` lines.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    hyper: Hyper,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Output directory for checkpoint, generations and report.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    hyper: Hyper,
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create directory {}", dir.display()))
}

fn load_embeddings(path: Option<&PathBuf>) -> Result<Option<EmbeddingFile>> {
    path.map(|p| EmbeddingFile::load(p)).transpose().map_err(Into::into)
}

fn synth(a: &SynthArgs) -> Result<()> {
    let file = a.hyper.config_file()?;
    let known: Vec<&str> = RUN_KEYS.iter().chain(SYNTH_KEYS).copied().collect();
    file.check_keys(&known)?;
    let mut spec = SyntheticSpec::default();
    apply_synth_config(&mut spec, &file)?;
    if let Some(s) = file.get("seed")? {
        spec.seed = s;
    }
    if let Some(s) = a.hyper.seed {
        spec.seed = s;
    }
    if let Some(k) = a.hyper.k {
        spec.clusters = k;
    }
    for (flag, slot) in [
        (a.templates, &mut spec.templates),
        (a.pairs, &mut spec.pairs),
        (a.topics, &mut spec.topics),
        (a.test_queries, &mut spec.test_queries),
    ] {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    let c = synthesize_corpus(&spec)?;
    ensure_dir(&a.out)?;
    save_corpus(&c.train, &a.out.join("train.tsv"))?;
    save_corpus(&c.test, &a.out.join("test.tsv"))?;
    c.embeddings.save(&a.out.join("embeddings.txt"))?;
    let lines = |v: &[String]| v.iter().map(|k| format!("{k}\n")).collect::<String>();
    fs::write(a.out.join("train_keywords.txt"), lines(&c.train_keywords))?;
    fs::write(a.out.join("test_keywords.txt"), lines(&c.test_keywords))?;
    let planted: String = c.clusters.iter().map(|(t, k)| format!("{t} {k}\n")).collect();
    fs::write(a.out.join("planted_clusters.txt"), planted)?;
    println!(
        "wrote {} training pairs, {} test pairs, {} embeddings to {}",
        c.train.len(),
        c.test.len(),
        c.embeddings.len(),
        a.out.display()
    );
    Ok(())
}

fn prep(a: &PrepArgs) -> Result<()> {
    let cfg = a.hyper.resolve()?;
    let pairs = load_corpus(&a.corpus)?;
    let (vocab, latent) = prepare(&pairs, &cfg)?;
    ensure_dir(&a.out)?;
    vocab.save(&a.out.join("vocab.tsv"))?;
    save_latent(&latent, &vocab, &a.out.join("latent.txt"))?;
    let coverage = vocab.coverage().map_or(String::new(), |c| format!(", token coverage {:.1}%", 100.0 * c));
    println!("vocabulary {} tokens, latent space {} words{coverage}", vocab.len(), latent.len());
    Ok(())
}

fn cluster(a: &ClusterArgs) -> Result<()> {
    let cfg = a.hyper.resolve()?;
    let vocab = Vocab::load(&a.vocab)?;
    let latent = load_latent(&a.latent, &vocab)?;
    let emb = load_embeddings(a.embeddings.as_ref())?;
    let model = cluster_latent(&vocab, &latent, emb.as_ref(), &cfg)?;
    model.partition.save(&a.out, &vocab, latent.ids())?;
    let sizes: Vec<String> = (0..model.k()).map(|k| model.members(k).len().to_string()).collect();
    println!(
        "{} clusters (sizes {}), final SSE {:.4} after {} iterations",
        model.k(),
        sizes.join(" "),
        model.sse_history.last().copied().unwrap_or(0.0),
        model.sse_history.len()
    );
    Ok(())
}

fn keywords(a: &KeywordArgs) -> Result<()> {
    let cfg = a.hyper.resolve()?;
    let vocab = Vocab::load(&a.vocab)?;
    let latent = load_latent(&a.latent, &vocab)?;
    let mut examples = encode_all(&load_corpus(&a.corpus)?, &vocab)?;
    extract_keywords(&mut examples, &latent, &cfg);
    let kws: Vec<Option<usize>> = examples.iter().map(|e| e.keyword).collect();
    save_keywords(&kws, &vocab, &a.out)?;
    let found = kws.iter().flatten().count();
    println!("keywords for {found} of {} pairs", kws.len());
    Ok(())
}

/// Vocabulary and latent space from explicit files, or rebuilt from the corpus.
fn vocab_and_latent(inputs: &ModelInputs, pairs: &[dcvae_core::TextPair], cfg: &RunConfig) -> Result<(Vocab, LatentSpace)> {
    match (&inputs.vocab, &inputs.latent) {
        (Some(v), Some(l)) => {
            let vocab = Vocab::load(v)?;
            let latent = load_latent(l, &vocab)?;
            Ok((vocab, latent))
        }
        (Some(v), None) => {
            let vocab = Vocab::load(v)?;
            let latent = LatentSpace::new(&vocab, cfg.restriction())?;
            Ok((vocab, latent))
        }
        (None, Some(_)) => bail!("--latent needs the --vocab it was built from"),
        (None, None) => Ok(prepare(pairs, cfg)?),
    }
}

fn fresh_model(inputs: &ModelInputs, pairs: &[dcvae_core::TextPair], cfg: &RunConfig) -> Result<Checkpoint> {
    let (vocab, latent) = vocab_and_latent(inputs, pairs, cfg)?;
    let emb = load_embeddings(inputs.embeddings.as_ref())?;
    let partition = match (cfg.mode, &inputs.clusters) {
        (LatentMode::TwoStage, Some(p)) => Some(Partition::load(p, &vocab)?),
        (LatentMode::TwoStage, None) => Some(cluster_latent(&vocab, &latent, emb.as_ref(), cfg)?.partition),
        _ => None,
    };
    let model = build_model(cfg, &vocab, &latent, partition, emb.as_ref())?;
    Ok(Checkpoint::new(vocab, model)?)
}

fn pretrain_cmd(a: &PretrainArgs) -> Result<()> {
    let cfg = a.hyper.resolve()?;
    let pairs = load_corpus(&a.corpus)?;
    let mut ck = fresh_model(&a.inputs, &pairs, &cfg)?;
    let mut examples = encode_all(&pairs, &ck.vocab)?;
    if ck.model.latent_is_word() {
        let latent = LatentSpace::from_ids(ck.model.latent_ids().to_vec())?;
        let kws = load_keywords(&a.keywords, &ck.vocab, &latent)?;
        if kws.len() != pairs.len() {
            bail!(
                "keyword file {} has {} lines but the corpus has {} pairs",
                a.keywords.display(),
                kws.len(),
                pairs.len()
            );
        }
        for (e, k) in examples.iter_mut().zip(kws) {
            e.keyword = k;
        }
    }
    let log = maybe_pretrain(&mut ck.model, &examples, &cfg)?;
    ck.save(&a.out)?;
    match (log.first(), log.last()) {
        (Some(f), Some(l)) => println!(
            "pre-trained {} steps: keyword CE {:.4} -> {:.4}",
            log.len(),
            f.total,
            l.total
        ),
        _ => println!("mode {} has no word latent; saved untrained model", ck.model.mode()),
    }
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let mut cfg = a.hyper.resolve()?;
    let pairs = load_corpus(&a.corpus)?;
    let mut ck = match &a.checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            match a.hyper.explicit_mode()? {
                Some(m) if m != ck.model.mode() => {
                    bail!("--mode {m} conflicts with checkpoint {} (mode {})", p.display(), ck.model.mode())
                }
                _ => cfg.mode = ck.model.mode(),
            }
            ck
        }
        None => fresh_model(&a.inputs, &pairs, &cfg)?,
    };
    let examples = encode_all(&pairs, &ck.vocab)?;
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".epochs.tsv");
        PathBuf::from(s)
    });
    let mut table = String::from("epoch\trecon\tkl\tbow\ttotal\n");
    let vocab = ck.vocab.clone();
    train(&mut ck.model, &examples, cfg.train_config(), |epoch, b, model| {
        writeln!(table, "{epoch}\t{:.6}\t{:.6}\t{:.6}\t{:.6}", b.recon, b.kl, b.bow, b.total).unwrap();
        write_atomic(&log_path, table.as_bytes())?;
        Checkpoint::new(vocab.clone(), model.clone())?.save(&a.out)?;
        println!(
            "epoch {epoch}: recon {:.4} kl {:.4} bow {:.4} total {:.4}",
            b.recon, b.kl, b.bow, b.total
        );
        Ok(())
    })?;
    if cfg.epochs == 0 {
        ck.save(&a.out)?;
        write_atomic(&log_path, table.as_bytes())?;
    }
    Ok(())
}

fn generate(a: &GenerateArgs) -> Result<()> {
    let mut cfg = a.hyper.resolve()?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    if let Some(m) = a.hyper.explicit_mode()? {
        if m != ck.model.mode() {
            bail!("--mode {m} conflicts with checkpoint {} (mode {})", a.checkpoint.display(), ck.model.mode());
        }
    }
    cfg.mode = ck.model.mode();
    let pairs = load_corpus(&a.test)?;
    let lines = generate_lines(&ck.model, &ck.vocab, &pairs, &cfg)?;
    save_generated(&lines, &a.out)?;
    println!("wrote {} responses to {}", lines.len(), a.out.display());
    Ok(())
}

fn evaluate_cmd(a: &EvaluateArgs) -> Result<()> {
    let generated = load_generated(&a.generated)?;
    let refs = load_corpus(&a.test)?;
    let report = evaluate(&generated, &refs).with_context(|| {
        format!("evaluating {} against {}", a.generated.display(), a.test.display())
    })?;
    if let Some(out) = &a.out {
        report.save(out)?;
    }
    println!("{report}");
    Ok(())
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let cfg = a.hyper.resolve()?;
    let train_pairs = load_corpus(&a.corpus)?;
    let test_pairs = load_corpus(&a.test)?;
    let emb = load_embeddings(a.embeddings.as_ref())?;
    let e = run_experiment(&cfg, &train_pairs, &test_pairs, emb.as_ref())?;
    ensure_dir(&a.out)?;
    let mode = cfg.mode.to_string();
    e.checkpoint.save(&a.out.join(format!("{mode}.ckpt")))?;
    save_generated(&e.generated, &a.out.join(format!("{mode}.generated.tsv")))?;
    e.report.save(&a.out.join(format!("{mode}.report.tsv")))?;
    println!("mode {mode}");
    println!("{}", e.report);
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(&a),
        Command::Prep(a) => prep(&a),
        Command::Cluster(a) => cluster(&a),
        Command::Keywords(a) => keywords(&a),
        Command::Pretrain(a) => pretrain_cmd(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Generate(a) => generate(&a),
        Command::Evaluate(a) => evaluate_cmd(&a),
        Command::Ablate(a) => ablate(&a),
    }
}

/// Runs the CLI on `argv` (program name first) and returns the exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
