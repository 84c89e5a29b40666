//! Training loop and keyword pre-training of the latent networks.

use crate::data::Example;
use crate::error::{Error, Result};
use crate::model::{Dcvae, Heads};
use crate::objective::{training_loss, LossBreakdown, LossOptions};
use crate::optim::{clip_global_norm, collect_grads, Adam};
use crate::params::ParamId;
use crate::sampling::Rng;
use crate::tensor::{Tape, Var};

/// Optimization settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Posterior samples per example.
    pub samples: usize,
    pub seed: u64,
    pub straight_through: bool,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 128,
            epochs: 10,
            samples: 1,
            seed: 0,
            straight_through: true,
            clip: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.samples == 0 {
            return Err(Error::invalid("samples per example must be at least 1"));
        }
        if let Some(c) = self.clip {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::invalid("clip norm must be positive"));
            }
        }
        Ok(())
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            samples: self.samples,
            straight_through: self.straight_through,
        }
    }
}

/// Optimizer plus random state carried across steps.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    adam: Adam,
    rng: Rng,
}

impl Trainer {
    pub fn new(model: &Dcvae, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            adam: Adam::new(model.store(), config.lr)?,
            rng: Rng::seed_from(config.seed),
            config,
        })
    }

    /// One optimization step on `batch`.
    pub fn step(&mut self, model: &mut Dcvae, batch: &[Example]) -> Result<LossBreakdown> {
        let tape = Tape::new();
        let p = model.store().bind(&tape);
        let loss = training_loss(model, &tape, &p, batch, &self.config.loss_options(), &mut self.rng)?;
        let grads = tape.backward(loss.total)?;
        let mut g = collect_grads(&grads, &p);
        drop(grads);
        drop(p);
        if let Some(c) = self.config.clip {
            clip_global_norm(&mut g, c);
        }
        self.adam.step(model.store_mut(), &g, None)?;
        Ok(loss.breakdown)
    }

    /// One pass over `examples` in shuffled order; returns example-weighted means.
    pub fn epoch(&mut self, model: &mut Dcvae, examples: &[Example]) -> Result<LossBreakdown> {
        if examples.is_empty() {
            return Err(Error::invalid("cannot train on an empty corpus"));
        }
        let mut order: Vec<usize> = (0..examples.len()).collect();
        self.rng.shuffle(&mut order);
        let mut sum = LossBreakdown::default();
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let b = self.step(model, &batch)?;
            let w = batch.len() as f64;
            sum.recon += w * b.recon;
            sum.kl += w * b.kl;
            sum.bow += w * b.bow;
        }
        let n = examples.len() as f64;
        let (recon, kl, bow) = (sum.recon / n, sum.kl / n, sum.bow / n);
        Ok(LossBreakdown {
            recon,
            kl,
            bow,
            total: recon + kl + bow,
        })
    }
}

/// Trains for `config.epochs` epochs, calling `on_epoch(epoch, losses, model)`
/// after each one (epochs count from 1).
pub fn train<F>(model: &mut Dcvae, examples: &[Example], config: TrainConfig, mut on_epoch: F) -> Result<Vec<LossBreakdown>>
where
    F: FnMut(usize, &LossBreakdown, &Dcvae) -> Result<()>,
{
    let epochs = config.epochs;
    let mut trainer = Trainer::new(model, config)?;
    let mut log = Vec::with_capacity(epochs);
    for e in 1..=epochs {
        let b = trainer.epoch(model, examples)?;
        on_epoch(e, &b, model)?;
        log.push(b);
    }
    Ok(log)
}

/// Keyword cross-entropy of the prior and posterior heads, batch means.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PretrainLoss {
    pub cluster_ce: f64,
    pub word_ce: f64,
    pub total: f64,
}

fn keyword_ce(model: &Dcvae, tape: &Tape, heads: &Heads, kw: usize) -> Result<(Option<Var>, Var)> {
    match heads {
        Heads::TwoStage { cluster, words } => {
            let part = model.partition().unwrap();
            let k = part.cluster_of(kw)?;
            let j = part.members(k).binary_search(&kw).unwrap();
            let c = tape.scale(tape.pick(*cluster, &[k])?, -1.0)?;
            let w = tape.scale(tape.pick(words[k], &[j])?, -1.0)?;
            Ok((Some(c), w))
        }
        Heads::Flat(lp) => {
            let j = model
                .latent_ids()
                .iter()
                .position(|&z| z == kw)
                .ok_or_else(|| Error::invalid(format!("keyword {kw} is outside the latent space")))?;
            Ok((None, tape.scale(tape.pick(*lp, &[j])?, -1.0)?))
        }
        Heads::Absent => Err(Error::invalid("pre-training needs a latent variable")),
    }
}

/// Differentiable pre-training loss: cluster CE + word CE, summed over the
/// prior and posterior and averaged over the batch.
pub fn pretrain_loss(model: &Dcvae, tape: &Tape, p: &crate::params::Bound, batch: &[Example]) -> Result<(Var, PretrainLoss)> {
    if batch.is_empty() {
        return Err(Error::invalid("pretrain: empty batch"));
    }
    if !model.latent_is_word() {
        return Err(Error::invalid(format!(
            "keyword pre-training needs word-valued latents, not mode {}",
            model.mode()
        )));
    }
    let mut cluster_terms = Vec::new();
    let mut word_terms = Vec::new();
    for ex in batch {
        let kw = ex
            .keyword
            .ok_or_else(|| Error::invalid("pretrain: example without a keyword"))?;
        if !model.latent_ids().contains(&kw) {
            return Err(Error::invalid(format!("keyword {kw} is outside the latent space")));
        }
        for heads in [
            model.prior_heads(tape, p, &ex.query)?,
            model.posterior_heads(tape, p, &ex.query, &ex.response)?,
        ] {
            let (c, w) = keyword_ce(model, tape, &heads, kw)?;
            cluster_terms.extend(c);
            word_terms.push(w);
        }
    }
    let inv = 1.0 / batch.len() as f64;
    let c = if cluster_terms.is_empty() {
        tape.zeros(&[1])
    } else {
        tape.scale(tape.add_all(&cluster_terms)?, inv)?
    };
    let w = tape.scale(tape.add_all(&word_terms)?, inv)?;
    let total = tape.add(c, w)?;
    Ok((
        total,
        PretrainLoss {
            cluster_ce: tape.item(c),
            word_ce: tape.item(w),
            total: tape.item(total),
        },
    ))
}

/// Parameters touched by pre-training: prior, posterior and cluster
/// embeddings. Word embeddings and the generation network stay fixed.
pub fn pretrain_params(model: &Dcvae) -> Vec<ParamId> {
    let mut ids = model.prior_params();
    ids.extend(model.posterior_params());
    ids.extend(model.cluster_params());
    ids
}

/// Keyword pre-training settings.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub clip: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 128,
            lr: 1e-4,
            seed: 0,
            clip: Some(5.0),
        }
    }
}

/// Optimizer state for keyword pre-training.
#[derive(Clone, Debug)]
pub struct Pretrainer {
    adam: Adam,
    clip: Option<f64>,
    params: Vec<ParamId>,
}

impl Pretrainer {
    pub fn new(model: &Dcvae, lr: f64, clip: Option<f64>) -> Result<Self> {
        Ok(Self {
            adam: Adam::new(model.store(), lr)?,
            clip,
            params: pretrain_params(model),
        })
    }

    pub fn step(&mut self, model: &mut Dcvae, batch: &[Example]) -> Result<PretrainLoss> {
        let tape = Tape::new();
        let p = model.store().bind(&tape);
        let (loss, values) = pretrain_loss(model, &tape, &p, batch)?;
        let grads = tape.backward(loss)?;
        let mut g = collect_grads(&grads, &p);
        drop(grads);
        drop(p);
        if let Some(c) = self.clip {
            clip_global_norm(&mut g, c);
        }
        self.adam.step(model.store_mut(), &g, Some(&self.params))?;
        Ok(values)
    }
}

/// Runs `config.steps` pre-training steps over keyworded examples (others
/// are skipped). Returns the loss of every step.
pub fn pretrain(model: &mut Dcvae, examples: &[Example], config: &PretrainConfig) -> Result<Vec<PretrainLoss>> {
    let usable: Vec<&Example> = examples.iter().filter(|e| e.keyword.is_some()).collect();
    if usable.is_empty() {
        return Err(Error::invalid("pretrain: no example carries a keyword"));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let mut rng = Rng::seed_from(config.seed);
    let mut trainer = Pretrainer::new(model, config.lr, config.clip)?;
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut log = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size.min(usable.len()) {
            if cursor == order.len() {
                order = (0..usable.len()).collect();
                rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(usable[order[cursor]].clone());
            cursor += 1;
        }
        log.push(trainer.step(model, &batch)?);
    }
    Ok(log)
}
