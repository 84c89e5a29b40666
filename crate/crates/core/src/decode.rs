//! Beam search and diverse generation through sampled latents.

use std::cmp::Ordering;

use crate::data::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::Dcvae;
use crate::params::Bound;
use crate::sampling::{sample_latent, Rng};
use crate::tensor::{Tape, Var};

/// A decoder that can be advanced one token at a time.
pub trait StepModel {
    type State: Clone;

    /// Log-probabilities over the vocabulary after `prev`, and the next state.
    fn step(&self, state: &Self::State, prev: usize) -> Result<(Vec<f64>, Self::State)>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub max_len: usize,
    /// Rank finished hypotheses by score per token instead of total score.
    pub length_norm: bool,
    pub bos: usize,
    pub eos: usize,
    /// Tokens never emitted.
    pub banned: Vec<usize>,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_size: 10,
            max_len: 30,
            length_norm: false,
            bos: BOS,
            eos: EOS,
            banned: vec![PAD, BOS],
        }
    }
}

#[derive(Clone, Debug)]
pub struct BeamHypothesis<S> {
    /// Emitted tokens; ends with EOS when finished.
    pub tokens: Vec<usize>,
    /// Cumulative log-probability.
    pub score: f64,
    pub state: S,
    pub finished: bool,
}

/// Outcome of a search.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamResult {
    pub tokens: Vec<usize>,
    pub score: f64,
    pub finished: bool,
}

impl BeamResult {
    /// Tokens without the trailing EOS.
    pub fn response(&self, eos: usize) -> &[usize] {
        match self.tokens.last() {
            Some(&t) if t == eos && self.finished => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// Higher score first; equal scores go to the lexicographically smaller sequence.
fn rank(a: (f64, &[usize]), b: (f64, &[usize])) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1))
}

fn final_score(h: &BeamHypothesis<impl Clone>, cfg: &BeamConfig) -> f64 {
    if cfg.length_norm {
        h.score / h.tokens.len() as f64
    } else {
        h.score
    }
}

/// Beam search over `model` from `init`.
///
/// Finished hypotheses leave the beam for a completed pool; the search stops
/// once the pool's best strictly beats every active hypothesis (scores only
/// fall as hypotheses grow) or at `max_len`.
pub fn beam_search<M: StepModel>(model: &M, init: M::State, cfg: &BeamConfig) -> Result<BeamResult> {
    if cfg.beam_size == 0 {
        return Err(Error::invalid("beam size must be at least 1"));
    }
    if cfg.max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    let mut active = vec![BeamHypothesis {
        tokens: Vec::new(),
        score: 0.0,
        state: init,
        finished: false,
    }];
    let mut done: Vec<BeamHypothesis<M::State>> = Vec::new();

    for _ in 0..cfg.max_len {
        let mut cands: Vec<(f64, Vec<usize>, usize)> = Vec::new();
        let mut states = Vec::with_capacity(active.len());
        for (i, h) in active.iter().enumerate() {
            let prev = h.tokens.last().copied().unwrap_or(cfg.bos);
            let (logp, next) = model.step(&h.state, prev)?;
            states.push(next);
            for (w, &lp) in logp.iter().enumerate() {
                if cfg.banned.contains(&w) || lp == f64::NEG_INFINITY {
                    continue;
                }
                let mut toks = h.tokens.clone();
                toks.push(w);
                cands.push((h.score + lp, toks, i));
            }
        }
        cands.sort_by(|a, b| rank((a.0, &a.1), (b.0, &b.1)));
        cands.truncate(cfg.beam_size);
        let mut next_active = Vec::with_capacity(cands.len());
        for (score, tokens, i) in cands {
            let finished = *tokens.last().unwrap() == cfg.eos;
            let h = BeamHypothesis {
                tokens,
                score,
                state: states[i].clone(),
                finished,
            };
            if finished {
                done.push(h);
            } else {
                next_active.push(h);
            }
        }
        active = next_active;
        if active.is_empty() {
            break;
        }
        if !cfg.length_norm {
            let best_done = done.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            let best_active = active.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            if best_done > best_active {
                break;
            }
        }
    }

    let pool = if done.is_empty() { &active } else { &done };
    let best = pool
        .iter()
        .min_by(|a, b| rank((final_score(a, cfg), &a.tokens), (final_score(b, cfg), &b.tokens)))
        .ok_or_else(|| Error::invalid("beam search produced no hypothesis"))?;
    Ok(BeamResult {
        tokens: best.tokens.clone(),
        score: best.score,
        finished: best.finished,
    })
}

/// Repeated argmax (lowest id on ties) until EOS or `max_len` tokens.
pub fn greedy_decode<M: StepModel>(model: &M, init: M::State, cfg: &BeamConfig) -> Result<BeamResult> {
    let mut state = init;
    let mut tokens = Vec::new();
    let mut score = 0.0;
    let mut prev = cfg.bos;
    while tokens.len() < cfg.max_len {
        let (logp, next) = model.step(&state, prev)?;
        let mut best: Option<(usize, f64)> = None;
        for (w, &lp) in logp.iter().enumerate() {
            if cfg.banned.contains(&w) {
                continue;
            }
            if best.is_none_or(|(_, b)| lp > b) {
                best = Some((w, lp));
            }
        }
        let (w, lp) = best.ok_or_else(|| Error::invalid("every token is banned"))?;
        tokens.push(w);
        score += lp;
        state = next;
        prev = w;
        if w == cfg.eos {
            return Ok(BeamResult { tokens, score, finished: true });
        }
    }
    Ok(BeamResult { tokens, score, finished: false })
}

/// The generation network as a [`StepModel`] over one tape.
pub struct DcvaeStepper<'a> {
    model: &'a Dcvae,
    tape: &'a Tape,
    p: &'a Bound,
    memory: Var,
    h_z: Var,
}

impl<'a> DcvaeStepper<'a> {
    pub fn new(model: &'a Dcvae, tape: &'a Tape, p: &'a Bound, memory: Var, h_z: Var) -> Self {
        Self {
            model,
            tape,
            p,
            memory,
            h_z,
        }
    }
}

impl StepModel for DcvaeStepper<'_> {
    type State = Var;

    fn step(&self, state: &Var, prev: usize) -> Result<(Vec<f64>, Var)> {
        let (logp, next) = self.model.decode_step(self.tape, self.p, prev, *state, self.memory, self.h_z)?;
        Ok((self.tape.value(logp).data().to_vec(), next))
    }
}

/// One generated response with the latent that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationResult {
    /// Sampled latent value; vocabulary id, or abstract index in cd mode.
    pub z: Option<usize>,
    pub cluster: Option<usize>,
    /// Response tokens without EOS.
    pub response: Vec<usize>,
    pub score: f64,
}

/// Beam-decodes `x` under a fixed latent value.
pub fn generate_with_latent(
    model: &Dcvae,
    x: &[usize],
    z: Option<usize>,
    cluster: Option<usize>,
    cfg: &BeamConfig,
) -> Result<GenerationResult> {
    let tape = Tape::new();
    let p = model.store().bind_constant(&tape);
    let ctx = model.encode_query(&tape, &p, x)?;
    let h_z = model.latent_repr(&tape, &p, z, cluster)?;
    let stepper = DcvaeStepper::new(model, &tape, &p, ctx.encoded.matrix, h_z);
    let r = beam_search(&stepper, ctx.init_state, cfg)?;
    Ok(GenerationResult {
        z,
        cluster,
        response: r.response(cfg.eos).to_vec(),
        score: r.score,
    })
}

/// Draws `num_samples` latents from the prior and beam-decodes each.
pub fn generate_diverse(
    model: &Dcvae,
    x: &[usize],
    num_samples: usize,
    cfg: &BeamConfig,
    rng: &mut Rng,
) -> Result<Vec<GenerationResult>> {
    if num_samples == 0 {
        return Err(Error::invalid("num_samples must be at least 1"));
    }
    let prior = model.prior_dist(x)?;
    let tape = Tape::new();
    let p = model.store().bind_constant(&tape);
    let ctx = model.encode_query(&tape, &p, x)?;
    let mut out = Vec::with_capacity(num_samples);
    for _ in 0..num_samples {
        let s = sample_latent(&prior, rng)?;
        let (z, cluster) = (s.map(|s| s.z), s.and_then(|s| s.cluster));
        let h_z = model.latent_repr(&tape, &p, z, cluster)?;
        let stepper = DcvaeStepper::new(model, &tape, &p, ctx.encoded.matrix, h_z);
        let r = beam_search(&stepper, ctx.init_state, cfg)?;
        out.push(GenerationResult {
            z,
            cluster,
            response: r.response(cfg.eos).to_vec(),
            score: r.score,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed table: log-probs depend only on the previous token.
    struct Bigram(Vec<Vec<f64>>);

    impl StepModel for Bigram {
        type State = ();
        fn step(&self, _: &(), prev: usize) -> Result<(Vec<f64>, ())> {
            Ok((self.0[prev].clone(), ()))
        }
    }

    fn cfg(beam: usize, max_len: usize) -> BeamConfig {
        BeamConfig {
            beam_size: beam,
            max_len,
            length_norm: false,
            bos: 0,
            eos: 1,
            banned: vec![],
        }
    }

    #[test]
    fn greedy_trap_is_escaped_by_wider_beam() {
        let l = f64::ln;
        // From BOS: token 2 looks best but leads to a flat tail.
        let m = Bigram(vec![
            vec![f64::NEG_INFINITY, l(0.1), l(0.5), l(0.4)],
            vec![f64::NEG_INFINITY, l(1.0), f64::NEG_INFINITY, f64::NEG_INFINITY],
            vec![f64::NEG_INFINITY, l(0.3), l(0.35), l(0.35)],
            vec![f64::NEG_INFINITY, l(0.95), l(0.025), l(0.025)],
        ]);
        let greedy = beam_search(&m, (), &cfg(1, 5)).unwrap();
        assert_eq!(greedy, greedy_decode(&m, (), &cfg(1, 5)).unwrap());
        let wide = beam_search(&m, (), &cfg(4, 5)).unwrap();
        assert_eq!(wide.tokens, vec![3, 1]);
        assert!(wide.score > greedy.score);
    }

    #[test]
    fn rejects_bad_config() {
        let m = Bigram(vec![vec![0.0]]);
        assert!(beam_search(&m, (), &cfg(0, 3)).is_err());
        assert!(beam_search(&m, (), &cfg(2, 0)).is_err());
    }

    #[test]
    fn unfinished_when_eos_never_wins() {
        let l = f64::ln;
        let m = Bigram(vec![
            vec![f64::NEG_INFINITY, f64::NEG_INFINITY, l(1.0)],
            vec![0.0, 0.0, 0.0],
            vec![f64::NEG_INFINITY, f64::NEG_INFINITY, l(1.0)],
        ]);
        let r = beam_search(&m, (), &cfg(3, 4)).unwrap();
        assert!(!r.finished);
        assert_eq!(r.tokens, vec![2, 2, 2, 2]);
    }
}
