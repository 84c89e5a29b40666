//! Training objective: reconstruction NLL, exact categorical KL and the
//! bag-of-words term, plus exact enumeration of the bound for small models.

use crate::data::Example;
use crate::dist::{check_simplex, LatentDist, TwoStageDist};
use crate::error::{Error, Result};
use crate::model::{Dcvae, Heads};
use crate::params::Bound;
use crate::sampling::{sample_latent, LatentSample, Rng};
use crate::tensor::{Tape, Var};

/// `Σ q log(q/p)` with `0 log 0 = 0`.
pub fn kl_categorical(q: &[f64], p: &[f64]) -> Result<f64> {
    if q.len() != p.len() {
        return Err(Error::invalid(format!(
            "kl_categorical: lengths differ ({} vs {})",
            q.len(),
            p.len()
        )));
    }
    check_simplex(q, "kl_categorical q")?;
    check_simplex(p, "kl_categorical p")?;
    let mut kl = 0.0;
    for (&a, &b) in q.iter().zip(p) {
        if a > 0.0 {
            if b <= 0.0 {
                return Err(Error::invalid("kl_categorical: q > 0 where p = 0 (infinite divergence)"));
            }
            kl += a * (a / b).ln();
        }
    }
    Ok(kl)
}

/// Cluster-level KL plus the cluster-weighted within-cluster KLs.
pub fn kl_two_stage(q: &TwoStageDist, p: &TwoStageDist) -> Result<f64> {
    if q.partition() != p.partition() {
        return Err(Error::invalid("kl_two_stage: distributions use different partitions"));
    }
    let mut kl = kl_categorical(q.cluster_probs(), p.cluster_probs())?;
    for k in 0..q.k() {
        let w = q.cluster_probs()[k];
        if w > 0.0 {
            kl += w * kl_categorical(q.word_probs(k), p.word_probs(k))?;
        }
    }
    Ok(kl)
}

pub fn kl_latent(q: &LatentDist, p: &LatentDist) -> Result<f64> {
    match (q, p) {
        (LatentDist::TwoStage(q), LatentDist::TwoStage(p)) => kl_two_stage(q, p),
        (LatentDist::Flat(q), LatentDist::Flat(p)) if q.ids() == p.ids() => kl_categorical(q.probs(), p.probs()),
        (LatentDist::Absent, LatentDist::Absent) => Ok(0.0),
        _ => Err(Error::invalid("kl_latent: distributions are of different kinds")),
    }
}

fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

/// `-Σ_t log softmax(h_b)[y_t]`.
pub fn bow_nll(h_b: &[f64], y: &[usize]) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::invalid("bow_nll: empty response"));
    }
    if let Some(&bad) = y.iter().find(|&&t| t >= h_b.len()) {
        return Err(Error::invalid(format!("bow_nll: token {bad} outside {} logits", h_b.len())));
    }
    let lp = log_softmax(h_b);
    Ok(-y.iter().map(|&t| lp[t]).sum::<f64>())
}

fn kl_rows(tape: &Tape, lq: Var, lp: Var) -> Result<Var> {
    tape.sum(tape.mul(tape.exp(lq)?, tape.sub(lq, lp)?)?)
}

/// Differentiable KL between posterior and prior heads; `None` without a latent.
pub fn kl_heads(tape: &Tape, q: &Heads, p: &Heads) -> Result<Option<Var>> {
    match (q, p) {
        (Heads::Absent, Heads::Absent) => Ok(None),
        (Heads::Flat(lq), Heads::Flat(lp)) => Ok(Some(kl_rows(tape, *lq, *lp)?)),
        (
            Heads::TwoStage {
                cluster: qc,
                words: qw,
            },
            Heads::TwoStage {
                cluster: pc,
                words: pw,
            },
        ) => {
            let mut terms = vec![kl_rows(tape, *qc, *pc)?];
            let wq = tape.exp(*qc)?;
            for (k, (&a, &b)) in qw.iter().zip(pw).enumerate() {
                terms.push(tape.mul(kl_rows(tape, a, b)?, tape.gather(wq, &[k])?)?);
            }
            Ok(Some(tape.add_all(&terms)?))
        }
        _ => Err(Error::invalid("kl_heads: heads are of different kinds")),
    }
}

/// Loss terms, each a per-example mean; `total = recon + kl + bow`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub bow: f64,
    pub total: f64,
}

/// Per-step options of the objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    /// Posterior samples per example.
    pub samples: usize,
    pub straight_through: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            samples: 1,
            straight_through: true,
        }
    }
}

/// The differentiable loss and its values.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Posterior draws used by [`training_loss_with`], one list per example.
pub type SampleSource<'a> = &'a mut dyn FnMut(usize, &LatentDist) -> Result<Vec<Option<LatentSample>>>;

/// Negative bound averaged over `batch`: teacher-forced NLL under posterior
/// samples, exact KL(posterior ‖ prior), and the bag-of-words NLL on the same
/// samples.
pub fn training_loss(
    model: &Dcvae,
    tape: &Tape,
    p: &Bound,
    batch: &[Example],
    opts: &LossOptions,
    rng: &mut Rng,
) -> Result<LossVars> {
    let n = opts.samples;
    let mut draw = |_: usize, d: &LatentDist| -> Result<Vec<Option<LatentSample>>> {
        (0..n).map(|_| sample_latent(d, rng)).collect()
    };
    training_loss_with(model, tape, p, batch, opts, &mut draw)
}

/// [`training_loss`] with caller-supplied posterior samples.
pub fn training_loss_with(
    model: &Dcvae,
    tape: &Tape,
    p: &Bound,
    batch: &[Example],
    opts: &LossOptions,
    draw: SampleSource<'_>,
) -> Result<LossVars> {
    if batch.is_empty() {
        return Err(Error::invalid("training_loss: empty batch"));
    }
    if opts.samples == 0 {
        return Err(Error::invalid("training_loss: need at least one sample per example"));
    }
    let mut recon = Vec::new();
    let mut kls = Vec::new();
    let mut bows = Vec::new();
    for (i, ex) in batch.iter().enumerate() {
        let ctx = model.encode_query(tape, p, &ex.query)?;
        if !model.has_latent() {
            let h_z = model.latent_repr(tape, p, None, None)?;
            recon.push(model.sequence_nll(tape, p, &ctx, h_z, &ex.response)?);
            continue;
        }
        let q = model.posterior_heads(tape, p, &ex.query, &ex.response)?;
        let pr = model.prior_heads(tape, p, &ex.query)?;
        kls.push(kl_heads(tape, &q, &pr)?.expect("latent heads present"));
        let qd = model.heads_to_dist(tape, &q)?;
        let samples = draw(i, &qd)?;
        if samples.len() != opts.samples {
            return Err(Error::invalid("training_loss: wrong number of samples"));
        }
        let scale = 1.0 / samples.len() as f64;
        for s in samples {
            let h_z = model.sample_repr(tape, p, &q, s, opts.straight_through)?;
            recon.push(tape.scale(model.sequence_nll(tape, p, &ctx, h_z, &ex.response)?, scale)?);
            let lp = tape.log_softmax(model.bow_logits(tape, p, ctx.encoded.summary, h_z)?)?;
            let nll = tape.scale(tape.sum(tape.gather(lp, &ex.response)?)?, -scale)?;
            bows.push(nll);
        }
    }
    let inv = 1.0 / batch.len() as f64;
    let mean = |terms: &[Var]| -> Result<Var> {
        if terms.is_empty() {
            Ok(tape.zeros(&[1]))
        } else {
            tape.scale(tape.add_all(terms)?, inv)
        }
    };
    let (r, k, b) = (mean(&recon)?, mean(&kls)?, mean(&bows)?);
    let total = tape.add(tape.add(r, k)?, b)?;
    Ok(LossVars {
        total,
        breakdown: LossBreakdown {
            recon: tape.item(r),
            kl: tape.item(k),
            bow: tape.item(b),
            total: tape.item(total),
        },
    })
}

/// Exact values for one pair, by enumerating the latent space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExactBound {
    /// `E_q[log p(y|x,z)] - KL(q ‖ p)`.
    pub elbo: f64,
    /// `log Σ_z p(z|x) p(y|x,z)`.
    pub log_likelihood: f64,
}

/// Log-likelihood of `y` given `x` and a fixed latent value.
pub fn log_likelihood_given(model: &Dcvae, x: &[usize], y: &[usize], z: Option<usize>) -> Result<f64> {
    let tape = Tape::new();
    let p = model.store().bind_constant(&tape);
    let ctx = model.encode_query(&tape, &p, x)?;
    let c = match (z, model.partition()) {
        (Some(z), Some(part)) => Some(part.cluster_of(z)?),
        _ => None,
    };
    let h_z = model.latent_repr(&tape, &p, z, c)?;
    Ok(-tape.item(model.sequence_nll(&tape, &p, &ctx, h_z, y)?))
}

pub fn exact_bound(model: &Dcvae, x: &[usize], y: &[usize]) -> Result<ExactBound> {
    if !model.has_latent() {
        let ll = log_likelihood_given(model, x, y, None)?;
        return Ok(ExactBound {
            elbo: ll,
            log_likelihood: ll,
        });
    }
    let q = model.posterior_dist(x, y)?;
    let pr = model.prior_dist(x)?;
    let mut expected = 0.0;
    let mut joint = Vec::with_capacity(model.latent_ids().len());
    for &z in model.latent_ids() {
        let ll = log_likelihood_given(model, x, y, Some(z))?;
        expected += q.prob(z) * ll;
        joint.push(pr.prob(z).ln() + ll);
    }
    let m = joint.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_likelihood = m + joint.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    Ok(ExactBound {
        elbo: expected - kl_latent(&q, &pr)?,
        log_likelihood,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_hand_values() {
        assert!((kl_categorical(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(kl_categorical(&[0.2, 0.8], &[0.2, 0.8]).unwrap().abs() < 1e-12);
        assert!(kl_categorical(&[0.5, 0.5], &[1.0, 0.0]).is_err());
        assert!(kl_categorical(&[0.5, 0.5], &[1.0]).is_err());
    }

    #[test]
    fn bow_nll_cases() {
        let v = 7.0f64;
        assert!((bow_nll(&[0.0; 7], &[1, 2, 3]).unwrap() - 3.0 * v.ln()).abs() < 1e-12);
        let mut h = vec![0.0; 7];
        h[2] = 50.0;
        assert!(bow_nll(&h, &[2, 2]).unwrap() < 1e-18);
        assert!(bow_nll(&h, &[]).is_err());
    }
}
