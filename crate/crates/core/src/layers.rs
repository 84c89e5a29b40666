//! GRU cell, bidirectional encoder, bilinear attention and the two-layer scorer.
//!
//! Layers hold [`ParamId`]s into a [`ParamStore`]; their forward functions
//! take the tape and the store's [`Bound`] handles for that tape.

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::sampling::Rng;
use crate::tensor::{Tape, Var};

fn expect_cols(tape: &Tape, op: &'static str, v: Var, cols: usize) -> Result<()> {
    let s = tape.shape(v);
    if s.len() != 2 || s[1] != cols {
        return Err(Error::shape(op, &s, &[s[0], cols]));
    }
    Ok(())
}

/// Standard GRU cell weights.
#[derive(Clone, Debug)]
pub struct GruParams {
    pub d_in: usize,
    pub d_h: usize,
    pub w_xz: ParamId,
    pub w_xr: ParamId,
    pub w_xn: ParamId,
    pub w_hz: ParamId,
    pub w_hr: ParamId,
    pub w_hn: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_n: ParamId,
}

impl GruParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_h: usize,
        scale: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut m = |name: &str, r: usize, c: usize| {
            store.add_uniform(format!("{prefix}.{name}"), &[r, c], scale, rng)
        };
        Ok(Self {
            d_in,
            d_h,
            w_xz: m("w_xz", d_in, d_h)?,
            w_xr: m("w_xr", d_in, d_h)?,
            w_xn: m("w_xn", d_in, d_h)?,
            w_hz: m("w_hz", d_h, d_h)?,
            w_hr: m("w_hr", d_h, d_h)?,
            w_hn: m("w_hn", d_h, d_h)?,
            b_z: m("b_z", 1, d_h)?,
            b_r: m("b_r", 1, d_h)?,
            b_n: m("b_n", 1, d_h)?,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![
            self.w_xz, self.w_xr, self.w_xn, self.w_hz, self.w_hr, self.w_hn, self.b_z, self.b_r,
            self.b_n,
        ]
    }
}

/// One GRU step:
/// `z = σ(x Wxz + h Whz + bz)`, `r = σ(x Wxr + h Whr + br)`,
/// `n = tanh(x Wxn + bn + r ⊙ (h Whn))`, `h' = n + z ⊙ (h − n)`.
pub fn gru_step(tape: &Tape, p: &Bound, g: &GruParams, x: Var, h: Var) -> Result<Var> {
    expect_cols(tape, "gru_step", x, g.d_in)?;
    expect_cols(tape, "gru_step", h, g.d_h)?;
    let z = tape.sigmoid(tape.add(tape.affine(x, p[g.w_xz], p[g.b_z])?, tape.matmul(h, p[g.w_hz])?)?)?;
    let r = tape.sigmoid(tape.add(tape.affine(x, p[g.w_xr], p[g.b_r])?, tape.matmul(h, p[g.w_hr])?)?)?;
    let hn = tape.mul(r, tape.matmul(h, p[g.w_hn])?)?;
    let n = tape.tanh(tape.add(tape.affine(x, p[g.w_xn], p[g.b_n])?, hn)?)?;
    tape.add(n, tape.mul(z, tape.sub(h, n)?)?)
}

/// Bidirectional GRU over rows of an embedding table.
#[derive(Clone, Debug)]
pub struct BiGruEncoder {
    pub forward: GruParams,
    pub backward: GruParams,
    pub embedding: ParamId,
}

/// Per-position encoder states plus the pooled summary.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `[1, 2*d_h]` per position: forward state ‖ backward state.
    pub states: Vec<Var>,
    /// `[T, 2*d_h]` matrix of the same states.
    pub matrix: Var,
    /// Final forward state ‖ final backward state.
    pub summary: Var,
}

impl BiGruEncoder {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        embedding: ParamId,
        d_in: usize,
        d_h: usize,
        scale: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            forward: GruParams::register(store, &format!("{prefix}.fwd"), d_in, d_h, scale, rng)?,
            backward: GruParams::register(store, &format!("{prefix}.bwd"), d_in, d_h, scale, rng)?,
            embedding,
        })
    }

    pub fn d_h(&self) -> usize {
        self.forward.d_h
    }

    /// Parameters owned by this encoder (the embedding table is shared, not owned).
    pub fn own_ids(&self) -> Vec<ParamId> {
        let mut ids = self.forward.ids();
        ids.extend(self.backward.ids());
        ids
    }

    pub fn encode(&self, tape: &Tape, p: &Bound, ids: &[usize]) -> Result<Encoded> {
        if ids.is_empty() {
            return Err(Error::invalid("encode: empty sequence"));
        }
        let inputs = ids
            .iter()
            .map(|&id| tape.lookup(p[self.embedding], &[id]))
            .collect::<Result<Vec<_>>>()?;
        let d_h = self.d_h();
        let mut fwd = Vec::with_capacity(ids.len());
        let mut h = tape.zeros(&[1, d_h]);
        for &x in &inputs {
            h = gru_step(tape, p, &self.forward, x, h)?;
            fwd.push(h);
        }
        let mut bwd = vec![h; ids.len()];
        let mut h = tape.zeros(&[1, d_h]);
        for (t, &x) in inputs.iter().enumerate().rev() {
            h = gru_step(tape, p, &self.backward, x, h)?;
            bwd[t] = h;
        }
        let states = fwd
            .iter()
            .zip(&bwd)
            .map(|(&f, &b)| tape.concat(&[f, b]))
            .collect::<Result<Vec<_>>>()?;
        let summary = tape.concat(&[*fwd.last().unwrap(), bwd[0]])?;
        let matrix = tape.concat_rows(&states)?;
        Ok(Encoded {
            states,
            matrix,
            summary,
        })
    }
}

/// Bilinear attention plus the attentional-state projection.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub d_h: usize,
    /// `[d_h, 2*d_h]` bilinear score matrix.
    pub w_a: ParamId,
    /// `[3*d_h, d_h]` projection of context ‖ decoder state.
    pub w_c: ParamId,
    pub b_c: ParamId,
}

impl AttentionParams {
    pub fn register(store: &mut ParamStore, prefix: &str, d_h: usize, scale: f64, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            d_h,
            w_a: store.add_uniform(format!("{prefix}.w_a"), &[d_h, 2 * d_h], scale, rng)?,
            w_c: store.add_uniform(format!("{prefix}.w_c"), &[3 * d_h, d_h], scale, rng)?,
            b_c: store.add_uniform(format!("{prefix}.b_c"), &[1, d_h], scale, rng)?,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.w_a, self.w_c, self.b_c]
    }
}

/// Context vector and attention weights over encoder rows.
///
/// `memory` is the `[T, 2*d_h]` state matrix.
pub fn attend(tape: &Tape, p: &Bound, a: &AttentionParams, dec: Var, memory: Var) -> Result<(Var, Var)> {
    expect_cols(tape, "attend", dec, a.d_h)?;
    expect_cols(tape, "attend", memory, 2 * a.d_h)?;
    let q = tape.matmul(dec, p[a.w_a])?;
    let scores = tape.matmul(q, tape.transpose(memory)?)?;
    let weights = tape.softmax(scores)?;
    let context = tape.matmul(weights, memory)?;
    Ok((context, weights))
}

/// `tanh([context ‖ dec] Wc + bc)`.
pub fn attentional_state(tape: &Tape, p: &Bound, a: &AttentionParams, context: Var, dec: Var) -> Result<Var> {
    tape.tanh(tape.affine(tape.concat(&[context, dec])?, p[a.w_c], p[a.b_c])?)
}

/// Two-layer scorer `W2 tanh(W1 v + b1) + b2`.
#[derive(Clone, Debug)]
pub struct ScorerParams {
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl ScorerParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        scale: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            d_in,
            d_hidden,
            d_out,
            w1: store.add_uniform(format!("{prefix}.w1"), &[d_in, d_hidden], scale, rng)?,
            b1: store.add_uniform(format!("{prefix}.b1"), &[1, d_hidden], scale, rng)?,
            w2: store.add_uniform(format!("{prefix}.w2"), &[d_hidden, d_out], scale, rng)?,
            b2: store.add_uniform(format!("{prefix}.b2"), &[1, d_out], scale, rng)?,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }

    fn hidden(&self, tape: &Tape, p: &Bound, v: Var) -> Result<Var> {
        expect_cols(tape, "score", v, self.d_in)?;
        tape.tanh(tape.affine(v, p[self.w1], p[self.b1])?)
    }

    /// Unnormalized logits over all `d_out` outputs.
    pub fn score(&self, tape: &Tape, p: &Bound, v: Var) -> Result<Var> {
        let h = self.hidden(tape, p, v)?;
        tape.affine(h, p[self.w2], p[self.b2])
    }

    /// Logits restricted to output columns `cols`, in that order.
    pub fn score_subset(&self, tape: &Tape, p: &Bound, v: Var, cols: &[usize]) -> Result<Var> {
        let h = self.hidden(tape, p, v)?;
        tape.affine(h, tape.gather(p[self.w2], cols)?, tape.gather(p[self.b2], cols)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tensor};

    fn store_with<F: FnOnce(&mut ParamStore, &mut Rng) -> R, R>(f: F) -> (ParamStore, R) {
        let mut store = ParamStore::new();
        let mut rng = Rng::seed_from(5);
        let r = f(&mut store, &mut rng);
        (store, r)
    }

    fn zero_all(store: &mut ParamStore) {
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().fill(0.0);
        }
    }

    #[test]
    fn zero_gru_halves_state() {
        let (mut store, g) = store_with(|s, r| GruParams::register(s, "g", 3, 4, 0.1, r).unwrap());
        zero_all(&mut store);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(Tensor::row(vec![0.3, -1.0, 2.0]));
        let h = tape.constant(Tensor::row(vec![0.2, -0.4, 0.8, 1.0]));
        let out = gru_step(&tape, &p, &g, x, h).unwrap();
        assert_eq!(tape.value(out).data(), &[0.1, -0.2, 0.4, 0.5]);
    }

    #[test]
    fn zero_state_and_candidate_stays_zero() {
        let (mut store, g) = store_with(|s, r| GruParams::register(s, "g", 2, 3, 0.5, r).unwrap());
        for id in [g.w_xn, g.w_hn, g.b_n] {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(Tensor::row(vec![1.0, -2.0]));
        let h = tape.zeros(&[1, 3]);
        let out = gru_step(&tape, &p, &g, x, h).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_rejects_bad_dims() {
        let (store, g) = store_with(|s, r| GruParams::register(s, "g", 2, 3, 0.1, r).unwrap());
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.zeros(&[1, 3]);
        let h = tape.zeros(&[1, 3]);
        assert!(gru_step(&tape, &p, &g, x, h).is_err());
    }

    #[test]
    fn single_token_state_is_summary() {
        let (store, enc) = store_with(|s, r| {
            let e = s.add_uniform("emb", &[6, 3], 0.5, r).unwrap();
            BiGruEncoder::register(s, "enc", e, 3, 4, 0.5, r).unwrap()
        });
        let tape = Tape::new();
        let p = store.bind(&tape);
        let out = enc.encode(&tape, &p, &[2]).unwrap();
        assert_eq!(out.states.len(), 1);
        assert_eq!(tape.value(out.states[0]).data(), tape.value(out.summary).data());
        assert!(enc.encode(&tape, &p, &[]).is_err());
        assert!(enc.encode(&tape, &p, &[6]).is_err());
    }

    #[test]
    fn swapping_directions_swaps_summary_halves() {
        let (mut store, enc) = store_with(|s, r| {
            let e = s.add_uniform("emb", &[6, 3], 0.5, r).unwrap();
            BiGruEncoder::register(s, "enc", e, 3, 4, 0.5, r).unwrap()
        });
        let ids = [1, 4, 2, 5];
        let rev: Vec<usize> = ids.iter().rev().copied().collect();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let a = tape.value(enc.encode(&tape, &p, &ids).unwrap().summary);

        for (f, b) in enc.forward.ids().into_iter().zip(enc.backward.ids()) {
            let (tf, tb) = (store.get(f).clone(), store.get(b).clone());
            store.set(f, tb).unwrap();
            store.set(b, tf).unwrap();
        }
        let tape = Tape::new();
        let p = store.bind(&tape);
        let b = tape.value(enc.encode(&tape, &p, &rev).unwrap().summary);
        assert_eq!(&a.data()[..4], &b.data()[4..]);
        assert_eq!(&a.data()[4..], &b.data()[..4]);
    }

    #[test]
    fn attention_singleton_and_uniform() {
        let (mut store, att) = store_with(|s, r| AttentionParams::register(s, "att", 2, 0.5, r).unwrap());
        let tape = Tape::new();
        let p = store.bind(&tape);
        let dec = tape.constant(Tensor::row(vec![0.5, -0.5]));
        let one = tape.constant(Tensor::row(vec![1.0, 2.0, 3.0, 4.0]));
        let (ctx, w) = attend(&tape, &p, &att, dec, one).unwrap();
        assert_eq!(tape.value(w).data(), &[1.0]);
        assert_eq!(tape.value(ctx).data(), &[1.0, 2.0, 3.0, 4.0]);

        store.get_mut(att.w_a).data_mut().fill(0.0);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let dec = tape.constant(Tensor::row(vec![0.5, -0.5]));
        let mem = tape.constant(Tensor::matrix(3, 4, (0..12).map(f64::from).collect()).unwrap());
        let (_, w) = attend(&tape, &p, &att, dec, mem).unwrap();
        for &x in tape.value(w).data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_scorer_gives_zero_logits_and_bias_path() {
        let (mut store, sc) = store_with(|s, r| ScorerParams::register(s, "sc", 3, 4, 5, 0.5, r).unwrap());
        let tape = Tape::new();
        let p = store.bind(&tape);
        let v = tape.zeros(&[1, 3]);
        let out = tape.value(sc.score(&tape, &p, v).unwrap());
        let b1: Vec<f64> = store.get(sc.b1).data().iter().map(|x| x.tanh()).collect();
        for j in 0..5 {
            let mut expect = store.get(sc.b2).data()[j];
            for (i, h) in b1.iter().enumerate() {
                expect += h * store.get(sc.w2).data()[i * 5 + j];
            }
            assert!((out.data()[j] - expect).abs() < 1e-14);
        }
        zero_all(&mut store);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let v = tape.constant(Tensor::row(vec![1.0, 2.0, 3.0]));
        assert!(tape.value(sc.score(&tape, &p, v).unwrap()).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn subset_scores_match_full_scores() {
        let (store, sc) = store_with(|s, r| ScorerParams::register(s, "sc", 3, 4, 6, 0.5, r).unwrap());
        let tape = Tape::new();
        let p = store.bind(&tape);
        let v = tape.constant(Tensor::row(vec![0.1, -0.7, 0.4]));
        let full = tape.value(sc.score(&tape, &p, v).unwrap());
        let sub = tape.value(sc.score_subset(&tape, &p, v, &[5, 1, 3]).unwrap());
        assert_eq!(sub.data(), &[full.data()[5], full.data()[1], full.data()[3]]);
    }

    #[test]
    fn gru_step_gradients() {
        let (store, g) = store_with(|s, r| GruParams::register(s, "g", 3, 4, 0.5, r).unwrap());
        let mut point = store.tensors();
        point.push(Tensor::row(vec![0.3, -0.2, 0.9]));
        point.push(Tensor::row(vec![0.1, 0.5, -0.3, 0.7]));
        let n = store.len();
        let err = grad_check(
            |tape, vars| {
                let p = Bound::from_vars(vars[..n].to_vec());
                let out = gru_step(tape, &p, &g, vars[n], vars[n + 1])?;
                tape.sum(out)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
