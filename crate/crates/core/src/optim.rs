//! Adam with bias correction and global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Gradients;

/// Gradient buffer per parameter, `None` where the loss did not reach it.
pub type ParamGrads = Vec<Option<Vec<f64>>>;

/// Pulls every parameter's gradient out of a backward pass.
pub fn collect_grads(grads: &Gradients, bound: &Bound) -> ParamGrads {
    bound.vars().iter().map(|&v| grads.raw(v).map(<[f64]>::to_vec)).collect()
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut ParamGrads, max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// Adam moments for every parameter of a store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
        }
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Parameters without a gradient, or outside `only` when it
    /// is given, are left untouched along with their moments.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, only: Option<&[ParamId]>) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::invalid(format!(
                "adam: {} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        let mut selected = vec![only.is_none(); store.len()];
        for id in only.unwrap_or(&[]) {
            selected[id.0] = true;
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if !selected[i] {
                continue;
            }
            let param = store.get_mut(ParamId(i));
            if g.len() != param.len() {
                return Err(Error::shape("adam_step", param.shape(), &[g.len()]));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in param.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(w)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut s = scalar_store(1.5);
        let mut adam = Adam::new(&s, 0.1).unwrap();
        for _ in 0..10 {
            adam.step(&mut s, &vec![Some(vec![0.0])], None).unwrap();
        }
        assert_eq!(s.get(ParamId(0)).item(), 1.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(0.0);
        let mut adam = Adam::new(&s, 0.01).unwrap();
        adam.step(&mut s, &vec![Some(vec![1.0])], None).unwrap();
        let expect = -0.01 / (1.0 + 1e-8);
        assert!((s.get(ParamId(0)).item() - expect).abs() < 1e-18);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn mismatched_gradients_rejected() {
        let mut s = scalar_store(0.0);
        let mut adam = Adam::new(&s, 0.01).unwrap();
        assert!(adam.step(&mut s, &vec![Some(vec![1.0, 2.0])], None).is_err());
        assert!(adam.step(&mut s, &vec![], None).is_err());
        assert!(Adam::new(&s, 0.0).is_err());
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g: ParamGrads = vec![Some(vec![3.0]), None, Some(vec![4.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].as_ref().unwrap()[0] - 0.6).abs() < 1e-15);
        assert!((g[2].as_ref().unwrap()[0] - 0.8).abs() < 1e-15);
    }
}
