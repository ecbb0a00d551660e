use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Float, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.001,
        }
    }
}

/// Adam with decoupled weight decay.
///
/// Decay is skipped for parameters with fewer than two axes (biases, norm
/// gains and offsets, single learned vectors).
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub hyper: AdamHyper,
    pub step: u64,
    pub m: BTreeMap<String, Vec<T>>,
    pub v: BTreeMap<String, Vec<T>>,
}

pub fn decays(tensor_ndim: usize) -> bool {
    tensor_ndim >= 2
}

impl<T: Float> AdamState<T> {
    pub fn new(hyper: AdamHyper) -> Self {
        Self {
            hyper,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update at the configured learning rate.
    pub fn update(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
    ) -> Result<()> {
        let lr = self.hyper.lr;
        self.update_with_lr(params, grads, lr)
    }

    /// One update at an explicit (scheduled) learning rate. Parameters with no
    /// gradient entry are left untouched.
    pub fn update_with_lr(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(Error::NanGradient { param: name.clone() });
            }
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::Dimension {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let h = self.hyper;
        let t = self.step as i32;
        let bc1 = 1.0 - h.beta1.powi(t);
        let bc2 = 1.0 - h.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let decay = decays(p.ndim()) && h.weight_decay != 0.0;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![T::zero(); g.numel()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![T::zero(); g.numel()]);
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi.as_f64();
                let mn = h.beta1 * mi.as_f64() + (1.0 - h.beta1) * gi;
                let vn = h.beta2 * vi.as_f64() + (1.0 - h.beta2) * gi * gi;
                *mi = T::of(mn);
                *vi = T::of(vn);
                let mut x = pi.as_f64();
                if decay {
                    x -= lr * h.weight_decay * x;
                }
                x -= lr * (mn / bc1) / ((vn / bc2).sqrt() + h.eps);
                *pi = T::of(x);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(shape: &[usize], v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::full(shape, v)).unwrap();
        s
    }

    fn grads(shape: &[usize], g: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("w".to_string(), Tensor::full(shape, g))])
    }

    fn no_decay() -> AdamHyper {
        AdamHyper {
            weight_decay: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = store(&[2, 2], 0.3);
        let mut st = AdamState::new(no_decay());
        st.update(&mut p, &grads(&[2, 2], 0.0)).unwrap();
        assert!(p.get("w").unwrap().data().iter().all(|&x| x == 0.3));
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = store(&[3], 1.0);
        let mut st = AdamState::new(no_decay());
        st.update(&mut p, &grads(&[3], 1.0)).unwrap();
        // m̂ = 1, v̂ = 1 ⇒ Δ = −lr·1/(1 + eps)
        for &x in p.get("w").unwrap().data() {
            assert!((x - (1.0 - 1e-5)).abs() < 1e-12);
        }
    }

    #[test]
    fn two_steps_match_scalar_reference() {
        let hyper = AdamHyper {
            lr: 1e-2,
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut p = store(&[2, 3], 0.5);
        let mut st = AdamState::new(hyper);
        for _ in 0..2 {
            st.update(&mut p, &grads(&[2, 3], 0.25)).unwrap();
        }

        let (mut x, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            let g = 0.25;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mhat = m / (1.0 - 0.9f64.powi(t));
            let vhat = v / (1.0 - 0.999f64.powi(t));
            x *= 1.0 - 1e-2 * 0.1;
            x -= 1e-2 * mhat / (vhat.sqrt() + 1e-8);
        }
        for &y in p.get("w").unwrap().data() {
            assert!((y - x).abs() < 1e-12, "{y} vs {x}");
        }
    }

    #[test]
    fn biases_are_not_decayed() {
        let mut p = store(&[4], 2.0);
        let mut st = AdamState::new(AdamHyper {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        });
        st.update(&mut p, &grads(&[4], 0.0)).unwrap();
        assert!(p.get("w").unwrap().data().iter().all(|&x| x == 2.0));
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut p = store(&[2], 1.0);
        let mut st = AdamState::new(no_decay());
        let err = st.update(&mut p, &grads(&[2], f64::NAN)).unwrap_err();
        assert!(matches!(err, Error::NanGradient { ref param } if param == "w"));
        assert_eq!(st.step, 0);
    }
}
