//! AdamW with global gradient-norm clipping.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay applied to parameters flagged `decay`.
    pub weight_decay: f64,
    /// Global L2 norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, clip_norm: Some(1.0) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    /// Global norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamW { config, m: zeros(), v: zeros(), step: 0 }
    }

    /// Updates every trainable parameter that has a gradient.
    ///
    /// `grads` is aligned with the store. A non-finite gradient aborts the step
    /// before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<StepInfo> {
        if grads.len() != store.len() {
            return Err(Error::shape(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        let mut sq = 0.0;
        for (prm, gr) in store.iter().zip(grads) {
            let Some(gr) = gr.as_ref().filter(|_| prm.trainable) else { continue };
            if gr.shape() != prm.value.shape() {
                return Err(Error::shape(format!("gradient {:?} for {} {:?}", gr.shape(), prm.name, prm.value.shape())));
            }
            if !gr.is_finite() {
                return Err(Error::Numerical(format!("non-finite gradient for {}", prm.name)));
            }
            sq += gr.sq_norm_f64();
        }
        let grad_norm = sq.sqrt();
        let scale = match self.config.clip_norm {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };

        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2, eps) = (T::c(c.beta1), T::c(c.beta2), T::c(c.eps));
        let (scale, lr_t) = (T::c(scale), T::c(lr));
        let (inv_bc1, inv_bc2) = (T::c(1.0 / bc1), T::c(1.0 / bc2));
        let shrink = T::c(1.0 - lr * c.weight_decay);

        for (i, (prm, gr)) in store.iter_mut().zip(grads).enumerate() {
            let Some(gr) = gr.as_ref().filter(|_| prm.trainable) else { continue };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let decay = prm.decay && c.weight_decay != 0.0;
            for (((w, &g), m), v) in prm.value.data_mut().iter_mut().zip(gr.data()).zip(m).zip(v) {
                let g = g * scale;
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mhat = *m * inv_bc1;
                let vhat = *v * inv_bc2;
                if decay {
                    *w *= shrink;
                }
                *w -= lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(StepInfo { grad_norm, clipped: scale < T::one() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64], decay: bool) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", "g", Tensor::from_f64(vec![values.len()], values).unwrap(), decay);
        s.set_all_trainable(true);
        s
    }

    fn no_clip() -> AdamConfig {
        AdamConfig { clip_norm: None, weight_decay: 0.0, ..Default::default() }
    }

    #[test]
    fn zero_grad_leaves_params() {
        let mut s = store(&[1.0, -2.0], false);
        let mut opt = AdamW::new(&s, no_clip());
        opt.step(&mut s, &[Some(Tensor::zeros(&[2]))], 1e-3).unwrap();
        assert_eq!(s.iter().next().unwrap().value.data(), &[1.0, -2.0]);
    }

    #[test]
    fn moments_decay_under_zero_grad() {
        let mut s = store(&[1.0], false);
        let mut opt = AdamW::new(&s, no_clip());
        opt.step(&mut s, &[Some(Tensor::from_f64(vec![1], &[1.0]).unwrap())], 1e-3).unwrap();
        let (m1, v1) = (opt.m[0].data()[0], opt.v[0].data()[0]);
        opt.step(&mut s, &[Some(Tensor::zeros(&[1]))], 1e-3).unwrap();
        assert!((opt.m[0].data()[0] - 0.9 * m1).abs() < 1e-15);
        assert!((opt.v[0].data()[0] - 0.999 * v1).abs() < 1e-15);
    }

    #[test]
    fn first_step_matches_scalar_oracle() {
        for g in [0.3, -2.5, 1e-3] {
            let mut s = store(&[0.7], false);
            let mut opt = AdamW::new(&s, no_clip());
            let lr = 1e-2;
            opt.step(&mut s, &[Some(Tensor::from_f64(vec![1], &[g]).unwrap())], lr).unwrap();
            let expect = 0.7 - lr * g / (g.abs() + 1e-8);
            assert!((s.iter().next().unwrap().value.data()[0] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn decoupled_weight_decay() {
        let mut s = store(&[2.0], true);
        let mut opt = AdamW::new(&s, AdamConfig { clip_norm: None, ..Default::default() });
        opt.step(&mut s, &[Some(Tensor::zeros(&[1]))], 0.1).unwrap();
        assert!((s.iter().next().unwrap().value.data()[0] - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut s = store(&[0.0, 0.0], false);
        let mut opt = AdamW::new(&s, AdamConfig { weight_decay: 0.0, ..Default::default() });
        let info = opt.step(&mut s, &[Some(Tensor::from_f64(vec![2], &[3.0, 4.0]).unwrap())], 1e-3).unwrap();
        assert_eq!(info.grad_norm, 5.0);
        assert!(info.clipped);
        // m after one step holds (1 − β1)·clipped gradient
        assert!((opt.m[0].data()[0] - 0.1 * 0.6).abs() < 1e-15);
    }

    #[test]
    fn non_finite_grad_aborts_without_change() {
        let mut s = store(&[1.0, 1.0], false);
        let mut opt = AdamW::new(&s, no_clip());
        let r = opt.step(&mut s, &[Some(Tensor::from_f64(vec![2], &[0.1, f64::NAN]).unwrap())], 1e-3);
        assert!(matches!(r, Err(Error::Numerical(_))));
        assert_eq!(s.iter().next().unwrap().value.data(), &[1.0, 1.0]);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn frozen_and_missing_grads_are_skipped() {
        let mut s = store(&[1.0], false);
        s.add("b", "h", Tensor::from_f64(vec![1], &[5.0]).unwrap(), false);
        s.set_trainable_groups(&["g".to_string()]).unwrap();
        let mut opt = AdamW::new(&s, no_clip());
        let g = || Some(Tensor::from_f64(vec![1], &[1.0]).unwrap());
        opt.step(&mut s, &[None, g()], 1e-2).unwrap();
        let vals: Vec<f64> = s.iter().map(|p| p.value.data()[0]).collect();
        assert_eq!(vals, vec![1.0, 5.0]);
    }

    #[test]
    fn replay_is_identical() {
        let run = || {
            let mut s = store(&[0.5, -0.5, 1.5], true);
            let mut opt = AdamW::new(&s, AdamConfig::default());
            for k in 0..20 {
                let g: Vec<f64> = (0..3).map(|i| ((k * 3 + i) as f64 * 0.7).sin()).collect();
                opt.step(&mut s, &[Some(Tensor::from_f64(vec![3], &g).unwrap())], 1e-2).unwrap();
            }
            let w = s.iter().next().unwrap().value.clone();
            w
        };
        assert_eq!(run(), run());
    }
}
