use indexmap::IndexMap;

use super::{Grads, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip, if any.
    pub clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip: None }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// One bias-corrected Adam update of a single tensor, in place.
///
/// `t` is the 1-based step count.
pub fn adam_step<F: Real>(
    param: &mut Tensor<F>,
    grad: &Tensor<F>,
    m: &mut Tensor<F>,
    v: &mut Tensor<F>,
    cfg: &AdamConfig,
    t: u64,
) {
    debug_assert!(t >= 1);
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    let (fb1, fb2) = (F::from_f64c(b1), F::from_f64c(b2));
    let (one, lr, eps) = (F::one(), F::from_f64c(cfg.lr), F::from_f64c(cfg.eps));
    let (fc1, fc2) = (F::from_f64c(c1), F::from_f64c(c2));
    for (((p, &g), mi), vi) in param.data_mut().iter_mut().zip(grad.data()).zip(m.data_mut()).zip(v.data_mut()) {
        *mi = fb1 * *mi + (one - fb1) * g;
        *vi = fb2 * *vi + (one - fb2) * g * g;
        let mh = *mi / fc1;
        let vh = *vi / fc2;
        *p = *p - lr * mh / (vh.sqrt() + eps);
    }
}

/// Adam over a whole [`ParamStore`], keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub cfg: AdamConfig,
    t: u64,
    moments: IndexMap<String, (Tensor<F>, Tensor<F>)>,
}

impl<F: Real> Adam<F> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, t: 0, moments: IndexMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Apply `grads` to the trainable parameters of `store` they name.
    /// Frozen parameters are never touched.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &Grads<F>) -> Result<()> {
        self.t += 1;
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(Error::Training {
                    step: self.t as usize,
                    msg: format!("non-finite gradient in {name}"),
                });
            }
        }
        let scale = match self.cfg.clip {
            Some(c) => {
                let norm = grads
                    .values()
                    .flat_map(|g| g.data().iter().map(|v| v.as_f64() * v.as_f64()))
                    .sum::<f64>()
                    .sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        for (name, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            let g = if scale != 1.0 { g.map(|v| v * F::from_f64c(scale)) } else { g.clone() };
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())));
            adam_step(&mut p.value, &g, m, v, &self.cfg, self.t);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_leaves_param() {
        let mut p = Tensor::<f64>::from_f64(&[2], &[1.0, -2.0]).unwrap();
        let g = Tensor::zeros(&[2]);
        let (mut m, mut v) = (Tensor::zeros(&[2]), Tensor::zeros(&[2]));
        adam_step(&mut p, &g, &mut m, &mut v, &AdamConfig::with_lr(0.1), 1);
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_hand_recurrence() {
        // m̂ = 1, v̂ = 1 after bias correction → p = 1 - 0.1 · 1/(1 + 1e-8)
        let mut p = Tensor::<f64>::scalar(1.0);
        let g = Tensor::scalar(1.0);
        let (mut m, mut v) = (Tensor::zeros(&[1]), Tensor::zeros(&[1]));
        adam_step(&mut p, &g, &mut m, &mut v, &AdamConfig::with_lr(0.1), 1);
        assert!((p.data()[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn non_finite_grad_names_layer() {
        let mut store = ParamStore::<f64>::new();
        store.insert("enc.w", Tensor::scalar(1.0)).unwrap();
        let mut grads = Grads::new();
        grads.insert("enc.w".into(), Tensor::scalar(f64::NAN));
        let mut adam = Adam::new(AdamConfig::default());
        match adam.step(&mut store, &grads) {
            Err(Error::Training { msg, .. }) => assert!(msg.contains("enc.w")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn repeated_runs_bitwise_identical() {
        let run = || {
            let mut store = ParamStore::<f32>::new();
            store.insert("w", Tensor::from_f64(&[3], &[0.3, -0.1, 2.0]).unwrap()).unwrap();
            let mut adam = Adam::new(AdamConfig::with_lr(0.01));
            for i in 0..10 {
                let mut grads = Grads::new();
                grads.insert("w".into(), Tensor::from_f64(&[3], &[0.1 * i as f64, -0.5, 1.0]).unwrap());
                adam.step(&mut store, &grads).unwrap();
            }
            store.get("w").unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn frozen_params_untouched() {
        let mut store = ParamStore::<f64>::new();
        store.insert("a", Tensor::scalar(1.0)).unwrap();
        store.insert("b", Tensor::scalar(1.0)).unwrap();
        store.set_trainable_where(|n| n == "a", false);
        let mut grads = Grads::new();
        grads.insert("a".into(), Tensor::scalar(1.0));
        grads.insert("b".into(), Tensor::scalar(1.0));
        Adam::new(AdamConfig::with_lr(0.1)).step(&mut store, &grads).unwrap();
        assert_eq!(store.get("a").unwrap().data()[0], 1.0);
        assert!(store.get("b").unwrap().data()[0] < 1.0);
    }
}
