//! AdamW with a linear learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::checkpoint::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to rank-2 parameters only (embeddings and
    /// weight matrices; biases and layer-norm gains are exempt).
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Optimizer state. Step `t` (0-based) uses `lr · (1 - t / total_steps)`,
/// so the rate falls linearly from the peak toward 0.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub total_steps: usize,
    step: usize,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, total_steps: usize) -> Self {
        AdamW {
            config,
            total_steps: total_steps.max(1),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        let frac = self.step as f64 / self.total_steps as f64;
        self.config.lr * (1.0 - frac).max(0.0)
    }

    /// Applies one update. `grads[i]` belongs to parameter `i` of `store`;
    /// `None` means the loss did not reach it (treated as a zero gradient).
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<&[T]>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Config(format!(
                "optimizer got {} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.len() != store.value(i).numel() {
                    return Err(Error::Config(format!(
                        "gradient length {} for parameter `{}` of size {}",
                        g.len(),
                        store.name(i),
                        store.value(i).numel()
                    )));
                }
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteGradient(store.name(i).to_string()));
                }
            }
        }
        if self.m.len() != store.len() {
            self.m = (0..store.len()).map(|i| vec![T::zero(); store.value(i).numel()]).collect();
            self.v = self.m.clone();
        }
        let c = &self.config;
        let lr = T::lit(self.current_lr());
        let t = (self.step + 1) as i32;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let eps = T::lit(c.eps);
        for i in 0..store.len() {
            let decay = if store.value(i).rank() == 2 { T::lit(c.weight_decay) } else { T::zero() };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.value_mut(i).data_mut();
            for e in 0..p.len() {
                let g = grads[i].map_or(T::zero(), |g| g[e]);
                m[e] = b1 * m[e] + (T::one() - b1) * g;
                v[e] = b2 * v[e] + (T::one() - b2) * g * g;
                let mhat = m[e] / bc1;
                let denom = (v[e] / bc2).sqrt() + eps;
                let adam = if denom > T::zero() { mhat / denom } else { T::zero() };
                p[e] -= lr * (adam + decay * p[e]);
            }
        }
        self.step += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(vals: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("x", Tensor::vector(vals.to_vec()));
        s
    }

    #[test]
    fn zero_grad_leaves_params() {
        let mut s = store(&[1.0, -2.0]);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg, 10);
        opt.step(&mut s, &[Some(&[0.0, 0.0])]).unwrap();
        assert_eq!(s.value(0).data(), &[1.0, -2.0]);
    }

    #[test]
    fn reduces_to_sgd() {
        let mut s = store(&[1.0]);
        let cfg = AdamWConfig { lr: 0.1, beta1: 0.0, beta2: 0.0, eps: 0.0, weight_decay: 0.0 };
        let mut opt = AdamW::new(cfg, 1);
        opt.step(&mut s, &[Some(&[1.0])]).unwrap();
        assert!((s.value(0).data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn quadratic_descends_monotonically() {
        let mut s = store(&[3.0, -1.5, 0.7]);
        let mut opt = AdamW::new(AdamWConfig { lr: 0.05, ..Default::default() }, 10);
        let loss = |p: &[f64]| p.iter().map(|x| x * x).sum::<f64>();
        let mut prev = loss(s.value(0).data());
        for _ in 0..10 {
            let g: Vec<f64> = s.value(0).data().iter().map(|x| 2.0 * x).collect();
            opt.step(&mut s, &[Some(&g)]).unwrap();
            let l = loss(s.value(0).data());
            assert!(l < prev, "{l} !< {prev}");
            prev = l;
        }
    }

    #[test]
    fn nan_aborts_without_update() {
        let mut s = store(&[1.0]);
        let mut opt = AdamW::new(AdamWConfig::default(), 5);
        let err = opt.step(&mut s, &[Some(&[f64::NAN])]).unwrap_err();
        assert!(err.to_string().contains("`x`"));
        assert_eq!(s.value(0).data(), &[1.0]);
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn lr_decays_linearly() {
        let mut s = store(&[0.0]);
        let mut opt = AdamW::new(AdamWConfig { lr: 1.0, ..Default::default() }, 4);
        let mut lrs = vec![];
        for _ in 0..4 {
            lrs.push(opt.current_lr());
            opt.step(&mut s, &[None]).unwrap();
        }
        assert_eq!(lrs, vec![1.0, 0.75, 0.5, 0.25]);
        assert_eq!(opt.current_lr(), 0.0);
    }
}
