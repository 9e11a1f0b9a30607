use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::diff::params::ParamStore;
use crate::diff::tape::Gradients;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Cosine annealing from `base_lr` to `min_lr` over `total_epochs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub total_epochs: usize,
}

impl CosineSchedule {
    pub fn new(base_lr: f64, total_epochs: usize) -> Self {
        CosineSchedule {
            base_lr,
            min_lr: 0.0,
            total_epochs,
        }
    }

    /// Rate used during `epoch` (0-based); reaches `min_lr` at `epoch == total_epochs`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.total_epochs == 0 {
            return self.base_lr;
        }
        let t = (epoch.min(self.total_epochs) as f64) / self.total_epochs as f64;
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates, one pair per parameter (empty for frozen parameters).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T> {
    pub step: u64,
    pub m: Vec<Array2<T>>,
    pub v: Vec<Array2<T>>,
}

impl<T: Real> AdamWState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = |id| Array2::zeros(store.get(id).value.dim());
        AdamWState {
            step: 0,
            m: store.ids().map(zeros).collect(),
            v: store.ids().map(zeros).collect(),
        }
    }
}

/// Adam with decoupled weight decay: `p ← p − lr·wd·p − lr·m̂ / (√v̂ + ε)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub state: AdamWState<T>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        AdamW {
            config,
            state: AdamWState::new(store),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        if self.state.m.len() != store.len() || grads.grads.len() != store.len() {
            return Err(Error::shape(
                "optimizer_step",
                format!("{} parameters", store.len()),
                format!("{} moments / {} gradients", self.state.m.len(), grads.grads.len()),
            ));
        }
        if !grads.is_finite() {
            return Err(Error::NonFiniteValue {
                op: "optimizer_step".into(),
            });
        }
        self.state.step += 1;
        let cfg = self.config;
        let t = self.state.step as i32;
        let bc1 = T::c(1.0 - cfg.beta1.powi(t));
        let bc2 = T::c(1.0 - cfg.beta2.powi(t));
        let (b1, b2) = (T::c(cfg.beta1), T::c(cfg.beta2));
        let (lr_t, decay, eps) = (T::c(lr), T::c(1.0 - lr * cfg.weight_decay), T::c(cfg.eps));
        for id in store.ids() {
            let i = id.index();
            let p = store.get_mut(id);
            if !p.requires_grad {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            if g.dim() != p.value.dim() {
                return Err(Error::shape(
                    "optimizer_step",
                    format!("{:?}", p.value.dim()),
                    format!("{:?}", g.dim()),
                ));
            }
            let m = &mut self.state.m[i];
            let v = &mut self.state.v[i];
            ndarray::Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p = *p * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn scalar_store(w: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", array![[w]]);
        s
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut store = scalar_store(0.7);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        let g = Gradients::zeros_like(&store);
        for _ in 0..3 {
            opt.step(&mut store, &g, 1e-2).unwrap();
        }
        assert_eq!(store.get(store.id("w").unwrap()).value[[0, 0]], 0.7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = scalar_store(1.0);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        let mut g = Gradients::zeros_like(&store);
        g.grads[0] = Some(array![[1.0]]);
        opt.step(&mut store, &g, 1e-2).unwrap();
        let expected = 1.0 - 1e-2 / (1.0 + 1e-8);
        assert!((store.get(store.id("w").unwrap()).value[[0, 0]] - expected).abs() < 1e-15);
    }

    #[test]
    fn cosine_endpoints() {
        let s = CosineSchedule::new(1e-2, 60);
        assert_eq!(s.lr_at(0), 1e-2);
        assert!(s.lr_at(60).abs() < 1e-15);
        assert!((s.lr_at(30) - 5e-3).abs() < 1e-15);
        assert!(s.lr_at(59) < 1e-5);
    }

    #[test]
    fn rejects_mismatched_gradients() {
        let mut store = scalar_store(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        let mut g = Gradients::zeros_like(&store);
        g.grads[0] = Some(array![[1.0, 2.0]]);
        assert!(matches!(
            opt.step(&mut store, &g, 1e-2),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
