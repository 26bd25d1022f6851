use crate::error::{PdseError, Result};
use crate::params::ParamStore;
use crate::tensor::Real;

use super::config::{OptimizerConfig, OptimizerKind};

/// SGD with momentum (`v ← μv + g + λw; w ← w − lr·v`) or Adam, over the
/// trainable parameters of a store. Weight decay skips 1-D tensors.
pub struct Optimizer<T> {
    cfg: OptimizerConfig,
    m: Vec<Option<Vec<T>>>,
    v: Vec<Option<Vec<T>>>,
    step: u64,
}

impl<T: Real> Optimizer<T> {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Rate for the next step, including warmup.
    pub fn lr(&self, schedule_factor: f64) -> f64 {
        let w = self.cfg.warmup_steps as f64;
        let warm = if w > 0.0 {
            ((self.step + 1) as f64 / w).min(1.0)
        } else {
            1.0
        };
        self.cfg.lr * schedule_factor * warm
    }

    /// Global L2 norm of all trainable gradients; errors on the first
    /// non-finite gradient, naming its parameter.
    pub fn grad_norm(store: &ParamStore<T>) -> Result<f64> {
        let mut sq = 0.0;
        for (_, p) in store.iter() {
            if let (true, Some(g)) = (p.trainable, &p.grad) {
                if !g.is_finite() {
                    return Err(PdseError::Training(format!("non-finite gradient in parameter {}", p.name)));
                }
                sq += g.data().iter().map(|v| v.f64() * v.f64()).sum::<f64>();
            }
        }
        Ok(sq.sqrt())
    }

    /// Applies one update with rate `lr` and clears gradients.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        let norm = Self::grad_norm(store)?;
        let clip = match self.cfg.grad_clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        self.step += 1;
        let c = &self.cfg;
        let (b1, b2) = (c.adam_beta1, c.adam_beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (id, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let Some(grad) = p.grad.take() else { continue };
            let decay = if p.value.rank() > 1 { c.weight_decay } else { 0.0 };
            let i = id.0;
            let n = p.value.numel();
            let m = self.m[i].get_or_insert_with(|| vec![T::zero(); n]);
            match c.kind {
                OptimizerKind::Sgd => {
                    let (mu, lr_t, wd, cl) = (T::c(c.momentum), T::c(lr), T::c(decay), T::c(clip));
                    for ((w, g), v) in p.value.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()) {
                        *v = mu * *v + *g * cl + wd * *w;
                        *w = *w - lr_t * *v;
                    }
                }
                OptimizerKind::Adam => {
                    let v2 = self.v[i].get_or_insert_with(|| vec![T::zero(); n]);
                    for (((w, g), m1), s) in p
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .zip(m.iter_mut())
                        .zip(v2.iter_mut())
                    {
                        let gf = g.f64() * clip + decay * w.f64();
                        let mf = b1 * m1.f64() + (1.0 - b1) * gf;
                        let sf = b2 * s.f64() + (1.0 - b2) * gf * gf;
                        *m1 = T::c(mf);
                        *s = T::c(sf);
                        let upd = lr * (mf / bc1) / ((sf / bc2).sqrt() + c.adam_eps);
                        *w = T::c(w.f64() - upd);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn sgd_momentum_arithmetic() {
        let mut s = ParamStore::<f64>::new();
        let id = s.insert("w", Tensor::new(&[1, 1], vec![1.0]).unwrap(), true).unwrap();
        let cfg = OptimizerConfig {
            lr: 0.1,
            momentum: 0.5,
            weight_decay: 0.0,
            grad_clip: None,
            warmup_steps: 0,
            ..OptimizerConfig::default()
        };
        let mut opt = Optimizer::new(cfg);
        for _ in 0..2 {
            s.accumulate_grad(id, &Tensor::new(&[1, 1], vec![2.0]).unwrap()).unwrap();
            opt.step(&mut s, 0.1).unwrap();
        }
        // v1 = 2, w1 = 0.8; v2 = 1 + 2 = 3, w2 = 0.5
        assert!((s.get(id).value.item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_named() {
        let mut s = ParamStore::<f32>::new();
        s.insert("ok", Tensor::zeros(&[2]), true).unwrap();
        let bad = s.insert("head.cls.out.bias", Tensor::zeros(&[2]), true).unwrap();
        s.accumulate_grad(bad, &Tensor::new(&[2], vec![0.0, f32::NAN]).unwrap()).unwrap();
        let e = Optimizer::new(OptimizerConfig::default()).step(&mut s, 0.1).unwrap_err();
        assert!(e.to_string().contains("head.cls.out.bias"));
    }
}
