//! Learning-rate schedule and AdamW.

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::autograd::{Gradients, ParamStore, Tensor};

/// Linear warmup from 0 to `base_lr` over `warmup_steps`, then cosine decay
/// to 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> Result<f64, TrainError> {
    if step > total_steps || warmup_steps > total_steps || total_steps == 0 {
        return Err(TrainError::Schedule {
            step,
            total: total_steps,
            warmup: warmup_steps,
        });
    }
    if step < warmup_steps {
        return Ok(base_lr * step as f64 / warmup_steps as f64);
    }
    if total_steps == warmup_steps {
        return Ok(base_lr);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok((base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())).max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.rows, t.cols)).collect();
        Self { cfg, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.t += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let g = grads.get(id);
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = store.get_mut(id);
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * gi;
                v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * gi * gi;
                let mhat = m.data[i] / c1;
                let vhat = v.data[i] / c2;
                p.data[i] -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * p.data[i]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_landmarks() {
        let base = 1e-4;
        assert_eq!(lr_at(0, 300, 100, base).unwrap(), 0.0);
        assert!((lr_at(100, 300, 100, base).unwrap() - base).abs() < 1e-12);
        assert!((lr_at(200, 300, 100, base).unwrap() - 0.5 * base).abs() < 1e-12);
        assert!(lr_at(300, 300, 100, base).unwrap().abs() < 1e-12);
        assert!((lr_at(50, 300, 100, base).unwrap() - 0.5 * base).abs() < 1e-15);
        assert!(lr_at(301, 300, 100, base).is_err());
        assert!(lr_at(0, 10, 11, base).is_err());
    }

    #[test]
    fn schedule_is_unimodal() {
        let lrs: Vec<f64> = (0..=90).map(|s| lr_at(s, 90, 30, 1e-3).unwrap()).collect();
        let peak = lrs.iter().cloned().fold(0.0, f64::max);
        let at = lrs.iter().position(|&v| v == peak).unwrap();
        assert_eq!(at, 30);
        assert!(lrs[..=at].windows(2).all(|w| w[0] <= w[1]));
        assert!(lrs[at..].windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn first_adamw_step_moves_by_lr() {
        let mut s = ParamStore::new();
        let id = s.insert("p", Tensor::from_vec(1, 2, vec![1.0, -2.0]));
        let mut g = Gradients::zeros_like(&s);
        g.grads[0] = Tensor::from_vec(1, 2, vec![0.5, -3.0]);
        let mut opt = AdamW::new(&s, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        opt.step(&mut s, &g, 0.1);
        // bias-corrected m/sqrt(v) = sign(g) on the first step
        let p = s.get(id);
        assert!((p.data[0] - 0.9).abs() < 1e-6 && (p.data[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut s = ParamStore::new();
        let id = s.insert("p", Tensor::from_vec(1, 1, vec![2.0]));
        let g = Gradients::zeros_like(&s);
        let mut opt = AdamW::new(&s, AdamWConfig { weight_decay: 0.1, ..Default::default() });
        opt.step(&mut s, &g, 0.5);
        assert!((s.get(id).data[0] - (2.0 - 0.5 * 0.1 * 2.0)).abs() < 1e-12);
    }
}
