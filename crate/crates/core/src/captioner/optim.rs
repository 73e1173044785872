//! AdamW with linear warm-up followed by cosine decay.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_start_lr: f64,
    pub warmup_steps: u64,
    pub min_lr: f64,
    pub total_steps: u64,
}

impl LrSchedule {
    /// Learning rate for zero-based step `t`.
    pub fn lr_at(&self, t: u64) -> f64 {
        if t < self.warmup_steps {
            let frac = t as f64 / self.warmup_steps as f64;
            return self.warmup_start_lr + (self.peak_lr - self.warmup_start_lr) * frac;
        }
        let decay_steps = self.total_steps.saturating_sub(self.warmup_steps);
        if decay_steps == 0 {
            return self.peak_lr;
        }
        let progress = ((t - self.warmup_steps) as f64 / decay_steps as f64).min(1.0);
        self.min_lr + 0.5 * (self.peak_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Moment buffers for one named parameter group, flattened over the
/// group's tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupState {
    pub name: String,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    /// Number of updates applied so far.
    pub step: u64,
    pub groups: Vec<GroupState>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, groups: &[(&str, usize)]) -> Self {
        Self {
            cfg,
            step: 0,
            groups: groups
                .iter()
                .map(|&(name, n)| GroupState {
                    name: name.to_owned(),
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                })
                .collect(),
        }
    }

    pub fn group_names(&self) -> Vec<&str> {
        self.groups.iter().map(|g| g.name.as_str()).collect()
    }

    /// One update. `params[g]` and `grads[g]` hold the tensors of group `g`
    /// as slices. With `lr == 0` parameters are left bit-identical.
    pub fn update(&mut self, lr: f64, params: &mut [Vec<&mut [f64]>], grads: &[Vec<&[f64]>]) {
        assert_eq!(params.len(), self.groups.len(), "parameter group count");
        self.step += 1;
        let t = self.step as i32;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for ((state, ps), gs) in self.groups.iter_mut().zip(params.iter_mut()).zip(grads) {
            let mut off = 0;
            for (p, g) in ps.iter_mut().zip(gs) {
                for (i, (p, &g)) in p.iter_mut().zip(g.iter()).enumerate() {
                    let m = &mut state.m[off + i];
                    let v = &mut state.v[off + i];
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    if lr != 0.0 {
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        *p -= lr * weight_decay * *p;
                        *p -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
                off += g.len();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> LrSchedule {
        LrSchedule {
            peak_lr: 1e-4,
            warmup_start_lr: 1e-6,
            warmup_steps: 5000,
            min_lr: 0.0,
            total_steps: 20_000,
        }
    }

    #[test]
    fn warmup_then_cosine() {
        let s = sched();
        assert_eq!(s.lr_at(0), 1e-6);
        assert!((s.lr_at(2500) - (1e-6 + 0.5 * (1e-4 - 1e-6))).abs() < 1e-18);
        assert!((s.lr_at(5000) - 1e-4).abs() < 1e-18);
        assert!((s.lr_at(12_500) - 0.5e-4).abs() < 1e-15);
        assert!(s.lr_at(20_000).abs() < 1e-18);
        assert!(s.lr_at(50_000).abs() < 1e-18);
        let mut prev = f64::INFINITY;
        for t in (5000..20_000).step_by(100) {
            let lr = s.lr_at(t);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn matches_reference_update() {
        // one scalar tracked by hand through two steps
        let cfg = AdamWConfig {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.05,
        };
        let mut opt = AdamW::new(cfg, &[("x", 1)]);
        let mut x = [1.0f64];
        let (mut m, mut v, mut want) = (0.0f64, 0.0f64, 1.0f64);
        for (t, g) in [(1, 0.5f64), (2, -0.25)] {
            opt.update(0.1, &mut [vec![&mut x[..]]], &[vec![&[g][..]]]);
            m = 0.9 * m + 0.1 * g;
            v = 0.99 * v + 0.01 * g * g;
            want -= 0.1 * 0.05 * want;
            want -= 0.1 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.99f64.powi(t))).sqrt() + 1e-8);
            assert!((x[0] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let cfg = AdamWConfig {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.05,
        };
        let mut opt = AdamW::new(cfg, &[("a", 3)]);
        let mut p = [-0.0, 1.5, -2.0];
        let before: Vec<u64> = p.iter().map(|v: &f64| v.to_bits()).collect();
        opt.update(0.0, &mut [vec![&mut p[..]]], &[vec![&[1.0, 2.0, 3.0][..]]]);
        let after: Vec<u64> = p.iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
        assert_eq!(opt.step, 1);
    }
}
