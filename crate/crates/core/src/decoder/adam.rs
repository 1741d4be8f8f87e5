use serde::{Deserialize, Serialize};

use crate::{Error, Real, Result};

/// `lr(t) = initial * (final / initial)^(t / total_steps)`, held at `final`
/// after `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpDecay {
    pub initial: f64,
    pub final_lr: f64,
    pub total_steps: u64,
}

impl ExpDecay {
    pub fn constant(lr: f64) -> Self {
        Self {
            initial: lr,
            final_lr: lr,
            total_steps: 1,
        }
    }

    pub fn at(&self, step: u64) -> f64 {
        let frac = (step as f64 / self.total_steps.max(1) as f64).min(1.0);
        self.initial * (self.final_lr / self.initial).powf(frac)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: ExpDecay,
}

impl AdamConfig {
    pub fn new(schedule: ExpDecay) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-15,
            schedule,
        }
    }
}

/// Outcome of one optimizer step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamReport {
    pub lr: f64,
    /// Tensors whose gradient held a non-finite value and were left untouched.
    pub skipped: Vec<usize>,
}

/// Adam with bias correction over a list of tensors.
#[derive(Clone, Debug)]
pub struct AdamState<S> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Real> AdamState<S> {
    pub fn new(config: AdamConfig, shapes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            m: shapes.iter().map(|&n| vec![S::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![S::zero(); n]).collect(),
        }
    }

    pub fn first_moment(&self, tensor: usize) -> &[S] {
        &self.m[tensor]
    }

    pub fn second_moment(&self, tensor: usize) -> &[S] {
        &self.v[tensor]
    }

    /// Applies one update. `grads` are gradients of the loss multiplied by
    /// `loss_scale`; they are unscaled before the moment update.
    pub fn step(&mut self, params: &mut [&mut [S]], grads: &[&[S]], loss_scale: f64) -> Result<AdamReport> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::domain("optimizer tensor count mismatch"));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::domain(format!("tensor {i} is not congruent with its state")));
            }
        }
        let cfg = self.config;
        let lr = cfg.schedule.at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let b1 = S::lit(cfg.beta1);
        let b2 = S::lit(cfg.beta2);
        let one = S::one();
        let inv_scale = S::lit(1.0 / loss_scale);
        let step_size = S::lit(lr / bc1);
        let inv_sqrt_bc2 = S::lit(1.0 / bc2.sqrt());
        let eps = S::lit(cfg.eps);
        let mut report = AdamReport {
            lr,
            skipped: Vec::new(),
        };
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if g.iter().any(|v| !v.is_finite()) {
                report.skipped.push(i);
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g[j] * inv_scale;
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                p[j] -= step_size * m[j] / (v[j].sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(lr: f64) -> AdamConfig {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-12,
            schedule: ExpDecay::constant(lr),
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut opt = AdamState::<f64>::new(config(0.1), &[1]);
        let mut p = [2.0];
        opt.step(&mut [&mut p], &[&[1.0]], 1.0).unwrap();
        assert!((p[0] - 1.9).abs() < 1e-10);
    }

    #[test]
    fn zero_grads_keep_params_and_decay_moments() {
        let mut opt = AdamState::<f64>::new(config(0.1), &[2]);
        let mut p = [1.0, -1.0];
        opt.step(&mut [&mut p], &[&[0.0, 0.0]], 1.0).unwrap();
        assert_eq!(p, [1.0, -1.0]);
        opt.step(&mut [&mut p], &[&[1.0, 1.0]], 1.0).unwrap();
        let m = opt.first_moment(0)[0];
        let v = opt.second_moment(0)[0];
        opt.step(&mut [&mut p], &[&[0.0, 0.0]], 1.0).unwrap();
        assert!((opt.first_moment(0)[0] - 0.9 * m).abs() < 1e-15);
        assert!((opt.second_moment(0)[0] - 0.999 * v).abs() < 1e-15);
    }

    #[test]
    fn loss_scale_cancels() {
        let grads = [[0.3, -0.02, 5.0], [1e-3, 0.0, -7.0]];
        let run = |scale: f64| {
            let mut opt = AdamState::<f64>::new(config(0.05), &[3]);
            let mut p = [0.1, 0.2, 0.3];
            for g in &grads {
                let scaled: Vec<f64> = g.iter().map(|v| v * scale).collect();
                opt.step(&mut [&mut p], &[&scaled], scale).unwrap();
            }
            p
        };
        let a = run(1.0);
        let b = run(1024.0);
        for i in 0..3 {
            assert!((a[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_tensor_is_skipped() {
        let mut opt = AdamState::<f32>::new(AdamConfig::new(ExpDecay::constant(0.1)), &[1, 1]);
        let mut a = [1.0f32];
        let mut b = [1.0f32];
        let r = opt
            .step(&mut [&mut a, &mut b], &[&[f32::NAN], &[1.0]], 1.0)
            .unwrap();
        assert_eq!(r.skipped, vec![0]);
        assert_eq!(a[0], 1.0);
        assert!(b[0] < 1.0);
    }

    #[test]
    fn exponential_schedule() {
        let s = ExpDecay {
            initial: 1e-2,
            final_lr: 1e-4,
            total_steps: 100,
        };
        assert!((s.at(0) - 1e-2).abs() < 1e-15);
        assert!((s.at(50) - 1e-3).abs() < 1e-12);
        assert!((s.at(100) - 1e-4).abs() < 1e-15);
        assert!((s.at(1000) - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn rejects_incongruent_grads() {
        let mut opt = AdamState::<f64>::new(config(0.1), &[2]);
        let mut p = [0.0, 0.0];
        assert!(opt.step(&mut [&mut p], &[&[1.0]], 1.0).is_err());
    }
}
