use crate::error::{Error, Result};
use crate::tensor::{ensure_finite, Tensor};

use super::TrainConfig;

/// Adam with decoupled weight decay. Decay is applied to every parameter as
/// `p ← p·(1 − lr·wd)` before the moment update.
#[derive(Clone, Debug)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(params: &[Tensor], cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "adamw",
                format!("{} params, {} grads, {} slots", params.len(), grads.len(), self.m.len()),
            ));
        }
        if let Some((p, _)) = params.iter().zip(grads).find(|(p, g)| p.shape() != g.shape()) {
            return Err(Error::shape("adamw", format!("gradient shape for {:?}", p.shape())));
        }
        for g in grads {
            ensure_finite(g, "gradient")?;
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let decay = 1.0 - lr * self.weight_decay;
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *pv *= decay;
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                *pv -= lr * (*mv / bc1) / ((*vv / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Linear warm-up from `initial_lr_frac·peak` to the peak over the first
/// `warmup_frac` of steps, then cosine decay to `final_lr_frac·peak`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub initial_frac: f64,
    pub final_frac: f64,
}

impl LrSchedule {
    pub fn new(cfg: &TrainConfig, total_steps: usize) -> Self {
        Self {
            peak: cfg.peak_lr,
            total_steps,
            warmup_steps: (cfg.warmup_frac * total_steps as f64).round() as usize,
            initial_frac: cfg.initial_lr_frac,
            final_frac: cfg.final_lr_frac,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            let t = step as f64 / self.warmup_steps as f64;
            return self.peak * (self.initial_frac + (1.0 - self.initial_frac) * t);
        }
        let span = self
            .total_steps
            .saturating_sub(self.warmup_steps)
            .saturating_sub(1)
            .max(1);
        let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let lo = self.peak * self.final_frac;
        lo + (self.peak - lo) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_parameters() {
        let mut p = vec![Tensor::full(&[3], 0.7)];
        let g = vec![Tensor::full(&[3], 2.0)];
        let mut opt = AdamW::new(&p, &TrainConfig::default());
        opt.step(&mut p, &g, 0.0).unwrap();
        assert_eq!(p[0].data(), &[0.7; 3]);
    }

    #[test]
    fn decay_only_step_scales_exactly() {
        let cfg = TrainConfig {
            weight_decay: 0.1,
            ..TrainConfig::default()
        };
        let mut p = vec![Tensor::from_slice(&[2], &[1.5, -2.0]).unwrap()];
        let g = vec![Tensor::zeros(&[2])];
        let mut opt = AdamW::new(&p, &cfg);
        opt.step(&mut p, &g, 0.5).unwrap();
        assert_eq!(p[0].data(), &[1.5 * 0.95, -2.0 * 0.95]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = vec![Tensor::zeros(&[2])];
        let g = vec![Tensor::from_slice(&[2], &[3.0, -0.01]).unwrap()];
        let mut opt = AdamW::new(&p, &cfg);
        opt.step(&mut p, &g, 0.1).unwrap();
        assert!((p[0].data()[0] + 0.1).abs() < 1e-6);
        assert!((p[0].data()[1] - 0.1).abs() < 1e-4);
    }

    #[test]
    fn schedule_shape() {
        let s = LrSchedule::new(&TrainConfig::default(), 100);
        assert!((s.lr(0) - 3e-3 / 25.0).abs() < 1e-15);
        assert!((s.lr(30) - 3e-3).abs() < 1e-15);
        assert!((s.lr(99) - 3e-5).abs() < 1e-15);
        assert!((1..100).all(|i| i <= 30 || s.lr(i) <= s.lr(i - 1)));
    }
}
