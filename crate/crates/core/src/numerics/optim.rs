//! AdamW with linear warmup and per-epoch multiplicative decay.

use super::scalar::{sc, Scalar};
use super::tensor::{NResult, NumericsError, Tensor};

/// Scheduler: linear warmup over `warmup_steps`, then the base rate decays
/// by `decay_rate` once per completed epoch (`steps_per_epoch` optimizer
/// steps). `steps_per_epoch = 0` disables decay.
#[derive(Clone, Debug)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub decay_rate: f64,
    pub steps_per_epoch: u64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule { base_lr: lr, warmup_steps: 0, decay_rate: 1.0, steps_per_epoch: 0 }
    }

    /// Effective rate at 1-indexed step `s`.
    pub fn lr_at(&self, s: u64) -> f64 {
        let warm = if self.warmup_steps > 0 && s <= self.warmup_steps {
            s as f64 / self.warmup_steps as f64
        } else {
            1.0
        };
        let epochs = if self.steps_per_epoch > 0 { (s - 1) / self.steps_per_epoch } else { 0 };
        self.base_lr * warm * self.decay_rate.powi(epochs as i32)
    }
}

#[derive(Clone, Debug)]
pub struct OptimConfig {
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimConfig {
    pub fn new(schedule: LrSchedule) -> Self {
        OptimConfig { schedule, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// AdamW over a named parameter set. Names are carried so that a missing
/// gradient can be reported against the offending parameter.
pub struct AdamW<F: Scalar> {
    params: Vec<(String, Tensor<F>)>,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    step_count: u64,
    pub cfg: OptimConfig,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(params: Vec<(String, Tensor<F>)>, cfg: OptimConfig) -> Self {
        let m = params.iter().map(|(_, p)| vec![F::zero(); p.numel()]).collect();
        let v = params.iter().map(|(_, p)| vec![F::zero(); p.numel()]).collect();
        AdamW { params, m, v, step_count: 0, cfg }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn current_lr(&self) -> f64 {
        self.cfg.schedule.lr_at(self.step_count + 1)
    }

    /// Apply one update from the gradients currently stored on the params.
    pub fn step(&mut self) -> NResult<()> {
        self.step_count += 1;
        let lr = sc::<F>(self.cfg.schedule.lr_at(self.step_count));
        let b1 = sc::<F>(self.cfg.beta1);
        let b2 = sc::<F>(self.cfg.beta2);
        let eps = sc::<F>(self.cfg.eps);
        let wd = sc::<F>(self.cfg.weight_decay);
        let bc1 = F::one() - sc::<F>(self.cfg.beta1.powi(self.step_count as i32));
        let bc2 = F::one() - sc::<F>(self.cfg.beta2.powi(self.step_count as i32));
        for (idx, (name, p)) in self.params.iter().enumerate() {
            let grad = p
                .grad()
                .ok_or_else(|| NumericsError::MissingGrad(name.clone()))?;
            let mut data = p.to_vec();
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (F::one() - b1) * g;
                v[i] = b2 * v[i] + (F::one() - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] = data[i] - lr * (mhat / (vhat.sqrt() + eps) + wd * data[i]);
            }
            p.set_data(data);
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        for (_, p) in &self.params {
            p.zero_grad();
        }
    }

    pub fn params(&self) -> &[(String, Tensor<F>)] {
        &self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let p = Tensor::<f64>::param(vec![1.0, -2.0], &[2]).unwrap();
        let before = p.to_vec();
        let mut opt = AdamW::new(
            vec![("p".into(), p.clone())],
            OptimConfig::new(LrSchedule::constant(0.0)),
        );
        let loss = p.mul(&p).unwrap().sum_all();
        loss.backward().unwrap();
        opt.step().unwrap();
        assert_eq!(p.to_vec(), before);
    }

    #[test]
    fn quadratic_converges_to_minimum() {
        // f(x) = (x - 3)^2, minimizer x = 3.
        let p = Tensor::<f64>::param(vec![0.0], &[1]).unwrap();
        let mut opt = AdamW::new(
            vec![("x".into(), p.clone())],
            OptimConfig::new(LrSchedule::constant(0.05)),
        );
        for _ in 0..2000 {
            opt.zero_grad();
            let diff = p.add_scalar(-3.0);
            let loss = diff.mul(&diff).unwrap().sum_all();
            loss.backward().unwrap();
            opt.step().unwrap();
        }
        assert!((p.to_vec()[0] - 3.0).abs() < 1e-4, "got {}", p.to_vec()[0]);
    }

    #[test]
    fn warmup_scales_first_step() {
        let sched = LrSchedule {
            base_lr: 1.0,
            warmup_steps: 200,
            decay_rate: 0.9,
            steps_per_epoch: 0,
        };
        assert!((sched.lr_at(1) - 1.0 / 200.0).abs() < 1e-12);
        assert!((sched.lr_at(200) - 1.0).abs() < 1e-12);
        assert!((sched.lr_at(500) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn decay_applies_per_epoch() {
        let sched = LrSchedule {
            base_lr: 1.0,
            warmup_steps: 0,
            decay_rate: 0.9,
            steps_per_epoch: 10,
        };
        assert!((sched.lr_at(10) - 1.0).abs() < 1e-12);
        assert!((sched.lr_at(11) - 0.9).abs() < 1e-12);
        assert!((sched.lr_at(21) - 0.81).abs() < 1e-12);
    }

    #[test]
    fn missing_grad_names_parameter() {
        let p = Tensor::<f64>::param(vec![1.0], &[1]).unwrap();
        let mut opt = AdamW::new(
            vec![("encoder.w".into(), p)],
            OptimConfig::new(LrSchedule::constant(0.1)),
        );
        let err = opt.step().unwrap_err();
        assert!(err.to_string().contains("encoder.w"), "{err}");
    }
}
