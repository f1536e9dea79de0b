//! Adam optimizer with bias-corrected first and second moments. The state
//! is bound to a parameter set at construction; each step consumes the
//! accumulated gradients and updates parameter values in place. A NaN or
//! infinite gradient or update aborts with the offending parameter's name
//! instead of silently corrupting the run.

use super::nn::ParamSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> Self {
        let m = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let v = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Adam { cfg, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update from the gradients currently stored on the
    /// parameters, then clear them.
    pub fn step(&mut self, params: &ParamSet) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Contract(
                "optimizer was built for a different parameter set".into(),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.cfg.beta1.powi(t);
        let c2 = 1.0 - self.cfg.beta2.powi(t);
        for (i, (name, p)) in params.iter().enumerate() {
            let grad = p.grad_or_zeros();
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged(format!("non-finite gradient for {name}")));
            }
            let mut values = p.to_vec();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for k in 0..values.len() {
                let g = grad[k];
                m[k] = self.cfg.beta1 * m[k] + (1.0 - self.cfg.beta1) * g;
                v[k] = self.cfg.beta2 * v[k] + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                values[k] -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
            if values.iter().any(|x| !x.is_finite()) {
                return Err(Error::Diverged(format!("non-finite update for {name}")));
            }
            p.set_values(&values)?;
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single_param(value: f64) -> (ParamSet, Tensor) {
        let p = Tensor::param(vec![value], &[1]).unwrap();
        let mut ps = ParamSet::new();
        ps.push("p", &p);
        (ps, p)
    }

    #[test]
    fn constant_gradient_moves_by_lr_each_step() {
        // With a constant gradient g, bias correction makes m̂ = g and
        // v̂ = g² at every step, so each update is exactly
        // lr·g/(|g| + eps).
        let (ps, p) = single_param(1.0);
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut adam = Adam::new(cfg, &ps);
        let update = 0.1 * 0.5 / (0.5 + cfg.eps);
        let mut expected = 1.0;
        for _ in 0..3 {
            p.accumulate(&[0.5]);
            adam.step(&ps).unwrap();
            expected -= update;
            assert!((p.to_vec()[0] - expected).abs() < 1e-12);
        }
        assert_eq!(adam.step_count(), 3);
    }

    #[test]
    fn zero_gradient_leaves_fresh_state_unchanged() {
        let (ps, p) = single_param(0.7);
        let mut adam = Adam::new(AdamConfig::default(), &ps);
        adam.step(&ps).unwrap();
        assert_eq!(p.to_vec(), vec![0.7]);
    }

    #[test]
    fn descends_a_quadratic() {
        let (ps, p) = single_param(3.0);
        let mut adam = Adam::new(AdamConfig { lr: 0.05, ..AdamConfig::default() }, &ps);
        for _ in 0..2000 {
            let loss = p.square().unwrap().sum().unwrap();
            loss.backward().unwrap();
            adam.step(&ps).unwrap();
        }
        assert!(p.to_vec()[0].abs() < 1e-3);
    }

    #[test]
    fn non_finite_gradient_aborts_with_parameter_name() {
        let (ps, p) = single_param(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &ps);
        p.accumulate(&[f64::NAN]);
        let err = adam.step(&ps).unwrap_err();
        assert!(err.to_string().contains("p"), "{err}");
    }

    #[test]
    fn parameter_set_mismatch_is_rejected() {
        let (ps, _) = single_param(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &ps);
        let (other, _) = {
            let p2 = Tensor::param(vec![0.0], &[1]).unwrap();
            let q = Tensor::param(vec![0.0], &[1]).unwrap();
            let mut s = ParamSet::new();
            s.push("a", &p2);
            s.push("b", &q);
            (s, p2)
        };
        assert!(adam.step(&other).is_err());
    }
}
