//! Finite-difference gradient checking.
//!
//! `GradCheck::run` rebuilds a scalar loss through a user closure, compares
//! backpropagated gradients against central differences obtained by
//! perturbing each parameter in place, and reports the worst deviation.
//! Comparisons use a combined tolerance: |a − n| ≤ atol + rtol·max(|a|, |n|).

use super::Tensor;
use crate::error::{Error, Result};

/// Central finite differences of a scalar function at x.
pub fn central_diff<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let fp = f(&probe);
            probe[i] = orig - h;
            let fm = f(&probe);
            probe[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub h: f64,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { h: 1e-4, rtol: 1e-4, atol: 1e-8 }
    }
}

#[derive(Debug)]
pub struct GradReport {
    pub pass: bool,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// (parameter index, element index, analytic, numeric) for each element
    /// that exceeded tolerance.
    pub failures: Vec<(usize, usize, f64, f64)>,
    pub checked: usize,
}

impl GradCheck {
    pub fn with_tolerance(h: f64, rtol: f64, atol: f64) -> Self {
        GradCheck { h, rtol, atol }
    }

    /// Compare backpropagated gradients of `build()` against central
    /// differences for every element of every parameter. The closure must
    /// rebuild the loss from the parameters' current values each call.
    pub fn run<F: FnMut() -> Result<Tensor>>(
        &self,
        params: &[Tensor],
        mut build: F,
    ) -> Result<GradReport> {
        for p in params {
            if !p.requires_grad() {
                return Err(Error::Contract(
                    "gradient check on a tensor that does not require gradients".into(),
                ));
            }
            p.zero_grad();
        }
        let loss = build()?;
        if loss.numel() != 1 {
            return Err(Error::Contract(format!(
                "gradient check requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        loss.backward()?;
        let analytic: Vec<Vec<f64>> = params.iter().map(Tensor::grad_or_zeros).collect();

        let mut report = GradReport {
            pass: true,
            max_abs_err: 0.0,
            max_rel_err: 0.0,
            failures: Vec::new(),
            checked: 0,
        };
        for (pi, p) in params.iter().enumerate() {
            let mut values = p.to_vec();
            for ei in 0..values.len() {
                let orig = values[ei];
                values[ei] = orig + self.h;
                p.set_values(&values)?;
                let fp = build()?.item();
                values[ei] = orig - self.h;
                p.set_values(&values)?;
                let fm = build()?.item();
                values[ei] = orig;
                p.set_values(&values)?;

                let numeric = (fp - fm) / (2.0 * self.h);
                let a = analytic[pi][ei];
                let abs_err = (a - numeric).abs();
                let scale = a.abs().max(numeric.abs());
                let rel_err = abs_err / scale.max(1e-12);
                report.checked += 1;
                report.max_abs_err = report.max_abs_err.max(abs_err);
                if scale > self.atol {
                    report.max_rel_err = report.max_rel_err.max(rel_err);
                }
                if abs_err > self.atol + self.rtol * scale {
                    report.pass = false;
                    report.failures.push((pi, ei, a, numeric));
                }
            }
        }
        Ok(report)
    }
}
