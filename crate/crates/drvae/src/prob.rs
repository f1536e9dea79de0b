//! Reparameterized diagonal Gaussians, categorical distributions over class
//! probabilities, KL divergence helpers, and the per-dimension free-bits
//! clamp. Log-densities are returned per dimension wherever possible so
//! downstream bounds can clamp or reweight individual coordinates before
//! summing.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::nn::gaussian;
use crate::tensor::Tensor;

pub const LN_2PI: f64 = 1.8378770664093453;

/// Probabilities are clamped to this floor before any logarithm, so exact
/// zeros from saturated softmax outputs cannot produce infinities.
pub const PROB_FLOOR: f64 = 1e-7;

/// Diagonal Gaussian with mean and scale tensors of identical shape.
/// Scales must be strictly positive; models guarantee this by producing
/// them through exp of a clamped pre-scale.
pub struct DiagGaussian {
    pub mean: Tensor,
    pub scale: Tensor,
}

impl DiagGaussian {
    pub fn new(mean: Tensor, scale: Tensor) -> Result<Self> {
        if mean.shape() != scale.shape() {
            return Err(Error::ShapeMismatch {
                op: "diag_gaussian",
                detail: format!("mean {:?} vs scale {:?}", mean.shape(), scale.shape()),
            });
        }
        if scale.to_vec().iter().any(|&s| s <= 0.0) {
            return Err(Error::Domain {
                op: "diag_gaussian",
                detail: "scale must be strictly positive".into(),
            });
        }
        Ok(DiagGaussian { mean, scale })
    }

    /// Standard normal N(0, I) of the given shape, as constants.
    pub fn standard(shape: &[usize]) -> Self {
        DiagGaussian {
            mean: Tensor::zeros(shape),
            scale: Tensor::full(shape, 1.0).expect("finite"),
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.mean.shape()
    }

    /// Draw z = μ + σ⊙ε with fresh standard normal noise; returns the sample
    /// and the noise leaf so callers can replay the draw.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<(Tensor, Tensor)> {
        let eps = Tensor::new(gaussian(rng, self.mean.numel(), 1.0), self.shape())?;
        let z = self.sample_with_noise(&eps)?;
        Ok((z, eps))
    }

    /// Reparameterized sample from pinned noise: z = μ + σ⊙ε.
    pub fn sample_with_noise(&self, eps: &Tensor) -> Result<Tensor> {
        self.mean.add(&self.scale.mul(eps)?)
    }

    /// Per-dimension log-density: −½ln(2π) − ln σ − ½((x−μ)/σ)².
    pub fn log_prob_dims(&self, x: &Tensor) -> Result<Tensor> {
        let standardized = x.sub(&self.mean)?.div(&self.scale)?;
        let quad = standardized.square()?.mul_scalar(-0.5)?;
        quad.sub(&self.scale.log()?)?.add_scalar(-0.5 * LN_2PI)
    }

    /// Row-wise log-density of a [batch, dim] input: [batch].
    pub fn log_prob_rows(&self, x: &Tensor) -> Result<Tensor> {
        self.log_prob_dims(x)?.row_sum()
    }

    /// Per-dimension analytic KL(q ‖ p) between diagonal Gaussians:
    /// ln(σp/σq) + (σq² + (μq−μp)²) / (2σp²) − ½.
    pub fn kl_dims(q: &DiagGaussian, p: &DiagGaussian) -> Result<Tensor> {
        let log_ratio = p.scale.log()?.sub(&q.scale.log()?)?;
        let var_q = q.scale.square()?;
        let mean_diff_sq = q.mean.sub(&p.mean)?.square()?;
        let var_p2 = p.scale.square()?.mul_scalar(2.0)?;
        let frac = var_q.add(&mean_diff_sq)?.div(&var_p2)?;
        log_ratio.add(&frac)?.add_scalar(-0.5)
    }

    /// Row-wise analytic KL of [batch, dim] distributions: [batch].
    pub fn kl_rows(q: &DiagGaussian, p: &DiagGaussian) -> Result<Tensor> {
        Self::kl_dims(q, p)?.row_sum()
    }
}

/// Per-dimension free-bits clamp: each coordinate of a [batch, dim] KL
/// contribution is raised to at least `lambda` nats before summing per row,
/// which removes the gradient incentive to collapse a dimension below the
/// floor. `lambda = 0` disables the clamp entirely (Monte-Carlo KL terms can
/// be legitimately negative per dimension).
pub fn free_bits(kl_dims: &Tensor, lambda: f64) -> Result<Tensor> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("free-bits floor must be >= 0, got {lambda}")));
    }
    if lambda == 0.0 {
        kl_dims.row_sum()
    } else {
        kl_dims.max_scalar(lambda)?.row_sum()
    }
}

/// Categorical distribution given as per-row probabilities [batch, classes].
pub struct Categorical {
    pub probs: Tensor,
}

impl Categorical {
    /// Validate that every row is a probability vector (entries ≥ 0 summing
    /// to 1 within 1e-8).
    pub fn new(probs: Tensor) -> Result<Self> {
        let [_, classes] = *probs.shape() else {
            return Err(Error::ShapeMismatch {
                op: "categorical",
                detail: format!("expected [batch, classes], got {:?}", probs.shape()),
            });
        };
        let v = probs.to_vec();
        for row in v.chunks(classes) {
            if row.iter().any(|&p| p < 0.0) {
                return Err(Error::Domain {
                    op: "categorical",
                    detail: "negative probability".into(),
                });
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-8 {
                return Err(Error::Domain {
                    op: "categorical",
                    detail: format!("row sums to {s}"),
                });
            }
        }
        Ok(Categorical { probs })
    }

    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        Ok(Categorical { probs: logits.softmax_rows()? })
    }

    pub fn classes(&self) -> usize {
        self.probs.shape()[1]
    }

    /// Probability of class k for every row: [batch].
    pub fn class_prob(&self, k: usize) -> Result<Tensor> {
        self.probs.select_col(k)
    }

    /// log π(y_i) per row with the probability floor applied: [batch].
    pub fn log_prob(&self, labels: &[usize]) -> Result<Tensor> {
        self.probs.max_scalar(PROB_FLOOR)?.log()?.gather_cols(labels)
    }

    /// Row-wise entropy −Σ_k π_k ln π_k with the floor applied inside the
    /// logarithm: [batch].
    pub fn entropy(&self) -> Result<Tensor> {
        let log_probs = self.probs.max_scalar(PROB_FLOOR)?.log()?;
        self.probs.mul(&log_probs)?.row_sum()?.neg()
    }
}
