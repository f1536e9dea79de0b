//! Inverse autoregressive flow posteriors.
//!
//! A `MadeNet` is a single-hidden-layer autoregressive network over z with an
//! unconstrained context input: connectivity masks give every output
//! coordinate j a strictly triangular dependence on z (only coordinates of
//! lower degree reach it), while the context feeds both the hidden layer and
//! the output heads without restriction. An `IafStep` uses the network's two
//! heads as shift m and gate pre-activation s and transforms
//!
//!   z' = σ(s) ⊙ z + (1 − σ(s)) ⊙ m,
//!
//! whose Jacobian is triangular with diagonal σ(s), so the per-coordinate
//! log-determinant is log σ(s_j). Gate biases start at +1, keeping the step
//! close to the identity early in training. Stacking steps with reversed
//! coordinate orderings lets later coordinates influence earlier ones.

use rand::Rng;

use crate::error::{Error, Result};
use crate::prob::DiagGaussian;
use crate::tensor::nn::{LinearLayer, ParamSet};
use crate::tensor::Tensor;

/// Degrees 1..=dim in natural coordinate order.
pub fn natural_ordering(dim: usize) -> Vec<usize> {
    (1..=dim).collect()
}

/// Degrees dim..=1, used for alternating steps.
pub fn reversed_ordering(dim: usize) -> Vec<usize> {
    (1..=dim).rev().collect()
}

/// Masked autoregressive network producing shift and gate heads.
pub struct MadeNet {
    hidden: LinearLayer,
    shift_head: LinearLayer,
    gate_head: LinearLayer,
    dim: usize,
    ctx_dim: usize,
    ordering: Vec<usize>,
}

impl MadeNet {
    /// `ordering[i]` is the autoregressive degree of coordinate i and must be
    /// a permutation of 1..=dim. `ctx_dim = 0` builds a context-free network.
    pub fn new<R: Rng>(
        dim: usize,
        ctx_dim: usize,
        hidden_units: usize,
        ordering: Vec<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        if dim == 0 || hidden_units == 0 {
            return Err(Error::Config("autoregressive network needs dim >= 1 and hidden >= 1".into()));
        }
        let mut seen = vec![false; dim];
        for &d in &ordering {
            if d == 0 || d > dim || seen[d - 1] {
                return Err(Error::Config(format!(
                    "ordering must be a permutation of 1..={dim}"
                )));
            }
            seen[d - 1] = true;
        }
        if ordering.len() != dim {
            return Err(Error::Config(format!(
                "ordering has {} entries for dim {dim}",
                ordering.len()
            )));
        }

        // Hidden degrees cycle through 1..=dim−1; with dim == 1 no hidden
        // unit may feed the single output, so outputs fall back to context
        // and bias alone.
        let max_hidden_degree = (dim - 1).max(1);
        let hidden_degrees: Vec<usize> =
            (0..hidden_units).map(|k| 1 + k % max_hidden_degree).collect();

        let mut hidden_mask = vec![0.0; hidden_units * (dim + ctx_dim)];
        for k in 0..hidden_units {
            for i in 0..dim {
                if hidden_degrees[k] >= ordering[i] {
                    hidden_mask[k * (dim + ctx_dim) + i] = 1.0;
                }
            }
            for c in 0..ctx_dim {
                hidden_mask[k * (dim + ctx_dim) + dim + c] = 1.0;
            }
        }

        let mut head_mask = vec![0.0; dim * (hidden_units + ctx_dim)];
        for j in 0..dim {
            for k in 0..hidden_units {
                if ordering[j] > hidden_degrees[k] {
                    head_mask[j * (hidden_units + ctx_dim) + k] = 1.0;
                }
            }
            for c in 0..ctx_dim {
                head_mask[j * (hidden_units + ctx_dim) + hidden_units + c] = 1.0;
            }
        }

        let hidden = LinearLayer::with_mask(dim + ctx_dim, hidden_units, hidden_mask, rng)?;
        let shift_head =
            LinearLayer::with_mask(hidden_units + ctx_dim, dim, head_mask.clone(), rng)?;
        let mut gate_head = LinearLayer::with_mask(hidden_units + ctx_dim, dim, head_mask, rng)?;
        gate_head.set_bias_constant(1.0);

        Ok(MadeNet { hidden, shift_head, gate_head, dim, ctx_dim, ordering })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ordering(&self) -> &[usize] {
        &self.ordering
    }

    fn check_ctx(&self, ctx: Option<&Tensor>) -> Result<()> {
        match (self.ctx_dim, ctx) {
            (0, None) => Ok(()),
            (0, Some(_)) => Err(Error::Contract(
                "context passed to a context-free autoregressive network".into(),
            )),
            (_, None) => Err(Error::Contract(
                "autoregressive network built with context requires one".into(),
            )),
            (w, Some(c)) => {
                if c.shape().len() == 2 && c.shape()[1] == w {
                    Ok(())
                } else {
                    Err(Error::ShapeMismatch {
                        op: "made_forward",
                        detail: format!("context {:?}, expected [batch, {w}]", c.shape()),
                    })
                }
            }
        }
    }

    /// Shift and gate pre-activation, each [batch, dim].
    pub fn forward(&self, z: &Tensor, ctx: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        self.check_ctx(ctx)?;
        let input = match ctx {
            Some(c) => z.concat_cols(c)?,
            None => z.clone(),
        };
        let h = self.hidden.forward(&input)?.elu()?;
        let head_in = match ctx {
            Some(c) => h.concat_cols(c)?,
            None => h,
        };
        let m = self.shift_head.forward(&head_in)?;
        let s = self.gate_head.forward(&head_in)?;
        Ok((m, s))
    }

    pub fn params(&self, prefix: &str, out: &mut ParamSet) {
        self.hidden.params(&format!("{prefix}.hidden"), out);
        self.shift_head.params(&format!("{prefix}.shift"), out);
        self.gate_head.params(&format!("{prefix}.gate"), out);
    }
}

/// One gated autoregressive flow step.
pub struct IafStep {
    pub made: MadeNet,
}

impl IafStep {
    pub fn new<R: Rng>(
        dim: usize,
        ctx_dim: usize,
        hidden_units: usize,
        ordering: Vec<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(IafStep { made: MadeNet::new(dim, ctx_dim, hidden_units, ordering, rng)? })
    }

    /// Transform z and return (z', per-coordinate log-det [batch, dim]).
    pub fn apply(&self, z: &Tensor, ctx: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let (m, s) = self.made.forward(z, ctx)?;
        let gate = s.sigmoid()?;
        let complement = gate.neg()?.add_scalar(1.0)?;
        let z_next = gate.mul(z)?.add(&complement.mul(&m)?)?;
        let log_det_dims = s.log_sigmoid()?;
        Ok((z_next, log_det_dims))
    }

    pub fn params(&self, prefix: &str, out: &mut ParamSet) {
        self.made.params(prefix, out);
    }
}

/// Build the default stack: `steps` flow steps over `dim` coordinates whose
/// orderings alternate between natural and reversed.
pub fn default_steps<R: Rng>(
    dim: usize,
    ctx_dim: usize,
    hidden_units: usize,
    steps: usize,
    rng: &mut R,
) -> Result<Vec<IafStep>> {
    (0..steps)
        .map(|i| {
            let ordering = if i % 2 == 0 { natural_ordering(dim) } else { reversed_ordering(dim) };
            IafStep::new(dim, ctx_dim, hidden_units, ordering, rng)
        })
        .collect()
}

/// A reparameterized posterior draw pushed through a flow stack.
pub struct FlowSample {
    /// Final sample [batch, dim].
    pub z: Tensor,
    /// Per-dimension log q(z | x): base log-density at the pre-flow draw
    /// minus the accumulated per-coordinate log-determinants, [batch, dim].
    pub log_q_dims: Tensor,
    /// The standard normal noise that produced the draw.
    pub eps: Tensor,
}

impl FlowSample {
    pub fn log_q_rows(&self) -> Result<Tensor> {
        self.log_q_dims.row_sum()
    }
}

/// Sample z₀ = μ + σ⊙ε from the base, apply every step in order (all sharing
/// the same context), and track per-dimension log q.
pub fn flow_sample<R: Rng>(
    base: &DiagGaussian,
    steps: &[IafStep],
    ctx: Option<&Tensor>,
    rng: &mut R,
) -> Result<FlowSample> {
    let (z0, eps) = base.sample(rng)?;
    flow_sample_inner(base, steps, ctx, z0, eps)
}

/// Same as [`flow_sample`] with the base noise pinned by the caller.
pub fn flow_sample_with_noise(
    base: &DiagGaussian,
    steps: &[IafStep],
    ctx: Option<&Tensor>,
    eps: &Tensor,
) -> Result<FlowSample> {
    let z0 = base.sample_with_noise(eps)?;
    flow_sample_inner(base, steps, ctx, z0, eps.clone())
}

fn flow_sample_inner(
    base: &DiagGaussian,
    steps: &[IafStep],
    ctx: Option<&Tensor>,
    z0: Tensor,
    eps: Tensor,
) -> Result<FlowSample> {
    let mut log_q_dims = base.log_prob_dims(&z0)?;
    let mut z = z0;
    for step in steps {
        let (z_next, log_det_dims) = step.apply(&z, ctx)?;
        log_q_dims = log_q_dims.sub(&log_det_dims)?;
        z = z_next;
    }
    Ok(FlowSample { z, log_q_dims, eps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::GradCheck;
    use crate::tensor::stable_sigmoid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Pin every gate wide open: zero gains silence the masked weights, so
    /// the pre-activation collapses to its large constant bias.
    fn saturate_gates(step: &mut IafStep) {
        step.made.gate_head.set_bias_constant(40.0);
        let zeros = vec![0.0; step.made.gate_head.g.numel()];
        step.made.gate_head.g.set_values(&zeros).unwrap();
    }

    fn grad_pattern(made: &MadeNet, head: usize, j: usize, z: &Tensor, ctx: Option<&Tensor>) -> Vec<f64> {
        z.zero_grad();
        let (m, s) = made.forward(z, ctx).unwrap();
        let out = if head == 0 { m } else { s };
        out.select_col(j).unwrap().sum().unwrap().backward().unwrap();
        z.grad_or_zeros()
    }

    #[test]
    fn outputs_depend_only_on_lower_degree_coordinates() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for ordering in [natural_ordering(5), reversed_ordering(5)] {
            let made = MadeNet::new(5, 3, 16, ordering.clone(), &mut rng).unwrap();
            let z = Tensor::param(vec![0.3, -0.7, 1.1, 0.2, -0.4], &[1, 5]).unwrap();
            let ctx = Tensor::new(vec![0.5, -1.0, 0.8], &[1, 3]).unwrap();
            for head in 0..2 {
                for j in 0..5 {
                    let grad = grad_pattern(&made, head, j, &z, Some(&ctx));
                    for i in 0..5 {
                        if ordering[i] >= ordering[j] {
                            assert_eq!(
                                grad[i], 0.0,
                                "head {head} output {j} leaks from input {i}"
                            );
                        }
                    }
                    if ordering[j] > 1 {
                        assert!(
                            grad.iter().any(|&g| g != 0.0),
                            "head {head} output {j} is disconnected"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn single_coordinate_outputs_ignore_z_entirely() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let made = MadeNet::new(1, 2, 8, natural_ordering(1), &mut rng).unwrap();
        let z = Tensor::param(vec![0.9], &[1, 1]).unwrap();
        let ctx = Tensor::new(vec![0.2, -0.6], &[1, 2]).unwrap();
        for head in 0..2 {
            let grad = grad_pattern(&made, head, 0, &z, Some(&ctx));
            assert_eq!(grad, vec![0.0]);
        }
    }

    #[test]
    fn saturated_gates_make_the_step_an_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut step = IafStep::new(4, 0, 12, natural_ordering(4), &mut rng).unwrap();
        saturate_gates(&mut step);
        let z = Tensor::new(vec![0.5, -1.2, 0.8, 0.1], &[1, 4]).unwrap();
        let (z_next, log_det) = step.apply(&z, None).unwrap();
        for (a, b) in z_next.to_vec().iter().zip(z.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(log_det.to_vec().iter().all(|&d| d.abs() < 1e-12));
    }

    #[test]
    fn log_det_diagonal_matches_finite_difference_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let step = IafStep::new(4, 0, 16, reversed_ordering(4), &mut rng).unwrap();
        let z_vals = [0.4, -0.3, 0.9, -1.1];
        let z = Tensor::new(z_vals.to_vec(), &[1, 4]).unwrap();
        let (_, s) = step.made.forward(&z, None).unwrap();
        let h = 1e-5;
        for j in 0..4 {
            let mut plus = z_vals;
            plus[j] += h;
            let mut minus = z_vals;
            minus[j] -= h;
            let f = |v: [f64; 4]| {
                let zt = Tensor::new(v.to_vec(), &[1, 4]).unwrap();
                step.apply(&zt, None).unwrap().0.to_vec()[j]
            };
            let diag = (f(plus) - f(minus)) / (2.0 * h);
            assert!((diag - stable_sigmoid(s.to_vec()[j])).abs() < 1e-6);
        }
    }

    #[test]
    fn sequential_inversion_recovers_the_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let ordering = vec![3, 1, 4, 5, 2];
        let step = IafStep::new(5, 2, 24, ordering.clone(), &mut rng).unwrap();
        let ctx = Tensor::new(vec![0.7, -0.2], &[1, 2]).unwrap();
        let z_true = vec![0.4, -1.3, 0.6, 0.05, 1.7];
        let z = Tensor::new(z_true.clone(), &[1, 5]).unwrap();
        let (z_out, _) = step.apply(&z, Some(&ctx)).unwrap();
        let target = z_out.to_vec();

        // Solve coordinate-by-coordinate in degree order: the shift and gate
        // of the coordinate with degree t depend only on coordinates of
        // degree < t, which are already recovered.
        let mut guess = vec![0.0; 5];
        for degree in 1..=5 {
            let j = ordering.iter().position(|&d| d == degree).unwrap();
            let zg = Tensor::new(guess.clone(), &[1, 5]).unwrap();
            let (m, s) = step.made.forward(&zg, Some(&ctx)).unwrap();
            let gate = stable_sigmoid(s.to_vec()[j]);
            guess[j] = (target[j] - (1.0 - gate) * m.to_vec()[j]) / gate;
        }
        for (g, t) in guess.iter().zip(&z_true) {
            assert!((g - t).abs() < 1e-8, "recovered {g} vs {t}");
        }
    }

    #[test]
    fn identity_flow_reproduces_base_log_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut steps = default_steps(3, 0, 8, 2, &mut rng).unwrap();
        for step in &mut steps {
            saturate_gates(step);
        }
        let base = DiagGaussian::new(
            Tensor::new(vec![0.2, -0.5, 0.9], &[1, 3]).unwrap(),
            Tensor::new(vec![1.1, 0.6, 1.4], &[1, 3]).unwrap(),
        )
        .unwrap();
        let sample = flow_sample(&base, &steps, None, &mut rng).unwrap();
        let direct = base.log_prob_rows(&sample.z).unwrap().to_vec()[0];
        let tracked = sample.log_q_rows().unwrap().to_vec()[0];
        assert!((direct - tracked).abs() < 1e-9);
    }

    #[test]
    fn pinned_noise_replays_the_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let steps = default_steps(4, 2, 12, 2, &mut rng).unwrap();
        let base = DiagGaussian::new(
            Tensor::new(vec![0.1, 0.4, -0.2, 0.8], &[1, 4]).unwrap(),
            Tensor::new(vec![0.9, 1.2, 0.5, 1.0], &[1, 4]).unwrap(),
        )
        .unwrap();
        let ctx = Tensor::new(vec![0.3, -0.9], &[1, 2]).unwrap();
        let first = flow_sample(&base, &steps, Some(&ctx), &mut rng).unwrap();
        let replay = flow_sample_with_noise(&base, &steps, Some(&ctx), &first.eps).unwrap();
        assert_eq!(first.z.to_vec(), replay.z.to_vec());
        assert_eq!(first.log_q_dims.to_vec(), replay.log_q_dims.to_vec());
    }

    #[test]
    fn flow_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let steps = default_steps(3, 2, 6, 2, &mut rng).unwrap();
        let mean = Tensor::param(vec![0.2, -0.4, 0.7], &[1, 3]).unwrap();
        let pre_scale = Tensor::param(vec![-0.1, 0.3, 0.0], &[1, 3]).unwrap();
        let ctx = Tensor::param(vec![0.5, -0.3], &[1, 2]).unwrap();
        let eps = Tensor::new(vec![0.9, -1.4, 0.3], &[1, 3]).unwrap();

        let mut params = vec![mean.clone(), pre_scale.clone(), ctx.clone()];
        let mut ps = ParamSet::new();
        for (i, step) in steps.iter().enumerate() {
            step.params(&format!("step{i}"), &mut ps);
        }
        params.extend(ps.tensors());

        let report = GradCheck::with_tolerance(1e-4, 1e-4, 1e-7)
            .run(&params, || {
                let base = DiagGaussian::new(mean.clone(), pre_scale.exp()?)?;
                let sample = flow_sample_with_noise(&base, &steps, Some(&ctx), &eps)?;
                sample.log_q_rows()?.add(&sample.z.square()?.row_sum()?)?.sum()
            })
            .unwrap();
        assert!(report.pass, "failures {:?}", report.failures);
    }

    #[test]
    fn invalid_orderings_and_context_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(MadeNet::new(3, 0, 8, vec![1, 1, 2], &mut rng).is_err());
        assert!(MadeNet::new(3, 0, 8, vec![1, 2], &mut rng).is_err());
        assert!(MadeNet::new(3, 0, 8, vec![0, 1, 2], &mut rng).is_err());

        let made = MadeNet::new(2, 2, 4, natural_ordering(2), &mut rng).unwrap();
        let z = Tensor::new(vec![0.0, 0.0], &[1, 2]).unwrap();
        assert!(made.forward(&z, None).is_err());
        let free = MadeNet::new(2, 0, 4, natural_ordering(2), &mut rng).unwrap();
        let ctx = Tensor::new(vec![1.0], &[1, 1]).unwrap();
        assert!(free.forward(&z, Some(&ctx)).is_err());
    }
}
