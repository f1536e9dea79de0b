//! Neural-network building blocks: weight-normalized linear layers with
//! optional binary connectivity masks, plain dense layers for heads that
//! start at zero, ELU multilayer perceptrons, and a named parameter registry
//! shared by optimizers and checkpoints.

use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;

use super::ops::{mm, mm_nt, mm_tn};
use super::{expect_matrix, Node, Tensor};
use crate::error::{Error, Result};

/// Ordered collection of named trainable tensors. Iteration order is the
/// registration order, which keeps optimizer updates and checkpoints
/// deterministic.
#[derive(Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: &Tensor) {
        let name = name.into();
        debug_assert!(tensor.requires_grad(), "parameter {name} must require gradients");
        debug_assert!(
            self.entries.iter().all(|(n, _)| *n != name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, tensor.clone()));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn zero_grad(&self) {
        for (_, t) in &self.entries {
            t.zero_grad();
        }
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Keep only parameters for which the predicate holds (used to freeze
    /// submodules during training).
    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.entries.retain(|(n, _)| keep(n));
    }
}

pub fn gaussian<R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect()
}

/// Weight-normalized linear layer. The effective weight of row i is
/// g_i · u_i / ‖u_i‖ with u_i = mask_i ⊙ v_i, so the direction and magnitude
/// of each output unit are parameterized separately. A mask row of all zeros
/// makes that output bias-only; a nonzero mask row whose masked direction
/// collapses to zero norm is reported as a degenerate layer.
pub struct LinearLayer {
    pub v: Tensor,
    pub g: Tensor,
    pub bias: Tensor,
    mask: Option<Rc<Vec<f64>>>,
    in_dim: usize,
    out_dim: usize,
}

const NORM_FLOOR: f64 = 1e-12;

impl LinearLayer {
    /// Direction entries drawn from N(0, 1/in_dim), gains at one, biases at
    /// zero.
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let std = 1.0 / (in_dim as f64).sqrt();
        let v = Tensor::param(gaussian(rng, in_dim * out_dim, std), &[out_dim, in_dim])
            .expect("finite init");
        let g = Tensor::param(vec![1.0; out_dim], &[out_dim]).expect("finite init");
        let bias = Tensor::param(vec![0.0; out_dim], &[out_dim]).expect("finite init");
        LinearLayer { v, g, bias, mask: None, in_dim, out_dim }
    }

    /// Random directions but zero gains: the output is identically zero at
    /// initialization while gain gradients stay informative. Used for scale
    /// heads so predicted distributions start at unit scale.
    pub fn zero_gains<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let layer = LinearLayer::new(in_dim, out_dim, rng);
        layer.g.set_values(&vec![0.0; out_dim]).expect("finite init");
        layer
    }

    /// Same layer with a fixed binary connectivity mask of shape
    /// [out_dim, in_dim]; entries must be exactly 0 or 1.
    pub fn with_mask<R: Rng>(
        in_dim: usize,
        out_dim: usize,
        mask: Vec<f64>,
        rng: &mut R,
    ) -> Result<Self> {
        if mask.len() != in_dim * out_dim {
            return Err(Error::ShapeMismatch {
                op: "linear_mask",
                detail: format!("{} mask entries for [{out_dim},{in_dim}]", mask.len()),
            });
        }
        if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::Contract("connectivity mask entries must be 0 or 1".into()));
        }
        let mut layer = LinearLayer::new(in_dim, out_dim, rng);
        layer.mask = Some(Rc::new(mask));
        Ok(layer)
    }

    /// Overwrite all bias entries (gate layers start open with a positive
    /// offset).
    pub fn set_bias_constant(&mut self, value: f64) {
        self.bias
            .set_values(&vec![value; self.out_dim])
            .expect("bias shape is fixed");
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Effective weight matrix rows g_i · u_i / ‖u_i‖ (zero rows where the
    /// mask silences an output).
    fn effective_weights(
        v: &[f64],
        g: &[f64],
        mask: Option<&[f64]>,
        out_dim: usize,
        in_dim: usize,
    ) -> Result<Vec<f64>> {
        let mut w = vec![0.0; out_dim * in_dim];
        for i in 0..out_dim {
            let row = &v[i * in_dim..(i + 1) * in_dim];
            let mrow = mask.map(|m| &m[i * in_dim..(i + 1) * in_dim]);
            if let Some(m) = mrow {
                if m.iter().all(|&x| x == 0.0) {
                    continue;
                }
            }
            let mut norm_sq = 0.0;
            for j in 0..in_dim {
                let mj = mrow.map_or(1.0, |m| m[j]);
                let u = row[j] * mj;
                norm_sq += u * u;
            }
            let norm = norm_sq.sqrt();
            if norm < NORM_FLOOR {
                return Err(Error::DegenerateLayer(format!(
                    "weight-norm row {i} has vanishing direction"
                )));
            }
            let scale = g[i] / norm;
            for j in 0..in_dim {
                let mj = mrow.map_or(1.0, |m| m[j]);
                w[i * in_dim + j] = scale * row[j] * mj;
            }
        }
        Ok(w)
    }

    /// y = x · Ŵᵀ + b as a single fused node, so weight normalization is
    /// differentiated exactly rather than through intermediate tensors.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (batch, in_dim) = expect_matrix("linear_forward", x)?;
        if in_dim != self.in_dim {
            return Err(Error::ShapeMismatch {
                op: "linear_forward",
                detail: format!("input width {in_dim}, layer expects {}", self.in_dim),
            });
        }
        let out_dim = self.out_dim;
        let mask = self.mask.clone();
        let w = {
            let v = self.v.node.values.borrow();
            let g = self.g.node.values.borrow();
            Self::effective_weights(&v, &g, mask.as_deref().map(|m| &m[..]), out_dim, in_dim)?
        };
        let mut values = mm_nt(&x.node.values.borrow(), &w, batch, in_dim, out_dim);
        {
            let b = self.bias.node.values.borrow();
            for i in 0..batch {
                for j in 0..out_dim {
                    values[i * out_dim + j] += b[j];
                }
            }
        }
        Tensor::op(
            "linear_forward",
            vec![batch, out_dim],
            values,
            vec![x.clone(), self.v.clone(), self.g.clone(), self.bias.clone()],
            Box::new(move |node: &Node, gy: &[f64]| {
                let x = node.parents[0].node.values.borrow();
                let v = node.parents[1].node.values.borrow();
                let g = node.parents[2].node.values.borrow();
                let mask = mask.as_deref().map(|m| &m[..]);
                let w = Self::effective_weights(&v, &g, mask, out_dim, in_dim)
                    .expect("validated in forward");

                let gx = mm(gy, &w, batch, out_dim, in_dim);
                let gw = mm_tn(gy, &x, batch, out_dim, in_dim);
                let mut gb = vec![0.0; out_dim];
                for i in 0..batch {
                    for j in 0..out_dim {
                        gb[j] += gy[i * out_dim + j];
                    }
                }

                let mut gv = vec![0.0; out_dim * in_dim];
                let mut gg = vec![0.0; out_dim];
                for i in 0..out_dim {
                    let vrow = &v[i * in_dim..(i + 1) * in_dim];
                    let mrow = mask.map(|m| &m[i * in_dim..(i + 1) * in_dim]);
                    if let Some(m) = mrow {
                        if m.iter().all(|&x| x == 0.0) {
                            continue;
                        }
                    }
                    let u: Vec<f64> = (0..in_dim)
                        .map(|j| vrow[j] * mrow.map_or(1.0, |m| m[j]))
                        .collect();
                    let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let gwrow = &gw[i * in_dim..(i + 1) * in_dim];
                    let dot: f64 = gwrow.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
                    gg[i] = dot / norm;
                    let coef = g[i] / norm;
                    let shrink = coef * dot / (norm * norm);
                    for j in 0..in_dim {
                        let gu = coef * gwrow[j] - shrink * u[j];
                        gv[i * in_dim + j] = gu * mrow.map_or(1.0, |m| m[j]);
                    }
                }
                drop(x);
                drop(v);
                drop(g);
                node.parents[0].accumulate(&gx);
                node.parents[1].accumulate(&gv);
                node.parents[2].accumulate(&gg);
                node.parents[3].accumulate(&gb);
            }),
        )
    }

    pub fn params(&self, prefix: &str, out: &mut ParamSet) {
        out.push(format!("{prefix}.v"), &self.v);
        out.push(format!("{prefix}.g"), &self.g);
        out.push(format!("{prefix}.bias"), &self.bias);
    }
}

/// Plain affine layer y = x·Wᵀ + b, used for heads that must start as an
/// exact zero map (weight normalization cannot represent a zero direction).
pub struct DenseLayer {
    pub w: Tensor,
    pub b: Tensor,
}

impl DenseLayer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        DenseLayer {
            w: Tensor::param(vec![0.0; in_dim * out_dim], &[out_dim, in_dim])
                .expect("finite init"),
            b: Tensor::param(vec![0.0; out_dim], &[out_dim]).expect("finite init"),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.w.transpose()?)?.add_row(&self.b)
    }

    pub fn params(&self, prefix: &str, out: &mut ParamSet) {
        out.push(format!("{prefix}.w"), &self.w);
        out.push(format!("{prefix}.b"), &self.b);
    }
}

/// Stack of weight-normalized layers with ELU after every layer.
pub struct Mlp {
    pub layers: Vec<LinearLayer>,
}

impl Mlp {
    pub fn new<R: Rng>(in_dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(hidden.len());
        let mut width = in_dim;
        for &h in hidden {
            layers.push(LinearLayer::new(width, h, rng));
            width = h;
        }
        Mlp { layers }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h)?.elu()?;
        }
        Ok(h)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, LinearLayer::out_dim)
    }

    pub fn params(&self, prefix: &str, out: &mut ParamSet) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.params(&format!("{prefix}.{i}"), out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::GradCheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn weight_norm_forward_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = LinearLayer::new(2, 1, &mut rng);
        layer.v.set_values(&[3.0, 4.0]).unwrap();
        layer.g.set_values(&[2.0]).unwrap();
        layer.bias.set_values(&[0.5]).unwrap();
        let x = Tensor::new(vec![1.0, 1.0], &[1, 2]).unwrap();
        let y = layer.forward(&x).unwrap();
        // ŵ = 2·[3,4]/5 = [1.2, 1.6]; y = 1.2 + 1.6 + 0.5
        assert!((y.to_vec()[0] - 3.3).abs() < 1e-14);
    }

    #[test]
    fn weight_norm_is_invariant_to_direction_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer = LinearLayer::new(3, 2, &mut rng);
        let x = Tensor::new(vec![0.4, -1.1, 0.7], &[1, 3]).unwrap();
        let before = layer.forward(&x).unwrap().to_vec();
        let scaled: Vec<f64> = layer.v.to_vec().iter().map(|v| v * 3.0).collect();
        layer.v.set_values(&scaled).unwrap();
        let after = layer.forward(&x).unwrap().to_vec();
        for (b, a) in before.iter().zip(after) {
            assert!((b - a).abs() < 1e-12);
        }
    }

    #[test]
    fn fused_layer_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = LinearLayer::new(3, 2, &mut rng);
        let x = Tensor::param(vec![0.4, -1.1, 0.7, 0.2, 0.9, -0.5], &[2, 3]).unwrap();
        let params = [x.clone(), layer.v.clone(), layer.g.clone(), layer.bias.clone()];
        let report = GradCheck::default()
            .run(&params, || layer.forward(&x)?.elu()?.row_sum()?.mean())
            .unwrap();
        assert!(report.pass, "failures {:?}", report.failures);
    }

    #[test]
    fn masked_layer_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // Strictly autoregressive pattern plus one silenced output row.
        let mask = vec![
            0.0, 0.0, 0.0, //
            1.0, 0.0, 0.0, //
            1.0, 1.0, 0.0,
        ];
        let layer = LinearLayer::with_mask(3, 3, mask, &mut rng).unwrap();
        let x = Tensor::param(vec![0.4, -1.1, 0.7], &[1, 3]).unwrap();
        let params = [x.clone(), layer.v.clone(), layer.g.clone(), layer.bias.clone()];
        let report = GradCheck::default()
            .run(&params, || layer.forward(&x)?.square()?.sum())
            .unwrap();
        assert!(report.pass, "failures {:?}", report.failures);
    }

    #[test]
    fn all_zero_mask_row_is_bias_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mask = vec![0.0, 0.0, 1.0, 1.0];
        let layer = LinearLayer::with_mask(2, 2, mask, &mut rng).unwrap();
        layer.bias.set_values(&[0.25, 0.0]).unwrap();
        let x = Tensor::new(vec![5.0, -3.0], &[1, 2]).unwrap();
        let y = layer.forward(&x).unwrap().to_vec();
        assert_eq!(y[0], 0.25);

        let loss = layer.forward(&x).unwrap().select_col(0).unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert!(layer.v.grad_or_zeros().iter().all(|&g| g == 0.0));
        assert_eq!(layer.g.grad_or_zeros(), vec![0.0, 0.0]);
        assert_eq!(layer.bias.grad_or_zeros(), vec![1.0, 0.0]);
    }

    #[test]
    fn partially_masked_zero_direction_is_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mask = vec![1.0, 0.0];
        let layer = LinearLayer::with_mask(2, 1, mask, &mut rng).unwrap();
        layer.v.set_values(&[0.0, 5.0]).unwrap();
        let x = Tensor::new(vec![1.0, 1.0], &[1, 2]).unwrap();
        assert!(matches!(
            layer.forward(&x).unwrap_err(),
            Error::DegenerateLayer(_)
        ));
    }

    #[test]
    fn mask_entries_must_be_binary() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(LinearLayer::with_mask(2, 1, vec![0.5, 1.0], &mut rng).is_err());
    }

    #[test]
    fn zero_dense_layer_is_the_zero_map() {
        let layer = DenseLayer::zeros(3, 2);
        let x = Tensor::new(vec![1.0, -2.0, 3.0], &[1, 3]).unwrap();
        assert_eq!(layer.forward(&x).unwrap().to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn mlp_shapes_and_parameter_names() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mlp = Mlp::new(5, &[7, 3], &mut rng);
        let x = Tensor::new(vec![0.1; 10], &[2, 5]).unwrap();
        assert_eq!(mlp.forward(&x).unwrap().shape(), &[2, 3]);
        let mut ps = ParamSet::new();
        mlp.params("trunk", &mut ps);
        assert_eq!(ps.len(), 6);
        assert!(ps.get("trunk.0.v").is_some());
        assert!(ps.get("trunk.1.bias").is_some());
    }
}
