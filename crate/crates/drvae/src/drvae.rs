//! Semi-supervised response model stacked on the perturbation VAE.
//!
//! A binary outcome y and an outcome latent z3 extend the generative model:
//!
//!   y ~ Cat(pi)                         empirical class prior
//!   z3 ~ N(0, I)                        outcome latent, same width as z1
//!   z1 | z3, y ~ N(mu_p(z3, y), sigma_p(z3, y))   conditional prior net
//!   z2 | z1, x1 | z1, x2 | z2           as in the perturbation VAE
//!
//! Inference adds q(z3 | z1, y), a diagonal Gaussian net, and the response
//! classifier q(y | z1, z2), a linear softmax over [z1, z2 - z1]. Each of
//! the four record regimes (pair/singleton, labeled/unlabeled) has its own
//! bound; unlabeled bounds marginalize y exactly over both classes and add
//! the classifier entropy. Records without a post-treatment profile draw z2
//! from the generative hop to feed the classifier; those log-density terms
//! cancel, so the hop draw never enters the bound itself.
//!
//! The training objective sums the four bounds and adds alpha times the
//! classifier log-likelihood on labeled records, all maximized; early
//! stopping watches validation AUPR.

use std::cell::Cell;

use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flows::FlowSample;
use crate::metrics::{aupr, RankedPredictions};
use crate::pertvae::{PertVae, PertVaeConfig};
use crate::prob::{free_bits, Categorical, DiagGaussian};
use crate::tensor::adam::Adam;
use crate::tensor::nn::{DenseLayer, LinearLayer, Mlp, ParamSet};
use crate::tensor::Tensor;
use crate::training::{
    make_batches, split_validation_lines, EarlyStopper, EpochRow, TrainConfig, TrainLog,
};

#[derive(Debug, Clone)]
pub struct DrVaeConfig {
    pub base: PertVaeConfig,
    /// Hidden width of the outcome encoder and the conditional prior net.
    pub aux_hidden: usize,
    /// Weight on the supervised classification term; None resolves to
    /// 0.1 * total records / labeled records at training time.
    pub alpha: Option<f64>,
    /// Freeze the latent perturbation map at identity and train every pair
    /// as two independent singletons: the no-perturbation ablation.
    pub ablate_perturbation: bool,
    /// KL floor for the outcome latent; None reuses base.free_bits.
    pub outcome_free_bits: Option<f64>,
}

impl DrVaeConfig {
    pub fn reference(gene_count: usize) -> Self {
        DrVaeConfig {
            base: PertVaeConfig::reference(gene_count),
            aux_hidden: 100,
            alpha: None,
            ablate_perturbation: false,
            outcome_free_bits: None,
        }
    }

    pub fn compact(gene_count: usize, latent_dim: usize) -> Self {
        DrVaeConfig {
            base: PertVaeConfig::compact(gene_count, latent_dim),
            aux_hidden: 32,
            // Desk-scale labeled sets are small; a fixed weight keeps the
            // classifier gradient strong instead of the labeled-fraction rule.
            alpha: Some(1.0),
            ablate_perturbation: false,
            outcome_free_bits: None,
        }
    }

    /// Minimal architecture for finite-difference tests.
    pub fn tiny(gene_count: usize, latent_dim: usize) -> Self {
        DrVaeConfig {
            base: PertVaeConfig::tiny(gene_count, latent_dim),
            aux_hidden: 6,
            alpha: None,
            ablate_perturbation: false,
            outcome_free_bits: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.aux_hidden == 0 {
            return Err(Error::Config("outcome nets need hidden units".into()));
        }
        if self.alpha.is_some_and(|a| a < 0.0 || !a.is_finite()) {
            return Err(Error::Config("alpha must be finite and non-negative".into()));
        }
        if self.outcome_free_bits.is_some_and(|f| f < 0.0) {
            return Err(Error::Config("outcome free bits must be non-negative".into()));
        }
        Ok(())
    }
}

/// One-hidden-layer ELU net with mean and clamped-scale heads producing a
/// diagonal Gaussian.
struct CondGaussianNet {
    trunk: Mlp,
    mean_head: LinearLayer,
    scale_head: LinearLayer,
    clamp: f64,
}

impl CondGaussianNet {
    fn new<R: Rng>(in_dim: usize, hidden: usize, out_dim: usize, clamp: f64, rng: &mut R) -> Self {
        let trunk = Mlp::new(in_dim, &[hidden], rng);
        CondGaussianNet {
            trunk,
            mean_head: LinearLayer::new(hidden, out_dim, rng),
            scale_head: LinearLayer::zero_gains(hidden, out_dim, rng),
            clamp,
        }
    }

    fn dist(&self, input: &Tensor) -> Result<DiagGaussian> {
        let t = self.trunk.forward(input)?;
        let mean = self.mean_head.forward(&t)?;
        let scale = self.scale_head.forward(&t)?.clamp(-self.clamp, self.clamp)?.exp()?;
        DiagGaussian::new(mean, scale)
    }

    fn params(&self, prefix: &str, out: &mut ParamSet) {
        self.trunk.params(&format!("{prefix}.trunk"), out);
        self.mean_head.params(&format!("{prefix}.mean"), out);
        self.scale_head.params(&format!("{prefix}.scale"), out);
    }
}

/// Per-record bound values [batch], plus the classifier log-likelihood of
/// the true labels for labeled regimes.
pub struct DrBound {
    pub bound: Tensor,
    pub class_log_prob: Option<Tensor>,
}

/// Scalar objective over one batch.
pub struct ObjectiveValue {
    /// Sum of the regime bounds plus alpha times the labeled classification
    /// log-likelihood; maximize this.
    pub objective: Tensor,
    pub records: usize,
    pub labeled: usize,
}

/// Reparameterization noise for one objective evaluation, one entry per
/// regime present in the batch, drawn in regime order (labeled pairs,
/// unlabeled pairs, labeled singletons, unlabeled singletons).
pub struct ObjectiveNoise {
    lp: Option<(Tensor, Tensor, Tensor)>,
    up: Option<(Tensor, Tensor, Tensor, Tensor)>,
    ls: Option<(Tensor, Tensor, Tensor)>,
    us: Option<(Tensor, Tensor, Tensor, Tensor)>,
}

pub struct DrVae {
    pub cfg: DrVaeConfig,
    base: PertVae,
    classifier: DenseLayer,
    /// q(z3 | z1, y).
    outcome_enc: CondGaussianNet,
    /// p(z1 | z3, y).
    cond_prior: CondGaussianNet,
    class_prior: Cell<[f64; 2]>,
}

impl DrVae {
    /// Construction order is fixed, so one seeded RNG yields identical
    /// initial parameters on every run. The classifier starts at zero, so
    /// the untrained response posterior is uniform.
    pub fn new<R: Rng>(cfg: DrVaeConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let base = PertVae::new(cfg.base.clone(), rng)?;
        let d = cfg.base.latent_dim;
        let clamp = cfg.base.pre_scale_clamp;
        let outcome_enc = CondGaussianNet::new(d + 2, cfg.aux_hidden, d, clamp, rng);
        let cond_prior = CondGaussianNet::new(d + 2, cfg.aux_hidden, d, clamp, rng);
        let classifier = DenseLayer::zeros(2 * d, 2);
        Ok(DrVae {
            cfg,
            base,
            classifier,
            outcome_enc,
            cond_prior,
            class_prior: Cell::new([0.5, 0.5]),
        })
    }

    /// The underlying perturbation VAE (shared encoder, decoder, flows, and
    /// latent map); its pair/singleton bounds are the y-ablated bounds of
    /// this model.
    pub fn base(&self) -> &PertVae {
        &self.base
    }

    pub fn params(&self) -> ParamSet {
        let mut ps = self.base.params();
        self.outcome_enc.params("outcome", &mut ps);
        self.cond_prior.params("prior", &mut ps);
        self.classifier.params("cls", &mut ps);
        ps
    }

    /// Parameters the optimizer may update; the ablation freezes the
    /// perturbation map at identity.
    pub fn trainable_params(&self) -> ParamSet {
        let mut ps = self.params();
        if self.cfg.ablate_perturbation {
            ps.retain(|name| !name.starts_with("map."));
        }
        ps
    }

    /// Clamp keeps both log-prior terms finite even when one class is
    /// absent from the labeled training records.
    pub fn set_class_prior(&self, positive_fraction: f64) {
        let p = positive_fraction.clamp(1e-3, 1.0 - 1e-3);
        self.class_prior.set([1.0 - p, p]);
    }

    pub fn class_prior(&self) -> [f64; 2] {
        self.class_prior.get()
    }

    fn outcome_free_bits(&self) -> f64 {
        self.cfg.outcome_free_bits.unwrap_or(self.cfg.base.free_bits)
    }

    /// Response posterior q(y | z1, z2): linear softmax over [z1, z2 - z1].
    pub fn classify(&self, z1: &Tensor, z2: &Tensor) -> Result<Categorical> {
        let input = z1.concat_cols(&z2.sub(z1)?)?;
        Categorical::from_logits(&self.classifier.forward(&input)?)
    }

    /// q(z3 | z1, y) with y one-hot encoded as extra input columns.
    pub fn outcome_posterior(&self, z1: &Tensor, y_rows: &Tensor) -> Result<DiagGaussian> {
        self.outcome_enc.dist(&z1.concat_cols(y_rows)?)
    }

    /// p(z1 | z3, y) with y one-hot encoded as extra input columns.
    pub fn conditional_prior(&self, z3: &Tensor, y_rows: &Tensor) -> Result<DiagGaussian> {
        self.cond_prior.dist(&z3.concat_cols(y_rows)?)
    }

    fn one_hot(labels: &[usize]) -> Result<Tensor> {
        let mut values = vec![0.0; labels.len() * 2];
        for (i, &y) in labels.iter().enumerate() {
            if y > 1 {
                return Err(Error::Data(format!("label {y} outside the binary outcome")));
            }
            values[i * 2 + y] = 1.0;
        }
        Tensor::new(values, &[labels.len(), 2])
    }

    fn log_prior_rows(&self, labels: &[usize]) -> Result<Tensor> {
        let pi = self.class_prior.get();
        let values: Vec<f64> = labels.iter().map(|&y| pi[y].ln()).collect();
        Tensor::new(values, &[labels.len()])
    }

    /// -fb(KL[q(z1|x1) || p(z1|z3,y)]) - fb(KL[q(z3|z1,y) || N(0,I)])
    /// + ln pi_y, with one reparameterized z3 draw; [batch]. These are the
    /// only bound terms that depend on y.
    fn outcome_branch(
        &self,
        s1: &FlowSample,
        y_rows: &Tensor,
        log_py: &Tensor,
        eps3: &Tensor,
    ) -> Result<Tensor> {
        let q3 = self.outcome_posterior(&s1.z, y_rows)?;
        let z3 = q3.sample_with_noise(eps3)?;
        let std = DiagGaussian::standard(z3.shape());
        let kl3_dims = q3.log_prob_dims(&z3)?.sub(&std.log_prob_dims(&z3)?)?;
        let kl3 = free_bits(&kl3_dims, self.outcome_free_bits())?;
        let p1 = self.conditional_prior(&z3, y_rows)?;
        let kl1_dims = s1.log_q_dims.sub(&p1.log_prob_dims(&s1.z)?)?;
        let kl1 = free_bits(&kl1_dims, self.cfg.base.free_bits)?;
        log_py.sub(&kl1)?.sub(&kl3)
    }

    /// Posterior samples for both profiles plus the y-independent bound
    /// terms recon1 + recon2 - fb(KL[q(z2|x2) || p(z2|z1)]).
    fn pair_common(
        &self,
        x1: &Tensor,
        x2: &Tensor,
        eps1: &Tensor,
        eps2: &Tensor,
    ) -> Result<(FlowSample, FlowSample, Tensor)> {
        let s1 = self.base.encode_with_noise(x1, eps1)?;
        let recon1 = self.base.decode(&s1.z)?.log_prob_rows(x1)?;
        let s2 = self.base.encode_with_noise(x2, eps2)?;
        let recon2 = self.base.decode(&s2.z)?.log_prob_rows(x2)?;
        let hop = self.base.map.forward(&s1.z)?;
        let kl2_dims = s2.log_q_dims.sub(&hop.log_prob_dims(&s2.z)?)?;
        let kl2 = free_bits(&kl2_dims, self.cfg.base.free_bits)?;
        let common = recon1.add(&recon2)?.sub(&kl2)?;
        Ok((s1, s2, common))
    }

    /// Posterior sample for x1, its reconstruction term, and one generative
    /// hop draw of z2 for the classifier.
    fn singleton_common(
        &self,
        x1: &Tensor,
        eps1: &Tensor,
        eps_hop: &Tensor,
    ) -> Result<(FlowSample, Tensor, Tensor)> {
        let s1 = self.base.encode_with_noise(x1, eps1)?;
        let recon1 = self.base.decode(&s1.z)?.log_prob_rows(x1)?;
        let z2 = self.base.map.forward(&s1.z)?.sample_with_noise(eps_hop)?;
        Ok((s1, recon1, z2))
    }

    pub fn labeled_pair_bound_with_noise(
        &self,
        x1: &Tensor,
        x2: &Tensor,
        labels: &[usize],
        eps1: &Tensor,
        eps2: &Tensor,
        eps3: &Tensor,
    ) -> Result<DrBound> {
        let (s1, s2, common) = self.pair_common(x1, x2, eps1, eps2)?;
        let y_rows = Self::one_hot(labels)?;
        let branch = self.outcome_branch(&s1, &y_rows, &self.log_prior_rows(labels)?, eps3)?;
        let bound = common.add(&branch)?;
        let class_log_prob = self.classify(&s1.z, &s2.z)?.log_prob(labels)?;
        Ok(DrBound { bound, class_log_prob: Some(class_log_prob) })
    }

    pub fn labeled_pair_bound<R: Rng>(
        &self,
        x1: &Tensor,
        x2: &Tensor,
        labels: &[usize],
        rng: &mut R,
    ) -> Result<DrBound> {
        let n = x1.shape()[0];
        let eps1 = self.base.draw_noise(n, rng)?;
        let eps2 = self.base.draw_noise(n, rng)?;
        let eps3 = self.base.draw_noise(n, rng)?;
        self.labeled_pair_bound_with_noise(x1, x2, labels, &eps1, &eps2, &eps3)
    }

    /// Exact marginalization over the two classes: the y-independent terms
    /// plus sum_y q(y|z1,z2) * branch(y) plus the classifier entropy. Each
    /// class branch consumes its own z3 noise.
    pub fn unlabeled_pair_bound_with_noise(
        &self,
        x1: &Tensor,
        x2: &Tensor,
        eps1: &Tensor,
        eps2: &Tensor,
        eps3_by_class: [&Tensor; 2],
    ) -> Result<DrBound> {
        let (s1, s2, common) = self.pair_common(x1, x2, eps1, eps2)?;
        let q_y = self.classify(&s1.z, &s2.z)?;
        let mut bound = common.add(&q_y.entropy()?)?;
        let n = x1.shape()[0];
        for y in 0..2 {
            let y_rows = Self::one_hot(&vec![y; n])?;
            let log_py = self.log_prior_rows(&vec![y; n])?;
            let branch = self.outcome_branch(&s1, &y_rows, &log_py, eps3_by_class[y])?;
            bound = bound.add(&q_y.class_prob(y)?.mul(&branch)?)?;
        }
        Ok(DrBound { bound, class_log_prob: None })
    }

    pub fn unlabeled_pair_bound<R: Rng>(
        &self,
        x1: &Tensor,
        x2: &Tensor,
        rng: &mut R,
    ) -> Result<DrBound> {
        let n = x1.shape()[0];
        let eps1 = self.base.draw_noise(n, rng)?;
        let eps2 = self.base.draw_noise(n, rng)?;
        let eps3_0 = self.base.draw_noise(n, rng)?;
        let eps3_1 = self.base.draw_noise(n, rng)?;
        self.unlabeled_pair_bound_with_noise(x1, x2, &eps1, &eps2, [&eps3_0, &eps3_1])
    }

    /// Pair bound with the x2 reconstruction and z2 KL dropped: those
    /// factors cancel when z2 follows the generative hop. The hop draw only
    /// feeds the classifier.
    pub fn labeled_singleton_bound_with_noise(
        &self,
        x1: &Tensor,
        labels: &[usize],
        eps1: &Tensor,
        eps_hop: &Tensor,
        eps3: &Tensor,
    ) -> Result<DrBound> {
        let (s1, recon1, z2) = self.singleton_common(x1, eps1, eps_hop)?;
        let y_rows = Self::one_hot(labels)?;
        let branch = self.outcome_branch(&s1, &y_rows, &self.log_prior_rows(labels)?, eps3)?;
        let bound = recon1.add(&branch)?;
        let class_log_prob = self.classify(&s1.z, &z2)?.log_prob(labels)?;
        Ok(DrBound { bound, class_log_prob: Some(class_log_prob) })
    }

    pub fn labeled_singleton_bound<R: Rng>(
        &self,
        x1: &Tensor,
        labels: &[usize],
        rng: &mut R,
    ) -> Result<DrBound> {
        let n = x1.shape()[0];
        let eps1 = self.base.draw_noise(n, rng)?;
        let eps_hop = self.base.draw_noise(n, rng)?;
        let eps3 = self.base.draw_noise(n, rng)?;
        self.labeled_singleton_bound_with_noise(x1, labels, &eps1, &eps_hop, &eps3)
    }

    pub fn unlabeled_singleton_bound_with_noise(
        &self,
        x1: &Tensor,
        eps1: &Tensor,
        eps_hop: &Tensor,
        eps3_by_class: [&Tensor; 2],
    ) -> Result<DrBound> {
        let (s1, recon1, z2) = self.singleton_common(x1, eps1, eps_hop)?;
        let q_y = self.classify(&s1.z, &z2)?;
        let mut bound = recon1.add(&q_y.entropy()?)?;
        let n = x1.shape()[0];
        for y in 0..2 {
            let y_rows = Self::one_hot(&vec![y; n])?;
            let log_py = self.log_prior_rows(&vec![y; n])?;
            let branch = self.outcome_branch(&s1, &y_rows, &log_py, eps3_by_class[y])?;
            bound = bound.add(&q_y.class_prob(y)?.mul(&branch)?)?;
        }
        Ok(DrBound { bound, class_log_prob: None })
    }

    pub fn unlabeled_singleton_bound<R: Rng>(&self, x1: &Tensor, rng: &mut R) -> Result<DrBound> {
        let n = x1.shape()[0];
        let eps1 = self.base.draw_noise(n, rng)?;
        let eps_hop = self.base.draw_noise(n, rng)?;
        let eps3_0 = self.base.draw_noise(n, rng)?;
        let eps3_1 = self.base.draw_noise(n, rng)?;
        self.unlabeled_singleton_bound_with_noise(x1, &eps1, &eps_hop, [&eps3_0, &eps3_1])
    }

    /// Batch indices grouped as labeled pairs, unlabeled pairs, labeled
    /// singletons, unlabeled singletons, preserving order within groups.
    fn partition(data: &Dataset, indices: &[usize]) -> [Vec<usize>; 4] {
        let mut parts: [Vec<usize>; 4] = Default::default();
        for &i in indices {
            let s = &data.samples[i];
            let slot = match (s.is_pair(), s.is_labeled()) {
                (true, true) => 0,
                (true, false) => 1,
                (false, true) => 2,
                (false, false) => 3,
            };
            parts[slot].push(i);
        }
        parts
    }

    /// Draw the reparameterization noise for `objective_with_noise` in the
    /// fixed regime order.
    pub fn draw_objective_noise<R: Rng>(
        &self,
        data: &Dataset,
        indices: &[usize],
        rng: &mut R,
    ) -> Result<ObjectiveNoise> {
        let [lp, up, ls, us] = Self::partition(data, indices);
        let mut draw = |n: usize| self.base.draw_noise(n, rng);
        Ok(ObjectiveNoise {
            lp: if lp.is_empty() {
                None
            } else {
                Some((draw(lp.len())?, draw(lp.len())?, draw(lp.len())?))
            },
            up: if up.is_empty() {
                None
            } else {
                Some((draw(up.len())?, draw(up.len())?, draw(up.len())?, draw(up.len())?))
            },
            ls: if ls.is_empty() {
                None
            } else {
                Some((draw(ls.len())?, draw(ls.len())?, draw(ls.len())?))
            },
            us: if us.is_empty() {
                None
            } else {
                Some((draw(us.len())?, draw(us.len())?, draw(us.len())?, draw(us.len())?))
            },
        })
    }

    /// J = sum of the four regime bounds over the batch plus alpha times
    /// the classifier log-likelihood on labeled records; maximize.
    pub fn objective_with_noise(
        &self,
        data: &Dataset,
        indices: &[usize],
        alpha: f64,
        noise: &ObjectiveNoise,
    ) -> Result<ObjectiveValue> {
        if alpha < 0.0 || !alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be finite and >= 0, got {alpha}")));
        }
        let [lp, up, ls, us] = Self::partition(data, indices);
        let mut objective = Tensor::scalar(0.0)?;
        let mut labeled = 0;
        let add_bound = |b: DrBound, obj: &Tensor| -> Result<Tensor> {
            let mut total = obj.add(&b.bound.sum()?)?;
            if let Some(clp) = b.class_log_prob {
                if alpha > 0.0 {
                    total = total.add(&clp.sum()?.mul_scalar(alpha)?)?;
                }
            }
            Ok(total)
        };
        if let Some((e1, e2, e3)) = &noise.lp {
            let x1 = data.x1_tensor(&lp)?;
            let x2 = data.x2_tensor(&lp)?;
            let labels = data.labels_of(&lp)?;
            labeled += lp.len();
            let b = self.labeled_pair_bound_with_noise(&x1, &x2, &labels, e1, e2, e3)?;
            objective = add_bound(b, &objective)?;
        }
        if let Some((e1, e2, e30, e31)) = &noise.up {
            let x1 = data.x1_tensor(&up)?;
            let x2 = data.x2_tensor(&up)?;
            let b = self.unlabeled_pair_bound_with_noise(&x1, &x2, e1, e2, [e30, e31])?;
            objective = add_bound(b, &objective)?;
        }
        if let Some((e1, eh, e3)) = &noise.ls {
            let x1 = data.x1_tensor(&ls)?;
            let labels = data.labels_of(&ls)?;
            labeled += ls.len();
            let b = self.labeled_singleton_bound_with_noise(&x1, &labels, e1, eh, e3)?;
            objective = add_bound(b, &objective)?;
        }
        if let Some((e1, eh, e30, e31)) = &noise.us {
            let x1 = data.x1_tensor(&us)?;
            let b = self.unlabeled_singleton_bound_with_noise(&x1, e1, eh, [e30, e31])?;
            objective = add_bound(b, &objective)?;
        }
        Ok(ObjectiveValue { objective, records: indices.len(), labeled })
    }

    pub fn objective<R: Rng>(
        &self,
        data: &Dataset,
        indices: &[usize],
        alpha: f64,
        rng: &mut R,
    ) -> Result<ObjectiveValue> {
        let noise = self.draw_objective_noise(data, indices, rng)?;
        self.objective_with_noise(data, indices, alpha, &noise)
    }

    /// Default supervision weight: 0.1 * total / labeled, or the configured
    /// override; zero when nothing is labeled.
    pub fn resolve_alpha(&self, data: &Dataset) -> f64 {
        if let Some(a) = self.cfg.alpha {
            return a;
        }
        let counts = data.regime_counts();
        if counts.labeled() == 0 {
            0.0
        } else {
            0.1 * counts.total() as f64 / counts.labeled() as f64
        }
    }

    /// Monte-Carlo responder probability. z1 follows q(.|x1); z2 follows
    /// q(.|x2) when the post-treatment profile is given and the generative
    /// hop otherwise.
    pub fn predict_response<R: Rng>(
        &self,
        x1: &[f64],
        x2: Option<&[f64]>,
        samples: usize,
        rng: &mut R,
    ) -> Result<f64> {
        let n = samples.max(1);
        let tile = |row: &[f64]| -> Result<Tensor> {
            let mut values = Vec::with_capacity(n * row.len());
            for _ in 0..n {
                values.extend_from_slice(row);
            }
            Tensor::new(values, &[n, row.len()])
        };
        let s1 = self.base.encode(&tile(x1)?, rng)?;
        let z2 = match x2 {
            Some(post) => self.base.encode(&tile(post)?, rng)?.z,
            None => self.base.map.forward(&s1.z)?.sample(rng)?.0,
        };
        let probs = self.classify(&s1.z, &z2)?.class_prob(1)?.to_vec();
        Ok(probs.iter().sum::<f64>() / n as f64)
    }

    /// Responder probabilities for dataset records; pairs condition on
    /// their observed post-treatment profile.
    pub fn predict_response_batch<R: Rng>(
        &self,
        data: &Dataset,
        indices: &[usize],
        samples: usize,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        indices
            .iter()
            .map(|&i| {
                let s = &data.samples[i];
                self.predict_response(&s.x1, s.x2.as_deref(), samples, rng)
            })
            .collect()
    }

    /// Validation AUPR of the responder probabilities; mean per-record
    /// objective when the labeled validation records lack a class.
    fn validation_score<R: Rng>(
        &self,
        val: &Dataset,
        alpha: f64,
        eval_samples: usize,
        rng: &mut R,
    ) -> Result<f64> {
        let labeled = val.regime_indices().labeled();
        let labels: Vec<bool> = labeled
            .iter()
            .map(|&i| val.samples[i].label.expect("labeled index"))
            .collect();
        if labels.len() >= 2 && labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
            let scores = self.predict_response_batch(val, &labeled, eval_samples, rng)?;
            return aupr(&RankedPredictions::new(scores, labels)?);
        }
        let idx: Vec<usize> = (0..val.len()).collect();
        let ov = self.objective(val, &idx, alpha, rng)?;
        Ok(ov.objective.item() / val.len() as f64)
    }

    /// Maximize the objective with Adam over regime-mixed minibatches,
    /// stopping early on validation AUPR and restoring the best parameters.
    /// The ablation trains on pairs split into independent singletons with
    /// the perturbation map frozen.
    pub fn train<R: Rng>(&self, data: &Dataset, tc: &TrainConfig, rng: &mut R) -> Result<TrainLog> {
        if data.gene_count != self.cfg.base.gene_count {
            return Err(Error::Data(format!(
                "dataset has {} genes, model expects {}",
                data.gene_count, self.cfg.base.gene_count
            )));
        }
        if data.is_empty() {
            return Err(Error::Data("cannot train on an empty dataset".into()));
        }
        let split_storage;
        let working: &Dataset = if self.cfg.ablate_perturbation {
            split_storage = data.split_pairs_into_singletons();
            &split_storage
        } else {
            data
        };

        let all_params = self.params();
        let params = self.trainable_params();
        let mut adam = Adam::new(tc.adam, &params);
        let val_lines = split_validation_lines(&working.cell_lines(), tc.val_lines_fraction, rng);
        let (train_ds, val_ds) = working.split_by_lines(&val_lines);

        let labeled_idx = train_ds.regime_indices().labeled();
        if !labeled_idx.is_empty() {
            let positives = labeled_idx
                .iter()
                .filter(|&&i| train_ds.samples[i].label == Some(true))
                .count();
            self.set_class_prior(positives as f64 / labeled_idx.len() as f64);
        }
        let alpha = self.resolve_alpha(&train_ds);
        let all_idx: Vec<usize> = (0..train_ds.len()).collect();

        let mut stopper = EarlyStopper::new(false, tc.patience);
        let mut log = TrainLog::default();
        for epoch in 1..=tc.epochs.max(1) {
            let batches = make_batches(&all_idx, tc.batch_size, rng);
            let mut epoch_loss = 0.0;
            for batch in &batches {
                all_params.zero_grad();
                let ov = self.objective(&train_ds, batch, alpha, rng)?;
                let scaled = ov.objective.neg()?.mul_scalar(1.0 / batch.len() as f64)?;
                let loss = if self.cfg.ablate_perturbation {
                    scaled
                } else {
                    scaled.add(&self.base.map_penalty()?)?
                };
                let loss_value = loss.item();
                loss.backward()?;
                if let Err(e) = adam.step(&params) {
                    stopper.restore_best(&params);
                    return Err(e);
                }
                epoch_loss += loss_value;
            }
            let train_loss =
                if batches.is_empty() { f64::NAN } else { epoch_loss / batches.len() as f64 };

            let val_metric = if val_ds.is_empty() {
                -train_loss
            } else {
                self.validation_score(&val_ds, alpha, tc.eval_samples, rng)?
            };

            log.rows.push(EpochRow { epoch, train_loss, recon: None, kl: None, val_metric });
            if stopper.observe(epoch, val_metric, &params) {
                log.stopped_early = true;
                break;
            }
        }
        stopper.restore_best(&params);
        log.best_epoch = stopper.best_epoch();
        log.best_val = stopper.best_metric();
        Ok(log)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sample;
    use crate::tensor::gradcheck::GradCheck;
    use crate::tensor::nn::gaussian;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(seed: u64) -> DrVae {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DrVae::new(DrVaeConfig::tiny(6, 3), &mut rng).unwrap()
    }

    fn batch(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::new(gaussian(rng, rows * cols, 1.0), &[rows, cols]).unwrap()
    }

    /// Perturb every parameter so tests exercise a non-degenerate model.
    fn randomize(model: &DrVae, rng: &mut ChaCha8Rng, std: f64) {
        for (_, t) in model.params().iter() {
            let v: Vec<f64> =
                t.to_vec().iter().map(|x| x + gaussian(rng, 1, std)[0]).collect();
            t.set_values(&v).unwrap();
        }
    }

    fn noise(model: &DrVae, rng: &mut ChaCha8Rng, n: usize) -> Tensor {
        model.base().draw_noise(n, rng).unwrap()
    }

    #[test]
    fn zero_classifier_is_uniform_and_ignores_matched_latents() {
        let model = tiny_model(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z1 = batch(&mut rng, 3, 3);
        let q = model.classify(&z1, &z1).unwrap();
        assert!(q.probs.to_vec().iter().all(|&p| p == 0.5));

        // With random weights, z2 = z1 zeroes the difference block: only
        // the first-block weights can matter.
        let w: Vec<f64> = gaussian(&mut rng, 12, 1.0);
        model.params().get("cls.w").unwrap().set_values(&w).unwrap();
        let full = model.classify(&z1, &z1).unwrap().probs.to_vec();
        let mut zeroed = w.clone();
        for r in 0..2 {
            for c in 3..6 {
                zeroed[r * 6 + c] = 0.0;
            }
        }
        model.params().get("cls.w").unwrap().set_values(&zeroed).unwrap();
        let trimmed = model.classify(&z1, &z1).unwrap().probs.to_vec();
        assert_eq!(full, trimmed);
    }

    #[test]
    fn classifier_gradient_matches_finite_differences() {
        let model = tiny_model(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        randomize(&model, &mut rng, 0.05);
        let z1 = batch(&mut rng, 4, 3);
        let z2 = batch(&mut rng, 4, 3);
        let mut cls = ParamSet::new();
        model.classifier.params("cls", &mut cls);
        let report = GradCheck::with_tolerance(1e-4, 1e-5, 1e-8)
            .run(&cls.tensors(), || {
                model.classify(&z1, &z2)?.log_prob(&[0, 1, 1, 0])?.sum()
            })
            .unwrap();
        assert!(report.pass, "{:?}", report.failures);
    }

    #[test]
    fn labeled_pair_bound_is_finite_across_many_draws() {
        let model = tiny_model(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        randomize(&model, &mut rng, 0.02);
        for draw in 0..1000 {
            let x1 = batch(&mut rng, 1, 6);
            let x2 = batch(&mut rng, 1, 6);
            let b = model.labeled_pair_bound(&x1, &x2, &[draw % 2], &mut rng).unwrap();
            let v = b.bound.to_vec()[0];
            assert!(v.is_finite(), "draw {draw}: {v}");
        }
    }

    #[test]
    fn unlabeled_pair_marginalizes_exactly() {
        let model = tiny_model(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        randomize(&model, &mut rng, 0.05);
        model.set_class_prior(0.37);
        let n = 3;
        let x1 = batch(&mut rng, n, 6);
        let x2 = batch(&mut rng, n, 6);
        let (e1, e2) = (noise(&model, &mut rng, n), noise(&model, &mut rng, n));
        let (e30, e31) = (noise(&model, &mut rng, n), noise(&model, &mut rng, n));

        let up = model
            .unlabeled_pair_bound_with_noise(&x1, &x2, &e1, &e2, [&e30, &e31])
            .unwrap();

        // Independent reassembly from labeled bounds and classifier probs.
        let l0 = model
            .labeled_pair_bound_with_noise(&x1, &x2, &vec![0; n], &e1, &e2, &e30)
            .unwrap();
        let l1 = model
            .labeled_pair_bound_with_noise(&x1, &x2, &vec![1; n], &e1, &e2, &e31)
            .unwrap();
        let s1 = model.base().encode_with_noise(&x1, &e1).unwrap();
        let s2 = model.base().encode_with_noise(&x2, &e2).unwrap();
        let q = model.classify(&s1.z, &s2.z).unwrap();
        let (p0, p1) = (q.class_prob(0).unwrap().to_vec(), q.class_prob(1).unwrap().to_vec());
        let h = q.entropy().unwrap().to_vec();
        for i in 0..n {
            let oracle = p0[i] * l0.bound.to_vec()[i] + p1[i] * l1.bound.to_vec()[i] + h[i];
            let got = up.bound.to_vec()[i];
            assert!((got - oracle).abs() < 1e-10, "row {i}: {got} vs {oracle}");
        }
    }

    #[test]
    fn saturated_classifier_collapses_to_the_labeled_bound() {
        let model = tiny_model(9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        randomize(&model, &mut rng, 0.05);
        model.params().get("cls.b").unwrap().set_values(&[40.0, -40.0]).unwrap();
        let x1 = batch(&mut rng, 2, 6);
        let x2 = batch(&mut rng, 2, 6);
        let (e1, e2) = (noise(&model, &mut rng, 2), noise(&model, &mut rng, 2));
        let (e30, e31) = (noise(&model, &mut rng, 2), noise(&model, &mut rng, 2));
        let up = model
            .unlabeled_pair_bound_with_noise(&x1, &x2, &e1, &e2, [&e30, &e31])
            .unwrap();
        let l0 = model
            .labeled_pair_bound_with_noise(&x1, &x2, &[0, 0], &e1, &e2, &e30)
            .unwrap();
        for (got, want) in up.bound.to_vec().iter().zip(l0.bound.to_vec()) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn uniform_classifier_averages_the_labeled_bounds_plus_ln2() {
        let model = tiny_model(11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        // Leave the classifier at zero: q(y) is exactly uniform.
        let x1 = batch(&mut rng, 2, 6);
        let x2 = batch(&mut rng, 2, 6);
        let (e1, e2) = (noise(&model, &mut rng, 2), noise(&model, &mut rng, 2));
        let (e30, e31) = (noise(&model, &mut rng, 2), noise(&model, &mut rng, 2));
        let up = model
            .unlabeled_pair_bound_with_noise(&x1, &x2, &e1, &e2, [&e30, &e31])
            .unwrap();
        let l0 = model
            .labeled_pair_bound_with_noise(&x1, &x2, &[0, 0], &e1, &e2, &e30)
            .unwrap();
        let l1 = model
            .labeled_pair_bound_with_noise(&x1, &x2, &[1, 1], &e1, &e2, &e31)
            .unwrap();
        for i in 0..2 {
            let want =
                0.5 * (l0.bound.to_vec()[i] + l1.bound.to_vec()[i]) + std::f64::consts::LN_2;
            let got = up.bound.to_vec()[i];
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn unlabeled_bound_dominates_the_worst_labeled_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for trial in 0..50 {
            let model = tiny_model(100 + trial);
            randomize(&model, &mut rng, 0.05);
            let x1 = batch(&mut rng, 1, 6);
            let x2 = batch(&mut rng, 1, 6);
            let (e1, e2) = (noise(&model, &mut rng, 1), noise(&model, &mut rng, 1));
            let (e30, e31) = (noise(&model, &mut rng, 1), noise(&model, &mut rng, 1));
            let up = model
                .unlabeled_pair_bound_with_noise(&x1, &x2, &e1, &e2, [&e30, &e31])
                .unwrap()
                .bound
                .to_vec()[0];
            let l0 = model
                .labeled_pair_bound_with_noise(&x1, &x2, &[0], &e1, &e2, &e30)
                .unwrap()
                .bound
                .to_vec()[0];
            let l1 = model
                .labeled_pair_bound_with_noise(&x1, &x2, &[1], &e1, &e2, &e31)
                .unwrap()
                .bound
                .to_vec()[0];
            assert!(up >= l0.min(l1) - 1e-10, "trial {trial}: {up} < min({l0}, {l1})");
        }
    }

    #[test]
    fn labeled_singleton_drops_exactly_the_post_treatment_terms() {
        let model = tiny_model(14);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        randomize(&model, &mut rng, 0.05);
        model.set_class_prior(0.25);
        let n = 3;
        let x1 = batch(&mut rng, n, 6);
        let x2 = batch(&mut rng, n, 6);
        let (e1, e2, e3) = (
            noise(&model, &mut rng, n),
            noise(&model, &mut rng, n),
            noise(&model, &mut rng, n),
        );
        let eh = noise(&model, &mut rng, n);
        let labels = [0, 1, 0];
        let lp =
            model.labeled_pair_bound_with_noise(&x1, &x2, &labels, &e1, &e2, &e3).unwrap();
        let ls = model
            .labeled_singleton_bound_with_noise(&x1, &labels, &e1, &eh, &e3)
            .unwrap();

        // Recompute the x2 contribution (recon2 - fb(kl2)) from public
        // pieces with the same pinned noise.
        let s1 = model.base().encode_with_noise(&x1, &e1).unwrap();
        let s2 = model.base().encode_with_noise(&x2, &e2).unwrap();
        let recon2 = model.base().decode(&s2.z).unwrap().log_prob_rows(&x2).unwrap();
        let hop = model.base().map.forward(&s1.z).unwrap();
        let kl2_dims =
            s2.log_q_dims.sub(&hop.log_prob_dims(&s2.z).unwrap()).unwrap();
        let kl2 = free_bits(&kl2_dims, model.cfg.base.free_bits).unwrap();
        let post = recon2.sub(&kl2).unwrap().to_vec();
        for i in 0..n {
            let want = lp.bound.to_vec()[i] - post[i];
            let got = ls.bound.to_vec()[i];
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn identity_hop_keeps_the_difference_block_centered() {
        let model = tiny_model(16);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x1 = batch(&mut rng, 1, 6);
        let s1 = model.base().encode(&x1, &mut rng).unwrap();
        let hop = model.base().map.forward(&s1.z).unwrap();
        let draws = 2000;
        let mut mean = vec![0.0; 3];
        for _ in 0..draws {
            let (z2, _) = hop.sample(&mut rng).unwrap();
            for (m, (a, b)) in mean.iter_mut().zip(z2.to_vec().iter().zip(s1.z.to_vec())) {
                *m += (a - b) / draws as f64;
            }
        }
        // Hop mean equals z1 at init, so differences average to zero.
        assert!(mean.iter().all(|m| m.abs() < 0.1), "{mean:?}");
        assert_eq!(hop.mean.to_vec(), s1.z.to_vec());
    }

    fn toy_dataset() -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut samples = Vec::new();
        for i in 0..8 {
            let x1: Vec<f64> = gaussian(&mut rng, 6, 1.0);
            let pair = i % 2 == 0;
            let label = match i % 4 {
                0 => Some(true),
                1 => Some(false),
                _ => None,
            };
            samples.push(Sample {
                cell_line: format!("L{i}"),
                replicate: 0,
                x1,
                x2: if pair { Some(gaussian(&mut rng, 6, 1.0)) } else { None },
                label,
            });
        }
        Dataset::new(6, samples).unwrap()
    }

    #[test]
    fn objective_is_affine_in_alpha_and_flat_without_labels() {
        let model = tiny_model(19);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        randomize(&model, &mut rng, 0.05);
        let data = toy_dataset();
        let idx: Vec<usize> = (0..data.len()).collect();
        let noise = model.draw_objective_noise(&data, &idx, &mut rng).unwrap();
        let j = |alpha: f64| {
            model
                .objective_with_noise(&data, &idx, alpha, &noise)
                .unwrap()
                .objective
                .item()
        };
        let (j0, j1, j_half) = (j(0.0), j(1.0), j(0.5));
        assert!((j_half - 0.5 * (j0 + j1)).abs() < 1e-10);
        assert!(j1 != j0, "labeled records must contribute a classification term");

        let unlabeled: Vec<usize> =
            idx.iter().copied().filter(|&i| !data.samples[i].is_labeled()).collect();
        let un_noise = model.draw_objective_noise(&data, &unlabeled, &mut rng).unwrap();
        let ju = |alpha: f64| {
            model
                .objective_with_noise(&data, &unlabeled, alpha, &un_noise)
                .unwrap()
                .objective
                .item()
        };
        assert_eq!(ju(0.0), ju(5.0));
    }

    #[test]
    fn classifier_gradient_is_nonzero_on_labeled_batches_only_at_init() {
        let model = tiny_model(21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let data = toy_dataset();
        let labeled: Vec<usize> =
            (0..data.len()).filter(|&i| data.samples[i].is_labeled()).collect();
        let params = model.params();

        params.zero_grad();
        let ov = model.objective(&data, &labeled, 1.0, &mut rng).unwrap();
        ov.objective.backward().unwrap();
        let g: Vec<f64> = params.get("cls.w").unwrap().grad_or_zeros();
        assert!(g.iter().any(|&v| v != 0.0), "labeled batch must train the classifier");

        let unlabeled: Vec<usize> =
            (0..data.len()).filter(|&i| !data.samples[i].is_labeled()).collect();
        params.zero_grad();
        let ov = model.objective(&data, &unlabeled, 1.0, &mut rng).unwrap();
        ov.objective.backward().unwrap();
        let g: Vec<f64> = params.get("cls.w").unwrap().grad_or_zeros();
        assert!(g.iter().all(|&v| v.is_finite()));
    }

    #[test]
    fn alpha_scales_the_classifier_gradient_monotonically() {
        let data = toy_dataset();
        let labeled: Vec<usize> =
            (0..data.len()).filter(|&i| data.samples[i].is_labeled()).collect();
        let mut norms = Vec::new();
        for &alpha in &[0.0, 1.0, 10.0, 100.0] {
            let model = tiny_model(23);
            let mut rng = ChaCha8Rng::seed_from_u64(24);
            let params = model.params();
            params.zero_grad();
            let ov = model.objective(&data, &labeled, alpha, &mut rng).unwrap();
            ov.objective.backward().unwrap();
            let g = params.get("cls.w").unwrap().grad_or_zeros();
            norms.push(g.iter().map(|v| v * v).sum::<f64>().sqrt());
        }
        for w in norms.windows(2) {
            assert!(w[1] > w[0], "{norms:?}");
        }
    }

    #[test]
    fn full_objective_gradient_matches_finite_differences() {
        let model = tiny_model(25);
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        randomize(&model, &mut rng, 0.05);
        let data = toy_dataset();
        let idx: Vec<usize> = (0..data.len()).collect();
        let noise = model.draw_objective_noise(&data, &idx, &mut rng).unwrap();
        let params = model.params();
        let report = GradCheck::with_tolerance(1e-4, 1e-3, 1e-6)
            .run(&params.tensors(), || {
                Ok(model.objective_with_noise(&data, &idx, 0.7, &noise)?.objective)
            })
            .unwrap();
        assert!(
            report.pass,
            "max rel {:.3e}, failures {:?}",
            report.max_rel_err, report.failures
        );
    }

    #[test]
    fn untrained_model_predicts_one_half() {
        let model = tiny_model(27);
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let x1 = gaussian(&mut rng, 6, 1.0);
        let p = model.predict_response(&x1, None, 16, &mut rng).unwrap();
        assert_eq!(p, 0.5);
        let x2 = gaussian(&mut rng, 6, 1.0);
        let p = model.predict_response(&x1, Some(&x2), 16, &mut rng).unwrap();
        assert_eq!(p, 0.5);
    }

    #[test]
    fn prediction_stays_in_the_unit_interval_after_perturbation() {
        let model = tiny_model(29);
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        randomize(&model, &mut rng, 0.5);
        for _ in 0..20 {
            let x1 = gaussian(&mut rng, 6, 2.0);
            let p = model.predict_response(&x1, None, 4, &mut rng).unwrap();
            assert!((0.0..=1.0).contains(&p), "{p}");
        }
    }

    fn training_dataset(lines: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut samples = Vec::new();
        for i in 0..lines {
            let responder = i % 2 == 0;
            let shift = if responder { 1.0 } else { -1.0 };
            let x1: Vec<f64> = gaussian(&mut rng, 6, 1.0);
            let x2: Vec<f64> = x1.iter().map(|v| v + shift).collect();
            samples.push(Sample {
                cell_line: format!("L{i}"),
                replicate: 0,
                x1,
                x2: Some(x2),
                label: if i % 3 == 0 { None } else { Some(responder) },
            });
        }
        Dataset::new(6, samples).unwrap()
    }

    #[test]
    fn training_is_seed_deterministic() {
        let data = training_dataset(10);
        let tc = TrainConfig { epochs: 3, batch_size: 4, eval_samples: 2, ..TrainConfig::default() };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(32);
            let model = DrVae::new(DrVaeConfig::tiny(6, 3), &mut rng).unwrap();
            let log = model.train(&data, &tc, &mut rng).unwrap();
            let params: Vec<Vec<f64>> =
                model.params().iter().map(|(_, t)| t.to_vec()).collect();
            (log, params)
        };
        let (log_a, params_a) = run();
        let (log_b, params_b) = run();
        assert_eq!(params_a, params_b);
        assert_eq!(log_a.rows.len(), log_b.rows.len());
        for (a, b) in log_a.rows.iter().zip(&log_b.rows) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
            assert_eq!(a.val_metric.to_bits(), b.val_metric.to_bits());
        }
    }

    #[test]
    fn ablated_training_freezes_the_perturbation_map() {
        let data = training_dataset(10);
        let tc = TrainConfig { epochs: 2, batch_size: 4, eval_samples: 2, ..TrainConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut cfg = DrVaeConfig::tiny(6, 3);
        cfg.ablate_perturbation = true;
        let model = DrVae::new(cfg, &mut rng).unwrap();
        model.train(&data, &tc, &mut rng).unwrap();
        let params = model.params();
        assert!(params.get("map.w").unwrap().to_vec().iter().all(|&v| v == 0.0));
        assert!(params.get("map.b").unwrap().to_vec().iter().all(|&v| v == 0.0));
        // Everything else moved.
        let enc_moved = params.get("cls.w").unwrap().to_vec().iter().any(|&v| v != 0.0);
        assert!(enc_moved);
    }
}
