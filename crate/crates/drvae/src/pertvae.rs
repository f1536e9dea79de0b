//! Perturbation VAE: a variational autoencoder over expression profiles
//! whose latent space carries a residual affine map modeling the effect of a
//! compound.
//!
//! Generative model, per record:
//!   z1 ~ N(0, I)                      pre-treatment latent
//!   x1 | z1 ~ N(μ(z1), σ(z1))         decoder
//!   z2 | z1 ~ N(z1 + W z1 + b, σ_m(z1))   latent perturbation hop
//!   x2 | z2 ~ N(μ(z2), σ(z2))         same decoder
//!
//! The posterior q(z|x) is a diagonal Gaussian pushed through a stack of
//! gated autoregressive flow steps conditioned on an encoder context. Pairs
//! (x1, x2) train both halves; singletons train the autoencoding half alone.
//! W, b, and the hop's scale head start at zero, so the map begins as an
//! identity hop with unit noise, and W and b carry an L2 penalty.

use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flows::{default_steps, flow_sample_with_noise, FlowSample, IafStep};
use crate::prob::{free_bits, DiagGaussian};
use crate::tensor::adam::Adam;
use crate::tensor::nn::{gaussian, DenseLayer, LinearLayer, Mlp, ParamSet};
use crate::tensor::Tensor;
use crate::training::{
    make_batches, split_validation_lines, EarlyStopper, EpochRow, TrainConfig, TrainLog,
};

#[derive(Debug, Clone)]
pub struct PertVaeConfig {
    pub gene_count: usize,
    pub latent_dim: usize,
    pub enc_hidden: Vec<usize>,
    pub dec_hidden: Vec<usize>,
    /// Width of the encoder context fed to every flow step.
    pub context_dim: usize,
    pub flow_steps: usize,
    pub made_hidden: usize,
    /// Per-dimension KL floor in nats (0 disables the clamp).
    pub free_bits: f64,
    /// Pre-scale activations are clamped to ±this before exponentiation.
    pub pre_scale_clamp: f64,
    /// Lower bound on decoder observation scales.
    pub obs_scale_floor: f64,
    /// L2 weight on the perturbation map's W and b.
    pub map_l2: f64,
}

impl PertVaeConfig {
    /// Full-scale architecture: 100 latent dimensions, 500/300 encoder and
    /// 300/500 decoder hidden layers, a 200-unit flow context, and two flow
    /// steps with 300 hidden units each.
    pub fn reference(gene_count: usize) -> Self {
        PertVaeConfig {
            gene_count,
            latent_dim: 100,
            enc_hidden: vec![500, 300],
            dec_hidden: vec![300, 500],
            context_dim: 200,
            flow_steps: 2,
            made_hidden: 300,
            free_bits: 0.1,
            pre_scale_clamp: 7.0,
            obs_scale_floor: 1e-3,
            map_l2: 1e-3,
        }
    }

    /// Same topology scaled down for synthetic benchmarks.
    pub fn compact(gene_count: usize, latent_dim: usize) -> Self {
        PertVaeConfig {
            gene_count,
            latent_dim,
            enc_hidden: vec![64, 32],
            dec_hidden: vec![32, 64],
            context_dim: 16,
            flow_steps: 2,
            made_hidden: 64,
            free_bits: 0.1,
            pre_scale_clamp: 7.0,
            obs_scale_floor: 1e-3,
            map_l2: 1e-3,
        }
    }

    /// Minimal architecture for finite-difference tests.
    pub fn tiny(gene_count: usize, latent_dim: usize) -> Self {
        PertVaeConfig {
            gene_count,
            latent_dim,
            enc_hidden: vec![8],
            dec_hidden: vec![8],
            context_dim: 4,
            flow_steps: 2,
            made_hidden: 8,
            free_bits: 0.1,
            pre_scale_clamp: 7.0,
            obs_scale_floor: 1e-3,
            map_l2: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gene_count == 0 || self.latent_dim == 0 {
            return Err(Error::Config("gene count and latent dim must be positive".into()));
        }
        if self.flow_steps > 0 && self.made_hidden == 0 {
            return Err(Error::Config("flow steps need hidden units".into()));
        }
        if self.pre_scale_clamp <= 0.0 || self.obs_scale_floor <= 0.0 {
            return Err(Error::Config("scale clamp and floor must be positive".into()));
        }
        if self.free_bits < 0.0 || self.map_l2 < 0.0 {
            return Err(Error::Config("free bits and map L2 must be non-negative".into()));
        }
        Ok(())
    }
}

/// Encoder: ELU trunk with three linear heads producing the posterior mean,
/// pre-scale, and the flow context.
struct Encoder {
    trunk: Mlp,
    mean_head: LinearLayer,
    scale_head: LinearLayer,
    ctx_head: LinearLayer,
    clamp: f64,
}

impl Encoder {
    fn new<R: Rng>(cfg: &PertVaeConfig, rng: &mut R) -> Self {
        let trunk = Mlp::new(cfg.gene_count, &cfg.enc_hidden, rng);
        let width = if cfg.enc_hidden.is_empty() { cfg.gene_count } else { trunk.out_dim() };
        Encoder {
            trunk,
            mean_head: LinearLayer::new(width, cfg.latent_dim, rng),
            scale_head: LinearLayer::zero_gains(width, cfg.latent_dim, rng),
            ctx_head: LinearLayer::new(width, cfg.context_dim, rng),
            clamp: cfg.pre_scale_clamp,
        }
    }

    fn forward(&self, x: &Tensor) -> Result<(DiagGaussian, Tensor)> {
        let t = self.trunk.forward(x)?;
        let mean = self.mean_head.forward(&t)?;
        let scale = self.scale_head.forward(&t)?.clamp(-self.clamp, self.clamp)?.exp()?;
        let ctx = self.ctx_head.forward(&t)?.elu()?;
        Ok((DiagGaussian::new(mean, scale)?, ctx))
    }

    fn params(&self, prefix: &str, out: &mut ParamSet) {
        self.trunk.params(&format!("{prefix}.trunk"), out);
        self.mean_head.params(&format!("{prefix}.mean"), out);
        self.scale_head.params(&format!("{prefix}.scale"), out);
        self.ctx_head.params(&format!("{prefix}.ctx"), out);
    }
}

/// Decoder: ELU trunk with mean and floored-scale heads over genes.
struct Decoder {
    trunk: Mlp,
    mean_head: LinearLayer,
    scale_head: LinearLayer,
    clamp: f64,
    floor: f64,
}

impl Decoder {
    fn new<R: Rng>(cfg: &PertVaeConfig, rng: &mut R) -> Self {
        let trunk = Mlp::new(cfg.latent_dim, &cfg.dec_hidden, rng);
        let width = if cfg.dec_hidden.is_empty() { cfg.latent_dim } else { trunk.out_dim() };
        Decoder {
            trunk,
            mean_head: LinearLayer::new(width, cfg.gene_count, rng),
            scale_head: LinearLayer::zero_gains(width, cfg.gene_count, rng),
            clamp: cfg.pre_scale_clamp,
            floor: cfg.obs_scale_floor,
        }
    }

    fn forward(&self, z: &Tensor) -> Result<DiagGaussian> {
        let t = self.trunk.forward(z)?;
        let mean = self.mean_head.forward(&t)?;
        let scale = self
            .scale_head
            .forward(&t)?
            .clamp(-self.clamp, self.clamp)?
            .exp()?
            .max_scalar(self.floor)?;
        DiagGaussian::new(mean, scale)
    }

    fn params(&self, prefix: &str, out: &mut ParamSet) {
        self.trunk.params(&format!("{prefix}.trunk"), out);
        self.mean_head.params(&format!("{prefix}.mean"), out);
        self.scale_head.params(&format!("{prefix}.scale"), out);
    }
}

/// Latent drug effect: mean z1 + W z1 + b with a zero-initialized scale
/// head, so the untrained map is an identity hop with unit noise.
pub struct PerturbationMap {
    pub w: Tensor,
    pub b: Tensor,
    scale_head: DenseLayer,
    clamp: f64,
}

impl PerturbationMap {
    fn new(latent_dim: usize, clamp: f64) -> Self {
        PerturbationMap {
            w: Tensor::param(vec![0.0; latent_dim * latent_dim], &[latent_dim, latent_dim])
                .expect("finite init"),
            b: Tensor::param(vec![0.0; latent_dim], &[latent_dim]).expect("finite init"),
            scale_head: DenseLayer::zeros(latent_dim, latent_dim),
            clamp,
        }
    }

    /// p(z2 | z1) as a diagonal Gaussian.
    pub fn forward(&self, z1: &Tensor) -> Result<DiagGaussian> {
        let mean = z1.matmul(&self.w.transpose()?)?.add(z1)?.add_row(&self.b)?;
        let scale = self
            .scale_head
            .forward(z1)?
            .clamp(-self.clamp, self.clamp)?
            .exp()?;
        DiagGaussian::new(mean, scale)
    }

    /// Squared-norm penalty on W and b.
    pub fn l2(&self) -> Result<Tensor> {
        self.w.square()?.sum()?.add(&self.b.square()?.sum()?)
    }

    fn params(&self, prefix: &str, out: &mut ParamSet) {
        out.push(format!("{prefix}.w"), &self.w);
        out.push(format!("{prefix}.b"), &self.b);
        self.scale_head.params(&format!("{prefix}.scale"), out);
    }
}

/// Per-record bound values and their additive pieces, each [batch].
pub struct ElboTerms {
    /// recon_pre − kl_pre (+ recon_post − kl_post for pairs).
    pub bound: Tensor,
    pub recon_pre: Tensor,
    pub kl_pre: Tensor,
    pub recon_post: Option<Tensor>,
    pub kl_post: Option<Tensor>,
}

pub struct PertVae {
    pub cfg: PertVaeConfig,
    encoder: Encoder,
    decoder: Decoder,
    flow: Vec<IafStep>,
    pub map: PerturbationMap,
}

impl PertVae {
    /// Construction order is fixed, so one seeded RNG yields identical
    /// initial parameters on every run.
    pub fn new<R: Rng>(cfg: PertVaeConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(&cfg, rng);
        let decoder = Decoder::new(&cfg, rng);
        let flow = default_steps(
            cfg.latent_dim,
            cfg.context_dim,
            cfg.made_hidden,
            cfg.flow_steps,
            rng,
        )?;
        let map = PerturbationMap::new(cfg.latent_dim, cfg.pre_scale_clamp);
        Ok(PertVae { cfg, encoder, decoder, flow, map })
    }

    pub fn params(&self) -> ParamSet {
        let mut ps = ParamSet::new();
        self.encoder.params("enc", &mut ps);
        self.decoder.params("dec", &mut ps);
        for (i, step) in self.flow.iter().enumerate() {
            step.params(&format!("flow.{i}"), &mut ps);
        }
        self.map.params("map", &mut ps);
        ps
    }

    /// Draw standard normal noise shaped for a batch of posterior samples.
    pub fn draw_noise<R: Rng>(&self, batch: usize, rng: &mut R) -> Result<Tensor> {
        Tensor::new(
            gaussian(rng, batch * self.cfg.latent_dim, 1.0),
            &[batch, self.cfg.latent_dim],
        )
    }

    /// Posterior sample for a [batch, G] input with fresh noise.
    pub fn encode<R: Rng>(&self, x: &Tensor, rng: &mut R) -> Result<FlowSample> {
        let eps = self.draw_noise(x.shape()[0], rng)?;
        self.encode_with_noise(x, &eps)
    }

    /// Posterior sample with pinned base noise; identical noise replays the
    /// identical sample.
    pub fn encode_with_noise(&self, x: &Tensor, eps: &Tensor) -> Result<FlowSample> {
        let (base, ctx) = self.encoder.forward(x)?;
        flow_sample_with_noise(&base, &self.flow, Some(&ctx), eps)
    }

    pub fn decode(&self, z: &Tensor) -> Result<DiagGaussian> {
        self.decoder.forward(z)
    }

    /// KL(q(z|x) ‖ prior) per dimension from a posterior sample, followed by
    /// the free-bits clamp when summing rows.
    fn clamped_kl(&self, sample: &FlowSample, prior_log_dims: &Tensor) -> Result<Tensor> {
        let kl_dims = sample.log_q_dims.sub(prior_log_dims)?;
        free_bits(&kl_dims, self.cfg.free_bits)
    }

    /// Bound for records that have both profiles, with pinned noise.
    pub fn pair_bound_with_noise(
        &self,
        x1: &Tensor,
        x2: &Tensor,
        eps1: &Tensor,
        eps2: &Tensor,
    ) -> Result<ElboTerms> {
        let s1 = self.encode_with_noise(x1, eps1)?;
        let recon_pre = self.decoder.forward(&s1.z)?.log_prob_rows(x1)?;
        let prior = DiagGaussian::standard(s1.z.shape());
        let kl_pre = self.clamped_kl(&s1, &prior.log_prob_dims(&s1.z)?)?;

        let s2 = self.encode_with_noise(x2, eps2)?;
        let recon_post = self.decoder.forward(&s2.z)?.log_prob_rows(x2)?;
        let hop = self.map.forward(&s1.z)?;
        let kl_post = self.clamped_kl(&s2, &hop.log_prob_dims(&s2.z)?)?;

        let bound = recon_pre.sub(&kl_pre)?.add(&recon_post)?.sub(&kl_post)?;
        Ok(ElboTerms {
            bound,
            recon_pre,
            kl_pre,
            recon_post: Some(recon_post),
            kl_post: Some(kl_post),
        })
    }

    /// Pair bound with fresh noise; consumes noise for x1 rows, then x2 rows.
    pub fn pair_bound<R: Rng>(&self, x1: &Tensor, x2: &Tensor, rng: &mut R) -> Result<ElboTerms> {
        let eps1 = self.draw_noise(x1.shape()[0], rng)?;
        let eps2 = self.draw_noise(x2.shape()[0], rng)?;
        self.pair_bound_with_noise(x1, x2, &eps1, &eps2)
    }

    /// Bound for pre-treatment-only records, with pinned noise.
    pub fn singleton_bound_with_noise(&self, x1: &Tensor, eps: &Tensor) -> Result<ElboTerms> {
        let s1 = self.encode_with_noise(x1, eps)?;
        let recon_pre = self.decoder.forward(&s1.z)?.log_prob_rows(x1)?;
        let prior = DiagGaussian::standard(s1.z.shape());
        let kl_pre = self.clamped_kl(&s1, &prior.log_prob_dims(&s1.z)?)?;
        let bound = recon_pre.sub(&kl_pre)?;
        Ok(ElboTerms { bound, recon_pre, kl_pre, recon_post: None, kl_post: None })
    }

    pub fn singleton_bound<R: Rng>(&self, x1: &Tensor, rng: &mut R) -> Result<ElboTerms> {
        let eps = self.draw_noise(x1.shape()[0], rng)?;
        self.singleton_bound_with_noise(x1, &eps)
    }

    /// L2 penalty on the perturbation map, weighted by the config.
    pub fn map_penalty(&self) -> Result<Tensor> {
        self.map.l2()?.mul_scalar(self.cfg.map_l2)
    }

    /// Monte-Carlo posterior mean of z1: [batch, latent].
    pub fn latent_representation<R: Rng>(
        &self,
        x: &Tensor,
        samples: usize,
        rng: &mut R,
    ) -> Result<Tensor> {
        let mut acc = vec![0.0; x.shape()[0] * self.cfg.latent_dim];
        for _ in 0..samples.max(1) {
            let s = self.encode(x, rng)?;
            for (a, v) in acc.iter_mut().zip(s.z.to_vec()) {
                *a += v;
            }
        }
        let n = samples.max(1) as f64;
        for a in &mut acc {
            *a /= n;
        }
        Tensor::new(acc, &[x.shape()[0], self.cfg.latent_dim])
    }

    /// Push a latent representation through the perturbation map's mean:
    /// (I + W) z + b.
    pub fn mapped_representation(&self, z: &Tensor) -> Result<Tensor> {
        let hop = self.map.forward(z)?;
        Tensor::new(hop.mean.to_vec(), hop.mean.shape())
    }

    /// Monte-Carlo estimate of E[x2 | x1]: encode, hop, decode, averaging
    /// decoder means over `samples` draws.
    pub fn predict_post_treatment<R: Rng>(
        &self,
        x1: &Tensor,
        samples: usize,
        rng: &mut R,
    ) -> Result<Tensor> {
        let mut acc = vec![0.0; x1.numel()];
        for _ in 0..samples.max(1) {
            let s1 = self.encode(x1, rng)?;
            let hop = self.map.forward(&s1.z)?;
            let (z2, _) = hop.sample(rng)?;
            let px = self.decoder.forward(&z2)?;
            for (a, v) in acc.iter_mut().zip(px.mean.to_vec()) {
                *a += v;
            }
        }
        let n = samples.max(1) as f64;
        for a in &mut acc {
            *a /= n;
        }
        Tensor::new(acc, x1.shape())
    }

    /// Monte-Carlo reconstruction E[x̂1 | x1] through the autoencoding path.
    pub fn reconstruct<R: Rng>(&self, x1: &Tensor, samples: usize, rng: &mut R) -> Result<Tensor> {
        let mut acc = vec![0.0; x1.numel()];
        for _ in 0..samples.max(1) {
            let s1 = self.encode(x1, rng)?;
            let px = self.decoder.forward(&s1.z)?;
            for (a, v) in acc.iter_mut().zip(px.mean.to_vec()) {
                *a += v;
            }
        }
        let n = samples.max(1) as f64;
        for a in &mut acc {
            *a /= n;
        }
        Tensor::new(acc, x1.shape())
    }

    /// Mean squared error between predicted and observed post-treatment
    /// profiles over the pair records of `data`.
    pub fn perturbation_mse<R: Rng>(
        &self,
        data: &Dataset,
        samples: usize,
        rng: &mut R,
    ) -> Result<Option<f64>> {
        let pairs = data.regime_indices().pairs();
        if pairs.is_empty() {
            return Ok(None);
        }
        let x1 = data.x1_tensor(&pairs)?;
        let x2 = data.x2_tensor(&pairs)?;
        let pred = self.predict_post_treatment(&x1, samples, rng)?;
        let mse = pred
            .to_vec()
            .iter()
            .zip(x2.to_vec())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / x2.numel() as f64;
        Ok(Some(mse))
    }

    /// Mean of the evidence bound over all records (pairs and singletons),
    /// one posterior sample per record.
    pub fn mean_bound<R: Rng>(&self, data: &Dataset, rng: &mut R) -> Result<f64> {
        let idx = data.regime_indices();
        let mut total = 0.0;
        let pairs = idx.pairs();
        if !pairs.is_empty() {
            let terms =
                self.pair_bound(&data.x1_tensor(&pairs)?, &data.x2_tensor(&pairs)?, rng)?;
            total += terms.bound.to_vec().iter().sum::<f64>();
        }
        let singles = idx.singletons();
        if !singles.is_empty() {
            let terms = self.singleton_bound(&data.x1_tensor(&singles)?, rng)?;
            total += terms.bound.to_vec().iter().sum::<f64>();
        }
        Ok(total / data.len() as f64)
    }

    /// Maximize the bound with Adam and regime-grouped minibatches. Early
    /// stopping watches the validation perturbation MSE (falling back to the
    /// negative mean bound when the validation split has no pairs) and
    /// restores the best parameters before returning.
    pub fn train<R: Rng>(
        &self,
        data: &Dataset,
        tc: &TrainConfig,
        rng: &mut R,
    ) -> Result<TrainLog> {
        if data.gene_count != self.cfg.gene_count {
            return Err(Error::Data(format!(
                "dataset has {} genes, model expects {}",
                data.gene_count, self.cfg.gene_count
            )));
        }
        if data.is_empty() {
            return Err(Error::Data("cannot train on an empty dataset".into()));
        }
        let params = self.params();
        let mut adam = Adam::new(tc.adam, &params);
        let val_lines = split_validation_lines(&data.cell_lines(), tc.val_lines_fraction, rng);
        let (train_ds, val_ds) = data.split_by_lines(&val_lines);
        let idx = train_ds.regime_indices();
        let (pair_idx, single_idx) = (idx.pairs(), idx.singletons());

        let mut stopper = EarlyStopper::new(true, tc.patience);
        let mut log = TrainLog::default();
        for epoch in 1..=tc.epochs.max(1) {
            let mut batches: Vec<(bool, Vec<usize>)> = Vec::new();
            batches.extend(make_batches(&pair_idx, tc.batch_size, rng).into_iter().map(|b| (true, b)));
            batches
                .extend(make_batches(&single_idx, tc.batch_size, rng).into_iter().map(|b| (false, b)));
            use rand::seq::SliceRandom;
            batches.shuffle(rng);

            let mut epoch_loss = 0.0;
            let mut recon_sum = 0.0;
            let mut kl_sum = 0.0;
            let mut records = 0usize;
            for (is_pair, batch) in &batches {
                params.zero_grad();
                let x1 = train_ds.x1_tensor(batch)?;
                let terms = if *is_pair {
                    let x2 = train_ds.x2_tensor(batch)?;
                    self.pair_bound(&x1, &x2, rng)?
                } else {
                    self.singleton_bound(&x1, rng)?
                };
                let sum_of = |t: &Option<Tensor>| -> f64 {
                    t.as_ref().map_or(0.0, |v| v.to_vec().iter().sum())
                };
                recon_sum += terms.recon_pre.to_vec().iter().sum::<f64>()
                    + sum_of(&terms.recon_post);
                kl_sum +=
                    terms.kl_pre.to_vec().iter().sum::<f64>() + sum_of(&terms.kl_post);
                records += batch.len();
                let loss = terms.bound.mean()?.neg()?.add(&self.map_penalty()?)?;
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
            let per_record = |sum: f64| (records > 0).then(|| sum / records as f64);

            let val_metric = if val_ds.is_empty() {
                train_loss
            } else {
                match self.perturbation_mse(&val_ds, tc.eval_samples, rng)? {
                    Some(mse) => mse,
                    None => -self.mean_bound(&val_ds, rng)?,
                }
            };

            log.rows.push(EpochRow {
                epoch,
                train_loss,
                recon: per_record(recon_sum),
                kl: per_record(kl_sum),
                val_metric,
            });
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
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(seed: u64) -> PertVae {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PertVae::new(PertVaeConfig::tiny(6, 3), &mut rng).unwrap()
    }

    fn batch(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::new(gaussian(rng, rows * cols, 1.0), &[rows, cols]).unwrap()
    }

    #[test]
    fn untrained_map_is_an_identity_hop() {
        let model = tiny_model(1);
        let z = Tensor::new(vec![0.4, -1.2, 0.7, 0.1, 0.9, -0.3], &[2, 3]).unwrap();
        let hop = model.map.forward(&z).unwrap();
        assert_eq!(hop.mean.to_vec(), z.to_vec());
        assert!(hop.scale.to_vec().iter().all(|&s| s == 1.0));
    }

    #[test]
    fn pair_bound_replays_exactly_under_pinned_noise() {
        let model = tiny_model(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x1 = batch(&mut rng, 4, 6);
        let x2 = batch(&mut rng, 4, 6);
        let eps1 = model.draw_noise(4, &mut rng).unwrap();
        let eps2 = model.draw_noise(4, &mut rng).unwrap();
        let a = model.pair_bound_with_noise(&x1, &x2, &eps1, &eps2).unwrap();
        let b = model.pair_bound_with_noise(&x1, &x2, &eps1, &eps2).unwrap();
        assert_eq!(a.bound.to_vec(), b.bound.to_vec());
    }

    #[test]
    fn bound_decomposes_into_its_terms() {
        let model = tiny_model(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x1 = batch(&mut rng, 3, 6);
        let x2 = batch(&mut rng, 3, 6);
        let terms = model.pair_bound(&x1, &x2, &mut rng).unwrap();
        let bound = terms.bound.to_vec();
        let rp = terms.recon_pre.to_vec();
        let kp = terms.kl_pre.to_vec();
        let ro = terms.recon_post.unwrap().to_vec();
        let ko = terms.kl_post.unwrap().to_vec();
        for i in 0..3 {
            assert!((bound[i] - (rp[i] - kp[i] + ro[i] - ko[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn free_bits_floor_binds_when_large() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut cfg = PertVaeConfig::tiny(6, 3);
        cfg.free_bits = 50.0;
        let model = PertVae::new(cfg, &mut rng).unwrap();
        let x = batch(&mut rng, 2, 6);
        let terms = model.singleton_bound(&x, &mut rng).unwrap();
        // Every per-dimension KL term sits far below 50 nats, so each of the
        // 3 dimensions clamps to exactly 50.
        for v in terms.kl_pre.to_vec() {
            assert_eq!(v, 150.0);
        }
    }

    #[test]
    fn decoder_scale_respects_the_floor() {
        let model = tiny_model(7);
        // Force the scale head toward exp(-7) < 1e-3.
        model.decoder.scale_head.g.set_values(&vec![0.0; 6]).unwrap();
        model.decoder.scale_head.bias.set_values(&vec![-20.0; 6]).unwrap();
        let z = Tensor::new(vec![0.1, 0.2, 0.3], &[1, 3]).unwrap();
        let px = model.decode(&z).unwrap();
        assert!(px.scale.to_vec().iter().all(|&s| s == 1e-3));
    }

    #[test]
    fn pair_bound_gradients_match_finite_differences() {
        let model = tiny_model(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x1 = batch(&mut rng, 2, 6);
        let x2 = batch(&mut rng, 2, 6);
        let eps1 = model.draw_noise(2, &mut rng).unwrap();
        let eps2 = model.draw_noise(2, &mut rng).unwrap();
        let params = model.params().tensors();
        let report = GradCheck::with_tolerance(1e-4, 1e-3, 1e-6)
            .run(&params, || {
                let terms = model.pair_bound_with_noise(&x1, &x2, &eps1, &eps2)?;
                terms.bound.mean()?.neg()?.add(&model.map_penalty()?)
            })
            .unwrap();
        assert!(
            report.pass,
            "{} failures, worst {:?}",
            report.failures.len(),
            report.failures.first()
        );
    }

    #[test]
    fn singleton_bound_gradients_match_finite_differences() {
        let model = tiny_model(10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = batch(&mut rng, 2, 6);
        let eps = model.draw_noise(2, &mut rng).unwrap();
        let params = model.params().tensors();
        let report = GradCheck::with_tolerance(1e-4, 1e-3, 1e-6)
            .run(&params, || {
                model.singleton_bound_with_noise(&x, &eps)?.bound.mean()?.neg()
            })
            .unwrap();
        assert!(report.pass, "failures {:?}", report.failures.first());
    }

    fn toy_dataset(seed: u64, lines: usize, genes: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut samples = Vec::new();
        for l in 0..lines {
            let base = gaussian(&mut rng, genes, 1.0);
            let shift: Vec<f64> = base.iter().map(|v| v * 0.5 + 0.3).collect();
            samples.push(Sample {
                cell_line: format!("line{l:02}"),
                replicate: 1,
                x1: base.clone(),
                x2: Some(shift),
                label: None,
            });
            samples.push(Sample {
                cell_line: format!("line{l:02}"),
                replicate: 2,
                x1: base.iter().map(|v| v + 0.05).collect(),
                x2: None,
                label: None,
            });
        }
        Dataset::new(genes, samples).unwrap()
    }

    #[test]
    fn training_is_deterministic_and_improves_the_bound() {
        let data = toy_dataset(12, 8, 6);
        let tc = TrainConfig {
            epochs: 15,
            batch_size: 4,
            patience: 20,
            val_lines_fraction: 0.25,
            eval_samples: 4,
            ..TrainConfig::default()
        };

        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            let model = PertVae::new(PertVaeConfig::tiny(6, 3), &mut rng).unwrap();
            let before = {
                let mut eval_rng = ChaCha8Rng::seed_from_u64(99);
                model.mean_bound(&data, &mut eval_rng).unwrap()
            };
            let log = model.train(&data, &tc, &mut rng).unwrap();
            let after = {
                let mut eval_rng = ChaCha8Rng::seed_from_u64(99);
                model.mean_bound(&data, &mut eval_rng).unwrap()
            };
            let final_params: Vec<Vec<f64>> =
                model.params().iter().map(|(_, t)| t.to_vec()).collect();
            (before, after, log.rows.len(), final_params)
        };

        let (before, after, epochs, params_a) = run();
        let (_, after_b, epochs_b, params_b) = run();
        assert!(after > before, "bound did not improve: {before} -> {after}");
        assert_eq!(epochs, epochs_b);
        assert_eq!(after, after_b);
        assert_eq!(params_a, params_b);
    }

    #[test]
    fn prediction_shapes_and_determinism() {
        let model = tiny_model(14);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x1 = batch(&mut rng, 3, 6);
        let mut r1 = ChaCha8Rng::seed_from_u64(16);
        let mut r2 = ChaCha8Rng::seed_from_u64(16);
        let a = model.predict_post_treatment(&x1, 4, &mut r1).unwrap();
        let b = model.predict_post_treatment(&x1, 4, &mut r2).unwrap();
        assert_eq!(a.shape(), &[3, 6]);
        assert_eq!(a.to_vec(), b.to_vec());
        let z = model.latent_representation(&x1, 4, &mut r1).unwrap();
        assert_eq!(z.shape(), &[3, 3]);
        let z2 = model.mapped_representation(&z).unwrap();
        assert_eq!(z2.to_vec(), z.to_vec());
    }
}
