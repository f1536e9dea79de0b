//! Synthetic expression data: a seeded latent-variable generator that
//! emits the four record regimes (labeled/unlabeled pairs and singletons)
//! with replicates sharing latent state, plus generator-side oracles that
//! bound what any classifier could achieve from pre- vs post-treatment
//! information.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::metrics::{aupr, auroc, RankedPredictions};
use crate::tensor::nn::gaussian;

/// Label assignment computed from the generator's own latent variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelRule {
    /// y = 1 iff u . z1 exceeds a prevalence-matched threshold; fully
    /// decided by the pre-treatment state.
    Linear,
    /// y = sign(z1[0]) != sign(z1[1]); decided by z1 but invisible to any
    /// linear scorer.
    Xor,
    /// y = 1 iff u . (z2 - z1) exceeds the threshold; the realized shift
    /// carries noise, so post-treatment data is strictly more informative.
    Shift,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    Linear,
    OneHidden { hidden: usize },
}

/// Counts are cell lines per regime; every line contributes `replicates`
/// records that share its latent state.
#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub gene_count: usize,
    pub latent_dim: usize,
    pub lines_labeled_pairs: usize,
    pub lines_unlabeled_pairs: usize,
    pub lines_labeled_singletons: usize,
    pub lines_unlabeled_singletons: usize,
    pub replicates: usize,
    /// Scale of the random shift matrix A (entries N(0, scale/sqrt(d))).
    pub shift_strength: f64,
    /// Scale of the shift offset c.
    pub shift_offset: f64,
    /// Per-line noise on the realized shift.
    pub shift_noise: f64,
    /// Per-replicate observation noise on expression.
    pub obs_noise: f64,
    pub label_rule: LabelRule,
    pub decoder: DecoderKind,
    /// Fraction of lines labeled positive (threshold rules only).
    pub label_prevalence: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    /// Desk-scale base: 50 genes, 10 latent dimensions, 60 cell lines.
    fn desk(rule: LabelRule, seed: u64) -> Self {
        SyntheticConfig {
            gene_count: 50,
            latent_dim: 10,
            lines_labeled_pairs: 36,
            lines_unlabeled_pairs: 8,
            lines_labeled_singletons: 8,
            lines_unlabeled_singletons: 8,
            replicates: 3,
            shift_strength: 0.5,
            shift_offset: 0.5,
            shift_noise: 1.0,
            obs_noise: 0.1,
            label_rule: rule,
            decoder: DecoderKind::Linear,
            label_prevalence: 0.4,
            seed,
        }
    }

    pub fn linear_separable(seed: u64) -> Self {
        Self::desk(LabelRule::Linear, seed)
    }

    pub fn nonlinear_xor(seed: u64) -> Self {
        let mut cfg = Self::desk(LabelRule::Xor, seed);
        cfg.decoder = DecoderKind::OneHidden { hidden: 32 };
        cfg
    }

    pub fn shift_informative(seed: u64) -> Self {
        let mut cfg = Self::desk(LabelRule::Shift, seed);
        // Strong observation noise: denoising embeddings earn their keep.
        cfg.obs_noise = 0.4;
        cfg
    }

    /// Full-scale shape (903 landmark genes); provided for completeness,
    /// not exercised by the desk-scale protocol.
    pub fn full_scale(rule: LabelRule, seed: u64) -> Self {
        let mut cfg = Self::desk(rule, seed);
        cfg.gene_count = 903;
        cfg.latent_dim = 100;
        cfg
    }

    pub fn total_lines(&self) -> usize {
        self.lines_labeled_pairs
            + self.lines_unlabeled_pairs
            + self.lines_labeled_singletons
            + self.lines_unlabeled_singletons
    }

    /// Whether classification metrics are worth evaluating: at least 20
    /// labeled lines.
    pub fn classification_ready(&self) -> bool {
        self.lines_labeled_pairs + self.lines_labeled_singletons >= 20
    }

    pub fn validate(&self) -> Result<()> {
        if self.gene_count == 0 || self.latent_dim == 0 {
            return Err(Error::Config("gene count and latent dim must be >= 1".into()));
        }
        if self.total_lines() == 0 {
            return Err(Error::Config("no cell lines configured".into()));
        }
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be >= 1".into()));
        }
        for (name, v) in [
            ("shift_strength", self.shift_strength),
            ("shift_offset", self.shift_offset),
            ("shift_noise", self.shift_noise),
            ("obs_noise", self.obs_noise),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.label_prevalence > 0.0 && self.label_prevalence < 1.0) {
            return Err(Error::Config(format!(
                "label prevalence must lie in (0, 1), got {}",
                self.label_prevalence
            )));
        }
        if let DecoderKind::OneHidden { hidden } = self.decoder {
            if hidden == 0 {
                return Err(Error::Config("decoder hidden width must be >= 1".into()));
            }
        }
        Ok(())
    }
}

/// What the generator itself could achieve: ranking quality of the best
/// score computable from pre-treatment state alone (`pre`) versus one that
/// also sees the realized shift (`post`). Values are None when the labels
/// are single-class.
#[derive(Debug, Clone, serde::Serialize)]
pub struct GeneratorOracle {
    pub prevalence: f64,
    pub bayes_pre_auroc: Option<f64>,
    pub bayes_post_auroc: Option<f64>,
    pub bayes_pre_aupr: Option<f64>,
    pub bayes_post_aupr: Option<f64>,
    pub shift_matrix: Vec<f64>,
    pub shift_vector: Vec<f64>,
    pub label_direction: Vec<f64>,
    pub threshold: f64,
}

pub struct SyntheticOutput {
    pub dataset: Dataset,
    pub oracle: GeneratorOracle,
}

enum Regime {
    LabeledPair,
    UnlabeledPair,
    LabeledSingleton,
    UnlabeledSingleton,
}

struct GeneratorNets {
    /// Row-major [G, d] linear read-out.
    linear: Vec<f64>,
    /// tanh hidden layer when the decoder is nonlinear: [h, d] and [G, h].
    hidden: Option<(usize, Vec<f64>, Vec<f64>)>,
}

impl GeneratorNets {
    fn decode(&self, z: &[f64], g: usize) -> Vec<f64> {
        match &self.hidden {
            None => (0..g)
                .map(|j| {
                    z.iter()
                        .enumerate()
                        .map(|(k, v)| self.linear[j * z.len() + k] * v)
                        .sum()
                })
                .collect(),
            Some((h, w1, w2)) => {
                let act: Vec<f64> = (0..*h)
                    .map(|i| {
                        z.iter()
                            .enumerate()
                            .map(|(k, v)| w1[i * z.len() + k] * v)
                            .sum::<f64>()
                            .tanh()
                    })
                    .collect();
                (0..g)
                    .map(|j| act.iter().enumerate().map(|(i, a)| w2[j * h + i] * a).sum())
                    .collect()
            }
        }
    }
}

/// Draw the dataset described by `config`. Generation is two-pass: all
/// latent states first (so threshold rules can hit the configured
/// prevalence exactly), then expression records in regime order with
/// replicates consecutive.
pub fn generate(config: &SyntheticConfig) -> Result<SyntheticOutput> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.latent_dim;
    let g = config.gene_count;

    let nets = match config.decoder {
        DecoderKind::Linear => GeneratorNets {
            linear: gaussian(&mut rng, g * d, 1.0 / (d as f64).sqrt()),
            hidden: None,
        },
        DecoderKind::OneHidden { hidden } => GeneratorNets {
            linear: vec![],
            hidden: Some((
                hidden,
                gaussian(&mut rng, hidden * d, 1.0 / (d as f64).sqrt()),
                gaussian(&mut rng, g * hidden, 1.0 / (hidden as f64).sqrt()),
            )),
        },
    };
    let shift_matrix = gaussian(&mut rng, d * d, config.shift_strength / (d as f64).sqrt());
    let shift_vector = gaussian(&mut rng, d, config.shift_offset);
    let raw_dir = gaussian(&mut rng, d, 1.0);
    let norm = raw_dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let label_direction: Vec<f64> = raw_dir.iter().map(|v| v / norm).collect();

    let n_lines = config.total_lines();
    let mut z1s = Vec::with_capacity(n_lines);
    let mut shifts = Vec::with_capacity(n_lines);
    for _ in 0..n_lines {
        let z1 = gaussian(&mut rng, d, 1.0);
        let eps = gaussian(&mut rng, d, 1.0);
        let shift: Vec<f64> = (0..d)
            .map(|i| {
                let drift: f64 =
                    (0..d).map(|k| shift_matrix[i * d + k] * z1[k]).sum::<f64>()
                        + shift_vector[i];
                drift + config.shift_noise * eps[i]
            })
            .collect();
        z1s.push(z1);
        shifts.push(shift);
    }

    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let post_scores: Vec<f64> = shifts.iter().map(|s| dot(&label_direction, s)).collect();
    let pre_scores: Vec<f64> = match config.label_rule {
        LabelRule::Linear => z1s.iter().map(|z| dot(&label_direction, z)).collect(),
        LabelRule::Xor => z1s
            .iter()
            .map(|z| if (z[0] > 0.0) != (z.get(1).copied().unwrap_or(0.0) > 0.0) { 1.0 } else { 0.0 })
            .collect(),
        // Best pre-treatment score: the deterministic part of the shift.
        LabelRule::Shift => z1s
            .iter()
            .map(|z| {
                let drift: Vec<f64> = (0..d)
                    .map(|i| {
                        (0..d).map(|k| shift_matrix[i * d + k] * z[k]).sum::<f64>()
                            + shift_vector[i]
                    })
                    .collect();
                dot(&label_direction, &drift)
            })
            .collect(),
    };
    let label_scores: Vec<f64> = match config.label_rule {
        LabelRule::Linear => pre_scores.clone(),
        LabelRule::Xor => pre_scores.clone(),
        LabelRule::Shift => post_scores.clone(),
    };
    let threshold = match config.label_rule {
        LabelRule::Xor => 0.5,
        _ => {
            let mut sorted = label_scores.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let positives =
                ((n_lines as f64 * config.label_prevalence).round() as usize).clamp(1, n_lines - 1);
            // Midpoint between the last negative and first positive score.
            0.5 * (sorted[n_lines - positives - 1] + sorted[n_lines - positives])
        }
    };
    let labels: Vec<bool> = label_scores.iter().map(|&s| s > threshold).collect();

    let regimes: Vec<Regime> = std::iter::empty()
        .chain((0..config.lines_labeled_pairs).map(|_| Regime::LabeledPair))
        .chain((0..config.lines_unlabeled_pairs).map(|_| Regime::UnlabeledPair))
        .chain((0..config.lines_labeled_singletons).map(|_| Regime::LabeledSingleton))
        .chain((0..config.lines_unlabeled_singletons).map(|_| Regime::UnlabeledSingleton))
        .collect();

    let width = (n_lines as f64).log10().floor() as usize + 1;
    let mut samples = Vec::with_capacity(n_lines * config.replicates);
    for (idx, regime) in regimes.iter().enumerate() {
        let cell_line = format!("L{idx:0width$}");
        let z1 = &z1s[idx];
        let z2: Vec<f64> = z1.iter().zip(&shifts[idx]).map(|(a, b)| a + b).collect();
        let mean1 = nets.decode(z1, g);
        let mean2 = nets.decode(&z2, g);
        let is_pair = matches!(regime, Regime::LabeledPair | Regime::UnlabeledPair);
        let labeled = matches!(regime, Regime::LabeledPair | Regime::LabeledSingleton);
        for rep in 0..config.replicates {
            let noise = gaussian(&mut rng, g, 1.0);
            let x1: Vec<f64> = mean1
                .iter()
                .zip(&noise)
                .map(|(m, e)| m + config.obs_noise * e)
                .collect();
            let x2 = if is_pair {
                let noise2 = gaussian(&mut rng, g, 1.0);
                Some(
                    mean2
                        .iter()
                        .zip(&noise2)
                        .map(|(m, e)| m + config.obs_noise * e)
                        .collect(),
                )
            } else {
                None
            };
            samples.push(Sample {
                cell_line: cell_line.clone(),
                replicate: (rep + 1) as u32,
                x1,
                x2,
                label: if labeled { Some(labels[idx]) } else { None },
            });
        }
    }

    let positives = labels.iter().filter(|&&l| l).count();
    let prevalence = positives as f64 / n_lines as f64;
    let rank_or_none = |scores: &[f64]| -> (Option<f64>, Option<f64>) {
        match RankedPredictions::new(scores.to_vec(), labels.clone()) {
            Ok(r) => (auroc(&r).ok(), aupr(&r).ok()),
            Err(_) => (None, None),
        }
    };
    let (bayes_pre_auroc, bayes_pre_aupr) = rank_or_none(&pre_scores);
    let (bayes_post_auroc, bayes_post_aupr) = rank_or_none(&label_scores);

    Ok(SyntheticOutput {
        dataset: Dataset { gene_count: g, samples },
        oracle: GeneratorOracle {
            prevalence,
            bayes_pre_auroc,
            bayes_post_auroc,
            bayes_pre_aupr,
            bayes_post_aupr,
            shift_matrix,
            shift_vector,
            label_direction,
            threshold,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(rule: LabelRule, seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            gene_count: 7,
            latent_dim: 3,
            lines_labeled_pairs: 6,
            lines_unlabeled_pairs: 2,
            lines_labeled_singletons: 2,
            lines_unlabeled_singletons: 2,
            replicates: 2,
            shift_strength: 0.5,
            shift_offset: 0.3,
            shift_noise: 0.8,
            obs_noise: 0.1,
            label_rule: rule,
            decoder: DecoderKind::Linear,
            label_prevalence: 0.4,
            seed,
        }
    }

    #[test]
    fn zero_shift_and_zero_noise_makes_pairs_identical() {
        let mut cfg = tiny(LabelRule::Linear, 1);
        cfg.shift_strength = 0.0;
        cfg.shift_offset = 0.0;
        cfg.shift_noise = 0.0;
        cfg.obs_noise = 0.0;
        let out = generate(&cfg).unwrap();
        let mut pairs = 0;
        for s in &out.dataset.samples {
            if let Some(x2) = &s.x2 {
                assert_eq!(&s.x1, x2);
                pairs += 1;
            }
        }
        assert_eq!(pairs, 8 * 2);
    }

    #[test]
    fn deterministic_label_rules_have_perfect_oracles() {
        for rule in [LabelRule::Linear, LabelRule::Xor] {
            let out = generate(&tiny(rule, 2)).unwrap();
            assert_eq!(out.oracle.bayes_pre_auroc, Some(1.0), "{rule:?}");
            assert_eq!(out.oracle.bayes_post_auroc, Some(1.0), "{rule:?}");
        }
    }

    #[test]
    fn same_seed_reproduces_the_dataset_bit_for_bit() {
        let cfg = SyntheticConfig::shift_informative(7);
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.dataset, b.dataset);

        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.csv");
        let p2 = dir.path().join("b.csv");
        a.dataset.write_csv(&p1).unwrap();
        b.dataset.write_csv(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate(&SyntheticConfig::shift_informative(1)).unwrap();
        let b = generate(&SyntheticConfig::shift_informative(2)).unwrap();
        assert_ne!(a.dataset, b.dataset);
    }

    #[test]
    fn shift_rule_gives_post_treatment_information_an_edge() {
        let mut cfg = SyntheticConfig::shift_informative(3);
        cfg.lines_labeled_pairs = 120;
        let out = generate(&cfg).unwrap();
        let pre = out.oracle.bayes_pre_auroc.unwrap();
        let post = out.oracle.bayes_post_auroc.unwrap();
        assert_eq!(post, 1.0);
        assert!(pre < 0.95, "pre-treatment oracle too strong: {pre}");
        assert!(pre > 0.6, "pre-treatment oracle should retain signal: {pre}");
    }

    #[test]
    fn regime_counts_and_label_placement_match_the_config() {
        let cfg = tiny(LabelRule::Shift, 4);
        let out = generate(&cfg).unwrap();
        let samples = &out.dataset.samples;
        assert_eq!(samples.len(), 12 * 2);
        let pairs = samples.iter().filter(|s| s.is_pair()).count();
        let labeled = samples.iter().filter(|s| s.is_labeled()).count();
        assert_eq!(pairs, 8 * 2);
        assert_eq!(labeled, 8 * 2);
        for s in samples {
            assert_eq!(s.x1.len(), 7);
            if let Some(x2) = &s.x2 {
                assert_eq!(x2.len(), 7);
            }
        }
        // Labels and pair membership are per line.
        for line in ["L00", "L05", "L08", "L11"] {
            let of_line: Vec<_> =
                samples.iter().filter(|s| s.cell_line == line).collect();
            assert_eq!(of_line.len(), 2);
            assert!(of_line.windows(2).all(|w| w[0].label == w[1].label));
            assert!(of_line.windows(2).all(|w| w[0].is_pair() == w[1].is_pair()));
        }
    }

    #[test]
    fn replicates_share_latent_state_but_not_observation_noise() {
        let mut cfg = tiny(LabelRule::Linear, 5);
        cfg.obs_noise = 0.0;
        let out = generate(&cfg).unwrap();
        let first: Vec<_> =
            out.dataset.samples.iter().filter(|s| s.cell_line == "L00").collect();
        assert_eq!(first[0].x1, first[1].x1);
        assert_eq!(first[0].x2, first[1].x2);

        cfg.obs_noise = 0.2;
        let noisy = generate(&cfg).unwrap();
        let first: Vec<_> =
            noisy.dataset.samples.iter().filter(|s| s.cell_line == "L00").collect();
        assert_ne!(first[0].x1, first[1].x1);
    }

    #[test]
    fn threshold_rules_hit_the_configured_prevalence() {
        for seed in 0..5 {
            let cfg = SyntheticConfig::shift_informative(seed);
            let out = generate(&cfg).unwrap();
            let expected = (60.0 * cfg.label_prevalence).round() / 60.0;
            assert!(
                (out.oracle.prevalence - expected).abs() < 1e-12,
                "seed {seed}: {} vs {expected}",
                out.oracle.prevalence
            );
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = tiny(LabelRule::Linear, 6);
        cfg.replicates = 0;
        assert!(generate(&cfg).is_err());
        let mut cfg = tiny(LabelRule::Linear, 6);
        cfg.obs_noise = -0.1;
        assert!(generate(&cfg).is_err());
        let mut cfg = tiny(LabelRule::Linear, 6);
        cfg.label_prevalence = 1.0;
        assert!(generate(&cfg).is_err());
        let mut cfg = tiny(LabelRule::Linear, 6);
        cfg.gene_count = 0;
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn nonlinear_decoder_runs_and_keeps_shapes() {
        let mut cfg = tiny(LabelRule::Xor, 8);
        cfg.decoder = DecoderKind::OneHidden { hidden: 5 };
        let out = generate(&cfg).unwrap();
        assert_eq!(out.dataset.gene_count, 7);
        assert!(out.dataset.samples.iter().all(|s| s.x1.iter().all(|v| v.is_finite())));
    }
}
