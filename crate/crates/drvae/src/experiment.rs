//! Experiment orchestration: for every cross-validation split, standardize
//! from the training fold, train each requested model, score the held-out
//! lines, and merge the rows into a report. Folds run on parallel workers
//! with split-derived RNG seeds, so results are independent of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::baselines::{fit_two_step, pca_fit, predict_two_step, Embedder, Standardizer};
use crate::cv::{make_folds, split_by_lines, worker_seed, FoldPlan};
use crate::data::Dataset;
use crate::drvae::{DrVae, DrVaeConfig};
use crate::error::{Error, Result};
use crate::metrics::{aupr, auroc, spearman_rho, RankedPredictions};
use crate::pertvae::{PertVae, PertVaeConfig};
use crate::report::{CvReport, MetricRow, RowStatus, RIDGE_KEY};
use crate::training::TrainConfig;

/// Environment variable limiting the number of parallel fold workers.
pub const WORKERS_ENV: &str = "DRVAE_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    RidgeLr,
    PcaLr,
    PertVaeLrZ1,
    PertVaeLrZ2,
    DrVae,
}

impl ModelKind {
    pub fn key(&self) -> &'static str {
        match self {
            ModelKind::RidgeLr => RIDGE_KEY,
            ModelKind::PcaLr => "pca-lr",
            ModelKind::PertVaeLrZ1 => "pertvae-lr-z1",
            ModelKind::PertVaeLrZ2 => "pertvae-lr-z2",
            ModelKind::DrVae => "drvae",
        }
    }

    pub fn from_key(key: &str) -> Result<ModelKind> {
        Self::all()
            .into_iter()
            .find(|m| m.key() == key)
            .ok_or_else(|| Error::Config(format!("unknown model {key:?}")))
    }

    pub fn all() -> Vec<ModelKind> {
        vec![
            ModelKind::RidgeLr,
            ModelKind::PcaLr,
            ModelKind::PertVaeLrZ1,
            ModelKind::PertVaeLrZ2,
            ModelKind::DrVae,
        ]
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentSettings {
    pub repetitions: usize,
    pub folds: usize,
    pub seed: u64,
    pub pertvae: PertVaeConfig,
    pub drvae: DrVaeConfig,
    pub pertvae_train: TrainConfig,
    pub drvae_train: TrainConfig,
    /// Requested PCA rank; clamped to what the training fold supports.
    pub pca_components: usize,
    /// Monte-Carlo draws for latent embeddings.
    pub embed_samples: usize,
    /// Monte-Carlo draws per record for responder probabilities and
    /// perturbation correlations.
    pub predict_samples: usize,
    /// Ridge penalties searched by the inner cross-validation.
    pub ridge_grid: Vec<f64>,
}

impl ExperimentSettings {
    /// Compact architectures sized for the desk-scale generator.
    pub fn desk(gene_count: usize, latent_dim: usize, seed: u64) -> Self {
        let pertvae = PertVaeConfig::compact(gene_count, latent_dim);
        let drvae = DrVaeConfig::compact(gene_count, latent_dim);
        let mut pertvae_train = TrainConfig::default();
        pertvae_train.epochs = 250;
        pertvae_train.patience = 40;
        pertvae_train.eval_samples = 32;
        let mut drvae_train = TrainConfig::default();
        drvae_train.epochs = 250;
        drvae_train.patience = 40;
        drvae_train.eval_samples = 32;
        ExperimentSettings {
            repetitions: 10,
            folds: 5,
            seed,
            pertvae,
            drvae,
            pertvae_train,
            drvae_train,
            pca_components: latent_dim,
            embed_samples: 32,
            predict_samples: 32,
            ridge_grid: crate::baselines::lambda_grid(),
        }
    }

    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        if self.pertvae.gene_count != dataset.gene_count
            || self.drvae.base.gene_count != dataset.gene_count
        {
            return Err(Error::Config(format!(
                "model architectures expect {} / {} genes but the dataset has {}",
                self.pertvae.gene_count, self.drvae.base.gene_count, dataset.gene_count
            )));
        }
        if self.pca_components == 0 || self.embed_samples == 0 || self.predict_samples == 0 {
            return Err(Error::Config(
                "pca components and sample counts must be >= 1".into(),
            ));
        }
        if self.ridge_grid.is_empty() {
            return Err(Error::Config("ridge penalty grid is empty".into()));
        }
        self.pertvae.validate()?;
        self.drvae.validate()
    }
}

fn sub_seed(worker: u64, tag: usize) -> u64 {
    worker_seed(worker, tag, 0)
}

/// Map every expression vector through the training-fold standardizer.
fn standardize_dataset(ds: &Dataset, st: &Standardizer) -> Dataset {
    let mut out = ds.clone();
    let x1: Vec<Vec<f64>> = out.samples.iter().map(|s| s.x1.clone()).collect();
    for (s, row) in out.samples.iter_mut().zip(st.transform(&x1)) {
        s.x1 = row;
    }
    let pair_idx: Vec<usize> = (0..out.samples.len())
        .filter(|&i| out.samples[i].x2.is_some())
        .collect();
    let x2: Vec<Vec<f64>> = pair_idx
        .iter()
        .map(|&i| out.samples[i].x2.clone().expect("pair index"))
        .collect();
    for (&i, row) in pair_idx.iter().zip(st.transform(&x2)) {
        out.samples[i].x2 = Some(row);
    }
    out
}

#[derive(Default)]
struct RowMetrics {
    auroc: Option<f64>,
    aupr: Option<f64>,
    rho_pred: Option<f64>,
    rho_rec: Option<f64>,
}

fn rank_metrics(scores: Vec<f64>, labels: Vec<bool>) -> Result<(f64, f64)> {
    let ranked = RankedPredictions::new(scores, labels)?;
    Ok((auroc(&ranked)?, aupr(&ranked)?))
}

/// Mean per-record Spearman correlation of hop predictions and plain
/// reconstructions against the observed post-treatment profiles of the
/// test pairs. Records with degenerate ranks are skipped.
fn perturbation_rho(
    model: &PertVae,
    test: &Dataset,
    samples: usize,
    seed: u64,
) -> Result<(Option<f64>, Option<f64>)> {
    let pairs = test.regime_indices().pairs();
    if pairs.is_empty() {
        return Ok((None, None));
    }
    let x1 = test.x1_tensor(&pairs)?;
    let x2 = test.x2_tensor(&pairs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pred = model.predict_post_treatment(&x1, samples, &mut rng)?;
    let rec = model.reconstruct(&x1, samples, &mut rng)?;
    let g = test.gene_count;
    let rows = |t: &crate::tensor::Tensor| -> Vec<Vec<f64>> {
        t.to_vec().chunks(g).map(<[f64]>::to_vec).collect()
    };
    let observed = rows(&x2);
    let mean_rho = |estimates: Vec<Vec<f64>>| -> Option<f64> {
        let mut values = Vec::new();
        for (est, obs) in estimates.iter().zip(&observed) {
            if let Ok(r) = spearman_rho(est, obs) {
                values.push(r);
            }
        }
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    };
    Ok((mean_rho(rows(&pred)), mean_rho(rows(&rec))))
}

struct FoldContext {
    train: Dataset,
    test: Dataset,
    labeled_train_x: Vec<Vec<f64>>,
    labeled_train_y: Vec<bool>,
    labeled_train_lines: Vec<String>,
    labeled_test_x: Vec<Vec<f64>>,
    labeled_test_y: Vec<bool>,
    labeled_test_idx: Vec<usize>,
}

fn prepare_fold(dataset: &Dataset, plan: &FoldPlan) -> Result<FoldContext> {
    let (train_raw, test_raw) = split_by_lines(dataset, plan);
    if train_raw.is_empty() || test_raw.is_empty() {
        return Err(Error::Data("empty train or test split".into()));
    }
    let all_train: Vec<usize> = (0..train_raw.len()).collect();
    let st = Standardizer::fit(&train_raw.x1_rows(&all_train))?;
    let train = standardize_dataset(&train_raw, &st);
    let test = standardize_dataset(&test_raw, &st);

    let labeled_train = train.regime_indices().labeled();
    let labeled_test_idx = test.regime_indices().labeled();
    let as_bools = |ds: &Dataset, idx: &[usize]| -> Result<Vec<bool>> {
        Ok(ds.labels_of(idx)?.into_iter().map(|c| c == 1).collect())
    };
    Ok(FoldContext {
        labeled_train_x: train.x1_rows(&labeled_train),
        labeled_train_y: as_bools(&train, &labeled_train)?,
        labeled_train_lines: labeled_train
            .iter()
            .map(|&i| train.samples[i].cell_line.clone())
            .collect(),
        labeled_test_x: test.x1_rows(&labeled_test_idx),
        labeled_test_y: as_bools(&test, &labeled_test_idx)?,
        labeled_test_idx,
        train,
        test,
    })
}

fn two_step_metrics(
    ctx: &FoldContext,
    embedder: &Embedder,
    grid: &[f64],
    seed: u64,
) -> Result<(f64, f64)> {
    let pipeline = fit_two_step(
        embedder,
        &ctx.labeled_train_x,
        &ctx.labeled_train_y,
        &ctx.labeled_train_lines,
        None,
        grid,
        seed,
    )?;
    let scores = predict_two_step(&pipeline, embedder, &ctx.labeled_test_x)?;
    rank_metrics(scores, ctx.labeled_test_y.clone())
}

fn evaluate_fold(
    dataset: &Dataset,
    scenario: &str,
    models: &[ModelKind],
    settings: &ExperimentSettings,
    plan: &FoldPlan,
) -> Vec<MetricRow> {
    let wseed = worker_seed(settings.seed, plan.repetition, plan.fold);
    let mut rows = Vec::with_capacity(models.len());
    let row = |kind: &ModelKind, outcome: Result<RowMetrics>| -> MetricRow {
        let (status, m) = match outcome {
            Ok(m) => (RowStatus::Ok, m),
            Err(e) => (RowStatus::Failed(format!("{e}")), RowMetrics::default()),
        };
        MetricRow {
            model: kind.key().to_string(),
            scenario: scenario.to_string(),
            repetition: plan.repetition,
            fold: plan.fold,
            status,
            auroc: m.auroc,
            aupr: m.aupr,
            rho_pred: m.rho_pred,
            rho_rec: m.rho_rec,
        }
    };

    let ctx = match prepare_fold(dataset, plan) {
        Ok(ctx) => ctx,
        Err(e) => {
            let reason = format!("{e}");
            for kind in models {
                rows.push(row(kind, Err(Error::Data(reason.clone()))));
            }
            return rows;
        }
    };

    // One perturbation VAE serves both embedding models.
    let needs_pertvae = models
        .iter()
        .any(|m| matches!(m, ModelKind::PertVaeLrZ1 | ModelKind::PertVaeLrZ2));
    let pertvae: Option<Result<PertVae>> = needs_pertvae.then(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(wseed, 3));
        let model = PertVae::new(settings.pertvae.clone(), &mut rng)?;
        model.train(&ctx.train, &settings.pertvae_train, &mut rng)?;
        Ok(model)
    });

    for kind in models {
        let outcome: Result<RowMetrics> = match kind {
            ModelKind::RidgeLr => {
                two_step_metrics(&ctx, &Embedder::Identity, &settings.ridge_grid, sub_seed(wseed, 1)).map(
                    |(auroc, aupr)| RowMetrics {
                        auroc: Some(auroc),
                        aupr: Some(aupr),
                        ..RowMetrics::default()
                    },
                )
            }
            ModelKind::PcaLr => (|| {
                let all: Vec<usize> = (0..ctx.train.len()).collect();
                let x = ctx.train.x1_rows(&all);
                let k = settings.pca_components.min(x.len()).min(ctx.train.gene_count);
                let pca = pca_fit(&x, k)?;
                let (auroc, aupr) =
                    two_step_metrics(&ctx, &Embedder::Pca(&pca), &settings.ridge_grid, sub_seed(wseed, 2))?;
                Ok(RowMetrics {
                    auroc: Some(auroc),
                    aupr: Some(aupr),
                    ..RowMetrics::default()
                })
            })(),
            ModelKind::PertVaeLrZ1 | ModelKind::PertVaeLrZ2 => (|| {
                let vae = match pertvae.as_ref().expect("trained above") {
                    Ok(v) => v,
                    Err(e) => return Err(Error::Data(format!("{e}"))),
                };
                let (embed_tag, rank_tag) = if matches!(kind, ModelKind::PertVaeLrZ1) {
                    (4, 1)
                } else {
                    (5, 2)
                };
                let embedder = if matches!(kind, ModelKind::PertVaeLrZ1) {
                    Embedder::Latent {
                        model: vae,
                        samples: settings.embed_samples,
                        seed: sub_seed(wseed, embed_tag),
                    }
                } else {
                    Embedder::MappedLatent {
                        model: vae,
                        samples: settings.embed_samples,
                        seed: sub_seed(wseed, embed_tag),
                    }
                };
                let (auroc, aupr) =
                    two_step_metrics(&ctx, &embedder, &settings.ridge_grid, sub_seed(wseed, 10 + rank_tag))?;
                let (rho_pred, rho_rec) = perturbation_rho(
                    vae,
                    &ctx.test,
                    settings.predict_samples,
                    sub_seed(wseed, 8),
                )?;
                Ok(RowMetrics { auroc: Some(auroc), aupr: Some(aupr), rho_pred, rho_rec })
            })(),
            ModelKind::DrVae => (|| {
                let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(wseed, 6));
                let model = DrVae::new(settings.drvae.clone(), &mut rng)?;
                model.train(&ctx.train, &settings.drvae_train, &mut rng)?;
                let mut predict_rng = ChaCha8Rng::seed_from_u64(sub_seed(wseed, 7));
                let scores = model.predict_response_batch(
                    &ctx.test,
                    &ctx.labeled_test_idx,
                    settings.predict_samples,
                    &mut predict_rng,
                )?;
                let (auroc, aupr) = rank_metrics(scores, ctx.labeled_test_y.clone())?;
                let (rho_pred, rho_rec) = perturbation_rho(
                    model.base(),
                    &ctx.test,
                    settings.predict_samples,
                    sub_seed(wseed, 8),
                )?;
                Ok(RowMetrics { auroc: Some(auroc), aupr: Some(aupr), rho_pred, rho_rec })
            })(),
        };
        rows.push(row(kind, outcome));
    }
    rows
}

/// Run every requested model over the full fold plan. Fold work runs in
/// parallel (worker count taken from DRVAE_WORKERS when set); rows come
/// back in deterministic (repetition, fold, model) order, and per-fold
/// failures are recorded rather than aborting the sweep.
pub fn run_experiment(
    dataset: &Dataset,
    scenario: &str,
    models: &[ModelKind],
    settings: &ExperimentSettings,
) -> Result<CvReport> {
    if models.is_empty() {
        return Err(Error::Config("no models requested".into()));
    }
    settings.validate(dataset)?;
    let plans = make_folds(dataset, settings.repetitions, settings.folds, settings.seed)?;

    let work = || -> Vec<Vec<MetricRow>> {
        plans
            .par_iter()
            .map(|plan| evaluate_fold(dataset, scenario, models, settings, plan))
            .collect()
    };
    let nested = match std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
    {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?
            .install(work),
        None => work(),
    };
    Ok(CvReport { rows: nested.concat() })
}
