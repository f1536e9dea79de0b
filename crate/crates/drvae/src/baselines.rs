//! Reference models: L2-penalized logistic regression solved by Newton
//! iterations with Armijo backtracking, PCA via singular value
//! decomposition, and two-step pipelines that train the classifier on a
//! frozen embedding (identity, PCA scores, or VAE latents).

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pertvae::PertVae;
use crate::tensor::Tensor;

/// Per-feature z-scoring with statistics taken from the fitting data;
/// constant features pass through unscaled.
#[derive(Debug, Clone)]
pub struct Standardizer {
    means: Vec<f64>,
    scales: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &[Vec<f64>]) -> Result<Self> {
        let d = feature_width(x)?;
        let n = x.len() as f64;
        let mut means = vec![0.0; d];
        for row in x {
            for (m, v) in means.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut vars = vec![0.0; d];
        for row in x {
            for ((s, v), m) in vars.iter_mut().zip(row).zip(&means) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let scales = vars
            .iter()
            .map(|&v| {
                let s = v.sqrt();
                if s < 1e-12 {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Ok(Standardizer { means, scales })
    }

    pub fn transform(&self, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        x.iter()
            .map(|row| {
                row.iter()
                    .zip(&self.means)
                    .zip(&self.scales)
                    .map(|((v, m), s)| (v - m) / s)
                    .collect()
            })
            .collect()
    }

    pub fn width(&self) -> usize {
        self.means.len()
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }
}

fn feature_width(x: &[Vec<f64>]) -> Result<usize> {
    let Some(first) = x.first() else {
        return Err(Error::Data("empty design matrix".into()));
    };
    let d = first.len();
    if d == 0 {
        return Err(Error::Data("zero-width design matrix".into()));
    }
    if x.iter().any(|r| r.len() != d) {
        return Err(Error::Data("ragged design matrix".into()));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "design matrix".into() });
    }
    Ok(d)
}

#[derive(Debug, Clone)]
pub struct RidgeLrModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
}

impl RidgeLrModel {
    pub fn decision(&self, row: &[f64]) -> f64 {
        self.weights.iter().zip(row).map(|(w, v)| w * v).sum::<f64>() + self.intercept
    }

    pub fn predict_proba(&self, row: &[f64]) -> f64 {
        crate::tensor::stable_sigmoid(self.decision(row))
    }

    pub fn predict_batch(&self, x: &[Vec<f64>]) -> Vec<f64> {
        x.iter().map(|r| self.predict_proba(r)).collect()
    }
}

/// ln(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Mean logistic loss plus (lambda/2)||w||^2, intercept unpenalized.
/// `aug` carries a trailing all-ones column; `wv` its matching weights.
fn penalized_loss(aug: &DMatrix<f64>, targets: &[f64], wv: &DVector<f64>, lambda: f64) -> f64 {
    let scores = aug * wv;
    let n = targets.len() as f64;
    let data: f64 =
        scores.iter().zip(targets).map(|(s, t)| softplus(-t * s)).sum::<f64>() / n;
    let d = wv.len() - 1;
    let penalty = 0.5 * lambda * wv.rows(0, d).norm_squared();
    data + penalty
}

/// Fit by damped Newton: solve the regularized Hessian system via Cholesky
/// and backtrack until the Armijo condition holds, stopping when the
/// gradient norm drops below 1e-6 (or after 100 accepted steps). Returns
/// the per-step losses alongside the model.
pub fn ridge_fit_traced(
    x: &[Vec<f64>],
    y: &[bool],
    lambda: f64,
) -> Result<(RidgeLrModel, Vec<f64>)> {
    let d = feature_width(x)?;
    if x.len() != y.len() {
        return Err(Error::Data(format!("{} rows vs {} labels", x.len(), y.len())));
    }
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::Config(format!("ridge penalty must be >= 0, got {lambda}")));
    }
    if y.iter().all(|&l| l) || y.iter().all(|&l| !l) {
        return Err(Error::Data("logistic regression needs both classes".into()));
    }
    let n = x.len();
    let mut aug = DMatrix::zeros(n, d + 1);
    for (i, row) in x.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            aug[(i, j)] = v;
        }
        aug[(i, d)] = 1.0;
    }
    let targets: Vec<f64> = y.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();
    let y01 = DVector::from_iterator(n, y.iter().map(|&l| if l { 1.0 } else { 0.0 }));

    let mut wv = DVector::zeros(d + 1);
    let mut trace = vec![penalized_loss(&aug, &targets, &wv, lambda)];
    for _ in 0..100 {
        let probs = (&aug * &wv).map(crate::tensor::stable_sigmoid);
        let mut grad = aug.transpose() * (&probs - &y01) / n as f64;
        for j in 0..d {
            grad[j] += lambda * wv[j];
        }
        if grad.norm() < 1e-6 {
            break;
        }

        let mut weighted = aug.clone();
        for i in 0..n {
            let w = (probs[i] * (1.0 - probs[i])).max(1e-12);
            weighted.row_mut(i).scale_mut(w);
        }
        let mut hess = aug.transpose() * weighted / n as f64;
        for j in 0..d {
            hess[(j, j)] += lambda;
        }
        let delta = match hess.clone().cholesky() {
            Some(c) => c.solve(&(-&grad)),
            None => {
                for j in 0..=d {
                    hess[(j, j)] += 1e-8;
                }
                hess.cholesky()
                    .ok_or_else(|| Error::Domain {
                        op: "ridge newton",
                        detail: "hessian is not positive definite".into(),
                    })?
                    .solve(&(-&grad))
            }
        };

        let f0 = *trace.last().expect("seeded trace");
        let slope = grad.dot(&delta);
        let mut step = 1.0;
        loop {
            let candidate = &wv + &delta * step;
            let f1 = penalized_loss(&aug, &targets, &candidate, lambda);
            if f1 <= f0 + 1e-4 * step * slope {
                wv = candidate;
                trace.push(f1);
                break;
            }
            step *= 0.5;
            if step < 1e-12 {
                trace.push(f0);
                break;
            }
        }
    }

    let weights = (0..d).map(|j| wv[j]).collect();
    Ok((RidgeLrModel { weights, intercept: wv[d], lambda }, trace))
}

pub fn ridge_fit(x: &[Vec<f64>], y: &[bool], lambda: f64) -> Result<RidgeLrModel> {
    ridge_fit_traced(x, y, lambda).map(|(m, _)| m)
}

/// Default penalty grid searched by the inner cross-validation.
pub fn lambda_grid() -> Vec<f64> {
    vec![1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3]
}

/// Pick the grid penalty with the lowest mean validation log-loss over a
/// 3-fold split grouped by cell line (replicates never straddle folds).
/// Degenerate inputs (fewer than 3 lines, or no fold with both classes)
/// fall back to 1.0.
pub fn select_lambda(
    x: &[Vec<f64>],
    y: &[bool],
    lines: &[String],
    grid: &[f64],
    seed: u64,
) -> Result<f64> {
    feature_width(x)?;
    if x.len() != y.len() || x.len() != lines.len() {
        return Err(Error::Data("rows, labels, and cell lines must align".into()));
    }
    if grid.is_empty() || grid.iter().any(|&l| !l.is_finite() || l < 0.0) {
        return Err(Error::Config("penalty grid must be nonempty and >= 0".into()));
    }
    let k = 3;
    let distinct: BTreeSet<&String> = lines.iter().collect();
    if distinct.len() < k {
        return Ok(1.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled: Vec<&String> = distinct.into_iter().collect();
    shuffled.shuffle(&mut rng);
    let fold_of = |line: &String| -> usize {
        shuffled.iter().position(|&l| l == line).expect("line seen at fit time") % k
    };

    let mut best = (f64::INFINITY, 1.0);
    for &lambda in grid {
        let mut total = 0.0;
        let mut folds_used = 0;
        for fold in 0..k {
            let (mut xt, mut yt, mut xv, mut yv) = (vec![], vec![], vec![], vec![]);
            for i in 0..x.len() {
                if fold_of(&lines[i]) == fold {
                    xv.push(x[i].clone());
                    yv.push(y[i]);
                } else {
                    xt.push(x[i].clone());
                    yt.push(y[i]);
                }
            }
            if xv.is_empty() || yt.iter().all(|&l| l) || yt.iter().all(|&l| !l) {
                continue;
            }
            let model = ridge_fit(&xt, &yt, lambda)?;
            let loss: f64 = xv
                .iter()
                .zip(&yv)
                .map(|(row, &l)| {
                    let t = if l { 1.0 } else { -1.0 };
                    softplus(-t * model.decision(row))
                })
                .sum::<f64>()
                / xv.len() as f64;
            total += loss;
            folds_used += 1;
        }
        if folds_used == 0 {
            continue;
        }
        let score = total / folds_used as f64;
        if score < best.0 {
            best = (score, lambda);
        }
    }
    Ok(best.1)
}

/// Principal components of centered data: rows are the top-k right singular
/// vectors, each flipped so its largest-magnitude entry is positive.
#[derive(Debug, Clone)]
pub struct PcaModel {
    components: DMatrix<f64>,
    means: Vec<f64>,
    /// Squared singular values over (n - 1), non-increasing.
    pub explained_variance: Vec<f64>,
}

impl PcaModel {
    pub fn k(&self) -> usize {
        self.components.nrows()
    }

    pub fn gene_count(&self) -> usize {
        self.components.ncols()
    }

    pub fn component(&self, i: usize) -> Vec<f64> {
        self.components.row(i).iter().copied().collect()
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }
}

pub fn pca_fit(x: &[Vec<f64>], k: usize) -> Result<PcaModel> {
    let d = feature_width(x)?;
    let n = x.len();
    if k == 0 || k > n.min(d) {
        return Err(Error::Config(format!(
            "pca rank {k} outside 1..={} for {n} x {d} data",
            n.min(d)
        )));
    }
    let mut means = vec![0.0; d];
    for row in x {
        for (m, v) in means.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    let mut centered = DMatrix::zeros(n, d);
    for (i, row) in x.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            centered[(i, j)] = v - means[j];
        }
    }
    let svd = centered.svd(false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let mut components = DMatrix::zeros(k, d);
    let mut explained_variance = Vec::with_capacity(k);
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    for i in 0..k {
        let mut row: Vec<f64> = v_t.row(i).iter().copied().collect();
        let lead = row
            .iter()
            .cloned()
            .fold(0.0_f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if lead < 0.0 {
            for v in &mut row {
                *v = -*v;
            }
        }
        for (j, v) in row.iter().enumerate() {
            components[(i, j)] = *v;
        }
        let s = svd.singular_values[i];
        explained_variance.push(s * s / denom);
    }
    Ok(PcaModel { components, means, explained_variance })
}

/// Project rows onto the components: scores[i] = (x[i] - mean) V^T.
pub fn pca_transform(model: &PcaModel, x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let d = feature_width(x)?;
    if d != model.gene_count() {
        return Err(Error::Data(format!(
            "{d} features vs {} fitted genes",
            model.gene_count()
        )));
    }
    Ok(x.iter()
        .map(|row| {
            (0..model.k())
                .map(|c| {
                    row.iter()
                        .zip(&model.means)
                        .enumerate()
                        .map(|(j, (v, m))| (v - m) * model.components[(c, j)])
                        .sum()
                })
                .collect()
        })
        .collect())
}

/// Map scores back through the components and add the mean.
pub fn pca_reconstruct(model: &PcaModel, scores: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if scores.iter().any(|s| s.len() != model.k()) {
        return Err(Error::Data(format!("scores must have width {}", model.k())));
    }
    Ok(scores
        .iter()
        .map(|s| {
            (0..model.gene_count())
                .map(|j| {
                    model.means[j]
                        + s.iter()
                            .enumerate()
                            .map(|(c, v)| v * model.components[(c, j)])
                            .sum::<f64>()
                })
                .collect()
        })
        .collect())
}

/// Frozen feature map evaluated before the classifier. VAE embeddings use
/// the Monte-Carlo posterior mean of z1; the mapped variant pushes it
/// through the perturbation hop's mean, the predicted post-treatment
/// latent.
pub enum Embedder<'a> {
    Identity,
    Pca(&'a PcaModel),
    Latent { model: &'a PertVae, samples: usize, seed: u64 },
    MappedLatent { model: &'a PertVae, samples: usize, seed: u64 },
}

impl Embedder<'_> {
    pub fn embed(&self, x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        match self {
            Embedder::Identity => {
                feature_width(x)?;
                Ok(x.to_vec())
            }
            Embedder::Pca(model) => pca_transform(model, x),
            Embedder::Latent { model, samples, seed } => {
                Ok(rows_of(&latent_mean(model, x, *samples, *seed)?))
            }
            Embedder::MappedLatent { model, samples, seed } => {
                let z1 = latent_mean(model, x, *samples, *seed)?;
                Ok(rows_of(&model.mapped_representation(&z1)?))
            }
        }
    }
}

fn latent_mean(model: &PertVae, x: &[Vec<f64>], samples: usize, seed: u64) -> Result<Tensor> {
    let d = feature_width(x)?;
    let flat: Vec<f64> = x.iter().flatten().copied().collect();
    let xt = Tensor::new(flat, &[x.len(), d])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model.latent_representation(&xt, samples.max(1), &mut rng)
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    let cols = t.shape()[1];
    t.to_vec().chunks(cols).map(<[f64]>::to_vec).collect()
}

/// Standardizer plus classifier trained on an embedding; the embedder stays
/// frozen and is re-applied at prediction time.
pub struct TwoStepPipeline {
    pub standardizer: Standardizer,
    pub model: RidgeLrModel,
}

/// Embed, standardize on the embedded training features, pick the penalty
/// from `grid` by inner cross-validation when none is given, and fit the
/// classifier.
pub fn fit_two_step(
    embedder: &Embedder,
    x: &[Vec<f64>],
    y: &[bool],
    lines: &[String],
    lambda: Option<f64>,
    grid: &[f64],
    seed: u64,
) -> Result<TwoStepPipeline> {
    let embedded = embedder.embed(x)?;
    let standardizer = Standardizer::fit(&embedded)?;
    let xs = standardizer.transform(&embedded);
    let lambda = match lambda {
        Some(l) => l,
        None => select_lambda(&xs, y, lines, grid, seed)?,
    };
    let model = ridge_fit(&xs, y, lambda)?;
    Ok(TwoStepPipeline { standardizer, model })
}

pub fn predict_two_step(
    pipeline: &TwoStepPipeline,
    embedder: &Embedder,
    x: &[Vec<f64>],
) -> Result<Vec<f64>> {
    let embedded = embedder.embed(x)?;
    if embedded.first().is_some_and(|r| r.len() != pipeline.standardizer.width()) {
        return Err(Error::Data(format!(
            "embedding width {} vs fitted width {}",
            embedded[0].len(),
            pipeline.standardizer.width()
        )));
    }
    Ok(pipeline.model.predict_batch(&pipeline.standardizer.transform(&embedded)))
}
