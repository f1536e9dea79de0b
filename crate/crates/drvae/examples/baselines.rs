//! Classical reference models: ridge-penalized logistic regression with an
//! inner penalty search, and PCA embeddings fitted by SVD.

use drvae::baselines::{
    fit_two_step, lambda_grid, pca_fit, pca_reconstruct, pca_transform, predict_two_step,
    select_lambda, Embedder,
};
use drvae::metrics::{aupr, auroc, RankedPredictions};
use drvae::synth::{generate, SyntheticConfig};
use drvae::Result;

fn main() -> Result<()> {
    let out = generate(&SyntheticConfig::linear_separable(3))?;
    let data = out.dataset;
    let labeled = data.regime_indices().labeled();
    let x = data.x1_rows(&labeled);
    let y: Vec<bool> = data.labels_of(&labeled)?.into_iter().map(|c| c == 1).collect();
    let lines: Vec<String> =
        labeled.iter().map(|&i| data.samples[i].cell_line.clone()).collect();

    // Inner 3-fold search over the penalty grid, grouped by cell line so
    // replicates of one line never straddle train and validation.
    let lambda = select_lambda(&x, &y, &lines, &lambda_grid(), 17)?;
    println!("selected ridge penalty: {lambda}");

    let pipeline = fit_two_step(&Embedder::Identity, &x, &y, &lines, Some(lambda), &[], 17)?;
    let scores = predict_two_step(&pipeline, &Embedder::Identity, &x)?;
    let ranked = RankedPredictions::new(scores, y.clone())?;
    println!(
        "ridge on raw genes (train fit): AUROC {:.3}, AUPR {:.3}",
        auroc(&ranked)?,
        aupr(&ranked)?
    );

    // PCA by SVD of the centered matrix; reconstruction error shrinks as
    // rank grows.
    let all: Vec<usize> = (0..data.len()).collect();
    let rows = data.x1_rows(&all);
    for k in [2, 5, 10] {
        let pca = pca_fit(&rows, k)?;
        let rec = pca_reconstruct(&pca, &pca_transform(&pca, &rows)?)?;
        let mse: f64 = rows
            .iter()
            .zip(&rec)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v).powi(2)))
            .sum::<f64>()
            / (rows.len() * data.gene_count) as f64;
        let ev: f64 = pca.explained_variance.iter().sum();
        println!("pca rank {k:2}: reconstruction MSE {mse:.4}, captured variance {ev:.2}");
    }

    // The same logistic head runs on any embedding.
    let pca = pca_fit(&rows, 10)?;
    let emb = Embedder::Pca(&pca);
    let pipe2 = fit_two_step(&emb, &x, &y, &lines, Some(lambda), &[], 17)?;
    let scores2 = predict_two_step(&pipe2, &emb, &x)?;
    let ranked2 = RankedPredictions::new(scores2, y)?;
    println!(
        "ridge on 10 principal components: AUROC {:.3}, AUPR {:.3}",
        auroc(&ranked2)?,
        aupr(&ranked2)?
    );
    Ok(())
}
