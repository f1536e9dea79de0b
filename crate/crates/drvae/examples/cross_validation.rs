//! Repeated cell-line-wise cross-validation comparing models on one
//! synthetic scenario, with the aggregated report rendered as markdown.
//! Small settings keep this example quick; the command-line tool runs the
//! full sweep.

use drvae::config::RunConfig;
use drvae::experiment::{run_experiment, ModelKind};
use drvae::synth::generate;
use drvae::Result;

fn main() -> Result<()> {
    let mut cfg = RunConfig::default();
    cfg.seed = 21;
    cfg.data.gene_count = 16;
    cfg.data.latent_dim = 4;
    cfg.data.lines_labeled_pairs = 12;
    cfg.data.lines_unlabeled_pairs = 2;
    cfg.data.lines_labeled_singletons = 2;
    cfg.data.lines_unlabeled_singletons = 2;
    cfg.data.replicates = 2;
    cfg.cv.repetitions = 2;
    cfg.cv.folds = 3;
    cfg.cv.pca_components = 4;

    let scenario = "linear-separable";
    let data = generate(&cfg.synthetic(scenario)?)?.dataset;
    let mut settings = cfg.experiment_settings();
    settings.pertvae.gene_count = data.gene_count;
    settings.drvae.base.gene_count = data.gene_count;

    // Folds partition cell lines, never records: all replicates of a line
    // land on the same side of every split.
    let models = [ModelKind::RidgeLr, ModelKind::PcaLr];
    let report = run_experiment(&data, scenario, &models, &settings)?;
    for agg in report.aggregate() {
        println!(
            "{:10} {} ok / {} failed, mean AUROC {}, mean AUPR {}",
            agg.model,
            agg.folds_ok,
            agg.folds_failed,
            agg.mean_auroc.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into()),
            agg.mean_aupr.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into()),
        );
    }
    println!("\n{}", report.markdown());
    Ok(())
}
