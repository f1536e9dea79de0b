//! Command-line entry point: data generation, model training, the
//! cross-validation sweep, and report rendering. Every command is seeded
//! and writes deterministic files, so identical invocations produce
//! byte-identical outputs.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baselines::{fit_two_step, pca_fit, predict_two_step, Embedder};
use crate::checkpoint::save_checkpoint;
use crate::config::{RunConfig, SCENARIOS};
use crate::data::Dataset;
use crate::drvae::DrVae;
use crate::error::{Error, Result};
use crate::experiment::{run_experiment, ModelKind};
use crate::pertvae::PertVae;
use crate::report::CvReport;
use crate::tensor::nn::ParamSet;
use crate::tensor::Tensor;

#[derive(Parser)]
#[command(
    name = "drvae",
    about = "Variational models for drug-response prediction on expression data",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML run configuration; defaults fill anything missing.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed from the configuration file.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory receiving output files.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic dataset for one scenario and write it as CSV.
    GenerateData {
        /// One of: linear-separable, nonlinear-xor, shift-informative.
        #[arg(long)]
        scenario: String,
        #[command(flatten)]
        common: Common,
    },
    /// Train the perturbation VAE on a dataset CSV.
    TrainPertvae {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the semi-supervised response model on a dataset CSV.
    TrainDrvae {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Fit a classical baseline (ridge-lr or pca-lr) on a dataset CSV.
    TrainBaseline {
        #[arg(long)]
        data: PathBuf,
        /// ridge-lr or pca-lr.
        #[arg(long, default_value = "ridge-lr")]
        model: String,
        #[command(flatten)]
        common: Common,
    },
    /// Run the repeated cell-line-wise cross-validation sweep.
    CrossValidate {
        /// Scenario to generate when --data is not given.
        #[arg(long, default_value = "shift-informative")]
        scenario: String,
        /// Existing dataset CSV; omitting it generates the scenario.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated model keys; defaults to all registered models.
        #[arg(long, value_delimiter = ',')]
        models: Vec<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Re-render a rows CSV into the markdown summary.
    Report {
        #[arg(long)]
        rows: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Print the default configuration template.
    PrintConfig,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn ensure_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn write_predictions(
    path: &Path,
    data: &Dataset,
    scores: &[f64],
    indices: &[usize],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["cell_line_id", "replicate_id", "probability", "y"])?;
    for (&i, score) in indices.iter().zip(scores) {
        let s = &data.samples[i];
        let label = match s.label {
            Some(true) => "1".to_string(),
            Some(false) => "0".to_string(),
            None => String::new(),
        };
        w.write_record([
            s.cell_line.clone(),
            s.replicate.to_string(),
            format!("{score}"),
            label,
        ])?;
    }
    w.flush().map_err(|e| Error::Data(format!("flush predictions: {e}")))?;
    Ok(())
}

fn cmd_generate_data(scenario: &str, common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let synth = cfg.synthetic(scenario)?;
    let output = crate::synth::generate(&synth)?;
    ensure_out(&common.out)?;
    let data_path = common.out.join(format!("{scenario}.csv"));
    output.dataset.write_csv(&data_path)?;
    let oracle_path = common.out.join(format!("{scenario}-oracle.json"));
    std::fs::write(&oracle_path, serde_json::to_string_pretty(&output.oracle)?)?;
    println!(
        "wrote {} records ({} genes) to {}",
        output.dataset.samples.len(),
        output.dataset.gene_count,
        data_path.display()
    );
    println!(
        "generator oracle: prevalence {:.3}, pre-treatment AUROC {}, with-shift AUROC {}",
        output.oracle.prevalence,
        output
            .oracle
            .bayes_pre_auroc
            .map(|v| format!("{v:.3}"))
            .unwrap_or_else(|| "n/a".into()),
        output
            .oracle
            .bayes_post_auroc
            .map(|v| format!("{v:.3}"))
            .unwrap_or_else(|| "n/a".into()),
    );
    Ok(())
}

fn cmd_train_pertvae(data: &Path, common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let dataset = Dataset::read_csv(data)?;
    let mut arch = cfg.pertvae();
    arch.gene_count = dataset.gene_count;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = PertVae::new(arch, &mut rng)?;
    let log = model.train(&dataset, &cfg.train_config(), &mut rng)?;
    ensure_out(&common.out)?;
    save_checkpoint(&model.params(), &common.out.join("pertvae.json"))?;
    log.write_csv(&common.out.join("pertvae-log.csv"))?;
    println!(
        "trained {} epochs, best validation metric {:.6} at epoch {}{}",
        log.rows.len(),
        log.best_val,
        log.best_epoch,
        if log.stopped_early { " (stopped early)" } else { "" }
    );
    Ok(())
}

fn cmd_train_drvae(data: &Path, common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let dataset = Dataset::read_csv(data)?;
    let mut arch = cfg.drvae();
    arch.base.gene_count = dataset.gene_count;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = DrVae::new(arch, &mut rng)?;
    let log = model.train(&dataset, &cfg.train_config(), &mut rng)?;
    ensure_out(&common.out)?;
    save_checkpoint(&model.params(), &common.out.join("drvae.json"))?;
    log.write_csv(&common.out.join("drvae-log.csv"))?;

    let indices: Vec<usize> = (0..dataset.len()).collect();
    let mut predict_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let scores = model.predict_response_batch(
        &dataset,
        &indices,
        cfg.cv.predict_samples,
        &mut predict_rng,
    )?;
    write_predictions(&common.out.join("drvae-predictions.csv"), &dataset, &scores, &indices)?;
    println!(
        "trained {} epochs, best validation metric {:.6} at epoch {}{}",
        log.rows.len(),
        log.best_val,
        log.best_epoch,
        if log.stopped_early { " (stopped early)" } else { "" }
    );
    Ok(())
}

fn cmd_train_baseline(data: &Path, model_key: &str, common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let dataset = Dataset::read_csv(data)?;
    let labeled = dataset.regime_indices().labeled();
    if labeled.is_empty() {
        return Err(Error::Data("dataset has no labeled records".into()));
    }
    let x = dataset.x1_rows(&labeled);
    let y: Vec<bool> = dataset.labels_of(&labeled)?.into_iter().map(|c| c == 1).collect();
    let lines: Vec<String> =
        labeled.iter().map(|&i| dataset.samples[i].cell_line.clone()).collect();

    let pca = match model_key {
        "ridge-lr" => None,
        "pca-lr" => {
            let all: Vec<usize> = (0..dataset.len()).collect();
            let rows = dataset.x1_rows(&all);
            let k = cfg.cv.pca_components.min(rows.len()).min(dataset.gene_count);
            Some(pca_fit(&rows, k)?)
        }
        other => {
            return Err(Error::Config(format!(
                "unknown baseline {other:?}; expected ridge-lr or pca-lr"
            )))
        }
    };
    let embedder = match &pca {
        Some(model) => Embedder::Pca(model),
        None => Embedder::Identity,
    };
    let pipeline =
        fit_two_step(&embedder, &x, &y, &lines, None, &cfg.cv.lambda_grid, cfg.seed)?;

    ensure_out(&common.out)?;
    let mut params = ParamSet::new();
    let push = |params: &mut ParamSet, name: &str, values: Vec<f64>, shape: &[usize]| {
        params.push(name, &Tensor::param(values, shape).expect("finite fitted values"));
    };
    if let Some(model) = &pca {
        let k = model.k();
        let flat: Vec<f64> = (0..k).flat_map(|i| model.component(i)).collect();
        push(&mut params, "pca.components", flat, &[k, dataset.gene_count]);
        push(&mut params, "pca.means", model.means().to_vec(), &[dataset.gene_count]);
        push(&mut params, "pca.explained_variance", model.explained_variance.clone(), &[k]);
    }
    let d = pipeline.model.weights.len();
    push(&mut params, "ridge.weights", pipeline.model.weights.clone(), &[d]);
    push(&mut params, "ridge.intercept", vec![pipeline.model.intercept], &[1]);
    push(&mut params, "ridge.lambda", vec![pipeline.model.lambda], &[1]);
    push(&mut params, "standardizer.means", pipeline.standardizer.means().to_vec(), &[d]);
    push(&mut params, "standardizer.scales", pipeline.standardizer.scales().to_vec(), &[d]);
    save_checkpoint(&params, &common.out.join(format!("{model_key}.json")))?;

    let scores = predict_two_step(&pipeline, &embedder, &x)?;
    write_predictions(
        &common.out.join(format!("{model_key}-predictions.csv")),
        &dataset,
        &scores,
        &labeled,
    )?;
    println!(
        "fitted {model_key} on {} labeled records (penalty {})",
        labeled.len(),
        pipeline.model.lambda
    );
    Ok(())
}

fn cmd_cross_validate(
    scenario: &str,
    data: Option<&Path>,
    model_keys: &[String],
    common: &Common,
) -> Result<()> {
    let cfg = load_config(common)?;
    let dataset = match data {
        Some(path) => Dataset::read_csv(path)?,
        None => crate::synth::generate(&cfg.synthetic(scenario)?)?.dataset,
    };
    let models: Vec<ModelKind> = if model_keys.is_empty() {
        ModelKind::all()
    } else {
        model_keys
            .iter()
            .map(|k| ModelKind::from_key(k))
            .collect::<Result<Vec<_>>>()?
    };
    let labeled_lines: std::collections::BTreeSet<&String> = dataset
        .samples
        .iter()
        .filter(|s| s.is_labeled())
        .map(|s| &s.cell_line)
        .collect();
    if labeled_lines.len() < 20 {
        eprintln!(
            "warning: only {} labeled cell lines; classification metrics will be unstable",
            labeled_lines.len()
        );
    }

    let mut settings = cfg.experiment_settings();
    settings.pertvae.gene_count = dataset.gene_count;
    settings.drvae.base.gene_count = dataset.gene_count;
    let report = run_experiment(&dataset, scenario, &models, &settings)?;

    ensure_out(&common.out)?;
    let rows_path = common.out.join("rows.csv");
    report.write_csv(&rows_path)?;
    std::fs::write(common.out.join("report.md"), report.markdown())?;
    for agg in report.aggregate() {
        println!(
            "{} / {}: {} ok, {} failed, mean AUPR {}, mean AUROC {}",
            agg.model,
            agg.scenario,
            agg.folds_ok,
            agg.folds_failed,
            agg.mean_aupr.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into()),
            agg.mean_auroc.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into()),
        );
    }
    println!("rows: {}", rows_path.display());
    Ok(())
}

fn cmd_report(rows: &Path, common: &Common) -> Result<()> {
    let report = CvReport::read_csv(rows)?;
    ensure_out(&common.out)?;
    report.write_csv(&common.out.join("rows.csv"))?;
    std::fs::write(common.out.join("report.md"), report.markdown())?;
    println!(
        "rendered {} rows into {}",
        report.rows.len(),
        common.out.join("report.md").display()
    );
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenerateData { scenario, common } => cmd_generate_data(scenario, common),
        Command::TrainPertvae { data, common } => cmd_train_pertvae(data, common),
        Command::TrainDrvae { data, common } => cmd_train_drvae(data, common),
        Command::TrainBaseline { data, model, common } => {
            cmd_train_baseline(data, model, common)
        }
        Command::CrossValidate { scenario, data, models, common } => {
            cmd_cross_validate(scenario, data.as_deref(), models, common)
        }
        Command::Report { rows, common } => cmd_report(rows, common),
        Command::PrintConfig => {
            print!("{}", RunConfig::template());
            println!("# scenarios: {SCENARIOS:?}");
            Ok(())
        }
    }
}

/// Parse arguments and run; returns the process exit code.
pub fn run_cli() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
