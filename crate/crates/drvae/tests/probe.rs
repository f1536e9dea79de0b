use drvae::metrics::mann_whitney_one_sided;
use drvae::experiment::{run_experiment, ExperimentSettings, ModelKind};
use drvae::synth::{generate, SyntheticConfig};

#[test]
fn probe_fold_variance() {
    let synth = SyntheticConfig::shift_informative(401);
    let data = generate(&synth).unwrap().dataset;
    let settings = ExperimentSettings::desk(data.gene_count, 10, 401);
    let models = [ModelKind::RidgeLr, ModelKind::PertVaeLrZ1, ModelKind::DrVae];
    let t = std::time::Instant::now();
    let report = run_experiment(&data, "shift-informative", &models, &settings).unwrap();
    eprintln!("10 reps: {:.1}s", t.elapsed().as_secs_f64());
    for m in &models {
        let rows: Vec<_> = report.rows.iter().filter(|r| r.model == m.key()).collect();
        let auprs: Vec<f64> = rows.iter().filter_map(|r| r.aupr).collect();
        let mean = auprs.iter().sum::<f64>() / auprs.len() as f64;
        let pred: Vec<f64> = rows.iter().filter_map(|r| r.rho_pred).collect();
        let rec: Vec<f64> = rows.iter().filter_map(|r| r.rho_rec).collect();
        let p = if pred.is_empty() {
            f64::NAN
        } else {
            mann_whitney_one_sided(&rec, &pred).unwrap().p
        };
        eprintln!("{:14} mean aupr {:.4} over {} rows, rho MW p {:.4}", m.key(), mean, auprs.len(), p);
    }
}
