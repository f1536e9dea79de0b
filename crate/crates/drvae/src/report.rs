//! Cross-validation reports: one metric row per (model, scenario, split),
//! exact CSV persistence, aggregation over the splits with relative change
//! against the ridge baseline, and a markdown rendering.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::{mann_whitney_one_sided, relative_percent_change};

/// Model key of the reference classifier all relative changes are against.
pub const RIDGE_KEY: &str = "ridge-lr";

#[derive(Debug, Clone, PartialEq)]
pub enum RowStatus {
    Ok,
    Failed(String),
}

/// One evaluated split. Metric fields are None when the model does not
/// produce them (ridge has no perturbation correlations) or the fold
/// failed.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub model: String,
    pub scenario: String,
    pub repetition: usize,
    pub fold: usize,
    pub status: RowStatus,
    pub auroc: Option<f64>,
    pub aupr: Option<f64>,
    pub rho_pred: Option<f64>,
    pub rho_rec: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CvReport {
    pub rows: Vec<MetricRow>,
}

/// Per (model, scenario) summary over the ok rows.
#[derive(Debug, Clone)]
pub struct AggregateRow {
    pub model: String,
    pub scenario: String,
    pub folds_ok: usize,
    pub folds_failed: usize,
    pub mean_auroc: Option<f64>,
    pub mean_aupr: Option<f64>,
    pub mean_rho_pred: Option<f64>,
    pub mean_rho_rec: Option<f64>,
    /// Percent change of mean AUPR against the ridge baseline's mean on
    /// the same scenario; identically 0 for ridge itself.
    pub aupr_change_vs_ridge: Option<f64>,
    pub auroc_change_vs_ridge: Option<f64>,
    /// One-sided Mann-Whitney p for "rho_pred tends to exceed rho_rec"
    /// over the splits.
    pub rho_mw_p: Option<f64>,
}

fn mean_of(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

impl CvReport {
    /// First-appearance order of models and scenarios, which fixes row and
    /// column order everywhere downstream.
    fn keys(&self) -> (Vec<String>, Vec<String>) {
        let mut models = Vec::new();
        let mut scenarios = Vec::new();
        for row in &self.rows {
            if !models.contains(&row.model) {
                models.push(row.model.clone());
            }
            if !scenarios.contains(&row.scenario) {
                scenarios.push(row.scenario.clone());
            }
        }
        (models, scenarios)
    }

    pub fn aggregate(&self) -> Vec<AggregateRow> {
        let (models, scenarios) = self.keys();
        let mut ridge_aupr: BTreeMap<&str, f64> = BTreeMap::new();
        let mut ridge_auroc: BTreeMap<&str, f64> = BTreeMap::new();
        for scenario in &scenarios {
            let ok: Vec<&MetricRow> = self
                .rows
                .iter()
                .filter(|r| {
                    r.model == RIDGE_KEY && &r.scenario == scenario && r.status == RowStatus::Ok
                })
                .collect();
            let auprs: Vec<f64> = ok.iter().filter_map(|r| r.aupr).collect();
            let aurocs: Vec<f64> = ok.iter().filter_map(|r| r.auroc).collect();
            if let Some(m) = mean_of(&auprs) {
                ridge_aupr.insert(scenario, m);
            }
            if let Some(m) = mean_of(&aurocs) {
                ridge_auroc.insert(scenario, m);
            }
        }

        let mut out = Vec::new();
        for scenario in &scenarios {
            for model in &models {
                let rows: Vec<&MetricRow> = self
                    .rows
                    .iter()
                    .filter(|r| &r.model == model && &r.scenario == scenario)
                    .collect();
                if rows.is_empty() {
                    continue;
                }
                let ok: Vec<&&MetricRow> =
                    rows.iter().filter(|r| r.status == RowStatus::Ok).collect();
                let col = |f: fn(&MetricRow) -> Option<f64>| -> Vec<f64> {
                    ok.iter().filter_map(|r| f(r)).collect()
                };
                let mean_auroc = mean_of(&col(|r| r.auroc));
                let mean_aupr = mean_of(&col(|r| r.aupr));
                let rho_pred = col(|r| r.rho_pred);
                let rho_rec = col(|r| r.rho_rec);
                let rho_mw_p = if rho_pred.is_empty() || rho_rec.is_empty() {
                    None
                } else {
                    mann_whitney_one_sided(&rho_rec, &rho_pred).ok().map(|m| m.p)
                };
                out.push(AggregateRow {
                    model: model.clone(),
                    scenario: scenario.clone(),
                    folds_ok: ok.len(),
                    folds_failed: rows.len() - ok.len(),
                    mean_auroc,
                    mean_aupr,
                    mean_rho_pred: mean_of(&rho_pred),
                    mean_rho_rec: mean_of(&rho_rec),
                    aupr_change_vs_ridge: mean_aupr.and_then(|m| {
                        ridge_aupr
                            .get(scenario.as_str())
                            .map(|&r| relative_percent_change(m, r))
                    }),
                    auroc_change_vs_ridge: mean_auroc.and_then(|m| {
                        ridge_auroc
                            .get(scenario.as_str())
                            .map(|&r| relative_percent_change(m, r))
                    }),
                    rho_mw_p,
                });
            }
        }
        out
    }

    /// Exact persistence: floats are written in shortest round-trip form,
    /// so re-reading reproduces every row bit for bit.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "model",
            "scenario",
            "repetition",
            "fold",
            "status",
            "auroc",
            "aupr",
            "rho_pred",
            "rho_rec",
        ])?;
        let fmt = |v: &Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for r in &self.rows {
            let status = match &r.status {
                RowStatus::Ok => "ok".to_string(),
                RowStatus::Failed(reason) => format!("failed:{reason}"),
            };
            w.write_record([
                r.model.clone(),
                r.scenario.clone(),
                r.repetition.to_string(),
                r.fold.to_string(),
                status,
                fmt(&r.auroc),
                fmt(&r.aupr),
                fmt(&r.rho_pred),
                fmt(&r.rho_rec),
            ])?;
        }
        w.flush().map_err(|e| Error::Data(format!("flush report: {e}")))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<CvReport> {
        let mut reader = csv::Reader::from_path(path)?;
        let parse = |field: &str, name: &str| -> Result<Option<f64>> {
            if field.is_empty() {
                Ok(None)
            } else {
                field
                    .parse::<f64>()
                    .map(Some)
                    .map_err(|e| Error::Data(format!("bad {name} value {field:?}: {e}")))
            }
        };
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record?;
            if record.len() != 9 {
                return Err(Error::Data(format!(
                    "report row has {} fields, expected 9",
                    record.len()
                )));
            }
            let status = match &record[4] {
                "ok" => RowStatus::Ok,
                s if s.starts_with("failed:") => {
                    RowStatus::Failed(s["failed:".len()..].to_string())
                }
                s => return Err(Error::Data(format!("unknown row status {s:?}"))),
            };
            rows.push(MetricRow {
                model: record[0].to_string(),
                scenario: record[1].to_string(),
                repetition: record[2]
                    .parse()
                    .map_err(|e| Error::Data(format!("bad repetition: {e}")))?,
                fold: record[3]
                    .parse()
                    .map_err(|e| Error::Data(format!("bad fold: {e}")))?,
                status,
                auroc: parse(&record[5], "auroc")?,
                aupr: parse(&record[6], "aupr")?,
                rho_pred: parse(&record[7], "rho_pred")?,
                rho_rec: parse(&record[8], "rho_rec")?,
            });
        }
        Ok(CvReport { rows })
    }

    /// Scenario-by-model tables (AUPR then AUROC, relative change against
    /// ridge in parentheses) plus a perturbation-correlation summary.
    /// Every comparison table has model-count + 1 columns.
    pub fn markdown(&self) -> String {
        let (models, _) = self.keys();
        let aggregates = self.aggregate();
        let mut out = String::from("# Cross-validation summary\n");
        if self.rows.is_empty() {
            out.push_str("\nNo evaluated splits.\n");
            return out;
        }

        let cell = |agg: Option<&AggregateRow>,
                    mean: fn(&AggregateRow) -> Option<f64>,
                    change: fn(&AggregateRow) -> Option<f64>|
         -> String {
            match agg {
                None => "n/a".to_string(),
                Some(a) => match (mean(a), change(a)) {
                    (Some(m), Some(c)) => format!("{m:.3} ({c:+.1}%)"),
                    (Some(m), None) => format!("{m:.3}"),
                    _ => "n/a".to_string(),
                },
            }
        };
        for (title, mean, change) in [
            (
                "Mean AUPR (relative change vs ridge)",
                (|a: &AggregateRow| a.mean_aupr) as fn(&AggregateRow) -> Option<f64>,
                (|a: &AggregateRow| a.aupr_change_vs_ridge) as fn(&AggregateRow) -> Option<f64>,
            ),
            (
                "Mean AUROC (relative change vs ridge)",
                |a: &AggregateRow| a.mean_auroc,
                |a: &AggregateRow| a.auroc_change_vs_ridge,
            ),
        ] {
            out.push_str(&format!("\n## {title}\n\n"));
            out.push_str(&format!("| Scenario | {} |\n", models.join(" | ")));
            out.push_str(&format!("|---{}|\n", "|---".repeat(models.len())));
            let (_, scenarios) = self.keys();
            for scenario in &scenarios {
                let cells: Vec<String> = models
                    .iter()
                    .map(|m| {
                        let agg = aggregates
                            .iter()
                            .find(|a| &a.model == m && &a.scenario == scenario);
                        cell(agg, mean, change)
                    })
                    .collect();
                out.push_str(&format!("| {scenario} | {} |\n", cells.join(" | ")));
            }
        }

        let with_rho: Vec<&AggregateRow> =
            aggregates.iter().filter(|a| a.mean_rho_pred.is_some()).collect();
        if !with_rho.is_empty() {
            out.push_str("\n## Perturbation correlations\n\n");
            out.push_str("| Model | Scenario | mean rho_pred | mean rho_rec | MW p (rec < pred) |\n");
            out.push_str("|---|---|---|---|---|\n");
            for a in with_rho {
                let p = a.rho_mw_p.map(|p| format!("{p:.2e}")).unwrap_or("n/a".into());
                out.push_str(&format!(
                    "| {} | {} | {:.3} | {:.3} | {p} |\n",
                    a.model,
                    a.scenario,
                    a.mean_rho_pred.unwrap(),
                    a.mean_rho_rec.unwrap_or(f64::NAN),
                ));
            }
        }

        let failed: usize = aggregates.iter().map(|a| a.folds_failed).sum();
        if failed > 0 {
            out.push_str(&format!("\n{failed} split(s) failed; see the rows CSV.\n"));
        }
        out
    }
}
