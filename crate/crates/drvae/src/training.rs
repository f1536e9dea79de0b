//! Shared training-loop machinery: configuration, per-epoch logs, cell-line
//! validation splits, minibatch assembly, parameter snapshots, and
//! patience-based early stopping.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::tensor::adam::AdamConfig;
use crate::tensor::nn::ParamSet;

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    /// Upper bound on epochs; early stopping usually ends training sooner.
    pub epochs: usize,
    pub batch_size: usize,
    /// Consecutive epochs without validation improvement before stopping.
    pub patience: usize,
    pub adam: AdamConfig,
    /// Fraction of cell lines held out of training to drive early stopping.
    pub val_lines_fraction: f64,
    /// Monte-Carlo samples per record for validation-metric estimates.
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 32,
            patience: 20,
            adam: AdamConfig::default(),
            val_lines_fraction: 0.2,
            eval_samples: 8,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean per-record reconstruction term, when the objective exposes it.
    pub recon: Option<f64>,
    /// Mean per-record KL term, when the objective exposes it.
    pub kl: Option<f64>,
    pub val_metric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub rows: Vec<EpochRow>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub stopped_early: bool,
}

impl TrainLog {
    /// CSV log: epoch, penalized bound (negative training loss),
    /// reconstruction and KL means when available, validation metric.
    /// Floats use shortest round-trip form, so reruns diff byte-for-byte.
    pub fn write_csv(&self, path: &std::path::Path) -> crate::error::Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "elbo", "recon", "kl", "val_metric"])?;
        let fmt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.epoch.to_string(),
                format!("{}", -r.train_loss),
                fmt(r.recon),
                fmt(r.kl),
                format!("{}", r.val_metric),
            ])?;
        }
        w.flush()
            .map_err(|e| crate::error::Error::Data(format!("flush training log: {e}")))?;
        Ok(())
    }
}

/// Hold out roughly `fraction` of the cell lines (at least one stays in
/// training). Selection shuffles the sorted line list, so it depends only on
/// the RNG state.
pub(crate) fn split_validation_lines<R: Rng>(
    lines: &[String],
    fraction: f64,
    rng: &mut R,
) -> BTreeSet<String> {
    let n = lines.len();
    if n < 2 || fraction <= 0.0 {
        return BTreeSet::new();
    }
    let take = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let mut shuffled: Vec<&String> = lines.iter().collect();
    shuffled.shuffle(rng);
    shuffled.into_iter().take(take).cloned().collect()
}

/// Shuffle indices and cut into batches of at most `batch_size`.
pub(crate) fn make_batches<R: Rng>(
    indices: &[usize],
    batch_size: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let mut shuffled = indices.to_vec();
    shuffled.shuffle(rng);
    shuffled.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

pub(crate) struct Snapshot(Vec<Vec<f64>>);

pub(crate) fn snapshot(params: &ParamSet) -> Snapshot {
    Snapshot(params.iter().map(|(_, t)| t.to_vec()).collect())
}

pub(crate) fn restore(params: &ParamSet, snap: &Snapshot) {
    for ((_, t), values) in params.iter().zip(&snap.0) {
        t.set_values(values).expect("snapshot matches parameter set");
    }
}

/// Tracks the best validation metric, snapshots parameters on improvement,
/// and signals when patience is exhausted. NaN metrics never count as an
/// improvement.
pub(crate) struct EarlyStopper {
    lower_is_better: bool,
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_best: usize,
    snap: Option<Snapshot>,
}

impl EarlyStopper {
    pub(crate) fn new(lower_is_better: bool, patience: usize) -> Self {
        EarlyStopper {
            lower_is_better,
            patience,
            best: if lower_is_better { f64::INFINITY } else { f64::NEG_INFINITY },
            best_epoch: 0,
            since_best: 0,
            snap: None,
        }
    }

    /// Returns true when training should stop.
    pub(crate) fn observe(&mut self, epoch: usize, metric: f64, params: &ParamSet) -> bool {
        let improved = !metric.is_nan()
            && if self.lower_is_better { metric < self.best } else { metric > self.best };
        if improved {
            self.best = metric;
            self.best_epoch = epoch;
            self.since_best = 0;
            self.snap = Some(snapshot(params));
        } else {
            self.since_best += 1;
        }
        self.since_best >= self.patience
    }

    pub(crate) fn restore_best(&self, params: &ParamSet) {
        if let Some(snap) = &self.snap {
            restore(params, snap);
        }
    }

    pub(crate) fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub(crate) fn best_metric(&self) -> f64 {
        self.best
    }
}
