//! Ranking metrics (AUROC, average precision, Spearman's rho) and a
//! one-sided Mann-Whitney U test. Ties are handled with midranks
//! throughout; average precision groups tied scores and evaluates
//! precision at group boundaries.

use itertools::Itertools;

use crate::error::{Error, Result};

/// Parallel score/label vectors for threshold-free binary ranking metrics.
#[derive(Debug, Clone)]
pub struct RankedPredictions {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl RankedPredictions {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} scores vs {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if scores.len() < 2 {
            return Err(Error::Data("ranking needs at least two records".into()));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite { op: "ranked predictions".into() });
        }
        Ok(RankedPredictions { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn n_pos(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn n_neg(&self) -> usize {
        self.len() - self.n_pos()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }
}

/// 1-based average ranks; tied values share the mean of their positions.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Probability that a random positive outranks a random negative, ties
/// counted one half: the rank-sum (Mann-Whitney) formulation.
pub fn auroc(r: &RankedPredictions) -> Result<f64> {
    let (n_pos, n_neg) = (r.n_pos(), r.n_neg());
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("auroc needs both classes".into()));
    }
    let ranks = midranks(&r.scores);
    let rank_sum_pos: f64 =
        ranks.iter().zip(&r.labels).filter(|(_, &l)| l).map(|(rk, _)| rk).sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Average precision over descending scores: tied scores form one group and
/// precision is taken at the group boundary, so the result is order-free.
pub fn aupr(r: &RankedPredictions) -> Result<f64> {
    let n_pos = r.n_pos();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric("aupr needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..r.len()).collect();
    order.sort_by(|&i, &j| r.scores[j].partial_cmp(&r.scores[i]).expect("finite scores"));

    let mut ap = 0.0;
    let mut cum_pos = 0usize;
    let mut cum_tot = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && r.scores[order[j + 1]] == r.scores[order[i]] {
            j += 1;
        }
        let group_pos = order[i..=j].iter().filter(|&&k| r.labels[k]).count();
        cum_pos += group_pos;
        cum_tot += j - i + 1;
        ap += group_pos as f64 * (cum_pos as f64 / cum_tot as f64);
        i = j + 1;
    }
    Ok(ap / n_pos as f64)
}

/// Rank correlation: Pearson correlation of the midranks of `a` and `b`.
pub fn spearman_rho(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Data(format!("{} vs {} values", a.len(), b.len())));
    }
    if a.len() < 3 {
        return Err(Error::UndefinedMetric("spearman needs at least three points".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "spearman".into() });
    }
    pearson(&midranks(a), &midranks(b))
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (xi, yi) in x.iter().zip(y) {
        let (dx, dy) = (xi - mx, yi - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::UndefinedMetric("zero rank variance".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// One-sided Mann-Whitney result for the alternative "b tends to exceed a".
#[derive(Debug, Clone, Copy)]
pub struct MannWhitney {
    /// U statistic of sample b: #(b > a) pairs with ties counted one half.
    pub u: f64,
    /// P(U ≥ observed) under the null of exchangeable samples.
    pub p: f64,
    /// True when computed by exact enumeration rather than normal
    /// approximation.
    pub exact: bool,
}

/// Exact enumeration up to 16 pooled values (cheap below that); otherwise a
/// normal approximation with tie-corrected variance and a 0.5 continuity
/// correction.
pub fn mann_whitney_one_sided(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::UndefinedMetric("mann-whitney needs both samples".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "mann-whitney".into() });
    }
    let (n_a, n_b) = (a.len(), b.len());
    let n = n_a + n_b;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&pooled);
    let rank_sum_b: f64 = ranks[n_a..].iter().sum();
    let u_obs = rank_sum_b - (n_b * (n_b + 1)) as f64 / 2.0;

    if n <= 16 {
        let offset = (n_b * (n_b + 1)) as f64 / 2.0;
        let mut at_least = 0usize;
        let mut total = 0usize;
        for subset in (0..n).combinations(n_b) {
            let u = subset.iter().map(|&i| ranks[i]).sum::<f64>() - offset;
            if u >= u_obs - 1e-9 {
                at_least += 1;
            }
            total += 1;
        }
        return Ok(MannWhitney { u: u_obs, p: at_least as f64 / total as f64, exact: true });
    }

    let mean = (n_a * n_b) as f64 / 2.0;
    let mut tie_sum = 0.0;
    let mut sorted = pooled.clone();
    sorted.sort_by(|x, y| x.partial_cmp(y).expect("finite values"));
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_sum += t * t * t - t;
        i = j + 1;
    }
    let nf = n as f64;
    let var = (n_a * n_b) as f64 / 12.0 * ((nf + 1.0) - tie_sum / (nf * (nf - 1.0)));
    if var <= 0.0 {
        return Ok(MannWhitney { u: u_obs, p: if u_obs > mean { 0.0 } else { 1.0 }, exact: false });
    }
    let z = (u_obs - mean - 0.5) / var.sqrt();
    Ok(MannWhitney { u: u_obs, p: normal_upper_tail(z), exact: false })
}

/// P(Z ≥ z) for standard normal Z.
fn normal_upper_tail(z: f64) -> f64 {
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

/// 100 · (value − baseline) / baseline; infinite or NaN when the baseline
/// is zero.
pub fn relative_percent_change(value: f64, baseline: f64) -> f64 {
    100.0 * (value - baseline) / baseline
}
