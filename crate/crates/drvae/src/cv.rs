//! Cell-line-wise cross-validation plans: repeated randomized k-fold
//! partitions of cell-line ids, so every replicate of a line lands in the
//! same fold.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};

/// One train/test split. Indices are 1-based to match report rows.
#[derive(Debug, Clone)]
pub struct FoldPlan {
    pub repetition: usize,
    pub fold: usize,
    pub train_lines: BTreeSet<String>,
    pub test_lines: BTreeSet<String>,
}

/// Per repetition: shuffle the distinct cell-line ids and deal them
/// round-robin into k folds, so the k test sets partition the lines and
/// fold sizes differ by at most one.
pub fn make_folds(
    dataset: &Dataset,
    repetitions: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<FoldPlan>> {
    if repetitions == 0 || k < 2 {
        return Err(Error::Config(format!(
            "need repetitions >= 1 and k >= 2, got {repetitions} x {k}"
        )));
    }
    let distinct: BTreeSet<&String> =
        dataset.samples.iter().map(|s| &s.cell_line).collect();
    if distinct.len() < k {
        return Err(Error::Data(format!(
            "{} distinct cell lines cannot fill {k} folds",
            distinct.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plans = Vec::with_capacity(repetitions * k);
    for rep in 1..=repetitions {
        let mut lines: Vec<&String> = distinct.iter().copied().collect();
        lines.shuffle(&mut rng);
        for fold in 1..=k {
            let mut train = BTreeSet::new();
            let mut test = BTreeSet::new();
            for (i, line) in lines.iter().enumerate() {
                if i % k == fold - 1 {
                    test.insert((*line).clone());
                } else {
                    train.insert((*line).clone());
                }
            }
            plans.push(FoldPlan { repetition: rep, fold, train_lines: train, test_lines: test });
        }
    }
    Ok(plans)
}

/// Materialize the split: every sample goes to the side owning its line.
pub fn split_by_lines(dataset: &Dataset, plan: &FoldPlan) -> (Dataset, Dataset) {
    let mut train = Dataset { gene_count: dataset.gene_count, samples: vec![] };
    let mut test = Dataset { gene_count: dataset.gene_count, samples: vec![] };
    for s in &dataset.samples {
        if plan.test_lines.contains(&s.cell_line) {
            test.samples.push(s.clone());
        } else if plan.train_lines.contains(&s.cell_line) {
            train.samples.push(s.clone());
        }
    }
    (train, test)
}

/// Stable per-worker seed: two splitmix64 steps over (base, repetition,
/// fold), so distinct folds get decorrelated streams.
pub fn worker_seed(base: u64, repetition: usize, fold: usize) -> u64 {
    fn splitmix64(mut x: u64) -> u64 {
        x = x.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }
    splitmix64(splitmix64(base.wrapping_add(repetition as u64)).wrapping_add(fold as u64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sample;

    fn dataset_with_lines(n: usize, replicates: usize) -> Dataset {
        let samples = (0..n)
            .flat_map(|i| {
                (0..replicates).map(move |r| Sample {
                    cell_line: format!("L{i:02}"),
                    replicate: (r + 1) as u32,
                    x1: vec![i as f64, r as f64],
                    x2: None,
                    label: Some(i % 2 == 0),
                })
            })
            .collect();
        Dataset { gene_count: 2, samples }
    }

    #[test]
    fn ten_lines_over_five_folds_gives_two_lines_each() {
        let ds = dataset_with_lines(10, 1);
        let plans = make_folds(&ds, 1, 5, 0).unwrap();
        assert_eq!(plans.len(), 5);
        for p in &plans {
            assert_eq!(p.test_lines.len(), 2);
            assert_eq!(p.train_lines.len(), 8);
        }
    }

    #[test]
    fn folds_partition_the_lines_in_every_repetition() {
        let ds = dataset_with_lines(13, 2);
        let plans = make_folds(&ds, 10, 5, 42).unwrap();
        assert_eq!(plans.len(), 50);
        let all: BTreeSet<String> =
            ds.samples.iter().map(|s| s.cell_line.clone()).collect();
        for rep in 1..=10 {
            let of_rep: Vec<_> = plans.iter().filter(|p| p.repetition == rep).collect();
            assert_eq!(of_rep.len(), 5);
            let mut seen = BTreeSet::new();
            for p in of_rep {
                assert!(p.test_lines.is_disjoint(&seen), "rep {rep} overlaps");
                assert!(p.test_lines.is_disjoint(&p.train_lines));
                assert_eq!(
                    p.test_lines.union(&p.train_lines).count(),
                    all.len(),
                    "rep {rep} drops lines"
                );
                seen.extend(p.test_lines.iter().cloned());
            }
            assert_eq!(seen, all, "rep {rep} tests are not exhaustive");
        }
    }

    #[test]
    fn replicates_stay_in_one_fold() {
        let ds = dataset_with_lines(7, 7);
        let plans = make_folds(&ds, 3, 3, 9).unwrap();
        for p in &plans {
            let (train, test) = split_by_lines(&ds, p);
            let train_lines: BTreeSet<_> =
                train.samples.iter().map(|s| &s.cell_line).collect();
            let test_lines: BTreeSet<_> =
                test.samples.iter().map(|s| &s.cell_line).collect();
            assert!(train_lines.is_disjoint(&test_lines));
            assert_eq!(train.samples.len() + test.samples.len(), ds.samples.len());
            for line in &p.test_lines {
                let count = test.samples.iter().filter(|s| &s.cell_line == line).count();
                assert_eq!(count, 7, "line {line} lost replicates");
            }
        }
    }

    #[test]
    fn repetitions_reshuffle_but_seeds_reproduce() {
        let ds = dataset_with_lines(20, 1);
        let a = make_folds(&ds, 2, 5, 1).unwrap();
        let b = make_folds(&ds, 2, 5, 1).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.test_lines, y.test_lines);
        }
        let rep1: Vec<_> = a.iter().filter(|p| p.repetition == 1).collect();
        let rep2: Vec<_> = a.iter().filter(|p| p.repetition == 2).collect();
        assert!(
            rep1.iter().zip(&rep2).any(|(x, y)| x.test_lines != y.test_lines),
            "both repetitions produced identical partitions"
        );
    }

    #[test]
    fn too_few_lines_is_an_error() {
        let ds = dataset_with_lines(4, 2);
        assert!(make_folds(&ds, 1, 5, 0).is_err());
        assert!(make_folds(&ds, 0, 2, 0).is_err());
        assert!(make_folds(&ds, 1, 1, 0).is_err());
    }

    #[test]
    fn worker_seeds_are_stable_and_distinct() {
        assert_eq!(worker_seed(7, 3, 2), worker_seed(7, 3, 2));
        let mut seen = BTreeSet::new();
        for rep in 1..=10 {
            for fold in 1..=5 {
                seen.insert(worker_seed(123, rep, fold));
            }
        }
        assert_eq!(seen.len(), 50);
    }
}
