//! Expression records and dataset containers.
//!
//! A sample is one replicate of one cell line: a pre-treatment profile x1,
//! optionally a post-treatment profile x2 (making it a pair), and optionally
//! a binary response label. The four regime combinations (labeled/unlabeled ×
//! pair/singleton) drive which bound a model applies to each record.
//!
//! Datasets round-trip through CSV with columns
//! `cell_line_id, replicate_id, y, x1_1..x1_G, x2_1..x2_G`; floats are
//! written in shortest round-trip form so a written file re-parses to
//! bit-identical values.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub cell_line: String,
    pub replicate: u32,
    pub x1: Vec<f64>,
    pub x2: Option<Vec<f64>>,
    pub label: Option<bool>,
}

impl Sample {
    pub fn is_pair(&self) -> bool {
        self.x2.is_some()
    }

    pub fn is_labeled(&self) -> bool {
        self.label.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RegimeCounts {
    pub labeled_pairs: usize,
    pub unlabeled_pairs: usize,
    pub labeled_singletons: usize,
    pub unlabeled_singletons: usize,
}

impl RegimeCounts {
    pub fn total(&self) -> usize {
        self.labeled_pairs + self.unlabeled_pairs + self.labeled_singletons + self.unlabeled_singletons
    }

    pub fn labeled(&self) -> usize {
        self.labeled_pairs + self.labeled_singletons
    }
}

/// Sample indices grouped by regime, in dataset order.
#[derive(Debug, Clone, Default)]
pub struct RegimeIndices {
    pub labeled_pairs: Vec<usize>,
    pub unlabeled_pairs: Vec<usize>,
    pub labeled_singletons: Vec<usize>,
    pub unlabeled_singletons: Vec<usize>,
}

impl RegimeIndices {
    pub fn pairs(&self) -> Vec<usize> {
        let mut v = self.labeled_pairs.clone();
        v.extend(&self.unlabeled_pairs);
        v.sort_unstable();
        v
    }

    pub fn singletons(&self) -> Vec<usize> {
        let mut v = self.labeled_singletons.clone();
        v.extend(&self.unlabeled_singletons);
        v.sort_unstable();
        v
    }

    pub fn labeled(&self) -> Vec<usize> {
        let mut v = self.labeled_pairs.clone();
        v.extend(&self.labeled_singletons);
        v.sort_unstable();
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub gene_count: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(gene_count: usize, samples: Vec<Sample>) -> Result<Dataset> {
        if gene_count == 0 {
            return Err(Error::Data("gene count must be positive".into()));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.x1.len() != gene_count {
                return Err(Error::Data(format!(
                    "sample {i} has {} pre-treatment genes, expected {gene_count}",
                    s.x1.len()
                )));
            }
            if let Some(x2) = &s.x2 {
                if x2.len() != gene_count {
                    return Err(Error::Data(format!(
                        "sample {i} has {} post-treatment genes, expected {gene_count}",
                        x2.len()
                    )));
                }
            }
            let finite = s.x1.iter().all(|v| v.is_finite())
                && s.x2.as_ref().is_none_or(|x| x.iter().all(|v| v.is_finite()));
            if !finite {
                return Err(Error::Data(format!("sample {i} contains non-finite values")));
            }
            if s.cell_line.is_empty() {
                return Err(Error::Data(format!("sample {i} has an empty cell line id")));
            }
        }
        Ok(Dataset { gene_count, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sorted unique cell line ids.
    pub fn cell_lines(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.samples.iter().map(|s| s.cell_line.as_str()).collect();
        set.into_iter().map(str::to_owned).collect()
    }

    pub fn regime_counts(&self) -> RegimeCounts {
        let mut c = RegimeCounts::default();
        for s in &self.samples {
            match (s.is_pair(), s.is_labeled()) {
                (true, true) => c.labeled_pairs += 1,
                (true, false) => c.unlabeled_pairs += 1,
                (false, true) => c.labeled_singletons += 1,
                (false, false) => c.unlabeled_singletons += 1,
            }
        }
        c
    }

    pub fn regime_indices(&self) -> RegimeIndices {
        let mut idx = RegimeIndices::default();
        for (i, s) in self.samples.iter().enumerate() {
            match (s.is_pair(), s.is_labeled()) {
                (true, true) => idx.labeled_pairs.push(i),
                (true, false) => idx.unlabeled_pairs.push(i),
                (false, true) => idx.labeled_singletons.push(i),
                (false, false) => idx.unlabeled_singletons.push(i),
            }
        }
        idx
    }

    /// Samples whose cell line is in `lines`, preserving order.
    pub fn subset_by_lines(&self, lines: &BTreeSet<String>) -> Dataset {
        Dataset {
            gene_count: self.gene_count,
            samples: self
                .samples
                .iter()
                .filter(|s| lines.contains(&s.cell_line))
                .cloned()
                .collect(),
        }
    }

    /// Partition into (kept, held out) by cell line, so replicates of one
    /// line never straddle the split.
    pub fn split_by_lines(&self, held_out: &BTreeSet<String>) -> (Dataset, Dataset) {
        let mut keep = Vec::new();
        let mut hold = Vec::new();
        for s in &self.samples {
            if held_out.contains(&s.cell_line) {
                hold.push(s.clone());
            } else {
                keep.push(s.clone());
            }
        }
        (
            Dataset { gene_count: self.gene_count, samples: keep },
            Dataset { gene_count: self.gene_count, samples: hold },
        )
    }

    /// Replace every pair with two independent singletons: the pre-treatment
    /// profile keeps the label, the post-treatment profile becomes an
    /// unlabeled singleton. Models without a perturbation pathway train on
    /// the result.
    pub fn split_pairs_into_singletons(&self) -> Dataset {
        let mut samples = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            match &s.x2 {
                None => samples.push(s.clone()),
                Some(x2) => {
                    samples.push(Sample {
                        cell_line: s.cell_line.clone(),
                        replicate: s.replicate,
                        x1: s.x1.clone(),
                        x2: None,
                        label: s.label,
                    });
                    samples.push(Sample {
                        cell_line: s.cell_line.clone(),
                        replicate: s.replicate,
                        x1: x2.clone(),
                        x2: None,
                        label: None,
                    });
                }
            }
        }
        Dataset { gene_count: self.gene_count, samples }
    }

    /// Pre-treatment profiles of the given samples as a [n, G] tensor.
    pub fn x1_tensor(&self, indices: &[usize]) -> Result<Tensor> {
        let mut flat = Vec::with_capacity(indices.len() * self.gene_count);
        for &i in indices {
            flat.extend_from_slice(&self.samples[i].x1);
        }
        Tensor::new(flat, &[indices.len(), self.gene_count])
    }

    /// Post-treatment profiles of the given samples; every index must be a
    /// pair.
    pub fn x2_tensor(&self, indices: &[usize]) -> Result<Tensor> {
        let mut flat = Vec::with_capacity(indices.len() * self.gene_count);
        for &i in indices {
            let x2 = self.samples[i]
                .x2
                .as_ref()
                .ok_or_else(|| Error::Data(format!("sample {i} has no post-treatment profile")))?;
            flat.extend_from_slice(x2);
        }
        Tensor::new(flat, &[indices.len(), self.gene_count])
    }

    /// Labels of the given samples as 0/1 class indices; every index must be
    /// labeled.
    pub fn labels_of(&self, indices: &[usize]) -> Result<Vec<usize>> {
        indices
            .iter()
            .map(|&i| {
                self.samples[i]
                    .label
                    .map(usize::from)
                    .ok_or_else(|| Error::Data(format!("sample {i} has no label")))
            })
            .collect()
    }

    /// Pre-treatment profiles as plain rows (for the classical baselines).
    pub fn x1_rows(&self, indices: &[usize]) -> Vec<Vec<f64>> {
        indices.iter().map(|&i| self.samples[i].x1.clone()).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["cell_line_id".to_string(), "replicate_id".into(), "y".into()];
        for g in 1..=self.gene_count {
            header.push(format!("x1_{g}"));
        }
        for g in 1..=self.gene_count {
            header.push(format!("x2_{g}"));
        }
        w.write_record(&header)?;
        for s in &self.samples {
            let mut rec = Vec::with_capacity(3 + 2 * self.gene_count);
            rec.push(s.cell_line.clone());
            rec.push(s.replicate.to_string());
            rec.push(match s.label {
                None => String::new(),
                Some(false) => "0".into(),
                Some(true) => "1".into(),
            });
            for v in &s.x1 {
                rec.push(v.to_string());
            }
            match &s.x2 {
                Some(x2) => rec.extend(x2.iter().map(f64::to_string)),
                None => rec.extend(std::iter::repeat_n(String::new(), self.gene_count)),
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Dataset> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        let cols = header.len();
        if cols < 5 || (cols - 3) % 2 != 0 {
            return Err(Error::Data(format!("unexpected column count {cols}")));
        }
        let gene_count = (cols - 3) / 2;
        let mut expected = vec!["cell_line_id".to_string(), "replicate_id".into(), "y".into()];
        for g in 1..=gene_count {
            expected.push(format!("x1_{g}"));
        }
        for g in 1..=gene_count {
            expected.push(format!("x2_{g}"));
        }
        for (got, want) in header.iter().zip(&expected) {
            if got != want {
                return Err(Error::Data(format!("header column {got:?}, expected {want:?}")));
            }
        }

        let mut samples = Vec::new();
        for (line, record) in r.records().enumerate() {
            let record = record?;
            if record.len() != cols {
                return Err(Error::Data(format!("row {line} has {} columns", record.len())));
            }
            let parse = |field: &str| -> Result<f64> {
                field
                    .parse::<f64>()
                    .map_err(|_| Error::Data(format!("row {line}: bad float {field:?}")))
            };
            let label = match &record[2] {
                "" => None,
                "0" => Some(false),
                "1" => Some(true),
                other => return Err(Error::Data(format!("row {line}: bad label {other:?}"))),
            };
            let x1 = (0..gene_count)
                .map(|g| parse(&record[3 + g]))
                .collect::<Result<Vec<f64>>>()?;
            let x2_fields: Vec<&str> =
                (0..gene_count).map(|g| &record[3 + gene_count + g]).collect();
            let x2 = if x2_fields.iter().all(|f| f.is_empty()) {
                None
            } else if x2_fields.iter().all(|f| !f.is_empty()) {
                Some(x2_fields.iter().map(|f| parse(f)).collect::<Result<Vec<f64>>>()?)
            } else {
                return Err(Error::Data(format!(
                    "row {line}: post-treatment profile is partially filled"
                )));
            };
            samples.push(Sample {
                cell_line: record[0].to_string(),
                replicate: record[1]
                    .parse()
                    .map_err(|_| Error::Data(format!("row {line}: bad replicate id")))?,
                x1,
                x2,
                label,
            });
        }
        Dataset::new(gene_count, samples)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(line: &str, rep: u32, pair: bool, label: Option<bool>) -> Sample {
        Sample {
            cell_line: line.into(),
            replicate: rep,
            x1: vec![0.1 * rep as f64, -1.5, 2.25],
            x2: pair.then(|| vec![1.0 / 3.0, 0.7, -0.2]),
            label,
        }
    }

    fn toy() -> Dataset {
        Dataset::new(
            3,
            vec![
                sample("lineA", 1, true, Some(true)),
                sample("lineA", 2, true, None),
                sample("lineB", 1, false, Some(false)),
                sample("lineC", 1, false, None),
            ],
        )
        .unwrap()
    }

    #[test]
    fn regime_counts_and_indices() {
        let d = toy();
        let c = d.regime_counts();
        assert_eq!(c.labeled_pairs, 1);
        assert_eq!(c.unlabeled_pairs, 1);
        assert_eq!(c.labeled_singletons, 1);
        assert_eq!(c.unlabeled_singletons, 1);
        assert_eq!(c.total(), 4);
        let idx = d.regime_indices();
        assert_eq!(idx.pairs(), vec![0, 1]);
        assert_eq!(idx.labeled(), vec![0, 2]);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dataset.csv");
        let d = toy();
        d.write_csv(&path).unwrap();
        let back = Dataset::read_csv(&path).unwrap();
        assert_eq!(d, back);
    }

    #[test]
    fn header_validation_rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "a,b,c,d,e\n1,2,3,4,5\n").unwrap();
        assert!(Dataset::read_csv(&path).is_err());
    }

    #[test]
    fn partial_post_profile_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("partial.csv");
        std::fs::write(
            &path,
            "cell_line_id,replicate_id,y,x1_1,x2_1\nlineA,1,,0.5,\nlineB,1,1,0.25,0.75\n",
        )
        .unwrap();
        let ok = Dataset::read_csv(&path).unwrap();
        assert_eq!(ok.len(), 2);
        assert!(ok.samples[0].x2.is_none());
        assert_eq!(ok.samples[1].x2, Some(vec![0.75]));

        std::fs::write(
            &path,
            "cell_line_id,replicate_id,y,x1_1,x1_2,x2_1,x2_2\nlineA,1,,0.5,0.5,0.1,\n",
        )
        .unwrap();
        assert!(Dataset::read_csv(&path).is_err());
    }

    #[test]
    fn split_by_lines_keeps_replicates_together() {
        let d = toy();
        let held: BTreeSet<String> = ["lineA".to_string()].into();
        let (train, test) = d.split_by_lines(&held);
        assert_eq!(train.len(), 2);
        assert_eq!(test.len(), 2);
        assert!(test.samples.iter().all(|s| s.cell_line == "lineA"));
        assert_eq!(d.cell_lines(), vec!["lineA", "lineB", "lineC"]);
    }

    #[test]
    fn pair_splitting_detaches_labels_from_post_profiles() {
        let d = toy();
        let s = d.split_pairs_into_singletons();
        assert_eq!(s.len(), 6);
        let c = s.regime_counts();
        assert_eq!(c.labeled_pairs + c.unlabeled_pairs, 0);
        assert_eq!(c.labeled_singletons, 2);
        assert_eq!(c.unlabeled_singletons, 4);
        // The detached post-treatment profile becomes a pre-treatment
        // column with no label.
        assert_eq!(s.samples[1].x1, d.samples[0].x2.clone().unwrap());
        assert_eq!(s.samples[1].label, None);
    }

    #[test]
    fn ragged_and_non_finite_samples_are_rejected() {
        let bad = Dataset::new(3, vec![Sample {
            cell_line: "x".into(),
            replicate: 1,
            x1: vec![1.0, 2.0],
            x2: None,
            label: None,
        }]);
        assert!(bad.is_err());

        let nan = Dataset::new(1, vec![Sample {
            cell_line: "x".into(),
            replicate: 1,
            x1: vec![f64::NAN],
            x2: None,
            label: None,
        }]);
        assert!(nan.is_err());
    }

    #[test]
    fn tensor_extraction_matches_rows() {
        let d = toy();
        let t = d.x1_tensor(&[0, 2]).unwrap();
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.to_vec()[..3], d.samples[0].x1[..]);
        assert!(d.x2_tensor(&[2]).is_err());
        assert_eq!(d.labels_of(&[0, 2]).unwrap(), vec![1, 0]);
        assert!(d.labels_of(&[1]).is_err());
    }
}
