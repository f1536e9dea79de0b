//! Parameter checkpoints: a JSON container holding a flat list of named
//! tensors (name, shape, row-major float64 values). Loading applies values
//! in place and demands an exact match between the file and the model's
//! parameter set, so architecture drift is caught instead of half-applied.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::nn::ParamSet;

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Container {
    format: String,
    tensors: Vec<TensorRecord>,
}

const FORMAT: &str = "named-tensors-v1";

/// Write every parameter, in registration order, with full-precision
/// floats; the same parameters always produce byte-identical files.
pub fn save_checkpoint(params: &ParamSet, path: &Path) -> Result<()> {
    let tensors = params
        .iter()
        .map(|(name, t)| TensorRecord {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            values: t.to_vec(),
        })
        .collect();
    let container = Container { format: FORMAT.to_string(), tensors };
    let text = serde_json::to_string_pretty(&container)?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Apply a checkpoint to an existing parameter set. Every parameter must
/// appear exactly once with a matching shape and finite values; unknown
/// names in the file are rejected.
pub fn load_checkpoint(params: &ParamSet, path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path)?;
    let container: Container = serde_json::from_str(&text)?;
    if container.format != FORMAT {
        return Err(Error::Data(format!(
            "unsupported checkpoint format {:?}",
            container.format
        )));
    }
    if container.tensors.len() != params.len() {
        return Err(Error::Data(format!(
            "checkpoint holds {} tensors, model has {} parameters",
            container.tensors.len(),
            params.len()
        )));
    }
    // Validate everything before touching any parameter.
    let mut staged = Vec::with_capacity(container.tensors.len());
    for record in &container.tensors {
        let param = params.get(&record.name).ok_or_else(|| {
            Error::Data(format!("checkpoint tensor {:?} has no matching parameter", record.name))
        })?;
        if param.shape() != record.shape.as_slice() {
            return Err(Error::Data(format!(
                "tensor {:?} has shape {:?} in the checkpoint but {:?} in the model",
                record.name,
                record.shape,
                param.shape()
            )));
        }
        let expected: usize = record.shape.iter().product();
        if record.values.len() != expected {
            return Err(Error::Data(format!(
                "tensor {:?} has {} values for shape {:?}",
                record.name,
                record.values.len(),
                record.shape
            )));
        }
        if record.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: format!("checkpoint tensor {}", record.name) });
        }
        staged.push((param, &record.values));
    }
    for (param, values) in staged {
        param.set_values(values)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pertvae::{PertVae, PertVaeConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> PertVae {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PertVae::new(PertVaeConfig::tiny(5, 2), &mut rng).unwrap()
    }

    #[test]
    fn round_trip_restores_every_parameter_bit_for_bit() {
        let a = model(1);
        let b = model(2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_checkpoint(&a.params(), &path).unwrap();
        load_checkpoint(&b.params(), &path).unwrap();
        for ((name_a, ta), (name_b, tb)) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(name_a, name_b);
            let (va, vb) = (ta.to_vec(), tb.to_vec());
            assert_eq!(va.len(), vb.len());
            for (x, y) in va.iter().zip(&vb) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name_a}");
            }
        }
    }

    #[test]
    fn identical_parameters_write_identical_bytes() {
        let m = model(3);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.json");
        let p2 = dir.path().join("b.json");
        save_checkpoint(&m.params(), &p1).unwrap();
        save_checkpoint(&m.params(), &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn mismatched_architectures_are_rejected_without_partial_writes() {
        let small = model(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let big = PertVae::new(PertVaeConfig::tiny(7, 3), &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("small.json");
        save_checkpoint(&small.params(), &path).unwrap();

        let before: Vec<Vec<f64>> =
            big.params().iter().map(|(_, t)| t.to_vec()).collect();
        assert!(load_checkpoint(&big.params(), &path).is_err());
        let after: Vec<Vec<f64>> = big.params().iter().map(|(_, t)| t.to_vec()).collect();
        assert_eq!(before, after, "failed load must not touch parameters");
    }

    #[test]
    fn corrupted_files_error_cleanly() {
        let m = model(6);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, "{ not json").unwrap();
        assert!(load_checkpoint(&m.params(), &path).is_err());

        std::fs::write(&path, r#"{"format":"other","tensors":[]}"#).unwrap();
        assert!(load_checkpoint(&m.params(), &path).is_err());
    }
}
