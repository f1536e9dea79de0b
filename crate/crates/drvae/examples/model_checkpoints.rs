//! Save and restore model parameters as a named-tensor JSON checkpoint.
//! Names, shapes, and registration order are validated on load, so a
//! checkpoint only ever restores into the architecture that produced it.

use drvae::checkpoint::{load_checkpoint, save_checkpoint};
use drvae::pertvae::{PertVae, PertVaeConfig};
use drvae::synth::{generate, SyntheticConfig};
use drvae::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let mut synth = SyntheticConfig::shift_informative(13);
    synth.gene_count = 12;
    synth.latent_dim = 3;
    synth.lines_labeled_pairs = 8;
    synth.lines_unlabeled_pairs = 2;
    synth.lines_labeled_singletons = 1;
    synth.lines_unlabeled_singletons = 1;
    synth.replicates = 2;
    let data = generate(&synth)?.dataset;

    let mut cfg = PertVaeConfig::compact(data.gene_count, 3);
    cfg.enc_hidden = vec![16];
    cfg.dec_hidden = vec![16];

    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let trained = PertVae::new(cfg.clone(), &mut rng)?;
    let dir = std::env::temp_dir().join("drvae-checkpoint-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("pertvae.json");
    save_checkpoint(&trained.params(), &path)?;
    println!(
        "saved {} tensors ({} scalars) to {}",
        trained.params().len(),
        trained.params().numel(),
        path.display()
    );

    // A freshly initialized model with the same architecture scores
    // differently until the checkpoint overwrites its parameters.
    let mut rng2 = ChaCha8Rng::seed_from_u64(99);
    let restored = PertVae::new(cfg, &mut rng2)?;
    let mut eval_rng = ChaCha8Rng::seed_from_u64(1);
    let before = restored.mean_bound(&data, &mut eval_rng)?;
    load_checkpoint(&restored.params(), &path)?;
    let mut eval_rng = ChaCha8Rng::seed_from_u64(1);
    let after = restored.mean_bound(&data, &mut eval_rng)?;
    let mut eval_rng = ChaCha8Rng::seed_from_u64(1);
    let original = trained.mean_bound(&data, &mut eval_rng)?;
    println!("bound before restore {before:.4}, after restore {after:.4}, source {original:.4}");
    assert!((after - original).abs() < 1e-12);
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
