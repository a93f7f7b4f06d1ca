//! Save mid-run, load in a fresh process-equivalent state, and continue:
//! the resumed run must match an unbroken run bit for bit, optimizer
//! moments, memory queues and mask randomness included.
//!
//!     cargo run --release --example checkpoint_roundtrip

use coco_bert::checkpoint::{load_trainer, save_trainer};
use coco_bert::data::{generate_synthetic, SyntheticSpec};
use coco_bert::train::{TrainConfig, Trainer};

fn main() -> coco_bert::Result<()> {
    let spec = SyntheticSpec { n_pairs: 64, n_concepts: 4, seed: 15, ..SyntheticSpec::default() };
    let data = generate_synthetic(&spec)?;
    let mut config = TrainConfig::default();
    config.model.d = 32;
    config.loss.memory_k = 64;
    config.seed = 15;
    config.validate()?;

    let path = std::env::temp_dir().join("coco-roundtrip.ckpt");

    let mut unbroken = Trainer::init(config.clone())?;
    let reference = unbroken.train_steps(&data, 8, None)?;

    let mut first_half = Trainer::init(config)?;
    first_half.train_steps(&data, 4, None)?;
    save_trainer(&first_half, &path)?;
    let mut resumed = load_trainer(&path)?;
    let tail = resumed.train_steps(&data, 4, None)?;

    for (step, (a, b)) in reference[4..].iter().zip(&tail).enumerate() {
        assert_eq!(a.total.to_bits(), b.total.to_bits(), "loss diverged at resumed step {}", step);
        println!("step {}  loss {:.6}  identical across the save/load boundary", step + 5, b.total);
    }
    for ((name, t_a), (_, t_b)) in unbroken.model.named_params().iter().zip(resumed.model.named_params().iter()) {
        assert_eq!(t_a.data, t_b.data, "parameter {} diverged", name);
    }
    println!("all {} parameter tensors bitwise identical after resume", resumed.model.named_params().len());
    std::fs::remove_file(&path).ok();
    Ok(())
}
