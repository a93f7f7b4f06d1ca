//! How much does the size of the negative-key memory matter? Re-pretrain
//! from scratch at several sizes and tabulate zero-shot top-1 retrieval.
//!
//!     cargo run --release --example memory_sweep

use coco_bert::cli::run_memory_sweep;
use coco_bert::data::{generate_synthetic, SyntheticSpec};
use coco_bert::train::TrainConfig;

fn main() -> coco_bert::Result<()> {
    let train_spec = SyntheticSpec { n_pairs: 240, n_concepts: 6, seed: 7, ..SyntheticSpec::default() };
    let test_spec = SyntheticSpec { n_pairs: 60, seed: 8, ..train_spec };
    let train = generate_synthetic(&train_spec)?;
    let test = generate_synthetic(&test_spec)?;

    let mut config = TrainConfig::default();
    config.model.d = 32;
    config.epochs = 4;
    config.validate()?;

    let rows = run_memory_sweep(&config, &train, &test, &[64, 256, 1024], 1)?;
    println!("memory size   mean r@1 on {} held-out pairs", test.len());
    for row in &rows {
        println!("{:<11}   {:.3}", row.memory_k, row.r_at_1);
    }
    Ok(())
}
