//! Re-run pre-training under five objective variants (reconstruction-only
//! baseline, then adding the binary matching term or either contrastive
//! term) and compare zero-shot retrieval. Each run lands in its own
//! directory under a temp folder with checkpoints and a metrics stream.
//!
//!     cargo run --release --example ablation_grid

use coco_bert::cli::run_table2;
use coco_bert::data::{generate_synthetic, SyntheticSpec};
use coco_bert::train::TrainConfig;

fn main() -> coco_bert::Result<()> {
    let train_spec = SyntheticSpec { n_pairs: 240, n_concepts: 6, seed: 5, ..SyntheticSpec::default() };
    let test_spec = SyntheticSpec { n_pairs: 60, seed: 6, ..train_spec };
    let train = generate_synthetic(&train_spec)?;
    let test = generate_synthetic(&test_spec)?;

    let mut config = TrainConfig::default();
    config.model.d = 32;
    config.loss.memory_k = 256;
    config.epochs = 4;
    config.validate()?;

    let out = std::env::temp_dir().join("coco-ablation-grid");
    let report = run_table2(&config, &train, &test, &[21], &out)?;
    println!("objective variant      mean r@1 on {} held-out pairs", test.len());
    for (name, mean) in &report.means {
        println!("{:<20}   {:.3}", name, mean);
    }
    println!("per-run artifacts under {}", out.display());
    Ok(())
}
