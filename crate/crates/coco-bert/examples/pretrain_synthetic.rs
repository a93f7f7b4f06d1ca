//! Generate a small planted-correlation dataset and run the full
//! pre-training objective over it, printing the per-epoch mean loss so
//! the optimization is visible end to end.
//!
//!     cargo run --release --example pretrain_synthetic

use coco_bert::data::{generate_synthetic, SyntheticSpec};
use coco_bert::loss::LossSwitches;
use coco_bert::train::{TrainConfig, Trainer};

fn main() -> coco_bert::Result<()> {
    let spec = SyntheticSpec {
        n_pairs: 200,
        n_concepts: 6,
        d_f: 16,
        vocab: 48,
        seed: 11,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec)?;

    let mut config = TrainConfig::default();
    config.model.d = 32;
    config.model.d_f = spec.d_f;
    config.model.vocab = spec.vocab;
    config.model.n_heads = 4;
    config.loss.memory_k = 256;
    config.loss.switches = LossSwitches::default();
    config.batch_size = 8;
    config.epochs = 3;
    config.seed = 11;
    config.validate()?;

    let mut trainer = Trainer::init(config)?;
    println!(
        "{} pairs, {} params, objective {}",
        data.len(),
        trainer.model.named_params().iter().map(|(_, t)| t.numel()).sum::<usize>(),
        trainer.config.loss.switches.describe()
    );
    let report = trainer.train(&data, None)?;
    for (epoch, mean) in report.epoch_mean_totals.iter().enumerate() {
        println!("epoch {}  mean total loss {:.4}", epoch + 1, mean);
    }
    println!(
        "first step {:.4} -> final step {:.4} over {} steps",
        report.first_total, report.final_total, report.steps_run
    );
    Ok(())
}
