//! Freeze a pre-trained model, pool its fused decode into a feature
//! vector per pair, and train only a linear answer head on top. The
//! planted concept id doubles as the answer label.
//!
//!     cargo run --release --example qa_head

use coco_bert::data::{generate_synthetic, SyntheticSpec};
use coco_bert::downstream::{finetune_qa, QaConfig};
use coco_bert::train::{TrainConfig, Trainer};

fn main() -> coco_bert::Result<()> {
    let spec = SyntheticSpec { n_pairs: 240, n_concepts: 6, seed: 13, ..SyntheticSpec::default() };
    let data = generate_synthetic(&spec)?;

    let mut config = TrainConfig::default();
    config.model.d = 32;
    config.loss.memory_k = 256;
    config.epochs = 4;
    config.seed = 13;
    config.validate()?;
    let mut trainer = Trainer::init(config)?;
    trainer.train(&data, None)?;

    let cfg = QaConfig { n_answers: spec.n_concepts, seed: 13, ..QaConfig::default() };
    let (head, outcome) = finetune_qa(&trainer.model, &data, &cfg)?;
    println!(
        "head of {} params, {} train pairs, head loss {:.3} -> {:.3}",
        head.param_count(),
        outcome.n_train,
        outcome.train_loss_first,
        outcome.train_loss_final
    );
    println!(
        "held-out accuracy {:.3} over {} pairs (chance {:.3})",
        outcome.accuracy,
        outcome.n_eval,
        1.0 / spec.n_concepts as f64
    );
    Ok(())
}
