//! Scratch calibration run, deleted before release.

use coco_bert::data::{generate_synthetic, SyntheticSpec};
use coco_bert::downstream::{finetune_qa, QaConfig};
use coco_bert::train::{TrainConfig, Trainer};
use std::time::Instant;

fn main() -> coco_bert::Result<()> {
    for (sigma, noise_rate) in [(0.8f64, 0.5f64), (1.0, 0.6), (1.5, 0.6), (1.0, 0.7)] {
        let spec = SyntheticSpec {
            n_pairs: 400,
            n_concepts: 8,
            sigma,
            noise_rate,
            seed: 40,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec)?;
        let mut config = TrainConfig::default();
        config.loss.memory_k = 256;
        config.epochs = 5;
        config.seed = 40;
        config.validate()?;
        let t0 = Instant::now();
        let mut pre = Trainer::init(config.clone())?;
        pre.train(&data, None)?;
        let scratch = Trainer::init(config)?;
        let qa = QaConfig { n_answers: 8, seed: 40, ..QaConfig::default() };
        let (_, with_pre) = finetune_qa(&pre.model, &data, &qa)?;
        let (_, without) = finetune_qa(&scratch.model, &data, &qa)?;
        println!(
            "sigma {:.1} noise {:.1}  pre {:.3}  scratch {:.3}  ({:.0}s)",
            sigma,
            noise_rate,
            with_pre.accuracy,
            without.accuracy,
            t0.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
