//! Score teacher-forced caption generation: per-token perplexity and
//! next-token accuracy of the fused decoder, before and after training.
//! An untrained decoder sits near vocabulary-size perplexity; training
//! on the generation term pulls it down.
//!
//!     cargo run --release --example caption_scores

use coco_bert::data::{generate_synthetic, SyntheticSpec};
use coco_bert::downstream::caption_eval;
use coco_bert::loss::LossSwitches;
use coco_bert::train::{TrainConfig, Trainer};

fn main() -> coco_bert::Result<()> {
    let spec = SyntheticSpec { n_pairs: 160, n_concepts: 4, seed: 9, ..SyntheticSpec::default() };
    let data = generate_synthetic(&spec)?;

    let mut config = TrainConfig::default();
    config.model.d = 32;
    config.loss.switches = LossSwitches { co_im: false, co_id: false, mlm: true, msg: true, cmm: false };
    config.loss.memory_k = 64;
    config.epochs = 4;
    config.seed = 9;
    config.validate()?;

    let mut trainer = Trainer::init(config)?;
    let before = caption_eval(&trainer.model, &data)?;
    println!(
        "untrained: perplexity {:.1} (vocab {}), token accuracy {:.3}",
        before.perplexity, trainer.config.model.vocab, before.token_accuracy
    );

    trainer.train(&data, None)?;
    let after = caption_eval(&trainer.model, &data)?;
    println!(
        "trained:   perplexity {:.1} over {} tokens, token accuracy {:.3}",
        after.perplexity, after.n_tokens, after.token_accuracy
    );
    Ok(())
}
