//! The whole parameter set under one roof: both encoder pairs, the
//! cross-modal decoder, and the binary matching head, with named traversal
//! for the optimizer and the checkpoint format, plus the audit that proves
//! momentum-side parameters never touch a gradient tape.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderPair, EncoderParams};
use crate::error::{invalid, Result};
use crate::loss::CmmHead;
use crate::nn::SpecialTokens;
use crate::tensor::{Tape, Tensor};

/// Architecture shape. The default is the desk-scale profile; the full-size
/// profile from the original setting (D=768-class widths, six blocks per
/// stack) is expressible but far too slow for a single core.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub d_f: usize,
    pub vocab: usize,
    /// Positional table size; bounds both frame count and framed sentence
    /// length.
    pub max_len: usize,
    pub n_heads: usize,
    pub k_v: usize,
    pub k_s: usize,
    pub k_d: usize,
    pub momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 48,
            d_f: 32,
            vocab: 64,
            max_len: 16,
            n_heads: 4,
            k_v: 2,
            k_s: 2,
            k_d: 2,
            momentum: 0.99,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d % self.n_heads != 0 {
            return Err(invalid(format!(
                "width {} not divisible into {} heads",
                self.d, self.n_heads
            )));
        }
        if self.d_f < 1 {
            return Err(invalid("frame feature width must be at least 1"));
        }
        let sp = SpecialTokens::default();
        if self.vocab <= sp.body_start() {
            return Err(invalid(format!("vocab {} leaves no body tokens", self.vocab)));
        }
        if self.max_len < 3 {
            return Err(invalid("max_len must fit at least [CLS] x [SEP]"));
        }
        if self.k_v < 1 || self.k_s < 1 || self.k_d < 1 {
            return Err(invalid("every stack needs at least one block"));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(invalid(format!("momentum {} outside [0, 1]", self.momentum)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub video: EncoderPair,
    pub sentence: EncoderPair,
    pub decoder: crate::decoder::DecoderParams,
    pub cmm: CmmHead,
}

impl Model {
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Model> {
        config.validate()?;
        let video = EncoderPair::init(
            EncoderParams::init(
                config.vocab,
                config.max_len,
                config.d_f,
                config.d,
                config.k_v,
                config.n_heads,
                rng,
            ),
            config.momentum,
        )?;
        let sentence = EncoderPair::init(
            EncoderParams::init(
                config.vocab,
                config.max_len,
                config.d_f,
                config.d,
                config.k_s,
                config.n_heads,
                rng,
            ),
            config.momentum,
        )?;
        let decoder =
            crate::decoder::DecoderParams::init(config.d, config.vocab, config.k_d, config.n_heads, rng);
        let cmm = CmmHead::init(config.d, rng);
        Ok(Model { config, video, sentence, decoder, cmm })
    }

    pub fn specials(&self) -> SpecialTokens {
        self.video.query.tables.specials
    }

    /// Gradient-trained parameters, in a fixed deterministic order: both
    /// query towers, the decoder, the matching head. Key towers are absent
    /// by construction.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (n, t) in self.video.query.named_tensors() {
            out.push((format!("video.query.{}", n), t));
        }
        for (n, t) in self.sentence.query.named_tensors() {
            out.push((format!("sentence.query.{}", n), t));
        }
        for (n, t) in self.decoder.named_tensors() {
            out.push((format!("decoder.{}", n), t));
        }
        out.push(("cmm.w".into(), &self.cmm.w));
        out.push(("cmm.b".into(), &self.cmm.b));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (n, t) in self.video.query.named_tensors_mut() {
            out.push((format!("video.query.{}", n), t));
        }
        for (n, t) in self.sentence.query.named_tensors_mut() {
            out.push((format!("sentence.query.{}", n), t));
        }
        for (n, t) in self.decoder.named_tensors_mut() {
            out.push((format!("decoder.{}", n), t));
        }
        out.push(("cmm.w".into(), &mut self.cmm.w));
        out.push(("cmm.b".into(), &mut self.cmm.b));
        out
    }

    /// Momentum-side parameters (named for the checkpoint only; the
    /// optimizer never sees these).
    pub fn named_key_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (n, t) in self.video.key.named_tensors() {
            out.push((format!("video.key.{}", n), t));
        }
        for (n, t) in self.sentence.key.named_tensors() {
            out.push((format!("sentence.key.{}", n), t));
        }
        out
    }

    pub fn named_key_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (n, t) in self.video.key.named_tensors_mut() {
            out.push((format!("video.key.{}", n), t));
        }
        for (n, t) in self.sentence.key.named_tensors_mut() {
            out.push((format!("sentence.key.{}", n), t));
        }
        out
    }

    /// Prove that no momentum-side tensor was registered as a gradient leaf
    /// on `tape`. Run after every training forward.
    pub fn audit_keys_untracked(&self, tape: &Tape) -> Result<()> {
        let registered: HashSet<usize> = tape.registered_param_addrs().collect();
        for (name, t) in self.named_key_params() {
            let addr = t as *const Tensor as usize;
            if registered.contains(&addr) {
                return Err(invalid(format!(
                    "momentum-side parameter {} was registered for gradients",
                    name
                )));
            }
        }
        Ok(())
    }

    /// Set of gradient-leaf addresses, for cross-checking tape coverage.
    pub fn trainable_addrs(&self) -> HashSet<usize> {
        self.named_params().iter().map(|(_, t)| *t as *const Tensor as usize).collect()
    }

    pub fn momentum_update(&mut self) -> Result<()> {
        self.video.momentum_update()?;
        self.sentence.momentum_update()
    }

    /// Structural health check; run after checkpoint load.
    pub fn congruent(&self) -> Result<()> {
        self.config.validate()?;
        self.video.congruent()?;
        self.sentence.congruent()?;
        let names: Vec<String> = self.named_params().iter().map(|(n, _)| n.clone()).collect();
        let unique: HashSet<&String> = names.iter().collect();
        if unique.len() != names.len() {
            return Err(invalid("duplicate parameter names"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::encode_pair;
    use crate::nn::ParamMode;
    use crate::rng::sub_rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d: 8,
            d_f: 4,
            vocab: 16,
            max_len: 10,
            n_heads: 2,
            k_v: 1,
            k_s: 1,
            k_d: 1,
            momentum: 0.9,
        }
    }

    #[test]
    fn init_produces_unique_names_and_passes_audit() {
        let mut rng = sub_rng(201, "model");
        let model = Model::init(tiny(), &mut rng).unwrap();
        model.congruent().unwrap();
        let names: Vec<String> = model.named_params().iter().map(|(n, _)| n.clone()).collect();
        assert!(names.iter().any(|n| n == "video.query.tables.token"));
        assert!(names.iter().any(|n| n == "decoder.vocab_w"));
        assert!(names.iter().any(|n| n == "cmm.b"));
        assert!(names.iter().all(|n| !n.contains(".key.")));
        let key_names: Vec<String> =
            model.named_key_params().iter().map(|(n, _)| n.clone()).collect();
        assert!(key_names.iter().all(|n| n.contains(".key.")));
        assert_eq!(names.len(), key_names.len() + model.decoder.named_tensors().len() + 2);
    }

    #[test]
    fn mutable_traversal_matches_shared_traversal() {
        let mut rng = sub_rng(202, "model-mut");
        let mut model = Model::init(tiny(), &mut rng).unwrap();
        let a: Vec<String> = model.named_params().iter().map(|(n, _)| n.clone()).collect();
        let b: Vec<String> = model.named_params_mut().iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(a, b);
        let a: Vec<String> = model.named_key_params().iter().map(|(n, _)| n.clone()).collect();
        let b: Vec<String> =
            model.named_key_params_mut().iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn full_forward_keeps_momentum_side_off_the_tape() {
        let mut rng = sub_rng(203, "model-audit");
        let model = Model::init(tiny(), &mut rng).unwrap();
        let frames = Tensor::new(vec![3, 4], Tensor::randn(vec![3, 4], 1.0, &mut rng).data);
        let sp = model.specials();
        let framed = vec![sp.cls, 6, 7, sp.sep];
        let masked = vec![sp.cls, sp.mask, 7, sp.sep];
        let mut tape = Tape::new();
        let enc = encode_pair(
            &mut tape,
            &model.video,
            &model.sentence,
            &frames,
            &[1],
            &frames,
            &masked,
            &framed,
        )
        .unwrap();
        let _ = enc;
        model.audit_keys_untracked(&tape).unwrap();
        // Trainable leaves did land on the tape.
        assert!(tape.registered_param_addrs().count() > 0);

        // Deliberately binding a key tensor as trainable must trip the audit.
        let mut tape = Tape::new();
        let _ = crate::nn::bind(&mut tape, &model.video.key.pooler.w1, ParamMode::Trainable);
        assert!(model.audit_keys_untracked(&tape).is_err());
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        assert!(ModelConfig { n_heads: 3, ..tiny() }.validate().is_err());
        assert!(ModelConfig { vocab: 4, ..tiny() }.validate().is_err());
        assert!(ModelConfig { k_d: 0, ..tiny() }.validate().is_err());
        assert!(ModelConfig { momentum: 1.2, ..tiny() }.validate().is_err());
        assert!(ModelConfig { max_len: 2, ..tiny() }.validate().is_err());
    }
}
