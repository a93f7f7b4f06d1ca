//! The four encoders: video/sentence query encoders over masked inputs
//! (gradient-trained) and their momentum-coupled key twins over unmasked
//! inputs (EMA-trained, never differentiated).

use rand::Rng;

use crate::error::{invalid, Result};
use crate::nn::{
    attention_pool, embed_sentence, embed_video, transformer_block, AttentionPoolerParams,
    AttnMask, EmbeddingTables, ParamMode, TransformerBlockParams,
};
use crate::tensor::{Tape, Tensor, Var};

/// One encoder tower: embeddings, a stack of transformer blocks, and the
/// attention pooler that produces the holistic [1, D] vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub tables: EmbeddingTables,
    pub blocks: Vec<TransformerBlockParams>,
    pub pooler: AttentionPoolerParams,
}

impl EncoderParams {
    pub fn init(
        vocab: usize,
        max_len: usize,
        d_f: usize,
        d: usize,
        n_blocks: usize,
        n_heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(n_blocks >= 1, "an encoder needs at least one block");
        EncoderParams {
            tables: EmbeddingTables::init(vocab, max_len, d_f, d, rng),
            blocks: (0..n_blocks).map(|_| TransformerBlockParams::init(d, n_heads, rng)).collect(),
            pooler: AttentionPoolerParams::init(d, rng),
        }
    }

    pub fn d(&self) -> usize {
        self.blocks[0].d
    }

    /// Deterministic (name, tensor) traversal over every parameter.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (n, t) in self.tables.named_tensors() {
            out.push((format!("tables.{}", n), t));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, t) in b.named_tensors() {
                out.push((format!("blocks.{}.{}", i, n), t));
            }
        }
        for (n, t) in self.pooler.named_tensors() {
            out.push((format!("pooler.{}", n), t));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (n, t) in self.tables.named_tensors_mut() {
            out.push((format!("tables.{}", n), t));
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (n, t) in b.named_tensors_mut() {
                out.push((format!("blocks.{}.{}", i, n), t));
            }
        }
        for (n, t) in self.pooler.named_tensors_mut() {
            out.push((format!("pooler.{}", n), t));
        }
        out
    }

    /// Gradient-free copy for the momentum side.
    pub fn frozen_copy(&self) -> Self {
        let mut copy = self.clone();
        for (_, t) in copy.named_tensors_mut() {
            *t = t.detached();
        }
        copy
    }
}

/// A query encoder and its momentum-coupled key twin.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderPair {
    pub query: EncoderParams,
    pub key: EncoderParams,
    pub momentum: f64,
}

impl EncoderPair {
    /// Key starts as an exact copy of the query, so the very first keys are
    /// already meaningful.
    pub fn init(query: EncoderParams, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(invalid(format!("momentum {} outside [0, 1]", momentum)));
        }
        let key = query.frozen_copy();
        Ok(EncoderPair { query, key, momentum })
    }

    /// θ_k ← m·θ_k + (1−m)·θ_q, elementwise over every parameter.
    pub fn momentum_update(&mut self) -> Result<()> {
        let m = self.momentum;
        if !(0.0..=1.0).contains(&m) {
            return Err(invalid(format!("momentum {} outside [0, 1]", m)));
        }
        let q: Vec<(String, &Tensor)> = self.query.named_tensors();
        let mut k: Vec<(String, &mut Tensor)> = Vec::new();
        // Split borrows field-by-field: query read-only, key mutable.
        {
            let key = &mut self.key;
            k.extend(key.named_tensors_mut());
        }
        if q.len() != k.len() {
            return Err(invalid("query/key parameter lists diverged"));
        }
        for ((qn, qt), (kn, kt)) in q.iter().zip(k.iter_mut()) {
            if qn != kn || qt.shape != kt.shape {
                return Err(invalid(format!(
                    "query/key mismatch at {} vs {} (shapes {:?} vs {:?})",
                    qn, kn, qt.shape, kt.shape
                )));
            }
            for (kv, qv) in kt.data.iter_mut().zip(&qt.data) {
                *kv = m * *kv + (1.0 - m) * qv;
            }
        }
        Ok(())
    }

    /// Shape-congruence audit, run after checkpoint load.
    pub fn congruent(&self) -> Result<()> {
        let q = self.query.named_tensors();
        let k = self.key.named_tensors();
        if q.len() != k.len() {
            return Err(invalid("query/key parameter counts differ"));
        }
        for ((qn, qt), (kn, kt)) in q.iter().zip(k.iter()) {
            if qn != kn || qt.shape != kt.shape {
                return Err(invalid(format!("query/key shape mismatch at {}", qn)));
            }
            if kt.requires_grad || kt.grad.is_some() {
                return Err(invalid(format!("key parameter {} carries gradient state", kn)));
            }
        }
        Ok(())
    }
}

/// Unmasked input to a key (or inference-time) forward.
#[derive(Debug, Clone, Copy)]
pub enum ModalityInput<'a> {
    /// Raw frame features, [N_f, D_f].
    Video(&'a Tensor),
    /// Framed token ids ([CLS] … [SEP] pad*).
    Sentence(&'a [usize]),
}

fn pad_keep(tables: &EmbeddingTables, tokens: &[usize]) -> Vec<bool> {
    tokens.iter().map(|&t| t != tables.specials.pad).collect()
}

/// Query-encoder forward over a masked frame sequence. Returns the token
/// states [N_f, D] and the pooled query [1, D], both on the tape.
pub fn encode_video_query(
    tape: &mut Tape,
    params: &EncoderParams,
    frames: &Tensor,
    mask_positions: &[usize],
) -> Result<(Var, Var)> {
    encode_video_with_mode(tape, params, frames, mask_positions, ParamMode::Trainable)
}

/// Query-encoder forward over a masked token sequence. Returns the token
/// states [len, D] and the pooled query [1, D]. Pad positions are excluded
/// from attention and pooling.
pub fn encode_sentence_query(
    tape: &mut Tape,
    params: &EncoderParams,
    tokens: &[usize],
) -> Result<(Var, Var)> {
    encode_sentence_with_mode(tape, params, tokens, ParamMode::Trainable)
}

pub(crate) fn encode_video_with_mode(
    tape: &mut Tape,
    params: &EncoderParams,
    frames: &Tensor,
    mask_positions: &[usize],
    mode: ParamMode,
) -> Result<(Var, Var)> {
    let mut x = embed_video(tape, &params.tables, frames, mask_positions, mode)?;
    let n_f = frames.dims2().0;
    let mask = AttnMask::full(n_f, n_f);
    for block in &params.blocks {
        x = transformer_block(tape, x, &mask, block, mode)?;
    }
    let pooled = attention_pool(tape, x, &vec![true; n_f], &params.pooler, mode)?;
    Ok((x, pooled))
}

pub(crate) fn encode_sentence_with_mode(
    tape: &mut Tape,
    params: &EncoderParams,
    tokens: &[usize],
    mode: ParamMode,
) -> Result<(Var, Var)> {
    let mut x = embed_sentence(tape, &params.tables, tokens, mode)?;
    let keep = pad_keep(&params.tables, tokens);
    let mask = AttnMask::padded(&keep);
    for block in &params.blocks {
        x = transformer_block(tape, x, &mask, block, mode)?;
    }
    let pooled = attention_pool(tape, x, &keep, &params.pooler, mode)?;
    Ok((x, pooled))
}

/// Key-encoder forward: unmasked input, no tape recording against the
/// caller's graph, output L2-normalized. The result is a plain constant.
pub fn encode_key(params: &EncoderParams, input: ModalityInput) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (_, pooled) = match input {
        ModalityInput::Video(frames) => {
            encode_video_with_mode(&mut tape, params, frames, &[], ParamMode::Frozen)?
        }
        ModalityInput::Sentence(tokens) => {
            encode_sentence_with_mode(&mut tape, params, tokens, ParamMode::Frozen)?
        }
    };
    let unit = tape.l2_normalize_rows(pooled);
    let data = tape.value(unit).to_vec();
    let d = data.len();
    Ok(Tensor::new(vec![1, d], data))
}

/// Everything one (video, sentence) pair contributes to the losses:
/// token-level states and pooled queries on the tape, plus detached unit
/// keys from the momentum encoders.
#[derive(Debug, Clone)]
pub struct EncodedPair {
    pub video_states: Var,
    pub sentence_states: Var,
    pub video_query: Var,
    pub sentence_query: Var,
    pub video_key: Tensor,
    pub sentence_key: Tensor,
}

/// Run all four encoders for one pair: query sides on the tape over masked
/// inputs, key sides off-tape over the unmasked originals.
#[allow(clippy::too_many_arguments)]
pub fn encode_pair(
    tape: &mut Tape,
    video: &EncoderPair,
    sentence: &EncoderPair,
    masked_frames: &Tensor,
    frame_mask_positions: &[usize],
    unmasked_frames: &Tensor,
    masked_tokens: &[usize],
    unmasked_tokens: &[usize],
) -> Result<EncodedPair> {
    let (video_states, video_query) =
        encode_video_query(tape, &video.query, masked_frames, frame_mask_positions)?;
    let (sentence_states, sentence_query) =
        encode_sentence_query(tape, &sentence.query, masked_tokens)?;
    let video_key = encode_key(&video.key, ModalityInput::Video(unmasked_frames))?;
    let sentence_key = encode_key(&sentence.key, ModalityInput::Sentence(unmasked_tokens))?;
    Ok(EncodedPair {
        video_states,
        sentence_states,
        video_query,
        sentence_query,
        video_key,
        sentence_key,
    })
}
