//! Cross-modal decoder: transformer blocks over the concatenated
//! [video; sentence] query states, the masked-token prediction head, the
//! autoregressive sentence-generation head, and greedy caption decoding.
//!
//! The same decoder parameters serve two attention regimes. Bidirectional
//! mode lets every position see every position and feeds the masked-token
//! head. Causal-sentence mode keeps video rows within the video segment and
//! lets sentence row j see all video plus sentence rows 0..=j; it feeds the
//! generation head and the greedy decoder, and guarantees that position j's
//! output depends only on the prefix up to j.

use rand::Rng;

use crate::encoder::{encode_video_with_mode, EncoderParams};
use crate::error::{invalid, Result};
use crate::nn::{
    attention_pool, embed_sentence, transformer_block, AttentionPoolerParams, AttnMask,
    EmbeddingTables, ParamMode, TransformerBlockParams,
};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    /// Every position attends every position (masked-token head).
    Bidirectional,
    /// Video rows attend the video segment only; sentence row j attends all
    /// video plus sentence rows 0..=j (generation head, greedy decoding).
    CausalSentence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub blocks: Vec<TransformerBlockParams>,
    pub vocab_w: Tensor, // [D, vocab]
    pub pooler: AttentionPoolerParams,
}

impl DecoderParams {
    pub fn init(d: usize, vocab: usize, n_blocks: usize, n_heads: usize, rng: &mut impl Rng) -> Self {
        assert!(n_blocks >= 1, "the decoder needs at least one block");
        DecoderParams {
            blocks: (0..n_blocks).map(|_| TransformerBlockParams::init(d, n_heads, rng)).collect(),
            vocab_w: Tensor::randn(vec![d, vocab], 1.0 / (d as f64).sqrt(), rng),
            pooler: AttentionPoolerParams::init(d, rng),
        }
    }

    pub fn d(&self) -> usize {
        self.blocks[0].d
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_w.shape[1]
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, t) in b.named_tensors() {
                out.push((format!("blocks.{}.{}", i, n), t));
            }
        }
        out.push(("vocab_w".into(), &self.vocab_w));
        for (n, t) in self.pooler.named_tensors() {
            out.push((format!("pooler.{}", n), t));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (n, t) in b.named_tensors_mut() {
                out.push((format!("blocks.{}.{}", i, n), t));
            }
        }
        out.push(("vocab_w".into(), &mut self.vocab_w));
        for (n, t) in self.pooler.named_tensors_mut() {
            out.push((format!("pooler.{}", n), t));
        }
        out
    }
}

fn fused_mask(mode: DecodeMode, n_v: usize, n_s: usize) -> AttnMask {
    let n = n_v + n_s;
    match mode {
        DecodeMode::Bidirectional => AttnMask::full(n, n),
        DecodeMode::CausalSentence => {
            let mut allowed = vec![false; n * n];
            for i in 0..n {
                for j in 0..n {
                    let ok = if i < n_v {
                        j < n_v // video rows stay inside the video segment
                    } else {
                        j < n_v || j <= i // sentence rows: all video + own prefix
                    };
                    allowed[i * n + j] = ok;
                }
            }
            AttnMask { len_q: n, len_kv: n, allowed }
        }
    }
}

/// Concatenate [video; sentence] states and run the decoder blocks under the
/// mode's attention mask. Returns the fused [(N_f + len_s) x D] states.
pub fn cross_modal_decode(
    tape: &mut Tape,
    decoder: &DecoderParams,
    h_video: Var,
    h_sentence: Var,
    decode_mode: DecodeMode,
    mode: ParamMode,
) -> Result<Var> {
    let (n_v, d_v) = tape.dims2(h_video);
    let (n_s, d_s) = tape.dims2(h_sentence);
    if d_v != d_s || d_v != decoder.d() {
        return Err(invalid(format!(
            "decoder width mismatch: video {}, sentence {}, blocks {}",
            d_v,
            d_s,
            decoder.d()
        )));
    }
    if n_v == 0 || n_s == 0 {
        return Err(invalid("decoder needs nonempty video and sentence segments"));
    }
    let mut x = tape.concat_rows(h_video, h_sentence);
    let mask = fused_mask(decode_mode, n_v, n_s);
    for block in &decoder.blocks {
        x = transformer_block(tape, x, &mask, block, mode)?;
    }
    Ok(x)
}

/// Attention-pool the fused states into one [1, D] vector (QA and the
/// binary matching head both read this).
pub fn pool_fused(tape: &mut Tape, decoder: &DecoderParams, fused: Var, mode: ParamMode) -> Result<Var> {
    let (len, _) = tape.dims2(fused);
    attention_pool(tape, fused, &vec![true; len], &decoder.pooler, mode)
}

/// Masked-token prediction loss: vocabulary cross-entropy at each masked
/// sentence position against the original token, averaged over positions.
/// `sentence_states` is the sentence segment of a bidirectional fused pass.
pub fn mlm_loss(
    tape: &mut Tape,
    decoder: &DecoderParams,
    sentence_states: Var,
    mask_positions: &[usize],
    original_tokens: &[usize],
    mode: ParamMode,
) -> Result<Var> {
    let (len, _) = tape.dims2(sentence_states);
    if mask_positions.is_empty() {
        return Err(invalid("mlm: no masked positions (masking guarantees at least one)"));
    }
    if original_tokens.len() != len {
        return Err(invalid(format!(
            "mlm: {} original tokens for {} sentence states",
            original_tokens.len(),
            len
        )));
    }
    let vocab = decoder.vocab_size();
    let mut targets = Vec::with_capacity(mask_positions.len());
    for &p in mask_positions {
        if p >= len {
            return Err(invalid(format!("mlm: mask position {} >= sentence length {}", p, len)));
        }
        let t = original_tokens[p];
        if t >= vocab {
            return Err(invalid(format!("mlm: token id {} >= vocab {}", t, vocab)));
        }
        targets.push(t);
    }
    let picked = tape.gather_rows(sentence_states, mask_positions);
    let w = crate::nn::bind(tape, &decoder.vocab_w, mode);
    let logits = tape.matmul(picked, w);
    Ok(tape.cross_entropy_rows(logits, &targets))
}

fn check_framed(tokens: &[usize], specials: &crate::nn::SpecialTokens) -> Result<()> {
    if tokens.len() < 3 {
        return Err(invalid("generation needs at least one body token between [CLS] and [SEP]"));
    }
    if tokens[0] != specials.cls || *tokens.last().unwrap() != specials.sep {
        return Err(invalid("sentence must be framed as [CLS] … [SEP]"));
    }
    Ok(())
}

/// Teacher-forced autoregressive sentence loss. The original (unmasked)
/// framed tokens enter shifted right: position j embeds token j and predicts
/// token j+1, through the causal-sentence decoder with full video
/// visibility. Cross-entropy is averaged over all predicted positions,
/// including the final [SEP].
pub fn msg_loss(
    tape: &mut Tape,
    decoder: &DecoderParams,
    tables: &EmbeddingTables,
    h_video: Var,
    original_tokens: &[usize],
    mode: ParamMode,
) -> Result<Var> {
    let (logits, targets) = msg_logits(tape, decoder, tables, h_video, original_tokens, mode)?;
    Ok(tape.cross_entropy_rows(logits, &targets))
}

/// The teacher-forced next-token logits behind the generation loss, one row
/// per target position, plus the target ids themselves. Evaluation reads
/// these directly for token accuracy.
pub fn msg_logits(
    tape: &mut Tape,
    decoder: &DecoderParams,
    tables: &EmbeddingTables,
    h_video: Var,
    original_tokens: &[usize],
    mode: ParamMode,
) -> Result<(Var, Vec<usize>)> {
    check_framed(original_tokens, &tables.specials)?;
    let inputs = &original_tokens[..original_tokens.len() - 1];
    let targets = original_tokens[1..].to_vec();
    let h_s = embed_sentence(tape, tables, inputs, mode)?;
    let fused = cross_modal_decode(tape, decoder, h_video, h_s, DecodeMode::CausalSentence, mode)?;
    let (n_total, _) = tape.dims2(fused);
    let n_v = n_total - inputs.len();
    let sentence = tape.slice_rows(fused, n_v, n_total);
    let w = crate::nn::bind(tape, &decoder.vocab_w, mode);
    let logits = tape.matmul(sentence, w);
    Ok((logits, targets))
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy caption decoding: start from [CLS], repeatedly append the argmax
/// next token under the causal-sentence decoder, stop after emitting [SEP]
/// or after `max_len` generated tokens. Ties break toward the lowest token
/// id. Returns the generated tokens (without the starting [CLS]).
pub fn greedy_decode(
    video_query: &EncoderParams,
    tables: &EmbeddingTables,
    decoder: &DecoderParams,
    frames: &Tensor,
    max_len: usize,
) -> Result<Vec<usize>> {
    if max_len < 1 {
        return Err(invalid("greedy_decode needs max_len >= 1"));
    }
    let sep = tables.specials.sep;
    let mut prefix = vec![tables.specials.cls];
    let mut out = Vec::new();
    for _ in 0..max_len {
        let next = next_token_logits(video_query, tables, decoder, frames, &prefix)
            .map(|row| argmax_lowest(&row))?;
        out.push(next);
        prefix.push(next);
        if next == sep {
            break;
        }
    }
    Ok(out)
}

/// Vocabulary logits for the next token after `prefix` (which must start
/// with [CLS]). One full frozen forward per call.
pub fn next_token_logits(
    video_query: &EncoderParams,
    tables: &EmbeddingTables,
    decoder: &DecoderParams,
    frames: &Tensor,
    prefix: &[usize],
) -> Result<Vec<f64>> {
    if prefix.is_empty() || prefix[0] != tables.specials.cls {
        return Err(invalid("decode prefix must start with [CLS]"));
    }
    let mut tape = Tape::new();
    let (h_v, _) = encode_video_with_mode(&mut tape, video_query, frames, &[], ParamMode::Frozen)?;
    let h_s = embed_sentence(&mut tape, tables, prefix, ParamMode::Frozen)?;
    let fused =
        cross_modal_decode(&mut tape, decoder, h_v, h_s, DecodeMode::CausalSentence, ParamMode::Frozen)?;
    let (n_total, _) = tape.dims2(fused);
    let last = tape.slice_rows(fused, n_total - 1, n_total);
    let w = crate::nn::bind(&mut tape, &decoder.vocab_w, ParamMode::Frozen);
    let logits = tape.matmul(last, w);
    Ok(tape.value(logits).to_vec())
}
