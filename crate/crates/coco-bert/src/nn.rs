//! Embeddings, multi-head attention, pre-norm transformer blocks, and the
//! attention pooler that turns token states into one holistic vector.
//!
//! Forward functions all follow the same pattern: they take the tape, the
//! parameter structs, and a [`ParamMode`] saying whether parameters enter the
//! graph as gradient leaves (query side) or constants (momentum/key side).

use rand::Rng;

use crate::error::{invalid, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// How parameters are registered on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamMode {
    /// Gradient leaves; used by query encoders, decoder and heads.
    Trainable,
    /// Constants; used by key encoders and all inference-time forwards.
    Frozen,
}

pub(crate) fn bind(tape: &mut Tape, t: &Tensor, mode: ParamMode) -> Var {
    match mode {
        ParamMode::Trainable => tape.param(t),
        ParamMode::Frozen => tape.input(t),
    }
}

// ── Parameter structs ───────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead {
    pub wq: Tensor, // [D, d_head]
    pub wk: Tensor, // [D, d_head]
    pub wv: Tensor, // [D, d_head]
    pub wo: Tensor, // [d_head, D]
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlockParams {
    pub heads: Vec<AttentionHead>,
    pub ff1_w: Tensor, // [D, 4D]
    pub ff1_b: Tensor, // [4D]
    pub ff2_w: Tensor, // [4D, D]
    pub ff2_b: Tensor, // [D]
    pub ln1_g: Tensor, // [D]
    pub ln1_b: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub d: usize,
}

impl TransformerBlockParams {
    pub fn init(d: usize, n_heads: usize, rng: &mut impl Rng) -> Self {
        assert!(n_heads > 0 && d % n_heads == 0, "width {} not divisible by {} heads", d, n_heads);
        let dh = d / n_heads;
        let proj_std = 1.0 / (d as f64).sqrt();
        let out_std = 1.0 / (dh as f64).sqrt();
        let heads = (0..n_heads)
            .map(|_| AttentionHead {
                wq: Tensor::randn(vec![d, dh], proj_std, rng),
                wk: Tensor::randn(vec![d, dh], proj_std, rng),
                wv: Tensor::randn(vec![d, dh], proj_std, rng),
                wo: Tensor::randn(vec![dh, d], out_std, rng),
            })
            .collect();
        TransformerBlockParams {
            heads,
            ff1_w: Tensor::randn(vec![d, 4 * d], proj_std, rng),
            ff1_b: Tensor::param(vec![4 * d], vec![0.0; 4 * d]),
            ff2_w: Tensor::randn(vec![4 * d, d], 1.0 / (4.0 * d as f64).sqrt(), rng),
            ff2_b: Tensor::param(vec![d], vec![0.0; d]),
            ln1_g: Tensor::param(vec![d], vec![1.0; d]),
            ln1_b: Tensor::param(vec![d], vec![0.0; d]),
            ln2_g: Tensor::param(vec![d], vec![1.0; d]),
            ln2_b: Tensor::param(vec![d], vec![0.0; d]),
            d,
        }
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    /// Deterministic (name, tensor) traversal; order matches `named_tensors_mut`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, h) in self.heads.iter().enumerate() {
            out.push((format!("heads.{}.wq", i), &h.wq));
            out.push((format!("heads.{}.wk", i), &h.wk));
            out.push((format!("heads.{}.wv", i), &h.wv));
            out.push((format!("heads.{}.wo", i), &h.wo));
        }
        for (name, t) in [
            ("ff1_w", &self.ff1_w),
            ("ff1_b", &self.ff1_b),
            ("ff2_w", &self.ff2_w),
            ("ff2_b", &self.ff2_b),
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
        ] {
            out.push((name.to_string(), t));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, h) in self.heads.iter_mut().enumerate() {
            out.push((format!("heads.{}.wq", i), &mut h.wq));
            out.push((format!("heads.{}.wk", i), &mut h.wk));
            out.push((format!("heads.{}.wv", i), &mut h.wv));
            out.push((format!("heads.{}.wo", i), &mut h.wo));
        }
        for (name, t) in [
            ("ff1_w", &mut self.ff1_w),
            ("ff1_b", &mut self.ff1_b),
            ("ff2_w", &mut self.ff2_w),
            ("ff2_b", &mut self.ff2_b),
            ("ln1_g", &mut self.ln1_g),
            ("ln1_b", &mut self.ln1_b),
            ("ln2_g", &mut self.ln2_g),
            ("ln2_b", &mut self.ln2_b),
        ] {
            out.push((name.to_string(), t));
        }
        out
    }
}

/// Reserved vocabulary slots. These ids are never maskable and body tokens
/// live strictly above them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SpecialTokens {
    pub cls: usize,
    pub sep: usize,
    pub mask: usize,
    pub pad: usize,
}

impl Default for SpecialTokens {
    fn default() -> Self {
        SpecialTokens { cls: 0, sep: 1, mask: 2, pad: 3 }
    }
}

impl SpecialTokens {
    pub fn is_special(&self, id: usize) -> bool {
        id == self.cls || id == self.sep || id == self.mask || id == self.pad
    }

    /// First id usable as an ordinary body token.
    pub fn body_start(&self) -> usize {
        1 + self.cls.max(self.sep).max(self.mask).max(self.pad)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTables {
    pub token: Tensor,      // [vocab, D]
    pub pos: Tensor,        // [max_len, D]
    pub frame_proj: Tensor, // [D_f, D]
    pub frame_mask: Tensor, // [D_f] learned stand-in for a masked frame
    pub specials: SpecialTokens,
}

impl EmbeddingTables {
    pub fn init(vocab: usize, max_len: usize, d_f: usize, d: usize, rng: &mut impl Rng) -> Self {
        let specials = SpecialTokens::default();
        assert!(vocab > specials.body_start(), "vocab {} leaves no body tokens", vocab);
        let std = 1.0 / (d as f64).sqrt();
        EmbeddingTables {
            token: Tensor::randn(vec![vocab, d], std, rng),
            pos: Tensor::randn(vec![max_len, d], std, rng),
            frame_proj: Tensor::randn(vec![d_f, d], 1.0 / (d_f as f64).sqrt(), rng),
            frame_mask: Tensor::randn(vec![d_f], 1.0, rng),
            specials,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.token.shape[0]
    }

    pub fn max_len(&self) -> usize {
        self.pos.shape[0]
    }

    pub fn d_f(&self) -> usize {
        self.frame_proj.shape[0]
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("token".into(), &self.token),
            ("pos".into(), &self.pos),
            ("frame_proj".into(), &self.frame_proj),
            ("frame_mask".into(), &self.frame_mask),
        ]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("token".into(), &mut self.token),
            ("pos".into(), &mut self.pos),
            ("frame_proj".into(), &mut self.frame_proj),
            ("frame_mask".into(), &mut self.frame_mask),
        ]
    }
}

/// Two-layer scoring MLP (D → D_p → 1) for attention pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPoolerParams {
    pub w1: Tensor, // [D, D_p]
    pub b1: Tensor, // [D_p]
    pub w2: Tensor, // [D_p, 1]
    pub b2: Tensor, // [1]
}

impl AttentionPoolerParams {
    pub fn init(d: usize, rng: &mut impl Rng) -> Self {
        let dp = (d / 2).max(1);
        AttentionPoolerParams {
            w1: Tensor::randn(vec![d, dp], 1.0 / (d as f64).sqrt(), rng),
            b1: Tensor::param(vec![dp], vec![0.0; dp]),
            w2: Tensor::randn(vec![dp, 1], 1.0 / (dp as f64).sqrt(), rng),
            b2: Tensor::param(vec![1], vec![0.0]),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("w1".into(), &self.w1),
            ("b1".into(), &self.b1),
            ("w2".into(), &self.w2),
            ("b2".into(), &self.b2),
        ]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("w1".into(), &mut self.w1),
            ("b1".into(), &mut self.b1),
            ("w2".into(), &mut self.w2),
            ("b2".into(), &mut self.b2),
        ]
    }
}

// ── Attention masks ─────────────────────────────────────────────────────

/// Boolean attention mask, true = attendable, row-major [len_q, len_kv].
#[derive(Debug, Clone, PartialEq)]
pub struct AttnMask {
    pub len_q: usize,
    pub len_kv: usize,
    pub allowed: Vec<bool>,
}

impl AttnMask {
    pub fn full(len_q: usize, len_kv: usize) -> Self {
        AttnMask { len_q, len_kv, allowed: vec![true; len_q * len_kv] }
    }

    /// Self-attention causal mask: position i sees positions 0..=i.
    pub fn causal(len: usize) -> Self {
        let mut allowed = vec![false; len * len];
        for i in 0..len {
            for j in 0..=i {
                allowed[i * len + j] = true;
            }
        }
        AttnMask { len_q: len, len_kv: len, allowed }
    }

    /// Self-attention over a padded sequence: pad positions are neither
    /// queried into nor attended to (their output rows are still produced
    /// but carry no meaning).
    pub fn padded(keep: &[bool]) -> Self {
        let len = keep.len();
        let mut allowed = vec![false; len * len];
        for i in 0..len {
            for j in 0..len {
                allowed[i * len + j] = keep[j];
            }
        }
        AttnMask { len_q: len, len_kv: len, allowed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.allowed.len() != self.len_q * self.len_kv {
            return Err(invalid("attention mask size does not match declared lengths"));
        }
        for i in 0..self.len_q {
            if !self.allowed[i * self.len_kv..(i + 1) * self.len_kv].iter().any(|&a| a) {
                return Err(invalid(format!("fully-masked attention query row {}", i)));
            }
        }
        Ok(())
    }
}

// ── Forward ops ─────────────────────────────────────────────────────────

/// Token + positional embeddings for a framed ([CLS] … [SEP]) sequence.
pub fn embed_sentence(
    tape: &mut Tape,
    tables: &EmbeddingTables,
    tokens: &[usize],
    mode: ParamMode,
) -> Result<Var> {
    let vocab = tables.vocab_size();
    for &t in tokens {
        if t >= vocab {
            return Err(invalid(format!("token id {} >= vocab size {}", t, vocab)));
        }
    }
    if tokens.is_empty() || tokens.len() > tables.max_len() {
        return Err(invalid(format!(
            "sentence length {} outside 1..={}",
            tokens.len(),
            tables.max_len()
        )));
    }
    let tok_table = bind(tape, &tables.token, mode);
    let pos_table = bind(tape, &tables.pos, mode);
    let tok = tape.gather_rows(tok_table, tokens);
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let pos = tape.gather_rows(pos_table, &positions);
    Ok(tape.add(tok, pos))
}

/// Frame features to model width: masked positions use the learned mask
/// vector instead of the raw feature, then everything is projected and gets
/// positional embeddings.
pub fn embed_video(
    tape: &mut Tape,
    tables: &EmbeddingTables,
    frames: &Tensor,
    mask_positions: &[usize],
    mode: ParamMode,
) -> Result<Var> {
    let (n_f, d_f) = frames.dims2();
    if d_f != tables.d_f() {
        return Err(invalid(format!(
            "frame feature width {} does not match projection input {}",
            d_f,
            tables.d_f()
        )));
    }
    if n_f == 0 || n_f > tables.max_len() {
        return Err(invalid(format!("frame count {} outside 1..={}", n_f, tables.max_len())));
    }
    for &p in mask_positions {
        if p >= n_f {
            return Err(invalid(format!("mask position {} >= frame count {}", p, n_f)));
        }
    }
    let mut x = tape.input(frames);
    if !mask_positions.is_empty() {
        let mask_vec = bind(tape, &tables.frame_mask, mode);
        x = tape.replace_rows(x, mask_positions, mask_vec);
    }
    let proj = bind(tape, &tables.frame_proj, mode);
    let projected = tape.matmul(x, proj);
    let pos_table = bind(tape, &tables.pos, mode);
    let positions: Vec<usize> = (0..n_f).collect();
    let pos = tape.gather_rows(pos_table, &positions);
    Ok(tape.add(projected, pos))
}

/// Multi-head attention: per-head Q/K/V projections, scaled dot-product
/// scores with disallowed pairs excluded from the softmax, per-head output
/// projections summed into the D-wide result.
pub fn multi_head_attention(
    tape: &mut Tape,
    queries: Var,
    keys_values: Var,
    mask: &AttnMask,
    heads: &[AttentionHead],
    mode: ParamMode,
) -> Result<Var> {
    let (len_q, d) = tape.dims2(queries);
    let (len_kv, d2) = tape.dims2(keys_values);
    if d != d2 {
        return Err(invalid(format!("query width {} != key width {}", d, d2)));
    }
    if mask.len_q != len_q || mask.len_kv != len_kv {
        return Err(invalid(format!(
            "attention mask is {}x{} but sequences are {}x{}",
            mask.len_q, mask.len_kv, len_q, len_kv
        )));
    }
    mask.validate()?;
    let dh = heads[0].wq.shape[1];
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out: Option<Var> = None;
    for head in heads {
        let wq = bind(tape, &head.wq, mode);
        let wk = bind(tape, &head.wk, mode);
        let wv = bind(tape, &head.wv, mode);
        let wo = bind(tape, &head.wo, mode);
        let q = tape.matmul(queries, wq);
        let k = tape.matmul(keys_values, wk);
        let v = tape.matmul(keys_values, wv);
        let kt = tape.transpose(k);
        let scores_raw = tape.matmul(q, kt);
        let scores = tape.scale(scores_raw, scale);
        let attn = tape.masked_softmax_rows(scores, &mask.allowed);
        let ctx = tape.matmul(attn, v);
        let head_out = tape.matmul(ctx, wo);
        out = Some(match out {
            Some(acc) => tape.add(acc, head_out),
            None => head_out,
        });
    }
    Ok(out.expect("at least one attention head"))
}

/// Pre-norm residual block: x + MHA(LN(x)), then + FFN(LN(·)).
pub fn transformer_block(
    tape: &mut Tape,
    x: Var,
    mask: &AttnMask,
    params: &TransformerBlockParams,
    mode: ParamMode,
) -> Result<Var> {
    let (_, d) = tape.dims2(x);
    if d != params.d {
        return Err(invalid(format!("input width {} != block width {}", d, params.d)));
    }
    let ln1_g = bind(tape, &params.ln1_g, mode);
    let ln1_b = bind(tape, &params.ln1_b, mode);
    let normed = tape.layer_norm(x, ln1_g, ln1_b, LN_EPS);
    let attn = multi_head_attention(tape, normed, normed, mask, &params.heads, mode)?;
    let h = tape.add(x, attn);

    let ln2_g = bind(tape, &params.ln2_g, mode);
    let ln2_b = bind(tape, &params.ln2_b, mode);
    let normed2 = tape.layer_norm(h, ln2_g, ln2_b, LN_EPS);
    let ff1_w = bind(tape, &params.ff1_w, mode);
    let ff1_b = bind(tape, &params.ff1_b, mode);
    let ff2_w = bind(tape, &params.ff2_w, mode);
    let ff2_b = bind(tape, &params.ff2_b, mode);
    let mid = tape.matmul(normed2, ff1_w);
    let mid = tape.add_row(mid, ff1_b);
    let mid = tape.gelu(mid);
    let ff = tape.matmul(mid, ff2_w);
    let ff = tape.add_row(ff, ff2_b);
    Ok(tape.add(h, ff))
}

/// Score every token with the two-layer MLP, softmax over the kept
/// positions, and return the weighted sum of token states as a [1, D] row.
pub fn attention_pool(
    tape: &mut Tape,
    seq: Var,
    keep: &[bool],
    pooler: &AttentionPoolerParams,
    mode: ParamMode,
) -> Result<Var> {
    let (len, _d) = tape.dims2(seq);
    if keep.len() != len {
        return Err(invalid(format!("pad mask length {} != sequence length {}", keep.len(), len)));
    }
    if !keep.iter().any(|&k| k) {
        return Err(invalid("attention_pool requires at least one non-pad position"));
    }
    let w1 = bind(tape, &pooler.w1, mode);
    let b1 = bind(tape, &pooler.b1, mode);
    let w2 = bind(tape, &pooler.w2, mode);
    let b2 = bind(tape, &pooler.b2, mode);
    let hidden = tape.matmul(seq, w1);
    let hidden = tape.add_row(hidden, b1);
    let hidden = tape.gelu(hidden);
    let scores = tape.matmul(hidden, w2);
    let scores = tape.add_row(scores, b2); // [len, 1]
    let scores_row = tape.transpose(scores); // [1, len]
    let weights = tape.masked_softmax_rows(scores_row, keep);
    Ok(tape.matmul(weights, seq)) // [1, D]
}
