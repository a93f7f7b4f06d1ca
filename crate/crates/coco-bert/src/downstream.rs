//! Evaluation and fine-tuning on top of a pre-trained model: cross-modal
//! retrieval (zero-shot and triplet-tuned), answer classification over the
//! fused representation, and teacher-forced caption quality.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{frame_tokens, VideoSentencePair};
use crate::decoder::{cross_modal_decode, msg_logits, msg_loss, DecodeMode};
use crate::encoder::{
    encode_key, encode_sentence_with_mode, encode_video_with_mode, ModalityInput,
};
use crate::error::{invalid, Result};
use crate::model::Model;
use crate::nn::{attention_pool, bind, ParamMode};
use crate::rng::sub_rng;
use crate::tensor::{Tape, Tensor, Var};
use crate::train::{adam_update, AdamState};

// ── Pair scoring ────────────────────────────────────────────────────────

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unit-norm pooled embedding of a frame sequence under the query video
/// encoder, run frozen.
pub fn video_embedding(model: &Model, frames: &Tensor) -> Result<Vec<f64>> {
    Ok(encode_key(&model.video.query, ModalityInput::Video(frames))?.data)
}

/// Unit-norm pooled embedding of a raw (unframed) token sequence under the
/// query sentence encoder, run frozen.
pub fn sentence_embedding(model: &Model, body_tokens: &[usize]) -> Result<Vec<f64>> {
    let framed = frame_tokens(body_tokens, &model.sentence.query.tables.specials);
    Ok(encode_key(&model.sentence.query, ModalityInput::Sentence(&framed))?.data)
}

/// Matching score for one (video, sentence) pair: cosine similarity of the
/// pooled query-encoder outputs on the unmasked inputs. Both embeddings are
/// unit vectors, so this is a plain dot product in [-1, 1].
pub fn score_pair(model: &Model, frames: &Tensor, body_tokens: &[usize]) -> Result<f64> {
    let v = video_embedding(model, frames)?;
    let s = sentence_embedding(model, body_tokens)?;
    Ok(dot(&v, &s))
}

/// All-pairs score matrix: entry [i][j] scores video i against sentence j.
/// Embeddings are computed once per item, so this is linear in the dataset
/// size plus an n-squared dot-product pass.
pub fn score_matrix(model: &Model, pairs: &[VideoSentencePair]) -> Result<Vec<Vec<f64>>> {
    if pairs.is_empty() {
        return Err(invalid("score matrix over an empty dataset"));
    }
    let videos: Vec<Vec<f64>> = pairs
        .iter()
        .map(|p| video_embedding(model, &p.frames))
        .collect::<Result<_>>()?;
    let sentences: Vec<Vec<f64>> = pairs
        .iter()
        .map(|p| sentence_embedding(model, &p.tokens))
        .collect::<Result<_>>()?;
    Ok(videos
        .iter()
        .map(|v| sentences.iter().map(|s| dot(v, s)).collect())
        .collect())
}

/// Fraction of queries whose true candidate lands in the top k by
/// descending score. Ties rank by ascending candidate index, so results do
/// not depend on sort stability or float ordering quirks.
pub fn recall_at_k(scores: &[Vec<f64>], truth: &[usize], k: usize) -> Result<f64> {
    if scores.is_empty() {
        return Err(invalid("recall over an empty score matrix"));
    }
    let n_c = scores[0].len();
    if scores.iter().any(|row| row.len() != n_c) {
        return Err(invalid("ragged score matrix"));
    }
    if truth.len() != scores.len() {
        return Err(invalid(format!(
            "{} truth indices for {} queries",
            truth.len(),
            scores.len()
        )));
    }
    if k == 0 || k > n_c {
        return Err(invalid(format!("k={} outside 1..={} candidates", k, n_c)));
    }
    let mut hits = 0usize;
    for (row, &t) in scores.iter().zip(truth) {
        if t >= n_c {
            return Err(invalid(format!("truth index {} outside {} candidates", t, n_c)));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite score"));
        }
        // Rank of the truth = number of candidates ordered strictly ahead
        // of it: higher score, or equal score at a lower index.
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(c, &s)| s > row[t] || (s == row[t] && c < t))
            .count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / scores.len() as f64)
}

/// Recall curves for both retrieval directions under the identity ground
/// truth (pair i's video matches pair i's sentence).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub n: usize,
    pub ks: Vec<usize>,
    pub video_to_sentence: Vec<f64>,
    pub sentence_to_video: Vec<f64>,
}

pub fn zero_shot_retrieval(
    model: &Model,
    pairs: &[VideoSentencePair],
    ks: &[usize],
) -> Result<RetrievalMetrics> {
    let scores = score_matrix(model, pairs)?;
    retrieval_from_scores(&scores, ks)
}

/// The recall computation behind zero-shot retrieval, split out so tuned
/// checkpoints and cached score matrices evaluate identically.
pub fn retrieval_from_scores(scores: &[Vec<f64>], ks: &[usize]) -> Result<RetrievalMetrics> {
    let n = scores.len();
    let truth: Vec<usize> = (0..n).collect();
    let transposed: Vec<Vec<f64>> = (0..n)
        .map(|j| scores.iter().map(|row| row[j]).collect())
        .collect();
    let mut v2s = Vec::with_capacity(ks.len());
    let mut s2v = Vec::with_capacity(ks.len());
    for &k in ks {
        v2s.push(recall_at_k(scores, &truth, k)?);
        s2v.push(recall_at_k(&transposed, &truth, k)?);
    }
    Ok(RetrievalMetrics { n, ks: ks.to_vec(), video_to_sentence: v2s, sentence_to_video: s2v })
}

// ── Retrieval fine-tuning ───────────────────────────────────────────────

/// Triplet ranking settings. Batches are sized so every anchor sees exactly
/// `negatives_per_anchor` in-batch negatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub margin: f64,
    pub negatives_per_anchor: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig { margin: 0.2, negatives_per_anchor: 3, epochs: 3, lr: 1e-3 }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(invalid(format!("margin must be positive, got {}", self.margin)));
        }
        if self.negatives_per_anchor == 0 {
            return Err(invalid("need at least one negative per anchor"));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs must be at least 1"));
        }
        if !(self.lr > 0.0) {
            return Err(invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Hinge for one triplet: max(0, margin - s_pos + s_neg). Zero exactly when
/// the positive outranks the negative by at least the margin.
pub fn triplet_hinge(margin: f64, s_pos: f64, s_neg: f64) -> f64 {
    (margin - s_pos + s_neg).max(0.0)
}

/// Mean hinge over every ordered anchor/negative combination in a batch of
/// pairwise scores, both directions: video i anchored against sentence j,
/// and sentence i anchored against video j. `scores[i][j]` must be the
/// [1, 1] score of video i with sentence j, live on the tape.
pub fn triplet_loss_on_tape(tape: &mut Tape, scores: &[Vec<Var>], margin: f64) -> Result<Var> {
    let b = scores.len();
    if b < 2 {
        return Err(invalid("triplet loss needs at least 2 pairs in the batch"));
    }
    if scores.iter().any(|row| row.len() != b) {
        return Err(invalid("triplet loss needs a square score grid"));
    }
    let mut terms = Vec::with_capacity(2 * b * (b - 1));
    for i in 0..b {
        for j in 0..b {
            if i == j {
                continue;
            }
            // Video anchor: positive (i, i), negative sentence j.
            let diff = tape.sub(scores[i][j], scores[i][i]);
            let shifted = tape.add_const(diff, margin);
            terms.push(tape.relu(shifted));
            // Sentence anchor: positive (i, i), negative video j.
            let diff = tape.sub(scores[j][i], scores[i][i]);
            let shifted = tape.add_const(diff, margin);
            terms.push(tape.relu(shifted));
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t);
    }
    Ok(tape.scale(total, 1.0 / terms.len() as f64))
}

fn batch_pair_scores(
    tape: &mut Tape,
    model: &Model,
    batch: &[VideoSentencePair],
) -> Result<Vec<Vec<Var>>> {
    let sp = model.sentence.query.tables.specials;
    let mut qv = Vec::with_capacity(batch.len());
    let mut qs_t = Vec::with_capacity(batch.len());
    for pair in batch {
        let (_, pooled_v) =
            encode_video_with_mode(tape, &model.video.query, &pair.frames, &[], ParamMode::Trainable)?;
        qv.push(tape.l2_normalize_rows(pooled_v));
        let framed = frame_tokens(&pair.tokens, &sp);
        let (_, pooled_s) =
            encode_sentence_with_mode(tape, &model.sentence.query, &framed, ParamMode::Trainable)?;
        let unit = tape.l2_normalize_rows(pooled_s);
        qs_t.push(tape.transpose(unit));
    }
    Ok(qv
        .iter()
        .map(|&v| qs_t.iter().map(|&s| tape.matmul(v, s)).collect())
        .collect())
}

/// Tune the query encoders with the in-batch triplet ranking objective.
/// Returns the mean triplet loss per epoch. Key encoders and memories are
/// untouched; they play no role after pre-training.
pub fn finetune_retrieval(
    model: &mut Model,
    dataset: &[VideoSentencePair],
    cfg: &RetrievalConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if dataset.len() < 2 {
        return Err(invalid(
            "retrieval fine-tuning needs at least 2 pairs; a batch of 1 has no negative",
        ));
    }
    let batch = (cfg.negatives_per_anchor + 1).min(dataset.len());
    let mut adam = AdamState::init_for(model);
    let mut epoch_means = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut losses = Vec::new();
        let mut start = 0;
        while start < dataset.len() {
            let end = (start + batch).min(dataset.len());
            if end - start < 2 {
                break; // a trailing singleton has no in-batch negative
            }
            let mut tape = Tape::new();
            let scores = batch_pair_scores(&mut tape, model, &dataset[start..end])?;
            let loss = triplet_loss_on_tape(&mut tape, &scores, cfg.margin)?;
            losses.push(tape.scalar_value(loss));
            tape.backward(loss)?;
            let mut params = model.named_params_mut();
            adam_update(
                &mut adam,
                &mut params,
                |_, t| tape.grad_of(t).map(|g| g.to_vec()),
                cfg.lr,
                0.9,
                0.999,
                1e-8,
            )?;
            start = end;
        }
        epoch_means.push(losses.iter().sum::<f64>() / losses.len() as f64);
    }
    Ok(epoch_means)
}

// ── Answer classification ───────────────────────────────────────────────

/// One linear map from the fused representation to answer logits. The
/// fused representation is the concatenation of the separately pooled
/// video and sentence segments of a bidirectional decode, width 2D.
#[derive(Debug, Clone, PartialEq)]
pub struct QAHeadParams {
    pub w: Tensor, // [2D, n_answers]
    pub b: Tensor, // [1, n_answers]
}

impl QAHeadParams {
    pub fn init(d: usize, n_answers: usize, rng: &mut impl Rng) -> Self {
        QAHeadParams {
            w: Tensor::param(vec![2 * d, n_answers], Tensor::randn(vec![2 * d, n_answers], 0.02, rng).data),
            b: Tensor::param(vec![1, n_answers], vec![0.0; n_answers]),
        }
    }

    pub fn n_answers(&self) -> usize {
        self.w.dims2().1
    }

    /// Total scalar parameter count; single-layer by construction.
    pub fn param_count(&self) -> usize {
        self.w.numel() + self.b.numel()
    }
}

/// The frozen fused feature for one pair: run both query encoders and the
/// bidirectional decoder without gradients, pool the video and sentence
/// segments separately with the decoder's pooler, and concatenate.
pub fn qa_features(model: &Model, pair: &VideoSentencePair) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let frozen = ParamMode::Frozen;
    let (hv, _) = encode_video_with_mode(&mut tape, &model.video.query, &pair.frames, &[], frozen)?;
    let framed = frame_tokens(&pair.tokens, &model.sentence.query.tables.specials);
    let (hs, _) = encode_sentence_with_mode(&mut tape, &model.sentence.query, &framed, frozen)?;
    let n_v = pair.frames.dims2().0;
    let fused = cross_modal_decode(&mut tape, &model.decoder, hv, hs, DecodeMode::Bidirectional, frozen)?;
    let (n_total, _) = tape.dims2(fused);
    let video_seg = tape.slice_rows(fused, 0, n_v);
    let sentence_seg = tape.slice_rows(fused, n_v, n_total);
    let pooled_v = attention_pool(&mut tape, video_seg, &vec![true; n_v], &model.decoder.pooler, frozen)?;
    let pooled_s =
        attention_pool(&mut tape, sentence_seg, &vec![true; n_total - n_v], &model.decoder.pooler, frozen)?;
    let mut out = tape.value(pooled_v).to_vec();
    out.extend_from_slice(tape.value(pooled_s));
    Ok(out)
}

/// Host-side head application: logits[j] = x · w[:, j] + b[j].
pub fn qa_logits(head: &QAHeadParams, features: &[f64]) -> Vec<f64> {
    let (two_d, n_a) = head.w.dims2();
    assert_eq!(features.len(), two_d, "feature width mismatch");
    (0..n_a)
        .map(|j| {
            head.b.data[j] + features.iter().enumerate().map(|(i, &x)| x * head.w.data[i * n_a + j]).sum::<f64>()
        })
        .collect()
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

/// Accuracy of a head over precomputed features. Ties in the logits
/// resolve to the lowest answer index.
pub fn qa_accuracy(head: &QAHeadParams, features: &[Vec<f64>], labels: &[usize]) -> f64 {
    let correct = features
        .iter()
        .zip(labels)
        .filter(|(x, &y)| argmax_lowest(&qa_logits(head, x)) == y)
        .count();
    correct as f64 / labels.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QaConfig {
    pub n_answers: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Every holdout-th pair (starting at index 0) is held out for the
    /// accuracy report; the rest train the head.
    pub holdout_every: usize,
    pub seed: u64,
}

impl Default for QaConfig {
    fn default() -> Self {
        QaConfig { n_answers: 8, epochs: 200, lr: 0.5, holdout_every: 5, seed: 17 }
    }
}

impl QaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_answers == 0 {
            return Err(invalid("need at least one answer class"));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs must be at least 1"));
        }
        if !(self.lr > 0.0) {
            return Err(invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.holdout_every < 2 {
            return Err(invalid("holdout_every must be at least 2 so both splits are nonempty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaOutcome {
    pub accuracy: f64,
    pub train_loss_first: f64,
    pub train_loss_final: f64,
    pub n_train: usize,
    pub n_eval: usize,
}

/// Train just the answer head on frozen fused features with full-batch
/// gradient descent and report held-out accuracy. The backbone never
/// updates: the head is the only thing the task adds.
pub fn finetune_qa(
    model: &Model,
    dataset: &[VideoSentencePair],
    cfg: &QaConfig,
) -> Result<(QAHeadParams, QaOutcome)> {
    cfg.validate()?;
    let mut labels = Vec::with_capacity(dataset.len());
    for (i, pair) in dataset.iter().enumerate() {
        let label = pair
            .label
            .ok_or_else(|| invalid(format!("pair {} has no answer label", i)))?;
        if label >= cfg.n_answers {
            return Err(invalid(format!(
                "pair {} has label {} but the head has {} answers",
                i, label, cfg.n_answers
            )));
        }
        labels.push(label);
    }
    let features: Vec<Vec<f64>> =
        dataset.iter().map(|p| qa_features(model, p)).collect::<Result<_>>()?;

    let mut train_x = Vec::new();
    let mut train_y = Vec::new();
    let mut eval_x = Vec::new();
    let mut eval_y = Vec::new();
    for (i, (x, &y)) in features.iter().zip(&labels).enumerate() {
        if i % cfg.holdout_every == 0 {
            eval_x.push(x.clone());
            eval_y.push(y);
        } else {
            train_x.push(x.clone());
            train_y.push(y);
        }
    }
    if train_x.is_empty() || eval_x.is_empty() {
        return Err(invalid(format!(
            "split left {} train and {} eval pairs; need both nonempty",
            train_x.len(),
            eval_x.len()
        )));
    }

    let d = model.config.d;
    let mut rng = sub_rng(cfg.seed, "qa-head");
    let mut head = QAHeadParams::init(d, cfg.n_answers, &mut rng);
    let flat: Vec<f64> = train_x.iter().flatten().copied().collect();
    let n_train = train_x.len();

    let mut first = f64::NAN;
    let mut last = f64::NAN;
    for epoch in 0..cfg.epochs {
        let mut tape = Tape::new();
        let x = tape.input_data(vec![n_train, 2 * d], flat.clone());
        let w = bind(&mut tape, &head.w, ParamMode::Trainable);
        let b = bind(&mut tape, &head.b, ParamMode::Trainable);
        let xw = tape.matmul(x, w);
        let logits = tape.add_row(xw, b);
        let loss = tape.cross_entropy_rows(logits, &train_y);
        let value = tape.scalar_value(loss);
        if epoch == 0 {
            first = value;
        }
        last = value;
        tape.backward(loss)?;
        if let Some(g) = tape.grad_of(&head.w) {
            let g = g.to_vec();
            for (p, gi) in head.w.data.iter_mut().zip(g) {
                *p -= cfg.lr * gi;
            }
        }
        if let Some(g) = tape.grad_of(&head.b) {
            let g = g.to_vec();
            for (p, gi) in head.b.data.iter_mut().zip(g) {
                *p -= cfg.lr * gi;
            }
        }
    }

    let accuracy = qa_accuracy(&head, &eval_x, &eval_y);
    let outcome = QaOutcome {
        accuracy,
        train_loss_first: first,
        train_loss_final: last,
        n_train,
        n_eval: eval_x.len(),
    };
    Ok((head, outcome))
}

// ── Caption quality ─────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionMetrics {
    /// Teacher-forced next-token accuracy over all target positions.
    pub token_accuracy: f64,
    /// exp(mean per-pair generation cross-entropy).
    pub perplexity: f64,
    pub n_pairs: usize,
    pub n_tokens: usize,
}

/// Teacher-forced caption metrics over a held-out set, everything frozen.
pub fn caption_eval(model: &Model, pairs: &[VideoSentencePair]) -> Result<CaptionMetrics> {
    if pairs.is_empty() {
        return Err(invalid("caption evaluation over an empty dataset"));
    }
    let sp = model.sentence.query.tables.specials;
    let mut ce_sum = 0.0;
    let mut correct = 0usize;
    let mut total = 0usize;
    for pair in pairs {
        let mut tape = Tape::new();
        let frozen = ParamMode::Frozen;
        let (hv, _) =
            encode_video_with_mode(&mut tape, &model.video.query, &pair.frames, &[], frozen)?;
        let framed = frame_tokens(&pair.tokens, &sp);
        let (logits, targets) = msg_logits(
            &mut tape,
            &model.decoder,
            &model.sentence.query.tables,
            hv,
            &framed,
            frozen,
        )?;
        let ce = tape.cross_entropy_rows(logits, &targets);
        ce_sum += tape.scalar_value(ce);
        let values = tape.value(logits);
        let vocab = tape.shape(logits)[1];
        for (j, &t) in targets.iter().enumerate() {
            if argmax_lowest(&values[j * vocab..(j + 1) * vocab]) == t {
                correct += 1;
            }
        }
        total += targets.len();
    }
    Ok(CaptionMetrics {
        token_accuracy: correct as f64 / total as f64,
        perplexity: (ce_sum / pairs.len() as f64).exp(),
        n_pairs: pairs.len(),
        n_tokens: total,
    })
}

/// Mean teacher-forced generation loss over a set, for direct comparison
/// with the perplexity report.
pub fn mean_generation_loss(model: &Model, pairs: &[VideoSentencePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(invalid("generation loss over an empty dataset"));
    }
    let sp = model.sentence.query.tables.specials;
    let mut sum = 0.0;
    for pair in pairs {
        let mut tape = Tape::new();
        let frozen = ParamMode::Frozen;
        let (hv, _) =
            encode_video_with_mode(&mut tape, &model.video.query, &pair.frames, &[], frozen)?;
        let framed = frame_tokens(&pair.tokens, &sp);
        let loss = msg_loss(&mut tape, &model.decoder, &model.sentence.query.tables, hv, &framed, frozen)?;
        sum += tape.scalar_value(loss);
    }
    Ok(sum / pairs.len() as f64)
}

// ── Evaluation report records ───────────────────────────────────────────

/// One metric line in an evaluation report file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub seed: u64,
    pub checkpoint: String,
}
