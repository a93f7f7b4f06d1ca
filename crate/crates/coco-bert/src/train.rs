//! Pre-training loop: per-step forward over a masked batch, the summed
//! objective, backward, bias-corrected Adam, the momentum update, and the
//! FIFO memory pushes, in that fixed order. Everything is deterministic
//! given (seed, config, dataset).

use std::io::Write;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{mask_pair, MaskPolicy, MaskedPair, VideoSentencePair};
use crate::decoder::{cross_modal_decode, mlm_loss, msg_loss, pool_fused, DecodeMode};
use crate::encoder::encode_pair;
use crate::error::{invalid, CocoError, Result};
use crate::loss::{cmm_binary_loss, co_id_loss, co_im_loss, CoCoConfig, KeyMemory};
use crate::model::{Model, ModelConfig};
use crate::nn::ParamMode;
use crate::rng::sub_rng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: CoCoConfig,
    pub mask: MaskPolicy,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            loss: CoCoConfig::default(),
            mask: MaskPolicy::default(),
            lr: 1e-3,
            batch_size: 8,
            epochs: 5,
            seed: 17,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        let s = &self.loss.switches;
        if !(s.co_im || s.co_id || s.mlm || s.msg || s.cmm) {
            return Err(invalid("at least one loss term must be enabled"));
        }
        if !(self.lr > 0.0) {
            return Err(invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size < 1 {
            return Err(invalid("batch size must be at least 1"));
        }
        if s.cmm && self.batch_size < 2 {
            return Err(invalid("the binary matching term needs batch size >= 2 for mismatches"));
        }
        // epochs = 0 is legal: it means "initialize and stop", which the
        // pretrain command uses to emit a fresh starting checkpoint.
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(invalid(format!("{} must lie in [0, 1), got {}", name, b)));
            }
        }
        if !(self.eps > 0.0) {
            return Err(invalid("Adam epsilon must be positive"));
        }
        Ok(())
    }
}

// ── Adam ────────────────────────────────────────────────────────────────

/// First/second moment buffers, index-aligned with the model's named
/// trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub names: Vec<String>,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn init_for(model: &Model) -> Self {
        let params = model.named_params();
        AdamState {
            step: 0,
            names: params.iter().map(|(n, _)| n.clone()).collect(),
            m: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            v: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
        }
    }

    pub fn congruent_with(&self, model: &Model) -> Result<()> {
        let params = model.named_params();
        if self.names.len() != params.len() {
            return Err(invalid("optimizer state does not match parameter count"));
        }
        for (i, (name, t)) in params.iter().enumerate() {
            if &self.names[i] != name || self.m[i].len() != t.numel() || self.v[i].len() != t.numel()
            {
                return Err(invalid(format!("optimizer state mismatch at {}", name)));
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam step over index-aligned parameters. `grad_for`
/// returns the gradient of parameter i, or None when the parameter did not
/// participate in this step's graph (treated as zero gradient, so its
/// moments still decay).
pub fn adam_update(
    state: &mut AdamState,
    params: &mut [(String, &mut Tensor)],
    grad_for: impl Fn(usize, &Tensor) -> Option<Vec<f64>>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(invalid("Adam buffers do not match parameter list"));
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - beta1.powf(t);
    let bc2 = 1.0 - beta2.powf(t);
    for (i, (name, tensor)) in params.iter_mut().enumerate() {
        if state.m[i].len() != tensor.numel() {
            return Err(invalid(format!("Adam buffer shape mismatch at {}", name)));
        }
        let grad = grad_for(i, tensor);
        let g: &[f64] = match &grad {
            Some(g) if g.len() == tensor.numel() => g,
            Some(_) => return Err(invalid(format!("gradient shape mismatch at {}", name))),
            None => &[],
        };
        for j in 0..tensor.numel() {
            let gj = g.get(j).copied().unwrap_or(0.0);
            state.m[i][j] = beta1 * state.m[i][j] + (1.0 - beta1) * gj;
            state.v[i][j] = beta2 * state.v[i][j] + (1.0 - beta2) * gj * gj;
            let m_hat = state.m[i][j] / bc1;
            let v_hat = state.v[i][j] / bc2;
            tensor.data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

// ── Step results and metrics ────────────────────────────────────────────

/// Per-term losses of one step; absent terms are None. The total is always
/// the ordered sum of the present terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    pub co_im: Option<f64>,
    pub co_id: Option<f64>,
    pub mlm: Option<f64>,
    pub msg: Option<f64>,
    pub cmm: Option<f64>,
}

/// One JSON-Lines metrics record per training step. Only deterministic
/// quantities belong here: identical seed, config and dataset must replay
/// a bit-identical stream, so wall time stays out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: u64,
    pub loss_total: f64,
    pub loss_co_im: Option<f64>,
    pub loss_co_id: Option<f64>,
    pub loss_mlm: Option<f64>,
    pub loss_msg: Option<f64>,
    pub loss_cmm: Option<f64>,
    pub lr: f64,
}

/// Summary of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps_run: u64,
    pub first_total: f64,
    pub final_total: f64,
    pub epoch_mean_totals: Vec<f64>,
}

// ── Trainer ─────────────────────────────────────────────────────────────

/// All mutable training state: parameters, optimizer, key memories, the
/// masking RNG stream, and the global step counter.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: AdamState,
    pub mem_video: KeyMemory,
    pub mem_sentence: KeyMemory,
    pub rng: ChaCha8Rng,
    pub step: u64,
}

impl Trainer {
    pub fn init(config: TrainConfig) -> Result<Trainer> {
        config.validate()?;
        let mut model_rng = sub_rng(config.seed, "model-init");
        let model = Model::init(config.model, &mut model_rng)?;
        let adam = AdamState::init_for(&model);
        let d = config.model.d;
        let mut mem_rng = sub_rng(config.seed, "memory-init");
        let mem_video = KeyMemory::seeded(config.loss.memory_k, d, &mut mem_rng);
        let mem_sentence = KeyMemory::seeded(config.loss.memory_k, d, &mut mem_rng);
        Ok(Trainer {
            rng: sub_rng(config.seed, "mask-stream"),
            config,
            model,
            adam,
            mem_video,
            mem_sentence,
            step: 0,
        })
    }

    /// Number of full batches per epoch; trailing pairs that do not fill a
    /// batch are skipped so every step sees the same batch size.
    pub fn batches_per_epoch(&self, dataset_len: usize) -> usize {
        dataset_len / self.config.batch_size
    }

    /// One optimization step over an already-masked batch. Effects happen
    /// in a fixed order: forward, loss sum, backward, Adam, momentum
    /// update, memory push.
    pub fn pretrain_step(&mut self, batch: &[MaskedPair]) -> Result<StepLosses> {
        if batch.is_empty() {
            return Err(invalid("empty batch"));
        }
        let switches = self.config.loss.switches;
        if switches.cmm && batch.len() < 2 {
            return Err(invalid("the binary matching term needs at least two pairs"));
        }
        let tau = self.config.loss.tau;
        let mut tape = Tape::new();

        // (1) Encoder forwards: query towers on the tape, key towers off it.
        let mut encoded = Vec::with_capacity(batch.len());
        for p in batch {
            encoded.push(encode_pair(
                &mut tape,
                &self.model.video,
                &self.model.sentence,
                &p.frames,
                &p.frame_mask_positions,
                &p.frames,
                &p.masked_tokens,
                &p.framed_tokens,
            )?);
        }
        let q_v: Vec<Var> = encoded.iter().map(|e| e.video_query).collect();
        let q_s: Vec<Var> = encoded.iter().map(|e| e.sentence_query).collect();
        let k_v: Vec<Tensor> = encoded.iter().map(|e| e.video_key.clone()).collect();
        let k_s: Vec<Tensor> = encoded.iter().map(|e| e.sentence_key.clone()).collect();

        // (2) Enabled terms, each batch-averaged.
        let mut term_vars: Vec<(&'static str, Var)> = Vec::new();
        if switches.co_im {
            let v = co_im_loss(
                &mut tape,
                &q_v,
                &q_s,
                &k_v,
                &k_s,
                &self.mem_video,
                &self.mem_sentence,
                tau,
            )?;
            term_vars.push(("co_im", v));
        }
        if switches.co_id {
            let v = co_id_loss(
                &mut tape,
                &q_v,
                &q_s,
                &k_v,
                &k_s,
                &self.mem_video,
                &self.mem_sentence,
                tau,
            )?;
            term_vars.push(("co_id", v));
        }
        if switches.mlm {
            let mut acc: Option<Var> = None;
            for (e, p) in encoded.iter().zip(batch) {
                let fused = cross_modal_decode(
                    &mut tape,
                    &self.model.decoder,
                    e.video_states,
                    e.sentence_states,
                    DecodeMode::Bidirectional,
                    ParamMode::Trainable,
                )?;
                let n_v = p.frames.dims2().0;
                let n_total = n_v + p.masked_tokens.len();
                let sent = tape.slice_rows(fused, n_v, n_total);
                let l = mlm_loss(
                    &mut tape,
                    &self.model.decoder,
                    sent,
                    &p.token_mask_positions,
                    &p.framed_tokens,
                    ParamMode::Trainable,
                )?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, l),
                    None => l,
                });
            }
            let v = tape.scale(acc.unwrap(), 1.0 / batch.len() as f64);
            term_vars.push(("mlm", v));
        }
        if switches.msg {
            let mut acc: Option<Var> = None;
            for (e, p) in encoded.iter().zip(batch) {
                let l = msg_loss(
                    &mut tape,
                    &self.model.decoder,
                    &self.model.sentence.query.tables,
                    e.video_states,
                    &p.framed_tokens,
                    ParamMode::Trainable,
                )?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, l),
                    None => l,
                });
            }
            let v = tape.scale(acc.unwrap(), 1.0 / batch.len() as f64);
            term_vars.push(("msg", v));
        }
        if switches.cmm {
            // Cyclic-shift mismatches: every pair contributes one matched
            // and one mismatched example, keeping labels balanced.
            let b = batch.len();
            let mut acc: Option<Var> = None;
            for i in 0..b {
                for (partner, matched) in [(i, true), ((i + 1) % b, false)] {
                    let fused = cross_modal_decode(
                        &mut tape,
                        &self.model.decoder,
                        encoded[i].video_states,
                        encoded[partner].sentence_states,
                        DecodeMode::Bidirectional,
                        ParamMode::Trainable,
                    )?;
                    let pooled = pool_fused(&mut tape, &self.model.decoder, fused, ParamMode::Trainable)?;
                    let l = cmm_binary_loss(&mut tape, pooled, &self.model.cmm, matched, ParamMode::Trainable);
                    acc = Some(match acc {
                        Some(a) => tape.add(a, l),
                        None => l,
                    });
                }
            }
            let v = tape.scale(acc.unwrap(), 1.0 / (2 * b) as f64);
            term_vars.push(("cmm", v));
        }

        // (3) Total = ordered sum of present terms; abort on any non-finite
        // term before touching parameters.
        for (name, v) in &term_vars {
            if !tape.scalar_value(*v).is_finite() {
                return Err(CocoError::NonFinite { term: name, step: self.step });
            }
        }
        let mut total_var = term_vars[0].1;
        for (_, v) in &term_vars[1..] {
            total_var = tape.add(total_var, *v);
        }

        self.model.audit_keys_untracked(&tape)?;

        // (4) Backward + Adam over every trainable parameter.
        tape.backward(total_var)?;
        let cfg = self.config.clone();
        {
            let mut params = self.model.named_params_mut();
            adam_update(
                &mut self.adam,
                &mut params,
                |_, t| tape.grad_of(t).map(|g| g.to_vec()),
                cfg.lr,
                cfg.beta1,
                cfg.beta2,
                cfg.eps,
            )?;
        }

        // (5) EMA the key towers, then (6) push this batch's keys.
        self.model.momentum_update()?;
        self.mem_video.push(&k_v)?;
        self.mem_sentence.push(&k_s)?;
        self.step += 1;

        let value = |name: &str| {
            term_vars
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, v)| tape.scalar_value(*v))
        };
        let losses = StepLosses {
            total: term_vars.iter().map(|(_, v)| tape.scalar_value(*v)).sum(),
            co_im: value("co_im"),
            co_id: value("co_id"),
            mlm: value("mlm"),
            msg: value("msg"),
            cmm: value("cmm"),
        };
        Ok(losses)
    }

    /// Mask and train on `n_steps` consecutive batches, resuming from the
    /// current global step. Batch order is sequential and wraps per epoch.
    pub fn train_steps(
        &mut self,
        dataset: &[VideoSentencePair],
        n_steps: u64,
        mut metrics: Option<&mut dyn Write>,
    ) -> Result<Vec<StepLosses>> {
        let n_batches = self.batches_per_epoch(dataset.len());
        if n_batches == 0 {
            return Err(invalid(format!(
                "dataset of {} pairs cannot fill one batch of {}",
                dataset.len(),
                self.config.batch_size
            )));
        }
        let sp = self.model.specials();
        let policy = self.config.mask;
        let mut out = Vec::with_capacity(n_steps as usize);
        for _ in 0..n_steps {
            let step = self.step;
            let b = self.config.batch_size;
            let start = (step as usize % n_batches) * b;
            let mut batch = Vec::with_capacity(b);
            for i in start..start + b {
                batch.push(mask_pair(i, &dataset[i], &policy, &sp, &mut self.rng)?);
            }
            let losses = self.pretrain_step(&batch)?;
            if let Some(w) = metrics.as_deref_mut() {
                let rec = MetricsRecord {
                    step,
                    epoch: step / n_batches as u64,
                    loss_total: losses.total,
                    loss_co_im: losses.co_im,
                    loss_co_id: losses.co_id,
                    loss_mlm: losses.mlm,
                    loss_msg: losses.msg,
                    loss_cmm: losses.cmm,
                    lr: self.config.lr,
                };
                serde_json::to_writer(&mut *w, &rec)?;
                w.write_all(b"\n")?;
            }
            out.push(losses);
        }
        Ok(out)
    }

    /// Full run: `config.epochs` passes over the dataset.
    pub fn train(
        &mut self,
        dataset: &[VideoSentencePair],
        metrics: Option<&mut dyn Write>,
    ) -> Result<TrainReport> {
        let n_batches = self.batches_per_epoch(dataset.len()) as u64;
        if n_batches == 0 {
            return Err(invalid("dataset smaller than one batch"));
        }
        let total = n_batches * self.config.epochs as u64;
        let losses = self.train_steps(dataset, total, metrics)?;
        let epoch_mean_totals: Vec<f64> = losses
            .chunks(n_batches as usize)
            .map(|c| c.iter().map(|l| l.total).sum::<f64>() / c.len() as f64)
            .collect();
        Ok(TrainReport {
            steps_run: total,
            first_total: losses.first().map(|l| l.total).unwrap_or(0.0),
            final_total: losses.last().map(|l| l.total).unwrap_or(0.0),
            epoch_mean_totals,
        })
    }
}
