//! Command surface and experiment orchestration. Every subcommand is a thin
//! wrapper over library calls plus a flat key=value configuration layer, so
//! scripted runs and the examples share one code path.
//!
//! Configuration precedence, lowest to highest: built-in defaults, preset,
//! config file, repeated `--set key=value`, then dedicated flags. Keys the
//! user supplies but no command consumes are an error, never ignored.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_trainer, save_trainer};
use crate::data::{read_dataset, write_dataset, DatasetBounds, MaskPolicy, SyntheticSpec};
use crate::downstream::{
    caption_eval, finetune_qa, finetune_retrieval, zero_shot_retrieval, EvalRecord, QaConfig,
    RetrievalConfig,
};
use crate::error::{invalid, CocoError, Result};
use crate::gradcheck::{run_suite, SuiteOptions};
use crate::loss::{CoCoConfig, LossSwitches};
use crate::model::ModelConfig;
use crate::train::{TrainConfig, Trainer};

// ── Flat config files ───────────────────────────────────────────────────

/// Parse `key = value` lines. Blank lines and `#` comments are skipped;
/// duplicate keys and lines without `=` are errors with their line number.
pub fn parse_flat_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CocoError::Config(format!(
                "line {}: expected key = value, got {:?}",
                idx + 1,
                raw
            )));
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() {
            return Err(CocoError::Config(format!("line {}: empty key", idx + 1)));
        }
        if out.iter().any(|(k, _)| *k == key) {
            return Err(CocoError::Config(format!("line {}: duplicate key {}", idx + 1, key)));
        }
        out.push((key, value));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    /// True when the key came from the user (file, --set, or a flag), so an
    /// unconsumed key is a mistake worth failing on. Built-in defaults a
    /// command never reads are harmless.
    user: bool,
    consumed: bool,
}

/// Layered key=value settings with consumption tracking.
#[derive(Debug, Clone)]
pub struct Settings {
    entries: BTreeMap<String, Entry>,
}

impl Settings {
    pub fn from_layers(
        defaults: &[(&str, String)],
        file: Option<&Path>,
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (k, v) in defaults {
            entries.insert(
                k.to_string(),
                Entry { value: v.clone(), user: false, consumed: false },
            );
        }
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| {
                CocoError::Config(format!("cannot read config {}: {}", path.display(), e))
            })?;
            for (k, v) in parse_flat_config(&text)? {
                entries.insert(k, Entry { value: v, user: true, consumed: false });
            }
        }
        for (k, v) in overrides {
            entries.insert(k.clone(), Entry { value: v.clone(), user: true, consumed: false });
        }
        Ok(Settings { entries })
    }

    fn raw(&mut self, key: &str) -> Result<String> {
        match self.entries.get_mut(key) {
            Some(e) => {
                e.consumed = true;
                Ok(e.value.clone())
            }
            None => Err(CocoError::Config(format!("missing required key {}", key))),
        }
    }

    pub fn get_str(&mut self, key: &str) -> Result<String> {
        self.raw(key)
    }

    pub fn get_opt(&mut self, key: &str) -> Option<String> {
        self.raw(key).ok().filter(|v| !v.is_empty())
    }

    pub fn get_u64(&mut self, key: &str) -> Result<u64> {
        let v = self.raw(key)?;
        v.parse().map_err(|_| CocoError::Config(format!("key {}: {:?} is not an integer", key, v)))
    }

    pub fn get_usize(&mut self, key: &str) -> Result<usize> {
        Ok(self.get_u64(key)? as usize)
    }

    pub fn get_f64(&mut self, key: &str) -> Result<f64> {
        let v = self.raw(key)?;
        v.parse().map_err(|_| CocoError::Config(format!("key {}: {:?} is not a number", key, v)))
    }

    pub fn get_bool(&mut self, key: &str) -> Result<bool> {
        let v = self.raw(key)?;
        match v.as_str() {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            _ => Err(CocoError::Config(format!("key {}: {:?} is not a boolean", key, v))),
        }
    }

    pub fn get_usize_list(&mut self, key: &str) -> Result<Vec<usize>> {
        let v = self.raw(key)?;
        v.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| {
                p.parse::<usize>().map_err(|_| {
                    CocoError::Config(format!("key {}: {:?} is not an integer list", key, v))
                })
            })
            .collect()
    }

    /// Fail on any user-supplied key no command path consumed.
    pub fn finish(&self) -> Result<()> {
        let stray: Vec<&str> = self
            .entries
            .iter()
            .filter(|(_, e)| e.user && !e.consumed)
            .map(|(k, _)| k.as_str())
            .collect();
        if stray.is_empty() {
            Ok(())
        } else {
            Err(CocoError::Config(format!("unknown key(s): {}", stray.join(", "))))
        }
    }
}

// ── Presets ─────────────────────────────────────────────────────────────

fn owned(pairs: &[(&'static str, &str)]) -> Vec<(&'static str, String)> {
    pairs.iter().map(|(k, v)| (*k, v.to_string())).collect()
}

/// Training keys shared by pretrain, the sweeps, and (for re-pretraining)
/// eval. Desk scale: small widths and a short schedule that still learns
/// the planted cross-modal signal.
fn desk_train_defaults() -> Vec<(&'static str, String)> {
    owned(&[
        ("d", "48"),
        ("d_f", "32"),
        ("vocab", "64"),
        ("max_len", "16"),
        ("n_heads", "4"),
        ("k_v", "2"),
        ("k_s", "2"),
        ("k_d", "2"),
        ("momentum", "0.99"),
        ("tau", "0.2"),
        ("memory_k", "1024"),
        ("losses", "co_im,co_id,mlm,msg"),
        ("mask_rate", "0.15"),
        ("force_mask", "true"),
        ("lr", "0.001"),
        ("batch_size", "8"),
        ("epochs", "5"),
        ("seed", "17"),
        ("beta1", "0.9"),
        ("beta2", "0.999"),
        ("eps", "0.00000001"),
        ("max_frames", "12"),
        ("max_words", "10"),
        ("data", ""),
    ])
}

/// Full-scale template: the published operating point (temperature 0.2,
/// memory 8192, three 6-block stacks, 2048-dim frame features). Loadable
/// for inspection; actually training it needs cluster-scale data.
fn paper_train_defaults() -> Vec<(&'static str, String)> {
    let mut base = desk_train_defaults();
    for (k, v) in &mut base {
        let replacement = match *k {
            "d" => Some("768"),
            "d_f" => Some("2048"),
            "vocab" => Some("30522"),
            "max_len" => Some("50"),
            "n_heads" => Some("12"),
            "k_v" | "k_s" | "k_d" => Some("6"),
            "memory_k" => Some("8192"),
            "lr" => Some("0.00003"),
            "batch_size" => Some("512"),
            "epochs" => Some("30"),
            "max_frames" => Some("50"),
            "max_words" => Some("48"),
            _ => None,
        };
        if let Some(r) = replacement {
            *v = r.to_string();
        }
    }
    base
}

fn gen_data_defaults() -> Vec<(&'static str, String)> {
    owned(&[
        ("pairs", "2000"),
        ("concepts", "8"),
        ("d_f", "32"),
        ("vocab", "64"),
        ("min_frames", "4"),
        ("max_frames", "12"),
        ("min_words", "3"),
        ("max_words", "10"),
        ("sigma", "0.1"),
        ("noise_rate", "0.05"),
        ("styles", "8"),
        ("style_strength", "4.0"),
        ("seed", "17"),
        ("file", "dataset.jsonl"),
    ])
}

fn finetune_defaults() -> Vec<(&'static str, String)> {
    owned(&[
        ("task", ""),
        ("checkpoint", ""),
        ("data", ""),
        ("margin", "0.2"),
        ("negatives", "3"),
        ("epochs", "3"),
        ("lr", "0.001"),
        ("n_answers", "8"),
        ("head_epochs", "200"),
        ("head_lr", "0.5"),
        ("holdout_every", "5"),
        ("seed", "17"),
        ("max_frames", "12"),
        ("max_words", "10"),
    ])
}

fn eval_defaults() -> Vec<(&'static str, String)> {
    let mut keys = owned(&[
        ("task", ""),
        ("checkpoint", ""),
        ("ks", "1,5,10"),
        ("n_answers", "8"),
        ("head_epochs", "200"),
        ("head_lr", "0.5"),
        ("holdout_every", "5"),
        ("sweep_seeds", "3"),
        ("train_data", ""),
    ]);
    // Sweeps re-pretrain, so the whole training keyspace is available too.
    keys.extend(desk_train_defaults());
    keys
}

fn gradcheck_defaults() -> Vec<(&'static str, String)> {
    owned(&[("seeds", "20"), ("seed", "0"), ("probe", "false")])
}

fn preset_layers(command: &str, preset: Option<&str>) -> Result<Vec<(&'static str, String)>> {
    match (command, preset) {
        (_, None) => Ok(Vec::new()),
        ("pretrain", Some("desk")) => Ok(Vec::new()), // desk is the built-in default
        ("pretrain", Some("paper")) => Ok(paper_train_defaults()),
        ("pretrain", Some("table2")) => Ok(owned(&[
            ("table2_seeds", "3"),
            ("eval_data", ""),
        ])),
        (_, Some(other)) => Err(CocoError::Config(format!(
            "unknown preset {:?} for {}",
            other, command
        ))),
    }
}

// ── Typed config assembly ───────────────────────────────────────────────

fn build_train_config(s: &mut Settings) -> Result<TrainConfig> {
    let config = TrainConfig {
        model: ModelConfig {
            d: s.get_usize("d")?,
            d_f: s.get_usize("d_f")?,
            vocab: s.get_usize("vocab")?,
            max_len: s.get_usize("max_len")?,
            n_heads: s.get_usize("n_heads")?,
            k_v: s.get_usize("k_v")?,
            k_s: s.get_usize("k_s")?,
            k_d: s.get_usize("k_d")?,
            momentum: s.get_f64("momentum")?,
        },
        loss: CoCoConfig {
            tau: s.get_f64("tau")?,
            memory_k: s.get_usize("memory_k")?,
            switches: LossSwitches::parse(&s.get_str("losses")?)?,
        },
        mask: MaskPolicy {
            rate: s.get_f64("mask_rate")?,
            force_at_least_one: s.get_bool("force_mask")?,
        },
        lr: s.get_f64("lr")?,
        batch_size: s.get_usize("batch_size")?,
        epochs: s.get_usize("epochs")?,
        seed: s.get_u64("seed")?,
        beta1: s.get_f64("beta1")?,
        beta2: s.get_f64("beta2")?,
        eps: s.get_f64("eps")?,
    };
    config.validate()?;
    Ok(config)
}

/// Dataset bounds for commands that load a checkpoint: the model config
/// inside the checkpoint fixes vocab and feature width, settings only
/// supply the length caps.
fn bounds_for_checkpoint(s: &mut Settings, trainer: &Trainer) -> Result<DatasetBounds> {
    Ok(DatasetBounds {
        vocab: trainer.config.model.vocab,
        d_f: trainer.config.model.d_f,
        max_frames: s.get_usize("max_frames")?,
        max_words: s.get_usize("max_words")?,
    })
}

fn required_path(s: &mut Settings, key: &str) -> Result<PathBuf> {
    match s.get_opt(key) {
        Some(v) => Ok(PathBuf::from(v)),
        None => Err(CocoError::Config(format!("key {} must name a file", key))),
    }
}

fn load_pairs(path: &Path, bounds: &DatasetBounds) -> Result<Vec<crate::data::VideoSentencePair>> {
    if !path.exists() {
        return Err(invalid(format!("dataset not found: {}", path.display())));
    }
    read_dataset(path, bounds)
}

/// Eval shares one keyspace across three tasks and the memory sweep. A key
/// another task would read is legitimate even when this task ignores it, so
/// consume the whole known space before the stray-key check.
fn finish_eval(s: &mut Settings) -> Result<()> {
    for (k, _) in eval_defaults() {
        let _ = s.raw(k);
    }
    s.finish()
}

// ── Commands ────────────────────────────────────────────────────────────

pub fn cmd_gen_data(mut s: Settings, out_dir: &Path) -> Result<()> {
    let spec = SyntheticSpec {
        n_pairs: s.get_usize("pairs")?,
        n_concepts: s.get_usize("concepts")?,
        d_f: s.get_usize("d_f")?,
        vocab: s.get_usize("vocab")?,
        min_frames: s.get_usize("min_frames")?,
        max_frames: s.get_usize("max_frames")?,
        min_words: s.get_usize("min_words")?,
        max_words: s.get_usize("max_words")?,
        sigma: s.get_f64("sigma")?,
        noise_rate: s.get_f64("noise_rate")?,
        n_styles: s.get_usize("styles")?,
        style_strength: s.get_f64("style_strength")?,
        seed: s.get_u64("seed")?,
    };
    let file = s.get_str("file")?;
    s.finish()?;
    // Zero pairs is a legal request for an empty dataset file; the
    // generator itself insists on at least one.
    let pairs = if spec.n_pairs == 0 { Vec::new() } else { crate::data::generate_synthetic(&spec)? };
    fs::create_dir_all(out_dir)?;
    let path = out_dir.join(file);
    write_dataset(&path, &pairs)?;
    println!(
        "wrote {} pairs ({} concepts, d_f={}, vocab={}) to {}",
        pairs.len(),
        spec.n_concepts,
        spec.d_f,
        spec.vocab,
        path.display()
    );
    Ok(())
}

fn checkpoint_name(epoch: usize) -> String {
    format!("checkpoint-epoch{}.ckpt", epoch)
}

pub fn cmd_pretrain(mut s: Settings, out_dir: &Path) -> Result<()> {
    let config = build_train_config(&mut s)?;
    let bounds = DatasetBounds {
        vocab: config.model.vocab,
        d_f: config.model.d_f,
        max_frames: s.get_usize("max_frames")?,
        max_words: s.get_usize("max_words")?,
    };
    let data_path = required_path(&mut s, "data")?;
    s.finish()?;
    let dataset = load_pairs(&data_path, &bounds)?;

    let mut trainer = Trainer::init(config.clone())?;
    let n_batches = trainer.batches_per_epoch(dataset.len()) as u64;
    if n_batches == 0 {
        return Err(invalid(format!(
            "dataset of {} pairs is smaller than one batch of {}",
            dataset.len(),
            config.batch_size
        )));
    }
    fs::create_dir_all(out_dir)?;
    save_trainer(&trainer, &out_dir.join(checkpoint_name(0)))?;
    let mut metrics = fs::File::create(out_dir.join("metrics.jsonl"))?;
    for epoch in 1..=config.epochs {
        trainer.train_steps(&dataset, n_batches, Some(&mut metrics))?;
        save_trainer(&trainer, &out_dir.join(checkpoint_name(epoch)))?;
    }
    metrics.flush()?;
    println!(
        "pretrained {} epochs x {} steps ({}) into {}",
        config.epochs,
        n_batches,
        config.loss.switches.describe(),
        out_dir.display()
    );
    Ok(())
}

fn write_records(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn cmd_finetune(mut s: Settings, out_dir: &Path) -> Result<()> {
    let task = s.get_str("task")?;
    let ckpt_path = required_path(&mut s, "checkpoint")?;
    let data_path = required_path(&mut s, "data")?;
    let seed = s.get_u64("seed")?;
    let mut trainer = load_trainer(&ckpt_path)?;
    let bounds = bounds_for_checkpoint(&mut s, &trainer)?;
    let mut records = Vec::new();
    match task.as_str() {
        "retrieval" => {
            let cfg = RetrievalConfig {
                margin: s.get_f64("margin")?,
                negatives_per_anchor: s.get_usize("negatives")?,
                epochs: s.get_usize("epochs")?,
                lr: s.get_f64("lr")?,
            };
            s.finish()?;
            let dataset = load_pairs(&data_path, &bounds)?;
            let curve = finetune_retrieval(&mut trainer.model, &dataset, &cfg)?;
            fs::create_dir_all(out_dir)?;
            let tuned = out_dir.join("finetuned.ckpt");
            save_trainer(&trainer, &tuned)?;
            let metrics = zero_shot_retrieval(&trainer.model, &dataset, &[1])?;
            let ckpt = ckpt_path.display().to_string();
            records.push(EvalRecord {
                task: "retrieval_finetune".into(),
                metric: "triplet_loss_first_epoch".into(),
                value: curve[0],
                n: dataset.len(),
                seed,
                checkpoint: ckpt.clone(),
            });
            records.push(EvalRecord {
                task: "retrieval_finetune".into(),
                metric: "triplet_loss_final_epoch".into(),
                value: *curve.last().unwrap(),
                n: dataset.len(),
                seed,
                checkpoint: ckpt.clone(),
            });
            records.push(EvalRecord {
                task: "retrieval_finetune".into(),
                metric: "train_v2s_r@1".into(),
                value: metrics.video_to_sentence[0],
                n: dataset.len(),
                seed,
                checkpoint: ckpt,
            });
            println!("tuned retrieval: loss {} -> {}", curve[0], curve.last().unwrap());
        }
        "qa" => {
            let cfg = QaConfig {
                n_answers: s.get_usize("n_answers")?,
                epochs: s.get_usize("head_epochs")?,
                lr: s.get_f64("head_lr")?,
                holdout_every: s.get_usize("holdout_every")?,
                seed,
            };
            s.finish()?;
            let dataset = load_pairs(&data_path, &bounds)?;
            let (_, outcome) = finetune_qa(&trainer.model, &dataset, &cfg)?;
            fs::create_dir_all(out_dir)?;
            records.push(EvalRecord {
                task: "qa".into(),
                metric: "held_out_accuracy".into(),
                value: outcome.accuracy,
                n: outcome.n_eval,
                seed,
                checkpoint: ckpt_path.display().to_string(),
            });
            println!("qa head accuracy {} over {} held-out pairs", outcome.accuracy, outcome.n_eval);
        }
        other => return Err(invalid(format!("unknown finetune task {:?}", other))),
    }
    write_records(&out_dir.join("finetune_report.jsonl"), &records)?;
    Ok(())
}

pub fn cmd_eval(mut s: Settings, out_dir: &Path, sweep: Option<&str>) -> Result<()> {
    if let Some(list) = sweep {
        return cmd_eval_sweep(s, out_dir, list);
    }
    let task = s.get_str("task")?;
    let ckpt_path = required_path(&mut s, "checkpoint")?;
    let data_path = required_path(&mut s, "data")?;
    let seed = s.get_u64("seed")?;
    let trainer = load_trainer(&ckpt_path)?;
    let bounds = bounds_for_checkpoint(&mut s, &trainer)?;
    let ckpt = ckpt_path.display().to_string();
    let mut records = Vec::new();
    match task.as_str() {
        "retrieval" => {
            let ks = s.get_usize_list("ks")?;
            finish_eval(&mut s)?;
            let dataset = load_pairs(&data_path, &bounds)?;
            let m = zero_shot_retrieval(&trainer.model, &dataset, &ks)?;
            for (i, &k) in m.ks.iter().enumerate() {
                records.push(EvalRecord {
                    task: "retrieval".into(),
                    metric: format!("v2s_r@{}", k),
                    value: m.video_to_sentence[i],
                    n: m.n,
                    seed,
                    checkpoint: ckpt.clone(),
                });
                records.push(EvalRecord {
                    task: "retrieval".into(),
                    metric: format!("s2v_r@{}", k),
                    value: m.sentence_to_video[i],
                    n: m.n,
                    seed,
                    checkpoint: ckpt.clone(),
                });
            }
        }
        "qa" => {
            let cfg = QaConfig {
                n_answers: s.get_usize("n_answers")?,
                epochs: s.get_usize("head_epochs")?,
                lr: s.get_f64("head_lr")?,
                holdout_every: s.get_usize("holdout_every")?,
                seed,
            };
            finish_eval(&mut s)?;
            let dataset = load_pairs(&data_path, &bounds)?;
            let (_, outcome) = finetune_qa(&trainer.model, &dataset, &cfg)?;
            records.push(EvalRecord {
                task: "qa".into(),
                metric: "held_out_accuracy".into(),
                value: outcome.accuracy,
                n: outcome.n_eval,
                seed,
                checkpoint: ckpt,
            });
        }
        "caption" => {
            finish_eval(&mut s)?;
            let dataset = load_pairs(&data_path, &bounds)?;
            let m = caption_eval(&trainer.model, &dataset)?;
            records.push(EvalRecord {
                task: "caption".into(),
                metric: "perplexity".into(),
                value: m.perplexity,
                n: m.n_pairs,
                seed,
                checkpoint: ckpt.clone(),
            });
            records.push(EvalRecord {
                task: "caption".into(),
                metric: "token_accuracy".into(),
                value: m.token_accuracy,
                n: m.n_tokens,
                seed,
                checkpoint: ckpt,
            });
        }
        other => return Err(invalid(format!("unknown eval task {:?}", other))),
    }
    fs::create_dir_all(out_dir)?;
    write_records(&out_dir.join("eval_report.jsonl"), &records)?;
    for r in &records {
        println!("{} {} = {}", r.task, r.metric, r.value);
    }
    Ok(())
}

// ── Memory sweep ────────────────────────────────────────────────────────

/// One sweep line per memory size: top-1 recall (averaged over both
/// retrieval directions) averaged over the seeds, with the per-seed values
/// kept for inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub memory_k: usize,
    pub r_at_1: f64,
    pub per_seed: Vec<f64>,
}

/// Re-pretrain from scratch at each memory size and score zero-shot top-1
/// retrieval (mean of both directions) on the held-out set, several seeds
/// per size.
pub fn run_memory_sweep(
    base: &TrainConfig,
    train: &[crate::data::VideoSentencePair],
    test: &[crate::data::VideoSentencePair],
    ks: &[usize],
    n_seeds: u64,
) -> Result<Vec<SweepRow>> {
    if ks.is_empty() {
        return Err(invalid("memory sweep needs at least one size"));
    }
    if n_seeds == 0 {
        return Err(invalid("memory sweep needs at least one seed"));
    }
    let mut rows = Vec::new();
    for &k in ks {
        let mut per_seed = Vec::new();
        for offset in 0..n_seeds {
            let mut config = base.clone();
            config.loss.memory_k = k;
            config.seed = base.seed + offset;
            let mut trainer = Trainer::init(config)?;
            trainer.train(train, None)?;
            let m = zero_shot_retrieval(&trainer.model, test, &[1])?;
            per_seed.push(0.5 * (m.video_to_sentence[0] + m.sentence_to_video[0]));
        }
        let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
        rows.push(SweepRow { memory_k: k, r_at_1: mean, per_seed });
    }
    Ok(rows)
}

fn cmd_eval_sweep(mut s: Settings, out_dir: &Path, list: &str) -> Result<()> {
    let ks: Vec<usize> = list
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse::<usize>()
                .map_err(|_| CocoError::Config(format!("bad memory size {:?} in sweep list", p)))
        })
        .collect::<Result<_>>()?;
    let base = build_train_config(&mut s)?;
    let bounds = DatasetBounds {
        vocab: base.model.vocab,
        d_f: base.model.d_f,
        max_frames: s.get_usize("max_frames")?,
        max_words: s.get_usize("max_words")?,
    };
    let train_path = required_path(&mut s, "train_data")?;
    let test_path = required_path(&mut s, "data")?;
    let n_seeds = s.get_u64("sweep_seeds")?;
    finish_eval(&mut s)?;
    let train = load_pairs(&train_path, &bounds)?;
    let test = load_pairs(&test_path, &bounds)?;
    let rows = run_memory_sweep(&base, &train, &test, &ks, n_seeds)?;
    fs::create_dir_all(out_dir)?;
    let mut f = fs::File::create(out_dir.join("memory_sweep.jsonl"))?;
    for r in &rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
        println!("K={} mean r@1={} over {} seed(s)", r.memory_k, r.r_at_1, r.per_seed.len());
    }
    Ok(())
}

// ── Ablation grid ───────────────────────────────────────────────────────

/// The five objective variants of the ablation grid, in report order.
pub fn ablation_variants() -> Vec<(&'static str, LossSwitches)> {
    let base = LossSwitches { co_im: false, co_id: false, mlm: true, msg: true, cmm: false };
    vec![
        ("base", base),
        ("base_cmm", LossSwitches { cmm: true, ..base }),
        ("base_co_im", LossSwitches { co_im: true, ..base }),
        ("base_co_id", LossSwitches { co_id: true, ..base }),
        ("base_co_im_co_id", LossSwitches { co_im: true, co_id: true, ..base }),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Row {
    pub variant: String,
    pub seed: u64,
    /// Top-1 recall averaged over the two retrieval directions.
    pub r_at_1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Report {
    pub rows: Vec<Table2Row>,
    /// Mean of the per-seed `r_at_1` values per variant, in grid order.
    pub means: Vec<(String, f64)>,
}

/// Pre-train every ablation variant over several seeds, each run in its own
/// directory with checkpoints and metrics, then score zero-shot retrieval
/// on the held-out set (top-1 recall averaged over both directions) and
/// aggregate per variant.
pub fn run_table2(
    base: &TrainConfig,
    train: &[crate::data::VideoSentencePair],
    test: &[crate::data::VideoSentencePair],
    seeds: &[u64],
    out_dir: &Path,
) -> Result<Table2Report> {
    if seeds.is_empty() {
        return Err(invalid("ablation grid needs at least one seed"));
    }
    let mut rows = Vec::new();
    let mut means = Vec::new();
    for (name, switches) in ablation_variants() {
        let mut sum = 0.0;
        for &seed in seeds {
            let run_dir = out_dir.join(name).join(format!("seed{}", seed));
            fs::create_dir_all(&run_dir)?;
            let mut config = base.clone();
            config.loss.switches = switches;
            config.seed = seed;
            let mut trainer = Trainer::init(config)?;
            let mut metrics = fs::File::create(run_dir.join("metrics.jsonl"))?;
            trainer.train(train, Some(&mut metrics))?;
            save_trainer(&trainer, &run_dir.join("checkpoint-final.ckpt"))?;
            let m = zero_shot_retrieval(&trainer.model, test, &[1])?;
            let r1 = 0.5 * (m.video_to_sentence[0] + m.sentence_to_video[0]);
            sum += r1;
            rows.push(Table2Row { variant: name.to_string(), seed, r_at_1: r1 });
        }
        means.push((name.to_string(), sum / seeds.len() as f64));
    }
    let report = Table2Report { rows, means };
    fs::create_dir_all(out_dir)?;
    let json = serde_json::to_string_pretty(&report)?;
    fs::write(out_dir.join("report.json"), json)?;
    Ok(report)
}

fn cmd_pretrain_table2(mut s: Settings, out_dir: &Path) -> Result<()> {
    let base = build_train_config(&mut s)?;
    let bounds = DatasetBounds {
        vocab: base.model.vocab,
        d_f: base.model.d_f,
        max_frames: s.get_usize("max_frames")?,
        max_words: s.get_usize("max_words")?,
    };
    let train_path = required_path(&mut s, "data")?;
    let test_path = required_path(&mut s, "eval_data")?;
    let n_seeds = s.get_u64("table2_seeds")?;
    s.finish()?;
    if n_seeds == 0 {
        return Err(invalid("table2_seeds must be at least 1"));
    }
    let train = load_pairs(&train_path, &bounds)?;
    let test = load_pairs(&test_path, &bounds)?;
    let seeds: Vec<u64> = (0..n_seeds).map(|i| base.seed + i).collect();
    let report = run_table2(&base, &train, &test, &seeds, out_dir)?;
    for (name, mean) in &report.means {
        println!("{:<20} mean r@1 = {}", name, mean);
    }
    Ok(())
}

pub fn cmd_gradcheck(mut s: Settings) -> Result<bool> {
    let options = SuiteOptions {
        seeds: s.get_usize("seeds")?,
        include_failure_probe: s.get_bool("probe")?,
        seed_base: s.get_u64("seed")?,
        ..Default::default()
    };
    s.finish()?;
    let report = run_suite(&options)?;
    print!("{}", report.render());
    Ok(report.all_passed())
}

// ── Argument parsing and dispatch ───────────────────────────────────────

/// Parse the parallelism cap from an environment value. Everything here is
/// single-threaded, so the cap only needs to be validated and respected as
/// an upper bound of one.
pub fn parse_num_threads(value: Option<String>) -> Result<usize> {
    match value {
        None => Ok(1),
        Some(v) => match v.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CocoError::Config(format!(
                "COCO_NUM_THREADS must be a positive integer, got {:?}",
                v
            ))),
        },
    }
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, may repeat: --set lr=0.001
    #[arg(long = "set")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the seed key.
    #[arg(long)]
    seed: Option<u64>,
    /// Named defaults bundle.
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    concepts: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated memory sizes: re-pretrain at each and tabulate.
    #[arg(long = "sweep-memory")]
    sweep_memory: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic planted-correlation dataset.
    GenData(GenDataArgs),
    /// Run the pre-training loop, checkpointing each epoch.
    Pretrain(CommonArgs),
    /// Tune a checkpoint for retrieval or answer classification.
    Finetune(CommonArgs),
    /// Score a checkpoint on retrieval, qa, or caption.
    Eval(EvalArgs),
    /// Verify every differentiable component against finite differences.
    Gradcheck(CommonArgs),
}

#[derive(Debug, Parser)]
#[command(name = "coco", about = "Contrastive video-language pre-training at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn parse_overrides(common: &CommonArgs) -> Result<Vec<(String, String)>> {
    let mut overrides = Vec::new();
    if let Some(seed) = common.seed {
        overrides.push(("seed".to_string(), seed.to_string()));
    }
    for raw in &common.set {
        let Some((k, v)) = raw.split_once('=') else {
            return Err(CocoError::Config(format!("--set expects key=value, got {:?}", raw)));
        };
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(overrides)
}

fn settings_for(command: &str, common: &CommonArgs) -> Result<Settings> {
    let mut defaults = match command {
        "gen-data" => gen_data_defaults(),
        "pretrain" => desk_train_defaults(),
        "finetune" => finetune_defaults(),
        "eval" => eval_defaults(),
        "gradcheck" => gradcheck_defaults(),
        other => return Err(invalid(format!("no defaults for {}", other))),
    };
    defaults.extend(preset_layers(command, common.preset.as_deref())?);
    let overrides = parse_overrides(common)?;
    Settings::from_layers(&defaults, common.config.as_deref(), &overrides)
}

fn dispatch(cli: Cli) -> Result<bool> {
    let _threads = parse_num_threads(std::env::var("COCO_NUM_THREADS").ok())?;
    match cli.command {
        Command::GenData(args) => {
            let mut overrides = Vec::new();
            if let Some(p) = args.pairs {
                overrides.push(("pairs".to_string(), p.to_string()));
            }
            if let Some(c) = args.concepts {
                overrides.push(("concepts".to_string(), c.to_string()));
            }
            let mut defaults = gen_data_defaults();
            defaults.extend(preset_layers("gen-data", args.common.preset.as_deref())?);
            let mut all = parse_overrides(&args.common)?;
            all.extend(overrides);
            let s = Settings::from_layers(&defaults, args.common.config.as_deref(), &all)?;
            cmd_gen_data(s, &args.common.out)?;
            Ok(true)
        }
        Command::Pretrain(common) => {
            let s = settings_for("pretrain", &common)?;
            if common.preset.as_deref() == Some("table2") {
                cmd_pretrain_table2(s, &common.out)?;
            } else {
                cmd_pretrain(s, &common.out)?;
            }
            Ok(true)
        }
        Command::Finetune(common) => {
            let s = settings_for("finetune", &common)?;
            cmd_finetune(s, &common.out)?;
            Ok(true)
        }
        Command::Eval(args) => {
            let s = settings_for("eval", &args.common)?;
            cmd_eval(s, &args.common.out, args.sweep_memory.as_deref())?;
            Ok(true)
        }
        Command::Gradcheck(common) => {
            let s = settings_for("gradcheck", &common)?;
            cmd_gradcheck(s)
        }
    }
}

/// Entry point shared by the binary and the tests: parse, dispatch, map
/// every failure to a nonzero exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    match dispatch(cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {}", e);
            1
        }
    }
}
