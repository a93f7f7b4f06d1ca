//! Acceptance gate: eleven numbered end-to-end checks, one test each,
//! every test printing a single `criterion N PASS/FAIL` line (visible with
//! `cargo test --test acceptance -- --nocapture`). Tolerances and scales
//! are pinned as constants below; a FAIL line is always also a test
//! failure, never a warning.

use std::io::Write as _;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use coco_bert::checkpoint::{load_trainer, save_trainer};
use coco_bert::cli;
use coco_bert::data::{
    frame_tokens, generate_synthetic, mask_tokens, write_dataset, MaskPolicy, SyntheticSpec,
    VideoSentencePair,
};
use coco_bert::downstream::{caption_eval, finetune_qa, mean_generation_loss, zero_shot_retrieval, QaConfig};
use coco_bert::encoder::{EncoderPair, EncoderParams};
use coco_bert::loss::{co_im_loss, info_nce, KeyMemory, LossSwitches};
use coco_bert::nn::SpecialTokens;
use coco_bert::rng::sub_rng;
use coco_bert::train::{TrainConfig, Trainer};
use coco_bert::{Tape, Tensor};

// ── Pinned tolerances and scales ────────────────────────────────────────

const GRAD_TOLERANCE: f64 = 1e-5;
const GRAD_SEEDS: usize = 20;
const GRAD_TIME_LIMIT_S: f64 = 120.0;

const ORACLE_CASES: usize = 1000;
const ORACLE_TAUS: [f64; 3] = [0.07, 0.2, 1.0];
const ORACLE_MAX_NEGATIVES: usize = 64;
const ORACLE_TOL: f64 = 1e-10;

const SPOT_TOL: f64 = 1e-9;

const QUEUE_PUSHES: usize = 10_000;

const MASK_RATE: f64 = 0.15;
const MASK_MIN_POSITIONS: usize = 100_000;
const SPECIAL_TRIALS: usize = 1_000_000;

const ADDITIVITY_TOL: f64 = 1e-12;

const LEARN_TRAIN: usize = 2000;
const LEARN_TEST: usize = 200;
const LEARN_CONCEPTS: usize = 8;
const LEARN_MEMORY: usize = 1024;
const LEARN_TAU: f64 = 0.2;
const LEARN_MOMENTUM: f64 = 0.99;
const LEARN_EPOCHS: usize = 24; // within the allowed 30; past the r@1 knee
const LEARN_R1_FLOOR: f64 = 0.20;
const LEARN_TIME_LIMIT_S: f64 = 900.0;

const ABLATION_SEEDS: [u64; 3] = [31, 32, 33];
const SWEEP_SIZES: [usize; 3] = [64, 256, 1024];
const SWEEP_SLACK: f64 = 0.02; // two points of R@1

const QA_SEEDS: [u64; 3] = [40, 41, 42];
const QA_ACCURACY_FLOOR: f64 = 0.80;
const QA_CLASSES: usize = 8;
const PPL_IDENTITY_TOL: f64 = 1e-10;

fn verdict(n: u32, ok: bool, detail: &str) {
    println!("criterion {:>2} {}  {}", n, if ok { "PASS" } else { "FAIL" }, detail);
    assert!(ok, "criterion {} failed: {}", n, detail);
}

/// One generation, one split: held-out pairs share the planted concept
/// geometry with the training pairs.
fn split(spec: &SyntheticSpec, n_test: usize) -> (Vec<VideoSentencePair>, Vec<VideoSentencePair>) {
    let mut all = generate_synthetic(spec).expect("synthetic generation");
    assert!(n_test < all.len());
    let test = all.split_off(all.len() - n_test);
    (all, test)
}

fn desk_config() -> TrainConfig {
    let mut config = TrainConfig::default();
    config.loss.memory_k = LEARN_MEMORY;
    config.loss.tau = LEARN_TAU;
    config.model.momentum = LEARN_MOMENTUM;
    config
}

// ── 1: gradient suite ───────────────────────────────────────────────────

#[test]
fn c01_gradient_suite_all_components_within_tolerance() {
    let options = coco_bert::gradcheck::SuiteOptions {
        seeds: GRAD_SEEDS,
        tolerance: GRAD_TOLERANCE,
        ..Default::default()
    };
    let t0 = Instant::now();
    let report = coco_bert::gradcheck::run_suite(&options).expect("suite runs");
    let elapsed = t0.elapsed().as_secs_f64();
    print!("{}", report.render());

    let names: Vec<&str> = report.components.iter().map(|c| c.name).collect();
    for required in [
        "info_nce",
        "co_im_composite",
        "co_id_composite",
        "mlm_head",
        "msg_head",
        "transformer_block",
        "attention_pooler",
    ] {
        assert!(names.contains(&required), "suite is missing the {} component", required);
    }
    let worst = report
        .components
        .iter()
        .map(|c| c.max_error)
        .fold(0.0f64, f64::max);
    let ok = report.all_passed() && elapsed < GRAD_TIME_LIMIT_S;
    verdict(
        1,
        ok,
        &format!(
            "{} components x {} seeds, worst rel err {:.3e} (tol {:.0e}), {:.1}s",
            names.len(),
            GRAD_SEEDS,
            worst,
            GRAD_TOLERANCE,
            elapsed
        ),
    );
}

// ── 2: brute-force contrastive oracle ───────────────────────────────────

/// Independent (K+1)-way softmax cross-entropy over cosine logits, written
/// against no library code beyond std.
fn brute_force_nce(q: &[f64], k_pos: &[f64], negatives: &[Vec<f64>], tau: f64) -> f64 {
    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }
    let qn = unit(q);
    let mut logits = Vec::with_capacity(1 + negatives.len());
    for k in std::iter::once(&k_pos.to_vec()).chain(negatives.iter()) {
        let kn = unit(k);
        let dot: f64 = qn.iter().zip(&kn).map(|(a, b)| a * b).sum();
        logits.push(dot / tau);
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    lse - logits[0]
}

#[test]
fn c02_contrastive_loss_matches_brute_force_oracle() {
    let mut rng = sub_rng(2, "acceptance-oracle");
    let mut worst = 0.0f64;
    for case in 0..ORACLE_CASES {
        let d = rng.gen_range(3..=16);
        let tau = ORACLE_TAUS[case % ORACLE_TAUS.len()];
        let sample = |rng: &mut _| -> Vec<f64> {
            (0..d).map(|_| StandardNormal.sample(rng)).collect()
        };
        let q = sample(&mut rng);
        let k_pos = sample(&mut rng);
        let n_neg = rng.gen_range(0..=ORACLE_MAX_NEGATIVES);
        let negatives: Vec<Vec<f64>> = (0..n_neg).map(|_| sample(&mut rng)).collect();

        let mut tape = Tape::new();
        let qv = tape.leaf(vec![1, d], q.clone());
        let neg_refs: Vec<&[f64]> = negatives.iter().map(|v| v.as_slice()).collect();
        let loss = info_nce(&mut tape, qv, &k_pos, &neg_refs, tau).expect("info_nce");
        let got = tape.scalar_value(loss);
        let want = brute_force_nce(&q, &k_pos, &negatives, tau);
        worst = worst.max((got - want).abs());
    }

    // Keys enter as plain constants: after backward, nothing but the query
    // holds a gradient, so every key gradient is exactly zero.
    let mut rng = sub_rng(3, "acceptance-oracle-grads");
    let d = 6;
    let b = 3;
    let mut tape = Tape::new();
    let q_v: Vec<_> = (0..b)
        .map(|_| {
            let row: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            tape.leaf(vec![1, d], row)
        })
        .collect();
    let q_s: Vec<_> = (0..b)
        .map(|_| {
            let row: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            tape.leaf(vec![1, d], row)
        })
        .collect();
    let unit_key = |rng: &mut _| {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut v {
            *x /= n;
        }
        Tensor::new(vec![1, d], v)
    };
    let k_v: Vec<Tensor> = (0..b).map(|_| unit_key(&mut rng)).collect();
    let k_s: Vec<Tensor> = (0..b).map(|_| unit_key(&mut rng)).collect();
    let mem_v = KeyMemory::seeded(8, d, &mut rng);
    let mem_s = KeyMemory::seeded(8, d, &mut rng);
    let loss = co_im_loss(&mut tape, &q_v, &q_s, &k_v, &k_s, &mem_v, &mem_s, 0.2).expect("co_im");
    tape.backward(loss).expect("backward");
    let mut key_grads_zero = true;
    for k in k_v.iter().chain(k_s.iter()) {
        key_grads_zero &= tape.grad_of(k).is_none();
    }
    let query_grads_live = q_v.iter().all(|&q| tape.grad(q).iter().any(|g| *g != 0.0));

    let ok = worst <= ORACLE_TOL && key_grads_zero && query_grads_live;
    verdict(
        2,
        ok,
        &format!(
            "{} random cases worst |Δ| {:.3e} (tol {:.0e}); key grads absent: {}",
            ORACLE_CASES, worst, ORACLE_TOL, key_grads_zero
        ),
    );
}

// ── 3: closed-form spot values ──────────────────────────────────────────

#[test]
fn c03_contrastive_loss_closed_form_spot_values() {
    let eval = |q: Vec<f64>, k_pos: Vec<f64>, negs: Vec<Vec<f64>>, tau: f64| -> f64 {
        let mut tape = Tape::new();
        let d = q.len();
        let qv = tape.leaf(vec![1, d], q);
        let refs: Vec<&[f64]> = negs.iter().map(|v| v.as_slice()).collect();
        let loss = info_nce(&mut tape, qv, &k_pos, &refs, tau).expect("info_nce");
        tape.scalar_value(loss)
    };

    // No negatives: certainty, zero loss at any temperature.
    let no_neg = eval(vec![0.3, -0.4], vec![0.6, 0.8], vec![], 0.07);
    let no_neg_ok = no_neg == 0.0;

    // One negative with the same similarity as the positive: ln 2 at any τ.
    let mut ln2_worst = 0.0f64;
    for tau in ORACLE_TAUS {
        let v = eval(vec![1.0, 0.0], vec![0.0, 1.0], vec![vec![0.0, -1.0]], tau);
        ln2_worst = ln2_worst.max((v - std::f64::consts::LN_2).abs());
    }

    // q = k⁺ with one orthogonal negative at τ = 0.2: logits (5, 0).
    let aligned = eval(vec![1.0, 0.0], vec![1.0, 0.0], vec![vec![0.0, 1.0]], 0.2);
    let expected = (1.0 + (-5.0f64).exp()).ln();
    let aligned_err = (aligned - expected).abs();

    let ok = no_neg_ok && ln2_worst <= 1e-12 && aligned_err <= SPOT_TOL;
    verdict(
        3,
        ok,
        &format!(
            "no-neg {} (want 0), ln2 worst {:.2e}, ln(1+e^-5) err {:.2e} (tol {:.0e})",
            no_neg, ln2_worst, aligned_err, SPOT_TOL
        ),
    );
}

// ── 4: momentum and queue semantics ─────────────────────────────────────

struct RingSim {
    dim: usize,
    slots: Vec<Vec<f64>>,
    cursor: usize,
    fill: usize,
}

impl RingSim {
    fn new(capacity: usize, dim: usize) -> Self {
        RingSim { dim, slots: vec![vec![0.0; dim]; capacity], cursor: 0, fill: 0 }
    }
    fn push(&mut self, keys: &[Vec<f64>]) {
        for k in keys {
            assert_eq!(k.len(), self.dim);
            self.slots[self.cursor] = k.clone();
            self.cursor = (self.cursor + 1) % self.slots.len();
            self.fill = (self.fill + 1).min(self.slots.len());
        }
    }
    fn entries(&self) -> Vec<&[f64]> {
        (0..self.fill).map(|i| self.slots[i].as_slice()).collect()
    }
}

#[test]
fn c04_momentum_and_queue_semantics_match_reference() {
    // EMA spot cases, elementwise exact.
    let mut rng = sub_rng(4, "acceptance-ema");
    let mut ema_exact = true;
    for m in [0.0, 0.99, 1.0] {
        let params = EncoderParams::init(10, 6, 4, 8, 1, 2, &mut rng);
        let mut pair = EncoderPair::init(params, m).expect("pair");
        for (_, t) in pair.query.named_tensors_mut() {
            for x in t.data.iter_mut() {
                *x = StandardNormal.sample(&mut rng);
            }
        }
        let k_before: Vec<Vec<f64>> =
            pair.key.named_tensors().iter().map(|(_, t)| t.data.clone()).collect();
        pair.momentum_update().expect("update");
        let q_after: Vec<Vec<f64>> =
            pair.query.named_tensors().iter().map(|(_, t)| t.data.clone()).collect();
        for (((_, kt), k0), q) in
            pair.key.named_tensors().iter().zip(&k_before).zip(&q_after)
        {
            for ((kv, k0v), qv) in kt.data.iter().zip(k0).zip(q) {
                ema_exact &= kv.to_bits() == (m * k0v + (1.0 - m) * qv).to_bits();
            }
        }
    }

    // FIFO ring against an independent simulation, 10^4 random pushes
    // spread over assorted capacities and batch sizes.
    let mut rng = sub_rng(5, "acceptance-ring");
    let dim = 4;
    let mut pushes_done = 0usize;
    let mut ring_ok = true;
    let caps = [1usize, 2, 3, 5, 8, 16, 33];
    'outer: loop {
        for &cap in &caps {
            let mut mem = KeyMemory::empty(cap, dim);
            let mut sim = RingSim::new(cap, dim);
            for _ in 0..200 {
                let batch = rng.gen_range(1..=4);
                let keys: Vec<Vec<f64>> = (0..batch)
                    .map(|_| {
                        let mut v: Vec<f64> =
                            (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                        for x in &mut v {
                            *x /= n;
                        }
                        v
                    })
                    .collect();
                let tensors: Vec<Tensor> =
                    keys.iter().map(|k| Tensor::new(vec![1, dim], k.clone())).collect();
                mem.push(&tensors).expect("push");
                sim.push(&keys);
                let got: Vec<&[f64]> = mem.entries().collect();
                ring_ok &= got == sim.entries();
                pushes_done += 1;
                if pushes_done >= QUEUE_PUSHES {
                    break 'outer;
                }
            }
        }
    }

    let ok = ema_exact && ring_ok;
    verdict(
        4,
        ok,
        &format!(
            "EMA m∈{{0, 0.99, 1}} exact: {}; ring matches simulation over {} pushes: {}",
            ema_exact, pushes_done, ring_ok
        ),
    );
}

// ── 5: masking statistics ───────────────────────────────────────────────

#[test]
fn c05_masking_statistics() {
    let sp = SpecialTokens::default();
    let policy = MaskPolicy { rate: MASK_RATE, force_at_least_one: false };
    let mut rng = sub_rng(6, "acceptance-mask-rate");

    // Empirical rate over at least 10^5 maskable positions, forced rule off.
    let body_len = 20;
    let body: Vec<usize> = (0..body_len).map(|i| sp.body_start() + (i % 10)).collect();
    let framed = frame_tokens(&body, &sp);
    let mut masked_count = 0usize;
    let mut positions = 0usize;
    while positions < MASK_MIN_POSITIONS {
        let (_, hit) = mask_tokens(&framed, &policy, &sp, &mut rng).expect("mask");
        masked_count += hit.len();
        positions += body_len;
    }
    let rate = masked_count as f64 / positions as f64;
    let z = 2.576; // 99% two-sided normal quantile
    let half_width = z * (MASK_RATE * (1.0 - MASK_RATE) / positions as f64).sqrt();
    let rate_ok = (rate - MASK_RATE).abs() <= half_width;

    // Specials stay unmasked across 10^6 special-position exposures.
    let mut rng = sub_rng(7, "acceptance-mask-specials");
    let short_body: Vec<usize> = vec![sp.body_start(); 4];
    let short = frame_tokens(&short_body, &sp); // CLS + 4 + SEP
    let specials_per_seq = 2;
    let mut special_trials = 0usize;
    let mut special_hit = false;
    while special_trials < SPECIAL_TRIALS {
        let (masked, hit) = mask_tokens(&short, &policy, &sp, &mut rng).expect("mask");
        special_hit |= masked[0] != sp.cls || *masked.last().unwrap() != sp.sep;
        special_hit |= hit.iter().any(|&p| p == 0 || p == short.len() - 1);
        special_trials += specials_per_seq;
    }

    let ok = rate_ok && !special_hit;
    verdict(
        5,
        ok,
        &format!(
            "rate {:.4} over {} positions (99% interval ±{:.4} around {}); specials masked: {}",
            rate, positions, half_width, MASK_RATE, special_hit
        ),
    );
}

// ── 6: additivity of the total objective, frozen keys ───────────────────

fn tiny_train_config(switches: LossSwitches) -> TrainConfig {
    let mut config = TrainConfig::default();
    config.model.d = 8;
    config.model.d_f = 4;
    config.model.vocab = 16;
    config.model.max_len = 10;
    config.model.n_heads = 2;
    config.model.k_v = 1;
    config.model.k_s = 1;
    config.model.k_d = 1;
    config.loss.memory_k = 6;
    config.loss.switches = switches;
    config.batch_size = 4;
    config.epochs = 1;
    config.seed = 23;
    config
}

fn tiny_dataset() -> Vec<VideoSentencePair> {
    let spec = SyntheticSpec {
        n_pairs: 8,
        n_concepts: 3,
        d_f: 4,
        vocab: 16,
        min_frames: 2,
        max_frames: 4,
        min_words: 2,
        max_words: 5,
        noise_rate: 0.0,
        n_styles: 1,
        seed: 23,
        ..SyntheticSpec::default()
    };
    generate_synthetic(&spec).expect("tiny dataset")
}

#[test]
fn c06_total_loss_additivity_and_frozen_keys() {
    let data = tiny_dataset();

    // Reference per-term values from the all-on run. Identical seed and
    // mask stream mean each term reproduces bitwise in any subset run.
    let all_on = LossSwitches { co_im: true, co_id: true, mlm: true, msg: true, cmm: true };
    let mut reference = Trainer::init(tiny_train_config(all_on)).expect("init");
    let ref_losses = &reference.train_steps(&data, 1, None).expect("step")[0];
    let term = |name: &str| -> f64 {
        match name {
            "co_im" => ref_losses.co_im.unwrap(),
            "co_id" => ref_losses.co_id.unwrap(),
            "mlm" => ref_losses.mlm.unwrap(),
            "msg" => ref_losses.msg.unwrap(),
            "cmm" => ref_losses.cmm.unwrap(),
            _ => unreachable!(),
        }
    };

    let mut worst = 0.0f64;
    let mut combos = 0;
    for bits in 1u32..32 {
        let switches = LossSwitches {
            co_im: bits & 1 != 0,
            co_id: bits & 2 != 0,
            mlm: bits & 4 != 0,
            msg: bits & 8 != 0,
            cmm: bits & 16 != 0,
        };
        let mut t = Trainer::init(tiny_train_config(switches)).expect("init");
        let losses = &t.train_steps(&data, 1, None).expect("step")[0];
        let mut expected = 0.0;
        for (on, name) in [
            (switches.co_im, "co_im"),
            (switches.co_id, "co_id"),
            (switches.mlm, "mlm"),
            (switches.msg, "msg"),
            (switches.cmm, "cmm"),
        ] {
            if on {
                expected += term(name);
            }
        }
        worst = worst.max((losses.total - expected).abs());
        combos += 1;
    }

    // Key towers move only by the EMA formula; one more step verifies the
    // elementwise identity key' = m*key + (1-m)*query' around the update.
    let mut t = Trainer::init(tiny_train_config(all_on)).expect("init");
    t.train_steps(&data, 1, None).expect("warmup");
    let m = t.config.model.momentum;
    let keys_before: Vec<Vec<f64>> = [&t.model.video, &t.model.sentence]
        .iter()
        .flat_map(|p| p.key.named_tensors().into_iter().map(|(_, x)| x.data.clone()))
        .collect();
    let mem_before: Vec<Vec<f64>> =
        t.mem_video.entries().chain(t.mem_sentence.entries()).map(|e| e.to_vec()).collect();
    t.train_steps(&data, 1, None).expect("step");
    let queries_after: Vec<Vec<f64>> = [&t.model.video, &t.model.sentence]
        .iter()
        .flat_map(|p| p.query.named_tensors().into_iter().map(|(_, x)| x.data.clone()))
        .collect();
    let keys_after: Vec<Vec<f64>> = [&t.model.video, &t.model.sentence]
        .iter()
        .flat_map(|p| p.key.named_tensors().into_iter().map(|(_, x)| x.data.clone()))
        .collect();
    let mut ema_only = true;
    for ((k1, k0), q1) in keys_after.iter().zip(&keys_before).zip(&queries_after) {
        for ((a, b), c) in k1.iter().zip(k0).zip(q1) {
            ema_only &= a.to_bits() == (m * b + (1.0 - m) * c).to_bits();
        }
    }
    // Memory changed only by the enqueue of this batch's keys: exactly
    // batch_size slots per modality differ.
    let mem_after: Vec<Vec<f64>> =
        t.mem_video.entries().chain(t.mem_sentence.entries()).map(|e| e.to_vec()).collect();
    let changed = mem_before.iter().zip(&mem_after).filter(|(a, b)| a != b).count();
    let mem_ok = changed == 2 * t.config.batch_size;

    let ok = worst <= ADDITIVITY_TOL && ema_only && mem_ok;
    verdict(
        6,
        ok,
        &format!(
            "{} switch combinations, worst |total - Σ terms| {:.2e} (tol {:.0e}); keys EMA-only: {}; memory slots touched: {}",
            combos, worst, ADDITIVITY_TOL, ema_only, mem_ok
        ),
    );
}

// ── 7: learnability at desk scale ───────────────────────────────────────

#[test]
fn c07_pretraining_learns_zero_shot_retrieval() {
    let spec = SyntheticSpec {
        n_pairs: LEARN_TRAIN + LEARN_TEST,
        n_concepts: LEARN_CONCEPTS,
        seed: 17,
        ..SyntheticSpec::default()
    };
    let (train, test) = split(&spec, LEARN_TEST);

    let mut config = desk_config();
    config.loss.switches = LossSwitches { co_im: true, co_id: true, mlm: true, msg: true, cmm: false };
    config.epochs = LEARN_EPOCHS;
    config.seed = 17;
    config.validate().expect("config");

    let t0 = Instant::now();
    let mut trainer = Trainer::init(config).expect("init");
    let report = trainer.train(&train, None).expect("train");
    let metrics = zero_shot_retrieval(&trainer.model, &test, &[1, 5, 10]).expect("eval");
    let elapsed = t0.elapsed().as_secs_f64();

    let v2s = metrics.video_to_sentence[0];
    let s2v = metrics.sentence_to_video[0];
    let chance = 1.0 / LEARN_TEST as f64;
    let ok = v2s >= LEARN_R1_FLOOR && s2v >= LEARN_R1_FLOOR && elapsed < LEARN_TIME_LIMIT_S;
    verdict(
        7,
        ok,
        &format!(
            "r@1 {:.3}/{:.3} (video->sentence/sentence->video, floor {}, chance {:.3}), loss {:.2}->{:.2}, {:.0}s of {:.0}s budget",
            v2s, s2v, LEARN_R1_FLOOR, chance, report.first_total, report.final_total, elapsed, LEARN_TIME_LIMIT_S
        ),
    );
}

// ── 8: objective ablation ordering ──────────────────────────────────────

#[test]
fn c08_objective_ablation_ordering() {
    let spec = SyntheticSpec { n_pairs: 1100, n_concepts: 8, seed: 29, ..SyntheticSpec::default() };
    let (train, test) = split(&spec, 300);

    let mut base = desk_config();
    base.loss.memory_k = 256;
    base.epochs = 10;
    base.validate().expect("config");

    let dir = tempfile::tempdir().expect("tempdir");
    let report = cli::run_table2(&base, &train, &test, &ABLATION_SEEDS, dir.path()).expect("grid");
    let mean = |name: &str| -> f64 {
        report.means.iter().find(|(n, _)| n == name).map(|(_, v)| *v).expect("variant present")
    };
    let (b, cmm, im, id, both) = (
        mean("base"),
        mean("base_cmm"),
        mean("base_co_im"),
        mean("base_co_id"),
        mean("base_co_im_co_id"),
    );
    let ok = both >= im && im >= b && both >= cmm;
    verdict(
        8,
        ok,
        &format!(
            "mean r@1 (both directions) over {} seeds: base {:.3}, +cmm {:.3}, +co_im {:.3}, +co_id {:.3}, +both {:.3}; need both>=co_im>=base and both>=cmm",
            ABLATION_SEEDS.len(),
            b,
            cmm,
            im,
            id,
            both
        ),
    );
}

// ── 9: memory sweep through the command line ────────────────────────────

#[test]
fn c09_memory_size_sweep() {
    let spec = SyntheticSpec { n_pairs: 300, n_concepts: 8, seed: 37, ..SyntheticSpec::default() };
    let (train, test) = split(&spec, 100);
    let dir = tempfile::tempdir().expect("tempdir");
    let train_path = dir.path().join("train.jsonl");
    let test_path = dir.path().join("test.jsonl");
    write_dataset(&train_path, &train).expect("write train");
    write_dataset(&test_path, &test).expect("write test");
    let out = dir.path().join("sweep");

    let sizes = format!("{},{},{}", SWEEP_SIZES[0], SWEEP_SIZES[1], SWEEP_SIZES[2]);
    let code = cli::run([
        "coco",
        "eval",
        "--sweep-memory",
        &sizes,
        "--out",
        out.to_str().unwrap(),
        "--set",
        &format!("train_data={}", train_path.display()),
        "--set",
        &format!("data={}", test_path.display()),
        "--set",
        "epochs=5",
        "--set",
        "sweep_seeds=3",
    ]);
    assert_eq!(code, 0, "sweep invocation failed");

    let rows: Vec<cli::SweepRow> = std::fs::read_to_string(out.join("memory_sweep.jsonl"))
        .expect("sweep report")
        .lines()
        .map(|l| serde_json::from_str(l).expect("row"))
        .collect();
    let three_rows = rows.len() == 3
        && rows.iter().map(|r| r.memory_k).collect::<Vec<_>>() == SWEEP_SIZES.to_vec();
    let small = rows.iter().find(|r| r.memory_k == SWEEP_SIZES[0]).unwrap().r_at_1;
    let large = rows.iter().find(|r| r.memory_k == SWEEP_SIZES[2]).unwrap().r_at_1;
    let insensitive = large >= small - SWEEP_SLACK;

    let ok = three_rows && insensitive;
    verdict(
        9,
        ok,
        &format!(
            "rows {:?} -> r@1 {:.3}/{:.3}/{:.3}; K={} within {} of K={}: {}",
            SWEEP_SIZES,
            rows[0].r_at_1,
            rows[1].r_at_1,
            rows[2].r_at_1,
            SWEEP_SIZES[2],
            SWEEP_SLACK,
            SWEEP_SIZES[0],
            insensitive
        ),
    );
}

// ── 10: determinism and persistence ─────────────────────────────────────

#[test]
fn c10_determinism_and_persistence() {
    let data = tiny_dataset();
    let config = tiny_train_config(LossSwitches::default());

    // Identical seed and config: bit-identical metrics streams.
    let run_stream = || -> Vec<u8> {
        let mut buf = Vec::new();
        let mut t = Trainer::init(config.clone()).expect("init");
        t.train_steps(&data, 6, Some(&mut buf)).expect("steps");
        buf.flush().expect("flush");
        buf
    };
    let streams_identical = run_stream() == run_stream();

    // Checkpoint round-trip: save -> load -> save is byte-identical.
    let dir = tempfile::tempdir().expect("tempdir");
    let p1 = dir.path().join("a.ckpt");
    let p2 = dir.path().join("b.ckpt");
    let mut t = Trainer::init(config.clone()).expect("init");
    t.train_steps(&data, 3, None).expect("steps");
    save_trainer(&t, &p1).expect("save");
    let loaded = load_trainer(&p1).expect("load");
    save_trainer(&loaded, &p2).expect("save again");
    let roundtrip_identical = std::fs::read(&p1).unwrap() == std::fs::read(&p2).unwrap();

    // Resume reproduces the unbroken loss trace exactly.
    let mut unbroken = Trainer::init(config.clone()).expect("init");
    let full = unbroken.train_steps(&data, 6, None).expect("steps");
    let mut resumed = load_trainer(&p1).expect("load"); // p1 holds steps 0..3
    let tail = resumed.train_steps(&data, 3, None).expect("steps");
    let trace_identical = full[3..]
        .iter()
        .zip(&tail)
        .all(|(a, b)| a.total.to_bits() == b.total.to_bits());

    let ok = streams_identical && roundtrip_identical && trace_identical;
    verdict(
        10,
        ok,
        &format!(
            "metrics streams identical: {}; checkpoint save/load/save identical: {}; resumed loss trace identical: {}",
            streams_identical, roundtrip_identical, trace_identical
        ),
    );
}

// ── 11: downstream heads ────────────────────────────────────────────────

#[test]
fn c11_downstream_heads() {
    let mut pre_acc = Vec::new();
    let mut scratch_acc = Vec::new();
    let mut caption_err = 0.0f64;
    for &seed in &QA_SEEDS {
        let spec = SyntheticSpec {
            n_pairs: 400,
            n_concepts: QA_CLASSES,
            sigma: 0.3,
            noise_rate: 0.2,
            seed,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec).expect("data");

        let mut config = desk_config();
        config.loss.memory_k = 256;
        config.epochs = 5;
        config.seed = seed;
        config.validate().expect("config");
        let mut pretrained = Trainer::init(config.clone()).expect("init");
        pretrained.train(&data, None).expect("pretrain");
        let scratch = Trainer::init(config).expect("init scratch");

        let qa = QaConfig { n_answers: QA_CLASSES, seed, ..QaConfig::default() };
        let (_, with_pretrain) = finetune_qa(&pretrained.model, &data, &qa).expect("qa");
        let (_, without) = finetune_qa(&scratch.model, &data, &qa).expect("qa scratch");
        pre_acc.push(with_pretrain.accuracy);
        scratch_acc.push(without.accuracy);

        // Perplexity is exp of the mean generation loss, by construction
        // and to the bit budget below.
        let metrics = caption_eval(&pretrained.model, &data).expect("caption");
        let identity = mean_generation_loss(&pretrained.model, &data).expect("gen loss").exp();
        caption_err = caption_err.max((metrics.perplexity - identity).abs());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (pre, scr) = (mean(&pre_acc), mean(&scratch_acc));
    let ok = pre >= QA_ACCURACY_FLOOR && pre > scr && caption_err <= PPL_IDENTITY_TOL;
    verdict(
        11,
        ok,
        &format!(
            "qa accuracy pretrained {:.3} vs scratch {:.3} over {} seeds ({} classes, floor {}); caption ppl identity err {:.2e} (tol {:.0e})",
            pre,
            scr,
            QA_SEEDS.len(),
            QA_CLASSES,
            QA_ACCURACY_FLOOR,
            caption_err,
            PPL_IDENTITY_TOL
        ),
    );
}
