//! Data pipeline: (video, sentence) pair records, the 15% masking policy
//! for both modalities, planted-correlation synthetic dataset generation,
//! and JSON-Lines file ingestion.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CocoError, Result};
use crate::nn::SpecialTokens;
use crate::rng::sub_rng;
use crate::tensor::{l2_norm, Tensor};

/// One aligned pair: frame features, body token ids (unframed), and an
/// optional concept label for the QA analog.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSentencePair {
    pub frames: Tensor, // [N_f, D_f]
    pub tokens: Vec<usize>,
    pub label: Option<usize>,
    pub id: Option<String>,
}

/// Validation bounds for dataset records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetBounds {
    pub vocab: usize,
    pub d_f: usize,
    pub max_frames: usize,
    pub max_words: usize,
}

pub fn validate_pair(pair: &VideoSentencePair, bounds: &DatasetBounds, sp: &SpecialTokens) -> Result<()> {
    let (n_f, d_f) = pair.frames.dims2();
    if n_f < 1 || n_f > bounds.max_frames {
        return Err(invalid(format!("frame count {} outside 1..={}", n_f, bounds.max_frames)));
    }
    if d_f != bounds.d_f {
        return Err(invalid(format!("frame width {} != expected {}", d_f, bounds.d_f)));
    }
    if pair.frames.data.iter().any(|v| !v.is_finite()) {
        return Err(invalid("non-finite frame feature"));
    }
    if pair.tokens.is_empty() || pair.tokens.len() > bounds.max_words {
        return Err(invalid(format!(
            "token count {} outside 1..={}",
            pair.tokens.len(),
            bounds.max_words
        )));
    }
    for &t in &pair.tokens {
        if t >= bounds.vocab {
            return Err(invalid(format!("token id {} >= vocab_size {}", t, bounds.vocab)));
        }
        if sp.is_special(t) {
            return Err(invalid(format!("reserved token id {} in body", t)));
        }
    }
    if let Some(l) = pair.label {
        let _ = l;
    }
    Ok(())
}

/// Wrap body tokens as [CLS] body… [SEP].
pub fn frame_tokens(body: &[usize], sp: &SpecialTokens) -> Vec<usize> {
    let mut out = Vec::with_capacity(body.len() + 2);
    out.push(sp.cls);
    out.extend_from_slice(body);
    out.push(sp.sep);
    out
}

// ── Masking ─────────────────────────────────────────────────────────────

/// Independent per-position corruption policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskPolicy {
    pub rate: f64,
    /// When Bernoulli selects nothing, force one uniformly-random maskable
    /// position so every sample keeps its reconstruction losses defined.
    /// Disabled only for statistical rate checks.
    pub force_at_least_one: bool,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        MaskPolicy { rate: 0.15, force_at_least_one: true }
    }
}

impl MaskPolicy {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(invalid(format!("mask rate {} outside [0, 1]", self.rate)));
        }
        Ok(())
    }
}

fn select_positions(
    maskable: &[usize],
    policy: &MaskPolicy,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    policy.validate()?;
    if maskable.is_empty() {
        return Err(invalid("no maskable positions in sequence"));
    }
    let mut picked: Vec<usize> =
        maskable.iter().copied().filter(|_| rng.gen::<f64>() < policy.rate).collect();
    if picked.is_empty() && policy.force_at_least_one {
        picked.push(maskable[rng.gen_range(0..maskable.len())]);
    }
    Ok(picked)
}

/// Mask a framed token sequence: each body token independently with
/// probability `rate` becomes [MASK]; specials and pads are untouchable.
/// Returns the masked sequence and the ascending mask positions.
pub fn mask_tokens(
    framed: &[usize],
    policy: &MaskPolicy,
    sp: &SpecialTokens,
    rng: &mut impl Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let maskable: Vec<usize> =
        (0..framed.len()).filter(|&i| !sp.is_special(framed[i])).collect();
    let positions = select_positions(&maskable, policy, rng)?;
    let mut masked = framed.to_vec();
    for &p in &positions {
        masked[p] = sp.mask;
    }
    Ok((masked, positions))
}

/// Pick frame indices to corrupt; the actual replacement with the learned
/// mask vector happens inside video embedding.
pub fn mask_frames(n_frames: usize, policy: &MaskPolicy, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let all: Vec<usize> = (0..n_frames).collect();
    select_positions(&all, policy, rng)
}

/// One pair prepared for a training step: the corrupted views consumed by
/// the query encoders alongside the originals consumed by the key encoders
/// and the reconstruction targets.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedPair {
    pub pair_index: usize,
    pub frames: Tensor,
    pub frame_mask_positions: Vec<usize>,
    pub framed_tokens: Vec<usize>,
    pub masked_tokens: Vec<usize>,
    pub token_mask_positions: Vec<usize>,
}

pub fn mask_pair(
    pair_index: usize,
    pair: &VideoSentencePair,
    policy: &MaskPolicy,
    sp: &SpecialTokens,
    rng: &mut impl Rng,
) -> Result<MaskedPair> {
    let framed = frame_tokens(&pair.tokens, sp);
    let (masked_tokens, token_mask_positions) = mask_tokens(&framed, policy, sp, rng)?;
    let frame_mask_positions = mask_frames(pair.frames.dims2().0, policy, rng)?;
    Ok(MaskedPair {
        pair_index,
        frames: pair.frames.clone(),
        frame_mask_positions,
        framed_tokens: framed,
        masked_tokens,
        token_mask_positions,
    })
}

// ── Synthetic dataset ───────────────────────────────────────────────────

/// Recipe for the planted-correlation dataset. Each pair draws a concept
/// and a sub-style. Frames are the concept prototype plus a style-specific
/// offset (both scaled by σ) plus Gaussian noise; tokens come from a
/// style-specific window inside the concept's vocabulary partition, with a
/// small uniform-noise rate. `n_styles = 1` collapses to plain
/// one-prototype-per-concept data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_pairs: usize,
    pub n_concepts: usize,
    pub d_f: usize,
    pub vocab: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub sigma: f64,
    pub noise_rate: f64,
    pub n_styles: usize,
    pub style_strength: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_pairs: 2000,
            n_concepts: 8,
            d_f: 32,
            vocab: 64,
            min_frames: 4,
            max_frames: 12,
            min_words: 3,
            max_words: 10,
            sigma: 0.1,
            noise_rate: 0.05,
            n_styles: 8,
            style_strength: 4.0,
            seed: 17,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let sp = SpecialTokens::default();
        if self.n_pairs < 1 {
            return Err(invalid("n_pairs must be at least 1"));
        }
        if self.n_concepts < 1 {
            return Err(invalid("n_concepts must be at least 1"));
        }
        if self.vocab <= sp.body_start() {
            return Err(invalid(format!("vocab {} leaves no body tokens", self.vocab)));
        }
        let body = self.vocab - sp.body_start();
        if self.n_concepts > body {
            return Err(invalid(format!(
                "{} concepts cannot partition {} body tokens",
                self.n_concepts, body
            )));
        }
        if self.min_frames < 1 || self.min_frames > self.max_frames {
            return Err(invalid("frame length range must satisfy 1 <= min <= max"));
        }
        if self.min_words < 1 || self.min_words > self.max_words {
            return Err(invalid("word length range must satisfy 1 <= min <= max"));
        }
        if self.d_f < 1 {
            return Err(invalid("d_f must be at least 1"));
        }
        if !(self.sigma >= 0.0) {
            return Err(invalid(format!("sigma {} must be >= 0", self.sigma)));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(invalid(format!("noise_rate {} outside [0, 1]", self.noise_rate)));
        }
        if self.n_styles < 1 {
            return Err(invalid("n_styles must be at least 1"));
        }
        if !(self.style_strength >= 0.0) {
            return Err(invalid("style_strength must be >= 0"));
        }
        Ok(())
    }

    pub fn bounds(&self) -> DatasetBounds {
        DatasetBounds {
            vocab: self.vocab,
            d_f: self.d_f,
            max_frames: self.max_frames,
            max_words: self.max_words,
        }
    }

    /// Contiguous body-token range owned by concept `c` (equal-size
    /// partitions; leftover ids at the top stay unused).
    pub fn partition(&self, c: usize) -> std::ops::Range<usize> {
        let start = SpecialTokens::default().body_start();
        let size = (self.vocab - start) / self.n_concepts;
        (start + c * size)..(start + (c + 1) * size)
    }
}

/// Deterministic synthetic dataset. Same spec (including seed) always
/// produces the identical pair list.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<VideoSentencePair>> {
    spec.validate()?;
    let mut rng = sub_rng(spec.seed, "synthetic-data");
    let sp = SpecialTokens::default();
    let body_start = sp.body_start();
    let part_size = (spec.vocab - body_start) / spec.n_concepts;

    // Concept prototypes, then per-(concept, style) unit offset directions.
    let prototypes: Vec<Vec<f64>> = (0..spec.n_concepts)
        .map(|_| Tensor::randn(vec![spec.d_f], 1.0, &mut rng).data)
        .collect();
    let style_dirs: Vec<Vec<f64>> = (0..spec.n_concepts * spec.n_styles)
        .map(|_| {
            let mut v = Tensor::randn(vec![spec.d_f], 1.0, &mut rng).data;
            let n = l2_norm(&v);
            for x in &mut v {
                *x /= n.max(1e-12);
            }
            v
        })
        .collect();

    let mut pairs = Vec::with_capacity(spec.n_pairs);
    for i in 0..spec.n_pairs {
        let c = rng.gen_range(0..spec.n_concepts);
        let s = rng.gen_range(0..spec.n_styles);
        let n_f = rng.gen_range(spec.min_frames..=spec.max_frames);
        let n_w = rng.gen_range(spec.min_words..=spec.max_words);

        let dir = &style_dirs[c * spec.n_styles + s];
        let mut frames = Vec::with_capacity(n_f * spec.d_f);
        for _ in 0..n_f {
            let noise = Tensor::randn(vec![spec.d_f], 1.0, &mut rng).data;
            for k in 0..spec.d_f {
                frames.push(
                    prototypes[c][k]
                        + spec.sigma * spec.style_strength * dir[k]
                        + spec.sigma * noise[k],
                );
            }
        }

        // Style-specific 3-token window inside the concept partition,
        // weighted toward the window head; uniform noise otherwise.
        let part = spec.partition(c);
        let window_start = (s * part_size) / spec.n_styles;
        let mut tokens = Vec::with_capacity(n_w);
        for _ in 0..n_w {
            let tok = if rng.gen::<f64>() < spec.noise_rate {
                rng.gen_range(body_start..body_start + part_size * spec.n_concepts)
            } else {
                let u = rng.gen::<f64>();
                let offset = if u < 0.55 {
                    0
                } else if u < 0.85 {
                    1
                } else {
                    2
                };
                part.start + (window_start + offset) % part_size
            };
            tokens.push(tok);
        }

        pairs.push(VideoSentencePair {
            frames: Tensor::new(vec![n_f, spec.d_f], frames),
            tokens,
            label: Some(c),
            id: Some(format!("pair-{:05}", i)),
        });
    }
    Ok(pairs)
}

// ── JSON-Lines files ────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct PairRecord {
    frames: Vec<Vec<f64>>,
    tokens: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    id: Option<String>,
}

impl From<&VideoSentencePair> for PairRecord {
    fn from(p: &VideoSentencePair) -> Self {
        let (n_f, d_f) = p.frames.dims2();
        PairRecord {
            frames: (0..n_f).map(|i| p.frames.data[i * d_f..(i + 1) * d_f].to_vec()).collect(),
            tokens: p.tokens.clone(),
            label: p.label,
            id: p.id.clone(),
        }
    }
}

fn record_to_pair(rec: PairRecord, line: usize) -> Result<VideoSentencePair> {
    let n_f = rec.frames.len();
    if n_f == 0 {
        return Err(CocoError::Dataset { line, msg: "empty frame list".into() });
    }
    let d_f = rec.frames[0].len();
    let mut data = Vec::with_capacity(n_f * d_f);
    for (i, row) in rec.frames.iter().enumerate() {
        if row.len() != d_f {
            return Err(CocoError::Dataset {
                line,
                msg: format!("frame row {} has width {} but row 0 has {}", i, row.len(), d_f),
            });
        }
        data.extend_from_slice(row);
    }
    Ok(VideoSentencePair {
        frames: Tensor::new(vec![n_f, d_f], data),
        tokens: rec.tokens,
        label: rec.label,
        id: rec.id,
    })
}

pub fn write_dataset(path: &Path, pairs: &[VideoSentencePair]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in pairs {
        let rec = PairRecord::from(p);
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Read and validate a JSON-Lines dataset. Every rejection names the
/// 1-based line it came from. Blank lines are ignored.
pub fn read_dataset(path: &Path, bounds: &DatasetBounds) -> Result<Vec<VideoSentencePair>> {
    let sp = SpecialTokens::default();
    let reader = BufReader::new(File::open(path)?);
    let mut pairs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let rec: PairRecord = serde_json::from_str(&text)
            .map_err(|e| CocoError::Dataset { line: line_no, msg: e.to_string() })?;
        let pair = record_to_pair(rec, line_no)?;
        validate_pair(&pair, bounds, &sp)
            .map_err(|e| CocoError::Dataset { line: line_no, msg: e.to_string() })?;
        pairs.push(pair);
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sp() -> SpecialTokens {
        SpecialTokens::default()
    }

    #[test]
    fn zero_rate_forces_exactly_one_mask() {
        let mut rng = sub_rng(101, "mask-zero");
        let framed = frame_tokens(&[10, 11, 12, 13], &sp());
        let policy = MaskPolicy { rate: 0.0, force_at_least_one: true };
        for _ in 0..200 {
            let (masked, pos) = mask_tokens(&framed, &policy, &sp(), &mut rng).unwrap();
            assert_eq!(pos.len(), 1);
            assert!(!sp().is_special(framed[pos[0]]));
            assert_eq!(masked[pos[0]], sp().mask);
        }
    }

    #[test]
    fn full_rate_masks_every_body_token_and_no_specials() {
        let mut rng = sub_rng(102, "mask-one");
        let framed = frame_tokens(&[10, 11, 12], &sp());
        let policy = MaskPolicy { rate: 1.0, force_at_least_one: true };
        let (masked, pos) = mask_tokens(&framed, &policy, &sp(), &mut rng).unwrap();
        assert_eq!(pos, vec![1, 2, 3]);
        assert_eq!(masked[0], sp().cls);
        assert_eq!(*masked.last().unwrap(), sp().sep);
        assert!(masked[1..4].iter().all(|&t| t == sp().mask));
    }

    #[test]
    fn empirical_token_mask_rate_within_binomial_interval() {
        let mut rng = sub_rng(103, "mask-rate");
        let body: Vec<usize> = (0..100_000).map(|i| 10 + (i % 20)).collect();
        let framed = frame_tokens(&body, &sp());
        let policy = MaskPolicy { rate: 0.15, force_at_least_one: false };
        let (_, pos) = mask_tokens(&framed, &policy, &sp(), &mut rng).unwrap();
        let rate = pos.len() as f64 / body.len() as f64;
        assert!((0.147..=0.153).contains(&rate), "rate {}", rate);
    }

    #[test]
    fn empirical_frame_mask_rate_within_binomial_interval() {
        let mut rng = sub_rng(104, "mask-frate");
        let policy = MaskPolicy { rate: 0.15, force_at_least_one: false };
        let pos = mask_frames(100_000, &policy, &mut rng).unwrap();
        let rate = pos.len() as f64 / 100_000.0;
        assert!((0.147..=0.153).contains(&rate), "rate {}", rate);

        let none = mask_frames(16, &MaskPolicy { rate: 0.0, force_at_least_one: true }, &mut rng)
            .unwrap();
        assert_eq!(none.len(), 1);
        let all = mask_frames(16, &MaskPolicy { rate: 1.0, force_at_least_one: true }, &mut rng)
            .unwrap();
        assert_eq!(all, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn specials_survive_a_million_masking_trials() {
        let mut rng = sub_rng(105, "mask-specials");
        let framed = frame_tokens(&[20, 21, 22, 23, 24, 25, 26, 27], &sp());
        let policy = MaskPolicy { rate: 0.5, force_at_least_one: true };
        for _ in 0..125_000 {
            // 8 body positions per trial → 10⁶ position draws total.
            let (masked, pos) = mask_tokens(&framed, &policy, &sp(), &mut rng).unwrap();
            assert_eq!(masked[0], sp().cls);
            assert_eq!(*masked.last().unwrap(), sp().sep);
            debug_assert!(pos.iter().all(|&p| p >= 1 && p <= 8));
        }
    }

    #[test]
    fn masking_rejects_bodyless_sequences_and_bad_rates() {
        let mut rng = sub_rng(106, "mask-errs");
        let framed = vec![sp().cls, sp().sep];
        assert!(mask_tokens(&framed, &MaskPolicy::default(), &sp(), &mut rng).is_err());
        let bad = MaskPolicy { rate: 1.5, force_at_least_one: true };
        assert!(mask_tokens(&frame_tokens(&[9], &sp()), &bad, &sp(), &mut rng).is_err());
    }

    proptest! {
        #[test]
        fn masked_and_original_views_agree_off_mask(body in proptest::collection::vec(10usize..60, 1..20), seed in 0u64..1000) {
            let mut rng = sub_rng(seed, "mask-agree");
            let framed = frame_tokens(&body, &sp());
            let (masked, pos) = mask_tokens(&framed, &MaskPolicy::default(), &sp(), &mut rng).unwrap();
            prop_assert!(!pos.is_empty());
            for i in 0..framed.len() {
                if pos.contains(&i) {
                    prop_assert_eq!(masked[i], sp().mask);
                } else {
                    prop_assert_eq!(masked[i], framed[i]);
                }
            }
        }
    }

    fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec {
            n_pairs: 60,
            n_concepts: 4,
            d_f: 6,
            vocab: 24,
            min_frames: 2,
            max_frames: 4,
            min_words: 2,
            max_words: 5,
            sigma: 0.0,
            noise_rate: 0.0,
            n_styles: 1,
            style_strength: 0.0,
            seed: 7,
        }
    }

    #[test]
    fn noiseless_generation_gives_identical_frames_and_partition_tokens() {
        let spec = tiny_spec();
        let pairs = generate_synthetic(&spec).unwrap();
        assert_eq!(pairs.len(), 60);
        for p in &pairs {
            let c = p.label.unwrap();
            let part = spec.partition(c);
            assert!(p.tokens.iter().all(|t| part.contains(t)), "tokens {:?} outside {:?}", p.tokens, part);
            // All frame rows equal the concept prototype, so rows within and
            // across pairs of one concept are identical.
            let first = p.frames.row(0).to_vec();
            for r in 0..p.frames.dims2().0 {
                assert_eq!(p.frames.row(r), first.as_slice());
            }
        }
        let by_concept: Vec<Vec<&VideoSentencePair>> = (0..4)
            .map(|c| pairs.iter().filter(|p| p.label == Some(c)).collect())
            .collect();
        for group in by_concept.iter().filter(|g| g.len() > 1) {
            let proto = group[0].frames.row(0);
            for p in group {
                assert_eq!(p.frames.row(0), proto);
            }
        }
    }

    #[test]
    fn style_offsets_vanish_at_sigma_zero_but_split_token_windows() {
        let mut spec = tiny_spec();
        spec.n_styles = 2;
        spec.style_strength = 4.0;
        let pairs = generate_synthetic(&spec).unwrap();
        // σ=0 wipes the style offset: frames still identical per concept.
        for p in &pairs {
            let first = p.frames.row(0).to_vec();
            for r in 0..p.frames.dims2().0 {
                assert_eq!(p.frames.row(r), first.as_slice());
            }
        }
        // Tokens still live inside the concept partition.
        for p in &pairs {
            let part = spec.partition(p.label.unwrap());
            assert!(p.tokens.iter().all(|t| part.contains(t)));
        }
    }

    #[test]
    fn generation_is_seed_deterministic_and_seed_sensitive() {
        let spec = SyntheticSpec { sigma: 0.3, noise_rate: 0.1, ..tiny_spec() };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SyntheticSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn concept_counts_stay_within_three_sigma() {
        let spec = SyntheticSpec::default();
        let pairs = generate_synthetic(&spec).unwrap();
        let mut counts = vec![0usize; spec.n_concepts];
        for p in &pairs {
            counts[p.label.unwrap()] += 1;
        }
        let n = spec.n_pairs as f64;
        let q = 1.0 / spec.n_concepts as f64;
        let expect = n * q;
        let sd = (n * q * (1.0 - q)).sqrt();
        for (c, &k) in counts.iter().enumerate() {
            assert!(
                (k as f64 - expect).abs() <= 3.0 * sd,
                "concept {} count {} vs {}±{}",
                c,
                k,
                expect,
                3.0 * sd
            );
        }
    }

    #[test]
    fn nearest_prototype_oracle_reaches_99_percent() {
        // The planted signal must be recoverable by a trivial classifier
        // before any model sees it.
        let spec = SyntheticSpec { sigma: 0.05, ..SyntheticSpec::default() };
        let pairs = generate_synthetic(&spec).unwrap();
        let mut protos = vec![vec![0.0; spec.d_f]; spec.n_concepts];
        let mut counts = vec![0usize; spec.n_concepts];
        for p in &pairs {
            let c = p.label.unwrap();
            counts[c] += p.frames.dims2().0;
            for r in 0..p.frames.dims2().0 {
                for (acc, v) in protos[c].iter_mut().zip(p.frames.row(r)) {
                    *acc += v;
                }
            }
        }
        for (proto, &k) in protos.iter_mut().zip(&counts) {
            for v in proto.iter_mut() {
                *v /= k.max(1) as f64;
            }
        }
        let mut hits = 0;
        for p in &pairs {
            let mean: Vec<f64> = (0..spec.d_f)
                .map(|k| {
                    (0..p.frames.dims2().0).map(|r| p.frames.row(r)[k]).sum::<f64>()
                        / p.frames.dims2().0 as f64
                })
                .collect();
            let best = (0..spec.n_concepts)
                .min_by(|&a, &b| {
                    let da: f64 =
                        mean.iter().zip(&protos[a]).map(|(x, y)| (x - y) * (x - y)).sum();
                    let db: f64 =
                        mean.iter().zip(&protos[b]).map(|(x, y)| (x - y) * (x - y)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            if best == p.label.unwrap() {
                hits += 1;
            }
        }
        let acc = hits as f64 / pairs.len() as f64;
        assert!(acc >= 0.99, "oracle accuracy {}", acc);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(SyntheticSpec { n_concepts: 0, ..tiny_spec() }.validate().is_err());
        assert!(SyntheticSpec { n_concepts: 21, ..tiny_spec() }.validate().is_err());
        assert!(SyntheticSpec { min_frames: 5, max_frames: 4, ..tiny_spec() }.validate().is_err());
        assert!(SyntheticSpec { sigma: -0.1, ..tiny_spec() }.validate().is_err());
        assert!(SyntheticSpec { noise_rate: 1.2, ..tiny_spec() }.validate().is_err());
        assert!(SyntheticSpec { vocab: 4, ..tiny_spec() }.validate().is_err());
        assert!(SyntheticSpec { n_styles: 0, ..tiny_spec() }.validate().is_err());
    }

    #[test]
    fn dataset_file_round_trip_and_line_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        let spec = SyntheticSpec { sigma: 0.2, noise_rate: 0.1, ..tiny_spec() };
        let pairs = generate_synthetic(&spec).unwrap();
        write_dataset(&path, &pairs).unwrap();
        let back = read_dataset(&path, &spec.bounds()).unwrap();
        assert_eq!(pairs, back);

        let empty = dir.path().join("empty.jsonl");
        std::fs::write(&empty, "").unwrap();
        assert!(read_dataset(&empty, &spec.bounds()).unwrap().is_empty());

        let bad_id = dir.path().join("bad-id.jsonl");
        std::fs::write(
            &bad_id,
            "{\"frames\":[[0,0,0,0,0,0]],\"tokens\":[9]}\n{\"frames\":[[0,0,0,0,0,0]],\"tokens\":[999]}\n",
        )
        .unwrap();
        match read_dataset(&bad_id, &spec.bounds()) {
            Err(CocoError::Dataset { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("999"), "msg: {}", msg);
            }
            other => panic!("expected dataset error, got {:?}", other.map(|v| v.len())),
        }

        let malformed = dir.path().join("malformed.jsonl");
        std::fs::write(&malformed, "{\"frames\":[[0,0,0,0,0,0]],\"tokens\":[9]}\nnot json\n").unwrap();
        match read_dataset(&malformed, &spec.bounds()) {
            Err(CocoError::Dataset { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected dataset error, got {:?}", other.map(|v| v.len())),
        }

        let ragged = dir.path().join("ragged.jsonl");
        std::fs::write(&ragged, "{\"frames\":[[0,0,0,0,0,0],[0,0]],\"tokens\":[9]}\n").unwrap();
        assert!(matches!(
            read_dataset(&ragged, &spec.bounds()),
            Err(CocoError::Dataset { line: 1, .. })
        ));
    }

    #[test]
    fn validate_pair_rejects_out_of_bounds_records() {
        let bounds = tiny_spec().bounds();
        let good = VideoSentencePair {
            frames: Tensor::zeros(vec![2, 6]),
            tokens: vec![9, 10],
            label: None,
            id: None,
        };
        validate_pair(&good, &bounds, &sp()).unwrap();
        let wide = VideoSentencePair { frames: Tensor::zeros(vec![2, 7]), ..good.clone() };
        assert!(validate_pair(&wide, &bounds, &sp()).is_err());
        let special = VideoSentencePair { tokens: vec![sp().mask], ..good.clone() };
        assert!(validate_pair(&special, &bounds, &sp()).is_err());
        let long = VideoSentencePair { tokens: vec![9; 99], ..good.clone() };
        assert!(validate_pair(&long, &bounds, &sp()).is_err());
        let nan = VideoSentencePair {
            frames: Tensor::new(vec![1, 6], vec![0.0, 0.0, f64::NAN, 0.0, 0.0, 0.0]),
            ..good
        };
        assert!(validate_pair(&nan, &bounds, &sp()).is_err());
    }
}
