//! Binary checkpoint container: every piece of training state as named
//! tensors in one little-endian file, integrity-guarded by a trailing
//! checksum. A loaded trainer resumes bit-exactly.
//!
//! Layout: magic "CCBT", u32 version, u32 entry count; per entry a u32 name
//! length, the UTF-8 name, a u8 dtype (0 = f64, 1 = raw bytes), a u8 rank,
//! u64 dims, then the payload; finally a u64 FNV-1a hash of all preceding
//! bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CocoError, Result};
use crate::loss::KeyMemory;
use crate::rng::{capture, restore, RngState};
use crate::train::{AdamState, TrainConfig, Trainer};

const MAGIC: &[u8; 4] = b"CCBT";
const VERSION: u32 = 1;

const DTYPE_F64: u8 = 0;
const DTYPE_BYTES: u8 = 1;

fn bad(msg: impl Into<String>) -> CocoError {
    CocoError::Checkpoint(msg.into())
}

// ── Named-entry container ───────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Payload {
    F64(Vec<f64>),
    Bytes(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Entry {
    pub name: String,
    pub dims: Vec<u64>,
    pub payload: Payload,
}

impl Entry {
    fn f64(name: impl Into<String>, dims: Vec<u64>, data: Vec<f64>) -> Self {
        let n: u64 = dims.iter().product();
        assert_eq!(n as usize, data.len());
        Entry { name: name.into(), dims, payload: Payload::F64(data) }
    }

    fn bytes(name: impl Into<String>, data: Vec<u8>) -> Self {
        Entry { name: name.into(), dims: vec![data.len() as u64], payload: Payload::Bytes(data) }
    }

    fn expect_f64(&self, want_len: usize) -> Result<&[f64]> {
        match &self.payload {
            Payload::F64(v) if v.len() == want_len => Ok(v),
            Payload::F64(v) => Err(bad(format!(
                "entry {} holds {} values, expected {}",
                self.name,
                v.len(),
                want_len
            ))),
            Payload::Bytes(_) => Err(bad(format!("entry {} has byte payload, expected f64", self.name))),
        }
    }

    fn expect_bytes(&self) -> Result<&[u8]> {
        match &self.payload {
            Payload::Bytes(v) => Ok(v),
            Payload::F64(_) => Err(bad(format!("entry {} has f64 payload, expected bytes", self.name))),
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub(crate) fn write_container(path: &Path, entries: &[Entry]) -> Result<()> {
    let mut body = Vec::new();
    body.extend_from_slice(MAGIC);
    body.extend_from_slice(&VERSION.to_le_bytes());
    body.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        body.extend_from_slice(&(name.len() as u32).to_le_bytes());
        body.extend_from_slice(name);
        match &e.payload {
            Payload::F64(v) => {
                body.push(DTYPE_F64);
                body.push(e.dims.len() as u8);
                for d in &e.dims {
                    body.extend_from_slice(&d.to_le_bytes());
                }
                for x in v {
                    body.extend_from_slice(&x.to_le_bytes());
                }
            }
            Payload::Bytes(v) => {
                body.push(DTYPE_BYTES);
                body.push(e.dims.len() as u8);
                for d in &e.dims {
                    body.extend_from_slice(&d.to_le_bytes());
                }
                body.extend_from_slice(v);
            }
        }
    }
    let checksum = fnv1a(&body);
    body.extend_from_slice(&checksum.to_le_bytes());
    let mut f = File::create(path)?;
    f.write_all(&body)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(bad(format!(
                "truncated file: wanted {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub(crate) fn read_container(path: &Path) -> Result<Vec<Entry>> {
    let mut buf = Vec::new();
    File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < MAGIC.len() + 4 + 4 + 8 {
        return Err(bad("file too short to be a checkpoint"));
    }
    let (body, tail) = buf.split_at(buf.len() - 8);
    let declared = u64::from_le_bytes(tail.try_into().unwrap());
    let actual = fnv1a(body);
    if declared != actual {
        return Err(bad(format!(
            "checksum mismatch: file declares {:#018x}, contents hash to {:#018x}",
            declared, actual
        )));
    }
    let mut c = Cursor { buf: body, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(bad("bad magic: not a checkpoint file"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {} (expected {})", version, VERSION)));
    }
    let count = c.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| bad("entry name is not UTF-8"))?
            .to_string();
        let dtype = c.u8()?;
        let rank = c.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.u64()?);
        }
        let numel: u64 = dims.iter().product();
        let payload = match dtype {
            DTYPE_F64 => {
                let raw = c.take(numel as usize * 8)?;
                Payload::F64(
                    raw.chunks_exact(8)
                        .map(|ch| f64::from_le_bytes(ch.try_into().unwrap()))
                        .collect(),
                )
            }
            DTYPE_BYTES => Payload::Bytes(c.take(numel as usize)?.to_vec()),
            other => return Err(bad(format!("unknown dtype code {} in entry {}", other, name))),
        };
        entries.push(Entry { name, dims, payload });
    }
    if c.pos != body.len() {
        return Err(bad(format!("{} trailing bytes after last entry", body.len() - c.pos)));
    }
    Ok(entries)
}

// ── Trainer serialization ───────────────────────────────────────────────

fn memory_entries(prefix: &str, mem: &KeyMemory, out: &mut Vec<Entry>) {
    let (data, cursor, fill) = mem.raw();
    out.push(Entry::f64(
        format!("memory.{}.data", prefix),
        vec![mem.capacity() as u64, mem.dim() as u64],
        data.to_vec(),
    ));
    out.push(Entry::f64(format!("memory.{}.cursor", prefix), vec![1], vec![cursor as f64]));
    out.push(Entry::f64(format!("memory.{}.fill", prefix), vec![1], vec![fill as f64]));
}

fn restore_memory(prefix: &str, map: &BTreeMap<String, Entry>, capacity: usize, dim: usize) -> Result<KeyMemory> {
    let data = get(map, &format!("memory.{}.data", prefix))?.expect_f64(capacity * dim)?.to_vec();
    let cursor = get(map, &format!("memory.{}.cursor", prefix))?.expect_f64(1)?[0] as usize;
    let fill = get(map, &format!("memory.{}.fill", prefix))?.expect_f64(1)?[0] as usize;
    KeyMemory::from_raw(capacity, dim, data, cursor, fill)
        .map_err(|e| bad(format!("memory.{}: {}", prefix, e)))
}

fn get<'a>(map: &'a BTreeMap<String, Entry>, name: &str) -> Result<&'a Entry> {
    map.get(name).ok_or_else(|| bad(format!("missing entry {}", name)))
}

/// Serialize the complete training state.
pub fn save_trainer(trainer: &Trainer, path: &Path) -> Result<()> {
    let mut entries = Vec::new();
    entries.push(Entry::bytes("config.json", serde_json::to_vec(&trainer.config)?));
    entries.push(Entry::f64("trainer.step", vec![1], vec![trainer.step as f64]));

    let rng_state = capture(&trainer.rng);
    entries.push(Entry::bytes("rng.seed", rng_state.seed.to_vec()));
    entries.push(Entry::bytes("rng.word_pos", rng_state.word_pos.to_le_bytes().to_vec()));

    for (name, t) in trainer.model.named_params() {
        entries.push(Entry::f64(
            format!("param.{}", name),
            t.shape.iter().map(|&d| d as u64).collect(),
            t.data.clone(),
        ));
    }
    for (name, t) in trainer.model.named_key_params() {
        entries.push(Entry::f64(
            format!("param.{}", name),
            t.shape.iter().map(|&d| d as u64).collect(),
            t.data.clone(),
        ));
    }

    entries.push(Entry::f64("adam.step", vec![1], vec![trainer.adam.step as f64]));
    for (i, name) in trainer.adam.names.iter().enumerate() {
        entries.push(Entry::f64(
            format!("adam.m.{}", name),
            vec![trainer.adam.m[i].len() as u64],
            trainer.adam.m[i].clone(),
        ));
        entries.push(Entry::f64(
            format!("adam.v.{}", name),
            vec![trainer.adam.v[i].len() as u64],
            trainer.adam.v[i].clone(),
        ));
    }

    memory_entries("video", &trainer.mem_video, &mut entries);
    memory_entries("sentence", &trainer.mem_sentence, &mut entries);

    write_container(path, &entries)
}

/// Rebuild a trainer from a checkpoint. Every entry must be recognized and
/// shape-consistent with the echoed configuration.
pub fn load_trainer(path: &Path) -> Result<Trainer> {
    let entries = read_container(path)?;
    let mut map = BTreeMap::new();
    for e in entries {
        if map.insert(e.name.clone(), e).is_some() {
            return Err(bad("duplicate entry name"));
        }
    }

    let config: TrainConfig = serde_json::from_slice(get(&map, "config.json")?.expect_bytes()?)
        .map_err(|e| bad(format!("config echo does not parse: {}", e)))?;
    config.validate().map_err(|e| bad(format!("echoed config invalid: {}", e)))?;

    let mut trainer = Trainer::init(config.clone())?;
    trainer.step = get(&map, "trainer.step")?.expect_f64(1)?[0] as u64;

    let seed_bytes = get(&map, "rng.seed")?.expect_bytes()?;
    let pos_bytes = get(&map, "rng.word_pos")?.expect_bytes()?;
    if seed_bytes.len() != 32 || pos_bytes.len() != 16 {
        return Err(bad("rng state has wrong width"));
    }
    let state = RngState {
        seed: seed_bytes.try_into().unwrap(),
        word_pos: u128::from_le_bytes(pos_bytes.try_into().unwrap()),
    };
    trainer.rng = restore(&state);

    let mut used = vec!["config.json".to_string(), "trainer.step".into(), "rng.seed".into(), "rng.word_pos".into()];
    {
        let mut fill = |name: String, t: &mut crate::tensor::Tensor| -> Result<()> {
            let e = get(&map, &name)?;
            let dims: Vec<u64> = t.shape.iter().map(|&d| d as u64).collect();
            if e.dims != dims {
                return Err(bad(format!("entry {} has dims {:?}, expected {:?}", name, e.dims, dims)));
            }
            let n = t.numel();
            t.data.copy_from_slice(e.expect_f64(n)?);
            used.push(name);
            Ok(())
        };
        for (name, t) in trainer.model.named_params_mut() {
            fill(format!("param.{}", name), t)?;
        }
        for (name, t) in trainer.model.named_key_params_mut() {
            fill(format!("param.{}", name), t)?;
        }
    }

    let mut adam = AdamState::init_for(&trainer.model);
    adam.step = get(&map, "adam.step")?.expect_f64(1)?[0] as u64;
    used.push("adam.step".into());
    for (i, name) in adam.names.clone().iter().enumerate() {
        let m_name = format!("adam.m.{}", name);
        let v_name = format!("adam.v.{}", name);
        adam.m[i] = get(&map, &m_name)?.expect_f64(adam.m[i].len())?.to_vec();
        adam.v[i] = get(&map, &v_name)?.expect_f64(adam.v[i].len())?.to_vec();
        used.push(m_name);
        used.push(v_name);
    }
    trainer.adam = adam;

    let k = config.loss.memory_k;
    let d = config.model.d;
    trainer.mem_video = restore_memory("video", &map, k, d)?;
    trainer.mem_sentence = restore_memory("sentence", &map, k, d)?;
    for prefix in ["video", "sentence"] {
        for field in ["data", "cursor", "fill"] {
            used.push(format!("memory.{}.{}", prefix, field));
        }
    }

    // Anything not consumed is a foreign entry and the file is rejected.
    let used: std::collections::HashSet<String> = used.into_iter().collect();
    for name in map.keys() {
        if !used.contains(name) {
            return Err(bad(format!("unknown entry name {}", name)));
        }
    }

    trainer.model.congruent()?;
    trainer.adam.congruent_with(&trainer.model)?;
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::loss::{CoCoConfig, LossSwitches};
    use crate::model::ModelConfig;
    use crate::train::TrainConfig;

    fn cfg() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                d: 8,
                d_f: 4,
                vocab: 16,
                max_len: 10,
                n_heads: 2,
                k_v: 1,
                k_s: 1,
                k_d: 1,
                momentum: 0.9,
            },
            loss: CoCoConfig { tau: 0.2, memory_k: 12, switches: LossSwitches::default() },
            mask: Default::default(),
            lr: 3e-3,
            batch_size: 4,
            epochs: 1,
            seed: 23,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn data() -> Vec<crate::data::VideoSentencePair> {
        generate_synthetic(&SyntheticSpec {
            n_pairs: 8,
            n_concepts: 3,
            d_f: 4,
            vocab: 16,
            min_frames: 2,
            max_frames: 3,
            min_words: 2,
            max_words: 4,
            sigma: 0.1,
            noise_rate: 0.0,
            n_styles: 1,
            style_strength: 0.0,
            seed: 31,
        })
        .unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let mut trainer = Trainer::init(cfg()).unwrap();
        trainer.train_steps(&data(), 3, None).unwrap();
        save_trainer(&trainer, &p1).unwrap();
        let loaded = load_trainer(&p1).unwrap();
        save_trainer(&loaded, &p2).unwrap();
        let a = std::fs::read(&p1).unwrap();
        let b = std::fs::read(&p2).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty());
    }

    #[test]
    fn loaded_trainer_state_matches_saved_state() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ckpt");
        let mut trainer = Trainer::init(cfg()).unwrap();
        trainer.train_steps(&data(), 2, None).unwrap();
        save_trainer(&trainer, &p).unwrap();
        let loaded = load_trainer(&p).unwrap();
        assert_eq!(loaded.step, trainer.step);
        assert_eq!(loaded.adam.step, trainer.adam.step);
        assert_eq!(loaded.adam.m, trainer.adam.m);
        assert_eq!(loaded.mem_video, trainer.mem_video);
        assert_eq!(loaded.mem_sentence, trainer.mem_sentence);
        for ((_, a), (_, b)) in trainer.model.named_params().iter().zip(loaded.model.named_params().iter()) {
            assert_eq!(a.data, b.data);
        }
        for ((_, a), (_, b)) in
            trainer.model.named_key_params().iter().zip(loaded.model.named_key_params().iter())
        {
            assert_eq!(a.data, b.data);
        }
        // The RNG stream continues identically.
        let mut r1 = trainer.rng.clone();
        let mut r2 = loaded.rng.clone();
        for _ in 0..16 {
            assert_eq!(rand::Rng::gen::<u64>(&mut r1), rand::Rng::gen::<u64>(&mut r2));
        }
    }

    #[test]
    fn resume_equals_unbroken_run() {
        let dataset = data();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mid.ckpt");

        let mut unbroken = Trainer::init(cfg()).unwrap();
        let full = unbroken.train_steps(&dataset, 8, None).unwrap();

        let mut first = Trainer::init(cfg()).unwrap();
        let head = first.train_steps(&dataset, 4, None).unwrap();
        save_trainer(&first, &p).unwrap();
        let mut second = load_trainer(&p).unwrap();
        let tail = second.train_steps(&dataset, 4, None).unwrap();

        let resumed: Vec<_> = head.into_iter().chain(tail).collect();
        assert_eq!(full, resumed);
        for ((_, a), (_, b)) in
            unbroken.model.named_params().iter().zip(second.model.named_params().iter())
        {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn corrupting_any_region_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        let trainer = Trainer::init(cfg()).unwrap();
        save_trainer(&trainer, &p).unwrap();
        let clean = std::fs::read(&p).unwrap();

        for &offset in &[9usize, clean.len() / 2, clean.len() - 9] {
            let mut bad_bytes = clean.clone();
            bad_bytes[offset] ^= 0x40;
            std::fs::write(&p, &bad_bytes).unwrap();
            let err = load_trainer(&p).unwrap_err();
            let msg = format!("{}", err);
            assert!(
                msg.contains("checksum") || msg.contains("magic") || msg.contains("version"),
                "offset {}: {}",
                offset,
                msg
            );
        }

        // Truncation.
        std::fs::write(&p, &clean[..clean.len() - 3]).unwrap();
        assert!(load_trainer(&p).is_err());

        // Wrong magic.
        let mut wrong = clean.clone();
        wrong[0] = b'X';
        let body_len = wrong.len() - 8;
        let sum = fnv1a(&wrong[..body_len]);
        wrong[body_len..].copy_from_slice(&sum.to_le_bytes());
        std::fs::write(&p, &wrong).unwrap();
        let msg = format!("{}", load_trainer(&p).unwrap_err());
        assert!(msg.contains("magic"), "{}", msg);
    }

    #[test]
    fn unknown_and_missing_entries_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u.ckpt");
        let trainer = Trainer::init(cfg()).unwrap();
        save_trainer(&trainer, &p).unwrap();

        let mut entries = read_container(&p).unwrap();
        entries.push(Entry::f64("param.bogus.tensor", vec![1], vec![0.0]));
        write_container(&p, &entries).unwrap();
        let msg = format!("{}", load_trainer(&p).unwrap_err());
        assert!(msg.contains("param.bogus.tensor"), "{}", msg);

        let mut entries = read_container(&p).unwrap();
        entries.retain(|e| e.name != "param.bogus.tensor" && e.name != "adam.step");
        write_container(&p, &entries).unwrap();
        let msg = format!("{}", load_trainer(&p).unwrap_err());
        assert!(msg.contains("adam.step"), "{}", msg);
    }
}
