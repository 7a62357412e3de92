//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "UNEQ1" | u32 version | u64 config hash | u32 entry count
//! entry*: u32 name len | name bytes | u32 rank | u32 dims[rank] | f32 payload
//! trailer: [u8; 32] rng seed | u64 rng stream | u128 rng word pos | u64 step
//!          | u32 stage | f32 alpha | u64 adam t (g1, g2, d) | u64 next batch id
//! ```
//!
//! Entries are named `g1.*`, `g2.*`, `d.*` for parameters and
//! `adam.{g1,g2,d}.{m,v}.*` for optimizer moments.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use thiserror::Error;

use crate::networks::{DiscriminatorParams, GeneratorParams, GrowthState, NetworkError, ParamSet};
use crate::tensor::Tensor;

use super::{AdamState, TrainConfig, TrainState};

pub const MAGIC: &[u8; 5] = b"UNEQ1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {found}, expected {VERSION}")]
    Version { found: u32 },
    #[error("checkpoint truncated at byte {offset} while reading {what}")]
    Truncated { offset: usize, what: &'static str },
    #[error("checkpoint has {0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("checkpoint entry `{0}` is malformed")]
    BadEntry(String),
    #[error("checkpoint parameters do not fit the architecture: {0}")]
    Shape(#[from] NetworkError),
    #[error("checkpoint was written for a different config (hash {found:016x}, expected {expected:016x})")]
    ConfigMismatch { found: u64, expected: u64 },
}

/// Parsed file contents before they are matched against a config.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCheckpoint {
    pub config_hash: u64,
    pub entries: Vec<(String, Tensor<f32>)>,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
    pub step: u64,
    pub growth: GrowthState,
    pub adam_t: [u64; 3],
    pub next_batch_id: u64,
}

const PREFIXES: [&str; 3] = ["g1.", "g2.", "d."];

fn encode(state: &TrainState, config_hash: u64) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&config_hash.to_le_bytes());

    let nets = [state.g1.params(), state.g2.params(), state.d.params()];
    let adams = [&state.adam_g1, &state.adam_g2, &state.adam_d];
    let mut groups: Vec<(String, &ParamSet)> = Vec::new();
    for (prefix, set) in PREFIXES.iter().zip(nets) {
        groups.push((prefix.to_string(), set));
    }
    for (prefix, adam) in PREFIXES.iter().zip(adams) {
        groups.push((format!("adam.{prefix}m."), &adam.m));
        groups.push((format!("adam.{prefix}v."), &adam.v));
    }
    let count: usize = groups.iter().map(|(_, s)| s.len()).sum();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for (prefix, set) in groups {
        for (name, t) in set.iter() {
            let full = format!("{prefix}{name}");
            out.extend_from_slice(&(full.len() as u32).to_le_bytes());
            out.extend_from_slice(full.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }

    out.extend_from_slice(&state.rng.get_seed());
    out.extend_from_slice(&state.rng.get_stream().to_le_bytes());
    out.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    out.extend_from_slice(&state.step.to_le_bytes());
    out.extend_from_slice(&(state.growth.stage as u32).to_le_bytes());
    out.extend_from_slice(&state.growth.alpha.to_le_bytes());
    for adam in adams {
        out.extend_from_slice(&adam.t.to_le_bytes());
    }
    out.extend_from_slice(&state.next_batch_id.to_le_bytes());
    out
}

/// Writes the checkpoint atomically: a sibling temp file is renamed over
/// `path` once fully written.
pub fn checkpoint_save(state: &TrainState, config: &TrainConfig, path: &Path) -> Result<(), CheckpointError> {
    let bytes = encode(state, config.trajectory_hash());
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated {
                offset: self.bytes.len(),
                what,
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N], CheckpointError> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }
}

/// Parses checkpoint bytes without interpreting the entries.
pub fn decode(bytes: &[u8]) -> Result<RawCheckpoint, CheckpointError> {
    if bytes.len() < MAGIC.len() {
        return Err(if MAGIC.starts_with(bytes) {
            CheckpointError::Truncated {
                offset: bytes.len(),
                what: "magic",
            }
        } else {
            CheckpointError::BadMagic
        });
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
    };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let config_hash = r.u64("config hash")?;
    let count = r.u32("entry count")? as usize;
    let mut entries = Vec::new();
    for _ in 0..count {
        let len = r.u32("entry name length")? as usize;
        let name = r.take(len, "entry name")?;
        let name = String::from_utf8(name.to_vec())
            .map_err(|_| CheckpointError::BadEntry(String::from_utf8_lossy(name).into_owned()))?;
        let rank = r.u32("entry rank")? as usize;
        if rank > 8 {
            return Err(CheckpointError::BadEntry(name));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("entry dims")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| CheckpointError::BadEntry(name.clone()))?;
        let payload = r.take(numel, "entry payload")?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|_| CheckpointError::BadEntry(name.clone()))?;
        entries.push((name, tensor));
    }
    let rng_seed = r.array::<32>("rng seed")?;
    let rng_stream = r.u64("rng stream")?;
    let rng_word_pos = u128::from_le_bytes(r.array("rng position")?);
    let step = r.u64("step")?;
    let stage = r.u32("stage")? as usize;
    let alpha = f32::from_le_bytes(r.array("alpha")?);
    let adam_t = [r.u64("adam t")?, r.u64("adam t")?, r.u64("adam t")?];
    let next_batch_id = r.u64("batch id")?;
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(RawCheckpoint {
        config_hash,
        entries,
        rng_seed,
        rng_stream,
        rng_word_pos,
        step,
        growth: GrowthState { stage, alpha },
        adam_t,
        next_batch_id,
    })
}

pub fn checkpoint_read(path: &Path) -> Result<RawCheckpoint, CheckpointError> {
    decode(&fs::read(path)?)
}

impl RawCheckpoint {
    /// Entries under `prefix`, with the prefix stripped.
    fn group(&self, prefix: &str) -> ParamSet {
        let mut set = ParamSet::new();
        for (name, t) in &self.entries {
            if let Some(rest) = name.strip_prefix(prefix) {
                set.push(rest, t.clone());
            }
        }
        set
    }

    fn check_names(&self) -> Result<(), CheckpointError> {
        let known = |n: &str| {
            PREFIXES.iter().any(|p| n.starts_with(p))
                || PREFIXES
                    .iter()
                    .any(|p| n.starts_with(&format!("adam.{p}m.")) || n.starts_with(&format!("adam.{p}v.")))
        };
        match self.entries.iter().find(|(n, _)| !known(n)) {
            Some((n, _)) => Err(CheckpointError::BadEntry(n.clone())),
            None => Ok(()),
        }
    }

    /// Both generators, with the architecture inferred from their shapes.
    pub fn generators(&self) -> Result<(GeneratorParams, GeneratorParams), CheckpointError> {
        let p1 = self.group("g1.");
        let p2 = self.group("g2.");
        let embed = self
            .group("d.")
            .get("logit.weight")
            .map_or(1, |t| t.shape()[0]);
        let cfg = GeneratorParams::infer_config(&p1, embed)?;
        Ok((
            GeneratorParams::from_params(&cfg, p1)?,
            GeneratorParams::from_params(&cfg, p2)?,
        ))
    }

    /// Full training state, after checking the file belongs to `config`.
    pub fn into_state(self, config: &TrainConfig) -> Result<TrainState, CheckpointError> {
        let expected = config.trajectory_hash();
        if self.config_hash != expected {
            return Err(CheckpointError::ConfigMismatch {
                found: self.config_hash,
                expected,
            });
        }
        self.check_names()?;
        let net = config.net_config();
        let g1 = GeneratorParams::from_params(&net, self.group("g1."))?;
        let g2 = GeneratorParams::from_params(&net, self.group("g2."))?;
        let d = DiscriminatorParams::from_params(&net, self.group("d."))?;
        let adam = |key: &str, t: u64, like: &ParamSet| -> Result<AdamState, CheckpointError> {
            let m = self.group(&format!("adam.{key}m."));
            let v = self.group(&format!("adam.{key}v."));
            for moments in [&m, &v] {
                let same = moments.len() == like.len()
                    && moments
                        .iter()
                        .zip(like.iter())
                        .all(|((a, x), (b, y))| a == b && x.shape() == y.shape());
                if !same {
                    return Err(CheckpointError::BadEntry(format!("adam.{key}")));
                }
            }
            Ok(AdamState { t, m, v })
        };
        let adams = (
            adam("g1.", self.adam_t[0], g1.params())?,
            adam("g2.", self.adam_t[1], g2.params())?,
            adam("d.", self.adam_t[2], d.params())?,
        );
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_stream(self.rng_stream);
        rng.set_word_pos(self.rng_word_pos);
        if self.growth.stage > net.max_stage || !(0.0..=1.0).contains(&self.growth.alpha) {
            return Err(CheckpointError::BadEntry("growth".into()));
        }
        Ok(TrainState::from_parts(
            config,
            (g1, g2, d),
            adams,
            self.step,
            rng,
            self.growth,
            self.next_batch_id,
        ))
    }
}

/// Reads and validates a checkpoint for `config`. Nothing is returned
/// unless the whole file is consistent.
pub fn checkpoint_load(path: &Path, config: &TrainConfig) -> Result<TrainState, CheckpointError> {
    checkpoint_read(path)?.into_state(config)
}

/// In-memory form of [`checkpoint_save`], mostly for tests.
pub fn to_bytes(state: &TrainState, config: &TrainConfig) -> Vec<u8> {
    encode(state, config.trajectory_hash())
}
