//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   b"DRCKPT\0\0"
//! version      u32       FORMAT_VERSION
//! n_sections   u32
//! section *    name_len u16 | name (UTF-8) | payload_len u64 | payload
//! checksum     32 bytes  SHA-256 of every preceding byte
//! ```
//!
//! Section payloads:
//!
//! | name       | payload                                                       |
//! |------------|---------------------------------------------------------------|
//! | `model`    | UTF-8 `key = value` lines describing the architecture         |
//! | `schedule` | `lambda_min` f64, `lambda_max` f64                            |
//! | `params`   | f64 vector                                                    |
//! | `ema`      | decay f64, then f64 vector                                    |
//! | `optim`    | step u64, lr, beta1, beta2, epsilon f64, warmup u64, clip f64, m vector, v vector |
//! | `progress` | step u64, seed u64, pending loss sum f64, pending count u64   |
//! | `rng`      | seed 32 bytes, stream u64, word position u128                 |
//! | `log`      | count u64, then per row step u64, loss f64, has_mse u8, mse f64, wall_ms u64 |
//!
//! An f64 vector is a u64 length followed by that many f64 values. Floats
//! are stored as their IEEE-754 bit patterns, so loading is bit-exact.

use std::io;
use std::path::Path;

use dualrate_core::models::{DualRateModel, ModelConfig};
use dualrate_core::nnkit::{EmaState, OptimState};
use dualrate_core::train::{TrainRecord, TrainState};
use dualrate_core::{seeded_rng, SimRng};
use rand_chacha::rand_core::SeedableRng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{parse_model, render_model};

pub const MAGIC: &[u8; 8] = b"DRCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("checksum mismatch: file is truncated or corrupted")]
    Checksum,
    #[error("not a checkpoint (bad magic bytes)")]
    Magic,
    #[error("checkpoint format version {found} is newer than supported version {supported}")]
    Version { found: u32, supported: u32 },
    #[error("malformed section `{section}`: {message}")]
    Malformed { section: String, message: String },
    #[error("missing section `{0}`")]
    MissingSection(&'static str),
}

fn malformed(section: &str, message: impl Into<String>) -> CheckpointError {
    CheckpointError::Malformed {
        section: section.to_string(),
        message: message.into(),
    }
}

/// Position of a ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngCursor {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngCursor {
    pub fn of(rng: &SimRng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> SimRng {
        let mut r = SimRng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub params: Vec<f64>,
    pub ema: EmaState,
    pub optim: OptimState,
    pub step: u64,
    pub seed: u64,
    pub pending_loss: (f64, u64),
    pub rng: RngCursor,
    pub log: Vec<TrainRecord>,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, model: &ModelConfig, lambda: (f64, f64)) -> Self {
        Self {
            model: model.clone(),
            lambda_min: lambda.0,
            lambda_max: lambda.1,
            params: state.model.flat_params(),
            ema: state.ema.clone(),
            optim: state.opt.clone(),
            step: state.step,
            seed: state.seed,
            pending_loss: state.pending_loss(),
            rng: RngCursor::of(&state.rng),
            log: state.log.clone(),
        }
    }

    /// Model with raw parameters.
    pub fn raw_model(&self) -> Result<DualRateModel, CheckpointError> {
        self.build(&self.params)
    }

    /// Model with averaged parameters.
    pub fn ema_model(&self) -> Result<DualRateModel, CheckpointError> {
        self.build(&self.ema.shadow)
    }

    fn build(&self, flat: &[f64]) -> Result<DualRateModel, CheckpointError> {
        let mut m = DualRateModel::new(&self.model, &mut seeded_rng(0))
            .map_err(|e| malformed("model", e.to_string()))?;
        m.set_flat_params(flat)
            .map_err(|e| malformed("params", e.to_string()))?;
        Ok(m)
    }

    /// Training state that continues exactly where this one stopped.
    pub fn train_state(&self) -> Result<TrainState, CheckpointError> {
        Ok(TrainState::restore(
            self.raw_model()?,
            self.optim.clone(),
            self.ema.clone(),
            self.step,
            self.seed,
            self.rng.restore(),
            self.log.clone(),
            self.pending_loss,
        ))
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    fn vec(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.f64(x);
        }
    }
}

struct Reader<'a> {
    name: &'a str,
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() < n {
            return Err(malformed(self.name, "payload ends early"));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn u128(&mut self) -> Result<u128, CheckpointError> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn vec(&mut self) -> Result<Vec<f64>, CheckpointError> {
        let n = self.u64()? as usize;
        if n > self.buf.len() / 8 {
            return Err(malformed(self.name, "vector longer than payload"));
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn done(&self) -> Result<(), CheckpointError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(malformed(self.name, format!("{} trailing bytes", self.buf.len())))
        }
    }
}

fn sections(ck: &Checkpoint) -> Vec<(&'static str, Vec<u8>)> {
    let mut out = Vec::new();
    out.push(("model", render_model(&ck.model).into_bytes()));

    let mut w = Writer(Vec::new());
    w.f64(ck.lambda_min);
    w.f64(ck.lambda_max);
    out.push(("schedule", w.0));

    let mut w = Writer(Vec::new());
    w.vec(&ck.params);
    out.push(("params", w.0));

    let mut w = Writer(Vec::new());
    w.f64(ck.ema.decay);
    w.vec(&ck.ema.shadow);
    out.push(("ema", w.0));

    let o = &ck.optim;
    let mut w = Writer(Vec::new());
    w.u64(o.step);
    w.f64(o.lr);
    w.f64(o.beta1);
    w.f64(o.beta2);
    w.f64(o.epsilon);
    w.u64(o.warmup_steps);
    w.f64(o.clip_norm);
    w.vec(&o.m);
    w.vec(&o.v);
    out.push(("optim", w.0));

    let mut w = Writer(Vec::new());
    w.u64(ck.step);
    w.u64(ck.seed);
    w.f64(ck.pending_loss.0);
    w.u64(ck.pending_loss.1);
    out.push(("progress", w.0));

    let mut w = Writer(ck.rng.seed.to_vec());
    w.u64(ck.rng.stream);
    w.0.extend_from_slice(&ck.rng.word_pos.to_le_bytes());
    out.push(("rng", w.0));

    let mut w = Writer(Vec::new());
    w.u64(ck.log.len() as u64);
    for r in &ck.log {
        w.u64(r.step);
        w.f64(r.loss);
        w.u8(r.oracle_mse.is_some() as u8);
        w.f64(r.oracle_mse.unwrap_or(0.0));
        w.u64(r.wall_ms);
    }
    out.push(("log", w.0));
    out
}

/// Serialises a checkpoint.
pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let secs = sections(ck);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(secs.len() as u32).to_le_bytes());
    for (name, payload) in secs {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        buf.extend_from_slice(&payload);
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

/// Parses bytes produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < CHECKSUM_LEN {
        return Err(CheckpointError::Checksum);
    }
    let (body, sum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if Sha256::digest(body).as_slice() != sum {
        return Err(CheckpointError::Checksum);
    }
    if body.len() < 16 || &body[..8] != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version > FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let n = u32::from_le_bytes(body[12..16].try_into().expect("4 bytes")) as usize;
    let mut rest = &body[16..];
    let mut found: Vec<(String, &[u8])> = Vec::with_capacity(n);
    let mut header = Reader {
        name: "header",
        buf: rest,
    };
    for _ in 0..n {
        let name_len = u16::from_le_bytes(header.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(header.take(name_len)?)
            .map_err(|_| malformed("header", "section name is not UTF-8"))?
            .to_string();
        let len = header.u64()? as usize;
        let payload = header.take(len)?;
        found.push((name, payload));
    }
    rest = header.buf;
    if !rest.is_empty() {
        return Err(malformed("header", "bytes after the last section"));
    }
    let get = |name: &'static str| -> Result<Reader<'_>, CheckpointError> {
        found
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| Reader { name, buf: p })
            .ok_or(CheckpointError::MissingSection(name))
    };

    let model_text = std::str::from_utf8(get("model")?.buf)
        .map_err(|_| malformed("model", "not UTF-8"))?;
    let model = parse_model(model_text).map_err(|e| malformed("model", e.to_string()))?;

    let mut r = get("schedule")?;
    let (lambda_min, lambda_max) = (r.f64()?, r.f64()?);
    r.done()?;

    let mut r = get("params")?;
    let params = r.vec()?;
    r.done()?;

    let mut r = get("ema")?;
    let decay = r.f64()?;
    let shadow = r.vec()?;
    r.done()?;
    let mut ema = EmaState::new(&shadow, decay);
    ema.shadow = shadow;

    let mut r = get("optim")?;
    let step = r.u64()?;
    let lr = r.f64()?;
    let beta1 = r.f64()?;
    let beta2 = r.f64()?;
    let epsilon = r.f64()?;
    let warmup_steps = r.u64()?;
    let clip_norm = r.f64()?;
    let m = r.vec()?;
    let v = r.vec()?;
    r.done()?;
    let mut optim = OptimState::new(m.len(), lr);
    optim.step = step;
    optim.beta1 = beta1;
    optim.beta2 = beta2;
    optim.epsilon = epsilon;
    optim.warmup_steps = warmup_steps;
    optim.clip_norm = clip_norm;
    optim.m = m;
    optim.v = v;

    let mut r = get("progress")?;
    let step_done = r.u64()?;
    let seed = r.u64()?;
    let pending_loss = (r.f64()?, r.u64()?);
    r.done()?;

    let mut r = get("rng")?;
    let rng = RngCursor {
        seed: r.take(32)?.try_into().expect("32 bytes"),
        stream: r.u64()?,
        word_pos: r.u128()?,
    };
    r.done()?;

    let mut r = get("log")?;
    let count = r.u64()? as usize;
    let mut log = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let step = r.u64()?;
        let loss = r.f64()?;
        let has = r.u8()?;
        let mse = r.f64()?;
        let wall_ms = r.u64()?;
        log.push(TrainRecord {
            step,
            loss,
            oracle_mse: (has != 0).then_some(mse),
            wall_ms,
        });
    }
    r.done()?;

    let ck = Checkpoint {
        model,
        lambda_min,
        lambda_max,
        params,
        ema,
        optim,
        step: step_done,
        seed,
        pending_loss,
        rng,
        log,
    };
    let n_params = ck.raw_model()?.n_params();
    if ck.ema.shadow.len() != n_params || ck.optim.m.len() != n_params || ck.optim.v.len() != n_params {
        return Err(malformed("params", "vector lengths disagree with the model"));
    }
    Ok(ck)
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), CheckpointError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, encode(ck))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    decode(&std::fs::read(path)?)
}
