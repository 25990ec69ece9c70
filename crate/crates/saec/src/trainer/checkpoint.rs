//! Checkpointing: a versioned little-endian binary holding every named
//! parameter tensor, the optimizer moments, the event counters, and the
//! replay buffer contents.
//!
//! Saving is a pure function of trainer state — parameter sets and moment
//! maps iterate in name order and the buffer in storage order — so
//! save → load → save produces byte-identical files, and a run resumed from
//! a checkpoint replays exactly the event sequence of an uninterrupted one
//! (randomness is addressed by the persisted counters, not by RNG state).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crate::replay::{ReplayBuffer, Transition};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{Counters, TrainSettings, Trainer, TrainerError};

/// First four bytes of every checkpoint.
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SAEC";
/// Format version this build reads and writes.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Longest name/record field accepted when reading; guards against
/// interpreting a corrupt length prefix as a multi-gigabyte allocation.
const MAX_NAME_LEN: u32 = 4096;
const MAX_RANK: u32 = 8;

fn ckerr(path: &Path, msg: impl Into<String>) -> TrainerError {
    TrainerError::Checkpoint {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

// ---- writing ----

fn w_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn w_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn w_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn w_str(buf: &mut Vec<u8>, s: &str) {
    w_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

fn w_tensor<S: Scalar>(buf: &mut Vec<u8>, t: &Tensor<S>) {
    w_u32(buf, t.rank() as u32);
    for &d in t.shape() {
        w_u64(buf, d as u64);
    }
    for v in t.data().iter() {
        w_f64(buf, v.to_f64_c());
    }
}

fn w_moments<S: Scalar>(buf: &mut Vec<u8>, m: &BTreeMap<String, Vec<S>>) {
    w_u32(buf, m.len() as u32);
    for (name, vals) in m {
        w_str(buf, name);
        w_u64(buf, vals.len() as u64);
        for v in vals {
            w_f64(buf, v.to_f64_c());
        }
    }
}

/// Serialize the trainer to `path`. The file is assembled in memory and
/// written in one call, so a failed write never leaves a half-checkpoint
/// with a valid header.
pub fn save_checkpoint<S: Scalar>(path: &Path, trainer: &Trainer<S>) -> Result<(), TrainerError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    w_u32(&mut buf, CHECKPOINT_VERSION);

    let c = trainer.counters;
    w_u64(&mut buf, c.iterations);
    w_u64(&mut buf, c.episodes);
    w_u64(&mut buf, c.env_steps);
    w_u64(&mut buf, c.grad_steps);

    // Named tensors: the seven parameter sets plus the temperature.
    let mut records: Vec<(String, Tensor<S>)> = Vec::new();
    for (prefix, set) in trainer.named_sets() {
        for (name, t) in set.iter() {
            records.push((format!("{prefix}/{name}"), t.clone()));
        }
    }
    records.push((
        "temperature/log_alpha".to_string(),
        trainer.temperature.log_alpha.clone(),
    ));
    w_u32(&mut buf, records.len() as u32);
    for (name, t) in &records {
        w_str(&mut buf, name);
        w_tensor(&mut buf, t);
    }

    // Optimizer states.
    let opts = trainer.opt_entries();
    w_u32(&mut buf, opts.len() as u32);
    for (name, opt) in opts {
        w_str(&mut buf, name);
        let (steps, m, v) = opt.state();
        w_u64(&mut buf, steps);
        w_moments(&mut buf, m);
        w_moments(&mut buf, v);
    }

    // Replay buffer, in storage order.
    w_u64(&mut buf, trainer.buffer.capacity() as u64);
    w_u64(&mut buf, trainer.buffer.len() as u64);
    w_u64(&mut buf, trainer.buffer.cursor() as u64);
    for t in trainer.buffer.iter() {
        w_tensor(&mut buf, &t.y);
        w_tensor(&mut buf, &t.x_t);
        w_tensor(&mut buf, &t.z_t);
        w_tensor(&mut buf, &t.x_next);
        w_f64(&mut buf, t.r_t);
        buf.push(u8::from(t.done));
    }

    fs::write(path, &buf).map_err(|e| ckerr(path, format!("cannot write: {e}")))
}

// ---- reading ----

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        if self.pos + n > self.bytes.len() {
            return Err(format!(
                "truncated file: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, String> {
        let n = self.u32()?;
        if n > MAX_NAME_LEN {
            return Err(format!("implausible name length {n}"));
        }
        String::from_utf8(self.take(n as usize)?.to_vec()).map_err(|e| format!("bad name: {e}"))
    }

    fn floats<S: Scalar>(&mut self, n: usize) -> Result<Vec<S>, String> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| S::from_f64_c(f64::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }

    /// Shape + data of one tensor record.
    fn tensor<S: Scalar>(&mut self) -> Result<(Vec<usize>, Vec<S>), String> {
        let rank = self.u32()?;
        if rank > MAX_RANK {
            return Err(format!("implausible tensor rank {rank}"));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let d = self.u64()? as usize;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| format!("tensor dims overflow: {dims:?} x {d}"))?;
            dims.push(d);
        }
        // Cheap plausibility bound before allocating.
        if numel * 8 > self.bytes.len() - self.pos {
            return Err(format!(
                "truncated file: tensor of {numel} elements exceeds remaining bytes"
            ));
        }
        let data = self.floats(numel)?;
        Ok((dims, data))
    }

    fn moments<S: Scalar>(&mut self) -> Result<BTreeMap<String, Vec<S>>, String> {
        let n = self.u32()?;
        let mut out = BTreeMap::new();
        for _ in 0..n {
            let name = self.string()?;
            let len = self.u64()? as usize;
            if len * 8 > self.bytes.len() - self.pos {
                return Err(format!(
                    "truncated file: moment vector {name} of {len} elements exceeds remaining bytes"
                ));
            }
            let vals = self.floats(len)?;
            if out.insert(name.clone(), vals).is_some() {
                return Err(format!("duplicate moment entry {name}"));
            }
        }
        Ok(out)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Rebuild a trainer from `path`. `settings` must describe the same
/// architecture and buffer capacity the checkpoint was written with; every
/// tensor's shape is validated before its data is accepted.
pub fn load_checkpoint<S: Scalar>(
    path: &Path,
    settings: &TrainSettings,
) -> Result<Trainer<S>, TrainerError> {
    let bytes = fs::read(path).map_err(|e| ckerr(path, format!("cannot read: {e}")))?;
    let mut trainer = Trainer::<S>::new(settings.clone())?;
    let mut r = Reader::new(&bytes);
    let fail = |msg: String| ckerr(path, msg);

    let magic = r.take(4).map_err(&fail)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(fail(format!("bad magic {magic:?}: not a checkpoint file")));
    }
    let version = r.u32().map_err(&fail)?;
    if version != CHECKPOINT_VERSION {
        return Err(fail(format!(
            "unsupported format version {version} (this build reads {CHECKPOINT_VERSION})"
        )));
    }

    trainer.counters = Counters {
        iterations: r.u64().map_err(&fail)?,
        episodes: r.u64().map_err(&fail)?,
        env_steps: r.u64().map_err(&fail)?,
        grad_steps: r.u64().map_err(&fail)?,
    };

    // Index every restorable tensor by its stable name. Handles are cheap
    // clones sharing storage with the trainer.
    let mut index: BTreeMap<String, Tensor<S>> = BTreeMap::new();
    for (prefix, set) in trainer.named_sets() {
        for (name, t) in set.iter() {
            index.insert(format!("{prefix}/{name}"), t.clone());
        }
    }
    index.insert(
        "temperature/log_alpha".to_string(),
        trainer.temperature.log_alpha.clone(),
    );

    let n_tensors = r.u32().map_err(&fail)?;
    let mut seen = BTreeSet::new();
    for _ in 0..n_tensors {
        let name = r.string().map_err(&fail)?;
        let (dims, data) = r.tensor::<S>().map_err(&fail)?;
        let target = index
            .get(&name)
            .ok_or_else(|| fail(format!("unknown tensor {name:?}")))?;
        if target.shape() != dims.as_slice() {
            return Err(fail(format!(
                "tensor {name:?}: checkpoint shape {dims:?} does not match configured {:?}",
                target.shape()
            )));
        }
        target.data_mut().copy_from_slice(&data);
        if !seen.insert(name.clone()) {
            return Err(fail(format!("duplicate tensor {name:?}")));
        }
    }
    if let Some(missing) = index.keys().find(|k| !seen.contains(*k)) {
        return Err(fail(format!("missing tensor {missing:?}")));
    }

    // Optimizer states.
    let n_opts = r.u32().map_err(&fail)?;
    let mut opt_states = BTreeMap::new();
    for _ in 0..n_opts {
        let name = r.string().map_err(&fail)?;
        let steps = r.u64().map_err(&fail)?;
        let m = r.moments::<S>().map_err(&fail)?;
        let v = r.moments::<S>().map_err(&fail)?;
        if opt_states.insert(name.clone(), (steps, m, v)).is_some() {
            return Err(fail(format!("duplicate optimizer state {name:?}")));
        }
    }
    for (name, opt) in trainer.opt_entries_mut() {
        let (steps, m, v) = opt_states
            .remove(name)
            .ok_or_else(|| fail(format!("missing optimizer state {name:?}")))?;
        opt.restore(steps, m, v);
    }
    if let Some(extra) = opt_states.keys().next() {
        return Err(fail(format!("unknown optimizer state {extra:?}")));
    }

    // Replay buffer.
    let capacity = r.u64().map_err(&fail)? as usize;
    if capacity != settings.capacity {
        return Err(fail(format!(
            "replay capacity {capacity} in checkpoint does not match configured {}",
            settings.capacity
        )));
    }
    let len = r.u64().map_err(&fail)? as usize;
    if len > capacity {
        return Err(fail(format!(
            "replay length {len} exceeds capacity {capacity}"
        )));
    }
    let cursor = r.u64().map_err(&fail)? as usize;
    if cursor >= capacity.max(1) {
        return Err(fail(format!(
            "replay cursor {cursor} out of range for capacity {capacity}"
        )));
    }
    let arch = &settings.arch;
    let img_shape = [arch.c, arch.h, arch.w];
    let z_shape = [arch.z_dim];
    let mut items = Vec::with_capacity(len);
    for i in 0..len {
        let mut image = |what: &str| -> Result<Tensor<S>, TrainerError> {
            let (dims, data) = r.tensor::<S>().map_err(&fail)?;
            if dims != img_shape {
                return Err(fail(format!(
                    "transition {i}: {what} shape {dims:?} does not match {img_shape:?}"
                )));
            }
            Ok(Tensor::constant(&dims, data)?)
        };
        let y = image("y")?;
        let x_t = image("x_t")?;
        let (zdims, zdata) = r.tensor::<S>().map_err(&fail)?;
        if zdims != z_shape {
            return Err(fail(format!(
                "transition {i}: latent shape {zdims:?} does not match {z_shape:?}"
            )));
        }
        let z_t = Tensor::constant(&zdims, zdata)?;
        let mut image = |what: &str| -> Result<Tensor<S>, TrainerError> {
            let (dims, data) = r.tensor::<S>().map_err(&fail)?;
            if dims != img_shape {
                return Err(fail(format!(
                    "transition {i}: {what} shape {dims:?} does not match {img_shape:?}"
                )));
            }
            Ok(Tensor::constant(&dims, data)?)
        };
        let x_next = image("x_next")?;
        let r_t = r.f64().map_err(&fail)?;
        let done = match r.take(1).map_err(&fail)?[0] {
            0 => false,
            1 => true,
            other => return Err(fail(format!("transition {i}: bad done flag {other}"))),
        };
        items.push(Transition {
            y,
            x_t,
            z_t,
            r_t,
            x_next,
            done,
        });
    }
    trainer.buffer = ReplayBuffer::restore(capacity, items, cursor);

    if r.remaining() != 0 {
        return Err(fail(format!(
            "trailing garbage: {} bytes after the replay section",
            r.remaining()
        )));
    }
    Ok(trainer)
}
