//! Model checkpoints and resumable train state.
//!
//! Checkpoint container (`*.ckpt`), little-endian throughout:
//!
//! ```text
//! magic   8 bytes  b"TSEMODL1"
//! u32     length of the model-config JSON
//! bytes   model-config JSON (serde)
//! u32     number of parameter entries
//! entry   repeated:
//!   u16   name length, then UTF-8 name (dotted path, e.g.
//!         "stage1.extractor.stack0.block0.dconv.weight")
//!   u32   rows, u32 cols
//!   f32   rows*cols values, row-major
//! ```
//!
//! Parameter names follow the registry: `speech_encoder.scale{1..3}.weight`,
//! `speaker_encoder.{input_norm,block{i},proj,classifier}.*`, and per stage
//! `stage{k}.extractor.*`, `stage{k}.decoder.scale{1..3}.weight`,
//! `stage{k}.fusion.w{1..3}`. Values are stored as f32; loading widens them
//! back, so a save/load round trip is exact once parameters came from a
//! checkpoint.
//!
//! The train-state file (`*.state`) is a private, full-precision snapshot
//! used for resuming: config + schedule counters as JSON, then f64 parameter
//! and optimizer-moment vectors.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::ModelConfig;
use crate::pipeline::MultiStageModel;

const CKPT_MAGIC: &[u8; 8] = b"TSEMODL1";
const STATE_MAGIC: &[u8; 8] = b"TSESTAT1";

fn corrupt(path: &Path, message: impl Into<String>) -> Error {
    Error::Corrupt {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Writes the model as an interoperable f32 checkpoint.
pub fn save_checkpoint(model: &MultiStageModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let config_json = serde_json::to_vec(&model.config).expect("config serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config_json);
    let entries = model.store.entries();
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        buf.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        buf.extend_from_slice(e.name.as_bytes());
        buf.extend_from_slice(&(e.rows as u32).to_le_bytes());
        buf.extend_from_slice(&(e.cols as u32).to_le_bytes());
        let values = &model.store.data()[e.offset..e.offset + e.len()];
        for &v in values {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(corrupt(self.path, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Loads a checkpoint, reconstructing the model for its embedded config.
/// Any missing, unknown, or reshaped key is reported by name.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<MultiStageModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        at: 0,
        path,
    };
    if r.take(8, "magic")? != CKPT_MAGIC {
        return Err(corrupt(path, "bad magic (not a model checkpoint)"));
    }
    let config_len = r.u32("config length")? as usize;
    let config_bytes = r.take(config_len, "config json")?;
    let config: ModelConfig = serde_json::from_slice(config_bytes)
        .map_err(|e| corrupt(path, format!("config json: {e}")))?;
    config.validate().map_err(|e| corrupt(path, e.to_string()))?;
    let count = r.u32("entry count")? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| corrupt(path, "non-utf8 parameter name"))?
            .to_string();
        let rows = r.u32(&format!("rows of `{name}`"))? as usize;
        let cols = r.u32(&format!("cols of `{name}`"))? as usize;
        let raw = r.take(rows * cols * 4, &format!("values of `{name}`"))?;
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(corrupt(path, format!("non-finite value {bad} in `{name}`")));
        }
        entries.push((name, rows, cols, values));
    }
    if r.at != bytes.len() {
        return Err(corrupt(path, "trailing bytes after last entry"));
    }
    MultiStageModel::from_parts(config, entries).map_err(|e| corrupt(path, e.to_string()))
}

/// Schedule counters and optimizer state captured between epochs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainStateMeta {
    pub config: ModelConfig,
    /// Epochs fully completed so far (resume starts at this epoch index).
    pub epochs_done: usize,
    pub current_lr: f64,
    pub best_val_metric: f64,
    pub epochs_since_best: usize,
    pub epochs_since_lr_drop: usize,
    pub adam_step: u64,
    /// Master seed; batch order and crops are pure functions of
    /// (seed, epoch, index), so this is the whole RNG state.
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub meta: TrainStateMeta,
    pub params: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
}

fn write_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for &v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_train_state(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_vec(&state.meta).expect("meta serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(STATE_MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    write_f64s(&mut buf, &state.params);
    write_f64s(&mut buf, &state.adam_m);
    write_f64s(&mut buf, &state.adam_v);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_train_state(path: impl AsRef<Path>) -> Result<TrainState> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        at: 0,
        path,
    };
    if r.take(8, "magic")? != STATE_MAGIC {
        return Err(corrupt(path, "bad magic (not a train state)"));
    }
    let json_len = r.u32("meta length")? as usize;
    let meta: TrainStateMeta = serde_json::from_slice(r.take(json_len, "meta json")?)
        .map_err(|e| corrupt(path, format!("meta json: {e}")))?;
    let mut read_f64s = |what: &str| -> Result<Vec<f64>> {
        let n = u64::from_le_bytes(r.take(8, what)?.try_into().unwrap()) as usize;
        let raw = r.take(n * 8, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    let params = read_f64s("params")?;
    let adam_m = read_f64s("adam_m")?;
    let adam_v = read_f64s("adam_v")?;
    if params.len() != adam_m.len() || params.len() != adam_v.len() {
        return Err(corrupt(path, "parameter/moment length mismatch"));
    }
    Ok(TrainState {
        meta,
        params,
        adam_m,
        adam_v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::tests_support::tiny_model;

    #[test]
    fn checkpoint_round_trip_is_exact_after_first_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let model = tiny_model(2, 42);
        save_checkpoint(&model, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded.config, model.config);
        // Widened f32 values differ from the f64 originals by at most one
        // f32 ulp, and a second round trip is bit-exact.
        for (a, b) in model.store.data().iter().zip(loaded.store.data()) {
            assert!((a - b).abs() <= a.abs().max(1e-30) * 1e-7);
        }
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn corrupt_checkpoint_errors_name_the_problem() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = tiny_model(1, 7);
        save_checkpoint(&model, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 10);
        fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("truncated"), "{msg}");
        // Truncation mid-entry points at the parameter being read.
        assert!(msg.contains('`'), "should name a key: {msg}");
    }

    #[test]
    fn renamed_key_is_rejected_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = tiny_model(1, 7);
        save_checkpoint(&model, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        // Flip a character inside the first parameter name.
        let name_at = 8 + 4 + {
            let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
            len
        } + 4 + 2;
        bytes[name_at] = b'x';
        fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains('`'), "{err}");
    }

    #[test]
    fn train_state_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.state");
        let model = tiny_model(1, 3);
        let n = model.store.len();
        let state = TrainState {
            meta: TrainStateMeta {
                config: model.config.clone(),
                epochs_done: 3,
                current_lr: 5e-4,
                best_val_metric: 4.25,
                epochs_since_best: 1,
                epochs_since_lr_drop: 1,
                adam_step: 150,
                seed: 99,
            },
            params: model.store.data().to_vec(),
            adam_m: vec![0.125; n],
            adam_v: vec![0.5; n],
        };
        save_train_state(&state, &path).unwrap();
        let back = load_train_state(&path).unwrap();
        assert_eq!(back.meta, state.meta);
        assert_eq!(back.params, state.params);
        assert_eq!(back.adam_m, state.adam_m);
        assert_eq!(back.adam_v, state.adam_v);
    }
}
