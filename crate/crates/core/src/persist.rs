//! Bit-exact checkpoints and the waypoint store.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic "CALDCKPT" | version u32 | spec_len u32 | spec (canonical JSON)
//! step u64 | count u32
//! count × { name_len u16 | name | dtype u8 | ndim u8 | dims u64×ndim | offset u64 }
//! payload: f64 values, tensor by tensor
//! ```
//!
//! Offsets are relative to the start of the payload. Tensors named `optim.*`
//! or `live.*` carry optimizer state and are not model parameters.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distill::{AdamW, LiveTeacher, Moments, OptimConfig, StepObserver, StepRecord, TrainState, Trainer, WaypointSource};
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::numcore::Tensor;

const MAGIC: &[u8; 8] = b"CALDCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

/// A loaded checkpoint: model, training step and any extra state tensors.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub step: usize,
    pub extras: BTreeMap<String, Tensor>,
}

fn is_extra(name: &str) -> bool {
    name.starts_with("optim.") || name.starts_with("live.")
}

fn encode(model: &Model, step: usize, extras: &BTreeMap<String, Tensor>) -> Result<Vec<u8>> {
    let spec = model.spec().to_canonical();
    let tensors: Vec<(&String, &Tensor)> = model.params().iter().chain(extras.iter()).collect();
    let mut seen = std::collections::BTreeSet::new();
    for (name, _) in &tensors {
        if !seen.insert(name.as_str()) {
            return Err(Error::Invalid(format!("duplicate tensor name {name}")));
        }
        if name.len() > u16::MAX as usize {
            return Err(Error::Invalid(format!("tensor name too long: {name}")));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(spec.len() as u32).to_le_bytes());
    out.extend_from_slice(spec.as_bytes());
    out.extend_from_slice(&(step as u64).to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in &tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.push(t.ndim() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 8 * t.len() as u64;
    }
    out.reserve(offset as usize);
    for (_, t) in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Write `bytes` to `path` via a synced temporary file and a rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes)
        .and_then(|_| f.sync_all())
        .map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(model: &Model, step: usize, path: &Path) -> Result<()> {
    save_checkpoint_with(model, step, &BTreeMap::new(), path)
}

/// Save with extra state tensors (names must start with `optim.` or `live.`).
pub fn save_checkpoint_with(
    model: &Model,
    step: usize,
    extras: &BTreeMap<String, Tensor>,
    path: &Path,
) -> Result<()> {
    if let Some(bad) = extras.keys().find(|k| !is_extra(k)) {
        return Err(Error::Invalid(format!("extra tensor {bad} needs an optim. or live. prefix")));
    }
    write_atomic(path, &encode(model, step, extras)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn bad(&self, reason: impl Into<String>) -> Error {
        Error::CorruptCheckpoint {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.bad(format!("truncated at byte {}", self.pos))),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode(buf: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0, path };
    if r.take(8)? != MAGIC {
        return Err(r.bad("bad magic"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(r.bad(format!("unknown version {version}")));
    }
    let spec_len = r.u32()? as usize;
    let spec_text = std::str::from_utf8(r.take(spec_len)?).map_err(|_| r.bad("spec is not UTF-8"))?;
    let spec = ModelSpec::from_canonical(spec_text).map_err(|e| r.bad(format!("spec: {e}")))?;
    let step = r.u64()? as usize;
    let count = r.u32()? as usize;
    let mut table = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| r.bad("tensor name is not UTF-8"))?
            .to_string();
        let dtype = r.u8()?;
        if dtype != DTYPE_F64 {
            return Err(r.bad(format!("{name}: unsupported dtype {dtype}")));
        }
        let ndim = r.u8()? as usize;
        let shape: Vec<usize> = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
        let offset = r.u64()? as usize;
        table.push((name, shape, offset));
    }
    let payload = &buf[r.pos..];
    let mut params = BTreeMap::new();
    let mut extras = BTreeMap::new();
    let mut expected_offset = 0usize;
    for (name, shape, offset) in table {
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes = len.and_then(|l| l.checked_mul(8));
        let Some(bytes) = bytes.filter(|_| offset == expected_offset) else {
            return Err(r.bad(format!("{name}: inconsistent offset or shape")));
        };
        let Some(raw) = payload.get(offset..offset + bytes) else {
            return Err(r.bad(format!("{name}: payload truncated")));
        };
        expected_offset += bytes;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| r.bad(format!("{name}: {e}")))?;
        let slot = if is_extra(&name) { &mut extras } else { &mut params };
        if slot.insert(name.clone(), t).is_some() {
            return Err(r.bad(format!("duplicate tensor {name}")));
        }
    }
    if expected_offset != payload.len() {
        return Err(r.bad("trailing bytes after payload"));
    }
    let model = Model::from_params(spec, params).map_err(|e| r.bad(format!("spec mismatch: {e}")))?;
    Ok(Checkpoint { model, step, extras })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf, path)
}

pub fn load_model(path: &Path) -> Result<Model> {
    Ok(load_checkpoint(path)?.model)
}

/// Hex SHA-256 of a file.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

// ----- training state ------------------------------------------------------

fn optim_extras(opt: &AdamW, out: &mut BTreeMap<String, Tensor>) {
    out.insert("optim.t".into(), Tensor::scalar(opt.t as f64));
    for (name, mo) in &opt.state {
        out.insert(format!("optim.m.{name}"), mo.m.clone());
        out.insert(format!("optim.v.{name}"), mo.v.clone());
    }
}

fn optim_from_extras(extras: &BTreeMap<String, Tensor>, config: OptimConfig, path: &Path) -> Result<AdamW> {
    let bad = |reason: &str| Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    let t = extras.get("optim.t").ok_or_else(|| bad("missing optimizer step"))?.item();
    let mut opt = AdamW::new(config);
    opt.t = t as u64;
    for (name, m) in extras.range("optim.m.".to_string().."optim.m/".to_string()) {
        let p = &name["optim.m.".len()..];
        let v = extras
            .get(&format!("optim.v.{p}"))
            .ok_or_else(|| bad("second moment missing"))?;
        opt.state.insert(
            p.to_string(),
            Moments {
                m: m.clone(),
                v: v.clone(),
            },
        );
    }
    Ok(opt)
}

/// Files that make up a saved [`TrainState`] in `dir`.
pub fn train_state_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join("student.ckpt"), dir.join("teacher.ckpt"))
}

pub fn save_train_state(state: &TrainState, dir: &Path) -> Result<()> {
    let (sp, tp) = train_state_paths(dir);
    if let Some(t) = &state.teacher {
        let mut ex = BTreeMap::new();
        optim_extras(&t.optim, &mut ex);
        ex.insert("live.updates".into(), Tensor::scalar(t.updates as f64));
        save_checkpoint_with(&t.model, state.step, &ex, &tp)?;
    }
    let mut ex = BTreeMap::new();
    optim_extras(&state.optim, &mut ex);
    save_checkpoint_with(&state.student, state.step, &ex, &sp)
}

/// Load a state written by [`save_train_state`]; optimizer hyperparameters
/// come from the run configuration.
pub fn load_train_state(dir: &Path, optim: OptimConfig, teacher_optim: Option<OptimConfig>) -> Result<TrainState> {
    let (sp, tp) = train_state_paths(dir);
    let s = load_checkpoint(&sp)?;
    let teacher = match teacher_optim {
        None => None,
        Some(cfg) => {
            let t = load_checkpoint(&tp)?;
            if t.step != s.step {
                return Err(Error::CorruptCheckpoint {
                    path: tp,
                    reason: format!("teacher at step {} but student at {}", t.step, s.step),
                });
            }
            let updates = t
                .extras
                .get("live.updates")
                .map(|u| u.item() as usize)
                .unwrap_or(0);
            Some(LiveTeacher {
                optim: optim_from_extras(&t.extras, cfg, &tp)?,
                model: t.model,
                updates,
            })
        }
    };
    Ok(TrainState {
        step: s.step,
        optim: optim_from_extras(&s.extras, optim, &sp)?,
        student: s.model,
        teacher,
    })
}

/// Observer that saves the train state every `every` steps and at the end.
pub struct CheckpointEvery {
    pub dir: PathBuf,
    pub every: usize,
}

impl StepObserver for CheckpointEvery {
    fn on_step(&mut self, trainer: &Trainer, record: &StepRecord) -> Result<()> {
        if (self.every > 0 && record.step % self.every == 0) || trainer.is_done() {
            save_train_state(&trainer.state(), &self.dir)?;
        }
        Ok(())
    }
}

// ----- waypoints -----------------------------------------------------------

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WaypointEntry {
    /// 1-based, contiguous.
    pub index: usize,
    /// Teacher fine-tuning step at which the checkpoint was taken.
    pub teacher_step: usize,
    /// First student step that uses this waypoint under the switching
    /// schedule with the same interval.
    pub active_from_student_step: usize,
    pub file: String,
    pub sha256: String,
}

pub const MANIFEST: &str = "manifest.jsonl";

/// Directory of teacher checkpoints plus a line-delimited manifest.
#[derive(Debug, Clone)]
pub struct WaypointStore {
    dir: PathBuf,
    interval: usize,
    entries: Vec<WaypointEntry>,
}

impl WaypointStore {
    /// Open or create the store in `dir` for waypoints every `interval` teacher steps.
    pub fn create(dir: &Path, interval: usize) -> Result<Self> {
        if interval == 0 {
            return Err(Error::Invalid("waypoint interval must be >= 1".into()));
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let entries = if dir.join(MANIFEST).exists() {
            Self::read_manifest(dir)?
        } else {
            vec![]
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            interval,
            entries,
        })
    }

    /// Open an existing store and check the manifest's structure.
    pub fn open(dir: &Path) -> Result<Self> {
        let entries = Self::read_manifest(dir)?;
        if entries.is_empty() {
            return Err(Error::Waypoints {
                path: dir.to_path_buf(),
                reason: "store is empty".into(),
            });
        }
        let interval = match entries.get(1) {
            Some(e) => e.active_from_student_step - 1,
            None => entries[0].teacher_step.max(1),
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            interval,
            entries,
        })
    }

    fn read_manifest(dir: &Path) -> Result<Vec<WaypointEntry>> {
        let path = dir.join(MANIFEST);
        let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut entries: Vec<WaypointEntry> = Vec::new();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let e: WaypointEntry = serde_json::from_str(&line).map_err(|e| Error::Waypoints {
                path: path.clone(),
                reason: format!("line {}: {e}", n + 1),
            })?;
            let ok_index = e.index == entries.len() + 1;
            let ok_step = entries.last().map_or(true, |p| e.teacher_step > p.teacher_step);
            if !ok_index || !ok_step {
                return Err(Error::Waypoints {
                    path: path.clone(),
                    reason: format!("line {}: indices must be contiguous from 1 with increasing steps", n + 1),
                });
            }
            entries.push(e);
        }
        Ok(entries)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn interval(&self) -> usize {
        self.interval
    }

    pub fn entries(&self) -> &[WaypointEntry] {
        &self.entries
    }

    pub fn last_step(&self) -> Option<usize> {
        self.entries.last().map(|e| e.teacher_step)
    }

    /// Save `model` as the next waypoint. Steps at or before the last entry
    /// are ignored, which makes re-running an interrupted recording safe.
    pub fn append(&mut self, model: &Model, teacher_step: usize) -> Result<bool> {
        if self.last_step().is_some_and(|s| teacher_step <= s) {
            return Ok(false);
        }
        let index = self.entries.len() + 1;
        let file = format!("waypoint-{index:04}.ckpt");
        let path = self.dir.join(&file);
        save_checkpoint(model, teacher_step, &path)?;
        let entry = WaypointEntry {
            index,
            teacher_step,
            active_from_student_step: (index - 1) * self.interval + 1,
            file,
            sha256: file_sha256(&path)?,
        };
        let mpath = self.dir.join(MANIFEST);
        let mut m = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&mpath)
            .map_err(|e| Error::io(&mpath, e))?;
        let line = serde_json::to_string(&entry)?;
        writeln!(m, "{line}")
            .and_then(|_| m.sync_all())
            .map_err(|e| Error::io(&mpath, e))?;
        self.entries.push(entry);
        Ok(true)
    }

    /// Re-hash every file against the manifest.
    pub fn verify(&self) -> Result<()> {
        for e in &self.entries {
            let got = file_sha256(&self.dir.join(&e.file))?;
            if got != e.sha256 {
                return Err(Error::Waypoints {
                    path: self.dir.join(&e.file),
                    reason: format!("hash mismatch for waypoint {}", e.index),
                });
            }
        }
        Ok(())
    }
}

impl WaypointSource for WaypointStore {
    fn count(&self) -> usize {
        self.entries.len()
    }

    fn load(&self, index: usize) -> Result<Model> {
        let e = index
            .checked_sub(1)
            .and_then(|i| self.entries.get(i))
            .ok_or_else(|| Error::Waypoints {
                path: self.dir.clone(),
                reason: format!("no waypoint {index}"),
            })?;
        let path = self.dir.join(&e.file);
        if file_sha256(&path)? != e.sha256 {
            return Err(Error::Waypoints {
                path,
                reason: "hash mismatch".into(),
            });
        }
        load_model(&path)
    }
}

/// Observer that records waypoints at steps `T_w, 2T_w, …` and the final step.
pub struct WaypointRecorder {
    pub store: WaypointStore,
}

impl StepObserver for WaypointRecorder {
    fn on_step(&mut self, trainer: &Trainer, record: &StepRecord) -> Result<()> {
        if record.step % self.store.interval() == 0 || trainer.is_done() {
            self.store.append(trainer.student(), record.step)?;
        }
        Ok(())
    }
}

/// Waypoint steps for a run of `total` steps: multiples of `interval`, then `total`.
pub fn waypoint_steps(total: usize, interval: usize) -> Vec<usize> {
    let mut s: Vec<usize> = (1..=total / interval).map(|k| k * interval).collect();
    if total > 0 && s.last() != Some(&total) {
        s.push(total);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HeadKind, MixerKind};

    fn model() -> Model {
        let spec = ModelSpec {
            vocab: 5,
            max_len: 6,
            width: 4,
            heads: 2,
            ffn_hidden: 6,
            blocks: vec![MixerKind::Attention, MixerKind::Ssm],
            head: HeadKind::Classify { classes: 2 },
            causal: false,
            linformer: None,
            ssm_state: 3,
        };
        Model::init(spec, 11).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let m = model();
        save_checkpoint(&m, 42, &p).unwrap();
        let c = load_checkpoint(&p).unwrap();
        assert!(c.model.bit_eq(&m));
        assert_eq!(c.step, 42);
        assert!(c.extras.is_empty());
    }

    #[test]
    fn truncation_and_bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&model(), 1, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
            fs::write(&p, &bytes[..cut]).unwrap();
            assert!(matches!(load_checkpoint(&p), Err(Error::CorruptCheckpoint { .. })), "cut {cut}");
        }
        let mut b = bytes.clone();
        b[0] = b'X';
        fs::write(&p, &b).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::CorruptCheckpoint { .. })));
        let mut b = bytes;
        b[8] = 9;
        fs::write(&p, &b).unwrap();
        let err = load_checkpoint(&p).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn waypoint_steps_count() {
        assert_eq!(waypoint_steps(10, 3), [3, 6, 9, 10]);
        assert_eq!(waypoint_steps(10, 10), [10]);
        assert_eq!(waypoint_steps(10, 20), [10]);
    }

    #[test]
    fn store_append_verify_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = WaypointStore::create(dir.path(), 3).unwrap();
        let m = model();
        assert!(s.append(&m, 3).unwrap());
        assert!(s.append(&m, 6).unwrap());
        assert!(!s.append(&m, 6).unwrap());
        s.verify().unwrap();
        let r = WaypointStore::open(dir.path()).unwrap();
        assert_eq!(r.entries(), s.entries());
        assert_eq!(r.entries()[1].active_from_student_step, 4);
        assert!(r.load(2).unwrap().bit_eq(&m));

        let f = dir.path().join(&r.entries()[0].file);
        let mut b = fs::read(&f).unwrap();
        let n = b.len();
        b[n - 1] ^= 1;
        fs::write(&f, b).unwrap();
        assert!(r.verify().is_err());
        assert!(r.load(1).is_err());
    }
}
