//! On-disk formats: the `WMT1` tensor container, model checkpoints, the
//! rollout store and the append-only verdict log.

use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::TinyDenoiser;
use crate::eval_harness::{check_unique, EvalError, RolloutRecord, Verdict};
use crate::image::RgbImage;
use crate::learned::LearnedConfig;

pub const MAGIC: &[u8; 4] = b"WMT1";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("bad magic {0:?}")]
    Magic([u8; 4]),
    #[error("unsupported dtype code {0}")]
    DType(u8),
    #[error("payload holds {got} bytes, header implies {want}")]
    Size { got: usize, want: usize },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("io: {0}")]
    Stream(#[from] std::io::Error),
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
    #[error("unknown rollout {0}")]
    UnknownRollout(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

fn fmt_at(path: &Path, e: impl std::fmt::Display) -> StoreError {
    StoreError::Format { path: path.to_path_buf(), message: e.to_string() }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn code(&self) -> u8 {
        match self {
            TensorData::F32(_) => 1,
            TensorData::U8(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Header `WMT1`, dtype byte, ndim byte, little-endian `u32` dims, then the
/// row-major little-endian payload.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorContainer {
    pub dims: Vec<u32>,
    pub data: TensorData,
}

impl TensorContainer {
    pub fn new(dims: Vec<u32>, data: TensorData) -> Result<Self, StoreError> {
        let want = dims.iter().map(|&d| d as usize).product::<usize>();
        if dims.len() > u8::MAX as usize || want != data.len() {
            return Err(StoreError::Size { got: data.len(), want });
        }
        Ok(Self { dims, data })
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), StoreError> {
        w.write_all(MAGIC)?;
        w.write_all(&[self.data.code(), self.dims.len() as u8])?;
        for d in &self.dims {
            w.write_all(&d.to_le_bytes())?;
        }
        match &self.data {
            TensorData::F32(v) => {
                let mut buf = Vec::with_capacity(v.len() * 4);
                for x in v {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
                w.write_all(&buf)?;
            }
            TensorData::U8(v) => w.write_all(v)?,
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, StoreError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(StoreError::Magic(magic));
        }
        let mut head = [0u8; 2];
        r.read_exact(&mut head)?;
        let mut dims = Vec::with_capacity(head[1] as usize);
        for _ in 0..head[1] {
            let mut d = [0u8; 4];
            r.read_exact(&mut d)?;
            dims.push(u32::from_le_bytes(d));
        }
        let n = dims.iter().map(|&d| d as usize).product::<usize>();
        let size = match head[0] {
            1 => 4,
            2 => 1,
            c => return Err(StoreError::DType(c)),
        };
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if payload.len() != n * size {
            return Err(StoreError::Size { got: payload.len(), want: n * size });
        }
        let data = if size == 4 {
            TensorData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
        } else {
            TensorData::U8(payload)
        };
        Ok(Self { dims, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_to(&mut v).expect("writing to a Vec cannot fail");
        v
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, StoreError> {
        Self::read_from(&mut &bytes[..])
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        fs::write(path, self.to_bytes()).map_err(io_at(path))
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let bytes = fs::read(path).map_err(io_at(path))?;
        Self::from_bytes(&bytes).map_err(|e| fmt_at(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: LearnedConfig,
    pub parameters: usize,
    pub tensors: Vec<CheckpointEntry>,
    /// Free-form training provenance (corpus, steps, losses).
    pub notes: serde_json::Value,
}

/// Writes `manifest.json` and one `tensors/<name>.wmt` per parameter
/// (stored as 32-bit floats).
pub fn save_checkpoint(dir: &Path, model: &TinyDenoiser, config: &LearnedConfig, notes: serde_json::Value) -> Result<CheckpointManifest, StoreError> {
    let tdir = dir.join("tensors");
    fs::create_dir_all(&tdir).map_err(io_at(&tdir))?;
    let mut tensors = Vec::new();
    for (_, name, t) in model.params.iter() {
        let file = format!("tensors/{name}.wmt");
        let c = TensorContainer::new(t.shape.iter().map(|&d| d as u32).collect(), TensorData::F32(t.data.iter().map(|&x| x as f32).collect()))?;
        c.save(&dir.join(&file))?;
        tensors.push(CheckpointEntry { name: name.to_string(), file, shape: t.shape.clone() });
    }
    let manifest = CheckpointManifest { config: config.clone(), parameters: model.parameter_count(), tensors, notes };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest).map_err(|e| fmt_at(&path, e))?).map_err(io_at(&path))?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<(TinyDenoiser, CheckpointManifest), StoreError> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(io_at(&path))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes).map_err(|e| fmt_at(&path, e))?;
    let mut model = TinyDenoiser::new(manifest.config.denoiser.clone());
    if manifest.tensors.len() != model.params.len() {
        return Err(StoreError::Mismatch(format!("{} tensors for {} parameters", manifest.tensors.len(), model.params.len())));
    }
    for e in &manifest.tensors {
        let id = model.params.find(&e.name).ok_or_else(|| StoreError::Mismatch(format!("unknown parameter {}", e.name)))?;
        let c = TensorContainer::load(&dir.join(&e.file))?;
        let TensorData::F32(v) = c.data else {
            return Err(StoreError::Mismatch(format!("{} is not f32", e.name)));
        };
        let t = model.params.get_mut(id);
        let dims: Vec<usize> = c.dims.iter().map(|&d| d as usize).collect();
        if dims != t.shape {
            return Err(StoreError::Mismatch(format!("{}: shape {:?} vs {:?}", e.name, dims, t.shape)));
        }
        t.data = v.into_iter().map(f64::from).collect();
    }
    Ok((model, manifest))
}

/// `<root>/rollouts/<id>/record.json`, frames at
/// `<root>/rollouts/<id>/<view>/<chunk>_<k>.png`, verdicts in
/// `<root>/verdicts.jsonl`.
#[derive(Debug)]
pub struct RolloutStore {
    root: PathBuf,
    lock: Mutex<()>,
}

impl RolloutStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        let dir = root.join("rollouts");
        fs::create_dir_all(&dir).map_err(io_at(&dir))?;
        Ok(Self { root, lock: Mutex::new(()) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn record_dir(&self, id: &str) -> PathBuf {
        self.root.join("rollouts").join(id)
    }

    pub fn save(&self, record: &RolloutRecord) -> Result<PathBuf, StoreError> {
        let dir = self.record_dir(&record.id);
        fs::create_dir_all(&dir).map_err(io_at(&dir))?;
        for c in &record.chunks {
            for (v, frames) in c.frames.iter().enumerate() {
                let vdir = dir.join(&record.views[v]);
                fs::create_dir_all(&vdir).map_err(io_at(&vdir))?;
                for (k, f) in frames.iter().enumerate() {
                    let p = vdir.join(format!("{:03}_{:02}.png", c.index, k));
                    fs::write(&p, f.to_png_bytes().map_err(|e| fmt_at(&p, e))?).map_err(io_at(&p))?;
                }
            }
        }
        let path = dir.join("record.json");
        fs::write(&path, serde_json::to_vec_pretty(record).map_err(|e| fmt_at(&path, e))?).map_err(io_at(&path))?;
        Ok(dir)
    }

    /// Loads a record; with `frames` the PNGs are read back as well.
    pub fn load(&self, id: &str, frames: bool) -> Result<RolloutRecord, StoreError> {
        let path = self.record_dir(id).join("record.json");
        if !path.exists() {
            return Err(StoreError::UnknownRollout(id.into()));
        }
        let bytes = fs::read(&path).map_err(io_at(&path))?;
        let mut r: RolloutRecord = serde_json::from_slice(&bytes).map_err(|e| fmt_at(&path, e))?;
        if frames {
            let dir = self.record_dir(id);
            for c in r.chunks.iter_mut() {
                c.frames = Vec::with_capacity(r.views.len());
                for (v, name) in r.views.iter().enumerate() {
                    let mut list = Vec::new();
                    for k in 0..c.frame_hashes[v].len() {
                        let p = dir.join(name).join(format!("{:03}_{:02}.png", c.index, k));
                        let bytes = fs::read(&p).map_err(io_at(&p))?;
                        list.push(RgbImage::from_png_bytes(&bytes).map_err(|e| fmt_at(&p, e))?);
                    }
                    c.frames.push(list);
                }
            }
        }
        Ok(r)
    }

    pub fn exists(&self, id: &str) -> bool {
        self.record_dir(id).join("record.json").exists()
    }

    /// All stored records, sorted by id, without frames.
    pub fn list(&self) -> Result<Vec<RolloutRecord>, StoreError> {
        let dir = self.root.join("rollouts");
        let mut ids: Vec<String> = fs::read_dir(&dir)
            .map_err(io_at(&dir))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join("record.json").exists())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        ids.sort();
        ids.iter().map(|id| self.load(id, false)).collect()
    }

    fn verdict_path(&self) -> PathBuf {
        self.root.join("verdicts.jsonl")
    }

    pub fn verdicts(&self) -> Result<Vec<Verdict>, StoreError> {
        let path = self.verdict_path();
        if !path.exists() {
            return Ok(vec![]);
        }
        let f = fs::File::open(&path).map_err(io_at(&path))?;
        let mut out = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(io_at(&path))?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| fmt_at(&path, e))?);
        }
        Ok(out)
    }

    /// Appends a verdict for a stored rollout; one per (rollout, evaluator).
    pub fn add_verdict(&self, v: &Verdict) -> Result<(), StoreError> {
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        if !self.exists(&v.rollout_id) {
            return Err(StoreError::UnknownRollout(v.rollout_id.clone()));
        }
        check_unique(&self.verdicts()?, v)?;
        let path = self.verdict_path();
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(io_at(&path))?;
        let mut line = serde_json::to_string(v).map_err(|e| fmt_at(&path, e))?;
        line.push('\n');
        f.write_all(line.as_bytes()).map_err(io_at(&path))?;
        Ok(())
    }
}
