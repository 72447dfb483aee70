//! Single-file checkpoint archive: every parameter array, the key memory and
//! the run configuration, stored as a safetensors file whose header
//! metadata carries the format tag, stage and JSON-encoded settings.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Component, MqclModel, ParamSet, ProjVector, Refiner};
use crate::multiqueue::{KeyMemory, KeyStore, MemoryBank, MemoryKind, MultiQueue};

use super::config::PipelineConfig;

pub const CHECKPOINT_FORMAT: &str = "mqcl-checkpoint/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    PostWrl,
    PostCrr,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::PostWrl => "post-wrl",
            Stage::PostCrr => "post-crr",
        }
    }
}

/// Trained model state plus everything needed to resume or evaluate it.
pub struct Checkpoint {
    pub stage: Stage,
    pub model: MqclModel,
    pub memory: KeyStore,
    pub config: PipelineConfig,
    pub class_names: Vec<String>,
    pub data_dir: Option<PathBuf>,
}

impl std::fmt::Debug for Checkpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Checkpoint")
            .field("stage", &self.stage)
            .field("memory", &self.memory.kind())
            .field("keys", &self.memory.len())
            .field("has_key_branch", &self.model.key.is_some())
            .field("has_refiner", &self.model.refiner.is_some())
            .finish()
    }
}

const HEADER_KEY: &str = "mqcl";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    stage: Stage,
    config: PipelineConfig,
    memory: MemoryMeta,
    class_names: Vec<String>,
    data_dir: Option<PathBuf>,
}

/// Read first so that a different format version reports its tag rather
/// than a field error.
#[derive(Deserialize)]
struct FormatOnly {
    format: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct MemoryMeta {
    kind: MemoryKind,
    num_classes: usize,
    capacity: usize,
    dim: usize,
    fill_counts: Vec<usize>,
}

impl Checkpoint {
    pub fn num_classes(&self) -> usize {
        self.memory.num_classes()
    }

    /// Checks that the components present match the stage tag.
    pub fn check_consistency(&self) -> Result<()> {
        match (self.stage, self.model.refiner.is_some(), self.model.key.is_some()) {
            (Stage::PostWrl, true, _) => Err(Error::Checkpoint("post-wrl checkpoint carries a refiner".into())),
            (Stage::PostCrr, false, _) => Err(Error::Checkpoint("post-crr checkpoint has no refiner".into())),
            (Stage::PostCrr, _, true) => Err(Error::Checkpoint("post-crr checkpoint still has the key branch".into())),
            _ => Ok(()),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check_consistency()?;
        let mut arrays: Vec<(String, Array)> = Vec::new();
        let model = &self.model;
        push_params(&mut arrays, "encoder_q.", &model.query.encoder_params)?;
        push_params(&mut arrays, "proj_q.", &model.query.projection_params)?;
        if let Some(key) = &model.key {
            push_params(&mut arrays, "encoder_k.", &key.encoder_params)?;
            push_params(&mut arrays, "proj_k.", &key.projection_params)?;
        }
        push_params(&mut arrays, "head.", &model.head.params)?;
        if let Some(refiner) = &model.refiner {
            push_params(&mut arrays, "refiner.", &refiner.params)?;
        }

        let keys = self.memory.all();
        if !keys.is_empty() {
            let dim = self.memory.dim();
            let vectors: Vec<u8> = keys.iter().flat_map(|k| k.vector.iter().flat_map(|v| v.to_le_bytes())).collect();
            arrays.push(("memory.vectors".into(), Array { dtype: Dtype::F64, shape: vec![keys.len(), dim], data: vectors }));
            let idx: Vec<u8> = keys.iter().flat_map(|k| (k.image_index as i64).to_le_bytes()).collect();
            arrays.push(("memory.image_index".into(), Array { dtype: Dtype::I64, shape: vec![keys.len()], data: idx }));
            let weather: Vec<u8> = keys.iter().flat_map(|k| (k.weather as i64).to_le_bytes()).collect();
            arrays.push(("memory.weather".into(), Array { dtype: Dtype::I64, shape: vec![keys.len()], data: weather }));
        }

        let (capacity, fill_counts) = match &self.memory {
            KeyStore::Queue(q) => (q.capacity(), q.fill_counts()),
            KeyStore::Bank(b) => (0, vec![b.len()]),
        };
        let memory_meta = MemoryMeta {
            kind: self.memory.kind(),
            num_classes: self.memory.num_classes(),
            capacity,
            dim: self.memory.dim(),
            fill_counts,
        };
        let header = Header {
            format: CHECKPOINT_FORMAT.to_string(),
            stage: self.stage,
            config: self.config.clone(),
            memory: memory_meta,
            class_names: self.class_names.clone(),
            data_dir: self.data_dir.clone(),
        };
        // One entry only: the container stores metadata in a hash map, whose
        // key order would otherwise make the bytes vary between saves.
        let metadata = HashMap::from([(HEADER_KEY.to_string(), serde_json::to_string(&header).expect("header serializes"))]);

        let views = arrays
            .iter()
            .map(|(name, a)| Ok((name.clone(), TensorView::new(a.dtype, a.shape.clone(), &a.data)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(safetensors::serialize(views, Some(metadata))?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &Device::Cpu).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_bytes(bytes: &[u8], device: &Device) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(bytes)?;
        let meta = header.metadata().clone().ok_or_else(|| Error::Checkpoint("missing header metadata".into()))?;
        let raw = meta.get(HEADER_KEY).ok_or_else(|| Error::Checkpoint(format!("missing metadata '{HEADER_KEY}'")))?;
        let format: FormatOnly = serde_json::from_str(raw).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if format.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format '{}'", format.format)));
        }
        let Header { stage, config, memory: memory_meta, class_names, data_dir, .. } =
            serde_json::from_str(raw).map_err(|e| Error::Checkpoint(e.to_string()))?;

        let st = SafeTensors::deserialize(bytes)?;
        let mut tensors = HashMap::new();
        for (name, view) in st.tensors() {
            if name.starts_with("memory.") {
                continue;
            }
            let dtype = match view.dtype() {
                Dtype::F32 => DType::F32,
                other => return Err(Error::Checkpoint(format!("'{name}' has unexpected dtype {other:?}"))),
            };
            tensors.insert(name.clone(), Tensor::from_raw_buffer(view.data(), dtype, view.shape(), device)?);
        }

        let mut model = MqclModel::new(&config.model, 0, device)?;
        model.query.encoder_params.load("encoder_q.", &tensors)?;
        model.query.projection_params.load("proj_q.", &tensors)?;
        model.head.params.load("head.", &tensors)?;
        if tensors.keys().any(|k| k.starts_with("encoder_k.")) {
            let key = model.key.as_ref().expect("fresh model has a key branch");
            key.encoder_params.load("encoder_k.", &tensors)?;
            key.projection_params.load("proj_k.", &tensors)?;
        } else {
            model.drop_key_branch();
        }
        if tensors.keys().any(|k| k.starts_with("refiner.")) {
            model.attach_refiner(0)?;
            let refiner: &Component<Refiner> = model.refiner.as_ref().expect("just attached");
            refiner.params.load("refiner.", &tensors)?;
        }

        let keys = read_keys(&st, memory_meta.dim)?;
        let memory = match memory_meta.kind {
            MemoryKind::MemoryBank => {
                let mut bank = MemoryBank::new(memory_meta.num_classes, memory_meta.dim)?;
                for k in keys {
                    bank.push(k)?;
                }
                KeyStore::Bank(bank)
            }
            kind => KeyStore::Queue(MultiQueue::from_parts(
                memory_meta.num_classes,
                memory_meta.capacity,
                memory_meta.dim,
                kind == MemoryKind::SingleQueue,
                &memory_meta.fill_counts,
                keys,
            )?),
        };
        let ckpt = Self { stage, model, memory, config, class_names, data_dir };
        ckpt.check_consistency()?;
        Ok(ckpt)
    }

    /// Short content hash identifying a saved checkpoint file.
    pub fn file_id(path: impl AsRef<Path>) -> Result<String> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(hex::encode(&Sha256::digest(&bytes)[..8]))
    }
}

struct Array {
    dtype: Dtype,
    shape: Vec<usize>,
    data: Vec<u8>,
}

fn push_params(out: &mut Vec<(String, Array)>, prefix: &str, params: &ParamSet) -> Result<()> {
    for (name, t) in params.tensors()? {
        let values: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        out.push((format!("{prefix}{name}"), Array { dtype: Dtype::F32, shape: t.dims().to_vec(), data }));
    }
    Ok(())
}

fn read_keys(st: &SafeTensors, dim: usize) -> Result<Vec<ProjVector>> {
    let Ok(vectors) = st.tensor("memory.vectors") else {
        return Ok(Vec::new());
    };
    let idx = st.tensor("memory.image_index")?;
    let weather = st.tensor("memory.weather")?;
    let n = idx.shape()[0];
    if vectors.shape() != [n, dim] || weather.shape() != [n] {
        return Err(Error::Checkpoint("memory arrays disagree in shape".into()));
    }
    let f64s: Vec<f64> = vectors.data().chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let i64s = |v: &TensorView| -> Vec<i64> { v.data().chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect() };
    let (idx, weather) = (i64s(&idx), i64s(&weather));
    Ok((0..n)
        .map(|i| ProjVector::new(f64s[i * dim..(i + 1) * dim].to_vec(), idx[i] as u64, weather[i] as usize))
        .collect())
}
