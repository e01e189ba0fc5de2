//! Checkpoint files: an 8-byte little-endian header length, a JSON header, then
//! raw little-endian tensor data at the offsets listed in the header.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, ModelError, SequenceModel};
use crate::numerics::{Dtype, Scalar, Tensor};
use crate::training::AdamState;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    /// Byte offset from the start of the data section.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    /// Optimizer steps already taken.
    pub step: usize,
    /// The plan that produced this state; resuming requires an identical plan.
    pub plan: serde_json::Value,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model_config: ModelConfig,
    tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    training: Option<TrainingState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    adam_t: Option<u64>,
}

/// A loaded checkpoint; tensors are held widened to `f64`.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub dtype: Dtype,
    pub tensors: Vec<TensorEntry>,
    values: Vec<Tensor<f64>>,
    pub training: Option<TrainingState>,
    adam_t: Option<u64>,
}

const MOMENT_PREFIXES: [&str; 2] = ["optim.m.", "optim.v."];

pub fn save<T: Scalar>(
    path: &Path,
    model: &SequenceModel<T>,
    training: Option<(&TrainingState, &AdamState<T>)>,
) -> Result<(), CheckpointError> {
    let mut named: Vec<(String, &Tensor<T>)> = model.names().iter().cloned().zip(model.params()).collect();
    if let Some((_, adam)) = training {
        for (prefix, moments) in MOMENT_PREFIXES.iter().zip([&adam.m, &adam.v]) {
            for (name, t) in model.names().iter().zip(moments.iter()) {
                named.push((format!("{prefix}{name}"), t));
            }
        }
    }
    let mut data = Vec::new();
    let mut tensors = Vec::with_capacity(named.len());
    for (name, t) in &named {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE,
            offset: data.len(),
        });
        for &v in t.data() {
            v.write_le(&mut data);
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        model_config: model.config().clone(),
        tensors,
        training: training.map(|(s, _)| s.clone()),
        adam_t: training.map(|(_, a)| a.t),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut bytes = Vec::with_capacity(8 + json.len() + data.len());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&data);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

fn read_values<T: Scalar>(raw: &[u8], n: usize) -> Vec<f64> {
    raw.chunks_exact(T::DTYPE.size_bytes())
        .take(n)
        .map(|c| T::read_le(c).as_f64())
        .collect()
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 8 {
        return Err(CheckpointError::Format("file shorter than its length prefix".into()));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let header_end = 8usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| CheckpointError::Format("header length exceeds file".into()))?;
    let header: Header = serde_json::from_slice(&bytes[8..header_end]).map_err(|e| CheckpointError::Format(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Mismatch(format!(
            "format version {} (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    let data = &bytes[header_end..];
    let dtype = header.tensors.first().map_or(Dtype::F32, |t| t.dtype);
    let mut values = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        if e.dtype != dtype {
            return Err(CheckpointError::Format("mixed dtypes".into()));
        }
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * e.dtype.size_bytes();
        if end > data.len() {
            return Err(CheckpointError::Format(format!("tensor {} runs past the end of the file", e.name)));
        }
        let raw = &data[e.offset..end];
        let vals = match e.dtype {
            Dtype::F32 => read_values::<f32>(raw, n),
            Dtype::F64 => read_values::<f64>(raw, n),
        };
        values.push(Tensor::new(e.shape.clone(), vals).map_err(|err| CheckpointError::Format(err.to_string()))?);
    }
    Ok(Checkpoint {
        model_config: header.model_config,
        dtype,
        tensors: header.tensors,
        values,
        training: header.training,
        adam_t: header.adam_t,
    })
}

impl Checkpoint {
    fn named<U: Scalar>(&self, prefix: &str) -> Vec<(String, Tensor<U>)> {
        self.tensors
            .iter()
            .zip(&self.values)
            .filter_map(|(e, t)| e.name.strip_prefix(prefix).map(|n| (n.to_string(), t.cast())))
            .collect()
    }

    /// Model weights cast to `U` (exact when `U` matches the stored dtype).
    pub fn model<U: Scalar>(&self) -> Result<SequenceModel<U>, CheckpointError> {
        let named = self.named::<U>("").into_iter().filter(|(n, _)| !n.starts_with("optim.")).collect();
        Ok(SequenceModel::from_params(self.model_config.clone(), named)?)
    }

    /// Optimizer moments; the stored dtype must equal `U` so resumed runs stay bit-exact.
    pub fn adam_state<U: Scalar>(&self, model: &SequenceModel<U>) -> Result<AdamState<U>, CheckpointError> {
        if self.dtype != U::DTYPE {
            return Err(CheckpointError::Mismatch(format!(
                "checkpoint stores {} but the run uses {}",
                self.dtype.as_str(),
                U::DTYPE.as_str()
            )));
        }
        let t = self
            .adam_t
            .ok_or_else(|| CheckpointError::Mismatch("checkpoint has no optimizer state".into()))?;
        let mut moments = Vec::new();
        for prefix in MOMENT_PREFIXES {
            let named = self.named::<U>(prefix);
            let mut out = Vec::with_capacity(model.names().len());
            for (name, p) in model.names().iter().zip(model.params()) {
                let (_, t) = named
                    .iter()
                    .find(|(n, _)| n == name)
                    .ok_or_else(|| CheckpointError::Mismatch(format!("missing {prefix}{name}")))?;
                if t.shape() != p.shape() {
                    return Err(CheckpointError::Mismatch(format!("{prefix}{name} has the wrong shape")));
                }
                out.push(t.clone());
            }
            moments.push(out);
        }
        let v = moments.pop().expect("two moments");
        let m = moments.pop().expect("two moments");
        Ok(AdamState { t, m, v })
    }
}
