//! STCK checkpoint files.
//!
//! Layout: magic `STCK`, u32 version, u64 header length, a UTF-8 JSON
//! header, then little-endian f32 tensor data in header-table order.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, NetworkSpec};
use crate::error::{Error, FormatError, Result};
use crate::optim::AdamState;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"STCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A model plus the training state needed to resume it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub step: u64,
    pub optimizer: Option<AdamState<f32>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: NetworkSpec,
    step: u64,
    batch_norm: Vec<NormMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    adam_step: Option<u64>,
    tensors: Vec<TableEntry>,
}

#[derive(Serialize, Deserialize)]
struct NormMeta {
    epsilon: f64,
    momentum: f64,
    updates: u64,
}

#[derive(Serialize, Deserialize)]
struct TableEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

fn header_err(msg: impl Into<String>) -> Error {
    FormatError::Header(msg.into()).into()
}

impl Checkpoint {
    pub fn new(model: Model<f32>, step: u64, optimizer: Option<AdamState<f32>>) -> Self {
        Self { model, step, optimizer }
    }

    /// Every stored tensor in file order: parameters, BN running statistics,
    /// then optimizer moments.
    fn named_tensors(&self) -> Vec<(String, &Tensor<f32>)> {
        let params = self.model.params();
        let mut out: Vec<(String, &Tensor<f32>)> = params.iter().map(|(n, t)| (n.clone(), *t)).collect();
        for (l, bn) in self.model.norms().iter().enumerate() {
            out.push((format!("bn{l}.running_mean"), &bn.running_mean));
            out.push((format!("bn{l}.running_var"), &bn.running_var));
        }
        if let Some(opt) = &self.optimizer {
            for ((name, _), m) in params.iter().zip(&opt.first) {
                out.push((format!("adam.m.{name}"), m));
            }
            for ((name, _), v) in params.iter().zip(&opt.second) {
                out.push((format!("adam.v.{name}"), v));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self.named_tensors();
        let mut offset = 0u64;
        let table = tensors
            .iter()
            .map(|(name, t)| {
                let e = TableEntry { name: name.clone(), shape: t.shape().to_vec(), offset };
                offset += 4 * t.len() as u64;
                e
            })
            .collect();
        let header = Header {
            spec: self.model.spec().clone(),
            step: self.step,
            batch_norm: self
                .model
                .norms()
                .iter()
                .map(|bn| NormMeta { epsilon: bn.epsilon, momentum: bn.momentum, updates: bn.updates })
                .collect(),
            adam_step: self.optimizer.as_ref().map(|o| o.step),
            tensors: table,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(FormatError::Magic {
                expected: "STCK".into(),
                found: bytes[..bytes.len().min(4)].to_vec(),
            }
            .into());
        }
        if bytes.len() < 16 {
            return Err(header_err("file ends inside the fixed header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(FormatError::Version { expected: CHECKPOINT_VERSION, found: version }.into());
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body_start = 16usize.checked_add(header_len).filter(|&e| e <= bytes.len());
        let Some(body_start) = body_start else {
            return Err(header_err("file ends inside the JSON header"));
        };
        let header: Header = serde_json::from_slice(&bytes[16..body_start])
            .map_err(|e| header_err(format!("checkpoint header is not valid JSON: {e}")))?;
        let body = &bytes[body_start..];

        let mut model = Model::<f32>::skeleton(&header.spec)?;
        if header.batch_norm.len() != model.norms().len() {
            return Err(header_err(format!(
                "expected {} batch-norm entries, found {}",
                model.norms().len(),
                header.batch_norm.len()
            )));
        }
        let mut table: HashMap<&str, (usize, &TableEntry)> = HashMap::new();
        for (i, e) in header.tensors.iter().enumerate() {
            if table.insert(e.name.as_str(), (i, e)).is_some() {
                return Err(header_err(format!("tensor `{}` appears more than once", e.name)));
            }
        }
        let mut used = 0usize;
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor<f32>> {
            let (index, e) = table.remove(name).ok_or_else(|| header_err(format!("missing tensor `{name}`")))?;
            if e.shape != shape {
                return Err(Error::dim("Checkpoint::from_bytes", name, format!("{shape:?}"), format!("{:?}", e.shape)));
            }
            let len: usize = shape.iter().product();
            let start = e.offset as usize;
            let end = start + 4 * len;
            if end > body.len() {
                return Err(FormatError::Truncated { record: index }.into());
            }
            used += 4 * len;
            let data = body[start..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            Tensor::from_vec(shape, data)
        };

        let shapes: Vec<(String, Vec<usize>)> = model.params().iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
        for (name, t) in model.params_mut() {
            let shape = t.shape().to_vec();
            *t = take(&name, &shape)?;
        }
        for (l, (bn, meta)) in model.norms_mut().iter_mut().zip(&header.batch_norm).enumerate() {
            let c = [bn.channels()];
            bn.running_mean = take(&format!("bn{l}.running_mean"), &c)?;
            bn.running_var = take(&format!("bn{l}.running_var"), &c)?;
            bn.epsilon = meta.epsilon;
            bn.momentum = meta.momentum;
            bn.updates = meta.updates;
            bn.validate()?;
        }
        let optimizer = match header.adam_step {
            Some(step) => {
                let mut first = Vec::with_capacity(shapes.len());
                let mut second = Vec::with_capacity(shapes.len());
                for (name, shape) in &shapes {
                    first.push(take(&format!("adam.m.{name}"), shape)?);
                }
                for (name, shape) in &shapes {
                    second.push(take(&format!("adam.v.{name}"), shape)?);
                }
                Some(AdamState { step, first, second })
            }
            None => None,
        };
        if let Some(extra) = table.keys().next() {
            return Err(header_err(format!("unexpected tensor `{extra}`")));
        }
        if used != body.len() {
            return Err(header_err(format!("tensor table covers {used} bytes but the file holds {}", body.len())));
        }
        Ok(Self { model, step: header.step, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::fsutil::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
