//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"KSHARECK"  u32 version
//! u64 doc_len  JSON document {run, epoch, history, best}
//! u32 n_params
//!   u32 name_len  name  u8 dtype  u8 rank  u64 extents[rank]  values
//! u32 n_slots
//!   u32 param_index  u64 steps  u8 n_buffers  (u8 dtype  u8 rank  u64 extents[rank]  values)*
//! ```
//!
//! Parameters appear in store order, so a shared kernel is written once.
//! Batchnorm running statistics are ordinary entries.

use std::fs;
use std::path::{Path, PathBuf};

use kshare_core::optim::{Optimizer, Slot};
use kshare_core::sharing::ParamId;
use kshare_core::{DType, Model, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{write_atomic, RunMetrics};

pub const MAGIC: &[u8; 8] = b"KSHARECK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointDoc {
    pub run: RunConfig,
    /// Epochs completed when the checkpoint was taken.
    pub epoch: usize,
    /// Metrics so far, with `seconds` zeroed so the file is reproducible.
    pub history: RunMetrics,
    /// The PRNG seed the model was initialized from.
    pub init_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    /// Values widened to f64; narrowing back to f32 is exact.
    pub tensor: Tensor<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotEntry {
    pub param: u32,
    pub steps: u64,
    pub buffers: Vec<Tensor<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub doc: CheckpointDoc,
    pub dtype: DType,
    pub params: Vec<Entry>,
    pub slots: Vec<SlotEntry>,
}

impl Checkpoint {
    pub fn capture<T: Scalar>(doc: CheckpointDoc, model: &Model<T>, opt: &Optimizer<T>) -> Self {
        let mut doc = doc;
        for row in &mut doc.history.epochs {
            row.seconds = 0.0;
        }
        let params = model
            .store
            .params()
            .iter()
            .map(|p| Entry {
                name: p.name.clone(),
                dtype: T::DTYPE,
                tensor: p.value.cast(),
            })
            .collect();
        let slots = opt
            .slots()
            .map(|(id, s)| SlotEntry {
                param: id.0,
                steps: s.steps,
                buffers: s.buffers.iter().map(Tensor::cast).collect(),
            })
            .collect();
        Self {
            doc,
            dtype: T::DTYPE,
            params,
            slots,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let doc = serde_json::to_vec(&self.doc)?;
        out.extend_from_slice(&(doc.len() as u64).to_le_bytes());
        out.extend_from_slice(&doc);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for e in &self.params {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            write_tensor(&mut out, e.dtype, &e.tensor);
        }
        out.extend_from_slice(&(self.slots.len() as u32).to_le_bytes());
        for s in &self.slots {
            out.extend_from_slice(&s.param.to_le_bytes());
            out.extend_from_slice(&s.steps.to_le_bytes());
            out.push(s.buffers.len() as u8);
            for b in &s.buffers {
                write_tensor(&mut out, self.dtype, b);
            }
        }
        Ok(out)
    }

    /// Parses a checkpoint; `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8, "magic")? != MAGIC {
            return Err(r.error_at(0, "bad magic bytes"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.error_at(8, &format!("unsupported format version {version}")));
        }
        let doc_len = r.u64("document length")? as usize;
        let doc_at = r.pos;
        let doc: CheckpointDoc = serde_json::from_slice(r.take(doc_len, "run document")?)
            .map_err(|e| r.error_at(doc_at as u64, &format!("invalid run document: {e}")))?;
        let n = r.u32("parameter count")?;
        let mut params = Vec::new();
        let mut dtype = None;
        for _ in 0..n {
            let len = r.u32("name length")? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(len, "parameter name")?)
                .map_err(|_| r.error_at(at as u64, "parameter name is not UTF-8"))?
                .to_string();
            let (dt, tensor) = r.tensor()?;
            if *dtype.get_or_insert(dt) != dt {
                return Err(r.error_at(at as u64, "mixed dtypes"));
            }
            params.push(Entry { name, dtype: dt, tensor });
        }
        let dtype = dtype.unwrap_or(doc.run.precision);
        let n = r.u32("slot count")?;
        let mut slots = Vec::new();
        for _ in 0..n {
            let at = r.pos;
            let param = r.u32("slot parameter")?;
            if param as usize >= params.len() {
                return Err(r.error_at(at as u64, &format!("slot for unknown parameter {param}")));
            }
            let steps = r.u64("slot steps")?;
            let nb = r.take(1, "buffer count")?[0];
            let buffers = (0..nb).map(|_| r.tensor().map(|t| t.1)).collect::<Result<_>>()?;
            slots.push(SlotEntry { param, steps, buffers });
        }
        if r.pos != bytes.len() {
            return Err(r.error_at(r.pos as u64, "trailing bytes"));
        }
        Ok(Self {
            doc,
            dtype,
            params,
            slots,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Copies parameter values into `model`. The architecture must match
    /// the one the checkpoint was written from.
    pub fn restore_into<T: Scalar>(&self, model: &mut Model<T>) -> Result<()> {
        let diff = self.doc.run.model.diff(&model.config);
        if !diff.is_empty() {
            return Err(Error::Mismatch(diff));
        }
        let params = model.store.params();
        if params.len() != self.params.len() {
            return Err(Error::Mismatch(vec![format!(
                "parameter entries: {} vs {}",
                self.params.len(),
                params.len()
            )]));
        }
        let mut diff = Vec::new();
        for (e, p) in self.params.iter().zip(params) {
            if e.name != p.name || e.tensor.shape() != p.value.shape() {
                diff.push(format!("{} {:?} vs {} {:?}", e.name, e.tensor.shape(), p.name, p.value.shape()));
            }
        }
        if !diff.is_empty() {
            return Err(Error::Mismatch(diff));
        }
        for (i, e) in self.params.iter().enumerate() {
            model.store.param_mut(ParamId(i as u32)).value = e.tensor.cast();
        }
        Ok(())
    }

    pub fn restore_optimizer<T: Scalar>(&self, opt: &mut Optimizer<T>) {
        for s in &self.slots {
            opt.set_slot(
                ParamId(s.param),
                Slot {
                    steps: s.steps,
                    buffers: s.buffers.iter().map(Tensor::cast).collect(),
                },
            );
        }
    }

    /// Rebuilds the model described by the run document and loads the weights.
    pub fn model<T: Scalar>(&self) -> Result<Model<T>> {
        let mut model = Model::new(&self.doc.run.model, self.doc.init_seed)?;
        self.restore_into(&mut model)?;
        Ok(model)
    }
}

fn write_tensor(out: &mut Vec<u8>, dtype: DType, t: &Tensor<f64>) {
    out.push(dtype.tag());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        match dtype {
            DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn error_at(&self, offset: u64, reason: &str) -> Error {
        Error::Checkpoint {
            path: PathBuf::from(self.path),
            offset,
            reason: reason.to_string(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.error_at(self.pos as u64, &format!("truncated {what}: need {n} bytes")));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(DType, Tensor<f64>)> {
        let at = self.pos;
        let tag = self.take(1, "dtype")?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| self.error_at(at as u64, &format!("unknown dtype tag {tag}")))?;
        let rank = self.take(1, "rank")?[0] as usize;
        let shape = (0..rank)
            .map(|_| self.u64("extent").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| self.error_at(at as u64, "tensor extents overflow"))?;
        let raw = self.take(len.saturating_mul(dtype.size()), "tensor values")?;
        let data = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        };
        let tensor = Tensor::new(shape, data).map_err(|e| self.error_at(at as u64, &e.to_string()))?;
        Ok((dtype, tensor))
    }
}
