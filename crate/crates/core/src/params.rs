//! Named parameter tensors with gradient slots, the per-forward tape
//! session that binds them, and the checkpoint format.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
}

/// Ordered map of trainable tensors plus non-trainable buffers (batch-norm
/// running statistics).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
    buffers: IndexMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        let grad = Array2::zeros(value.dim());
        self.params.insert(name, Param { value, grad });
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Array2<f64>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate buffer {name}")));
        }
        self.buffers.insert(name, value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.get_index_of(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn value(&self, name: &str) -> Result<&Array2<f64>> {
        Ok(&self.get(name)?.value)
    }

    pub fn grad(&self, name: &str) -> Result<&Array2<f64>> {
        Ok(&self.get(name)?.grad)
    }

    /// Replaces a value; the shape must not change.
    pub fn set_value(&mut self, name: &str, value: Array2<f64>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        if p.value.dim() != value.dim() {
            return Err(Error::Shape(format!(
                "{name}: {:?} cannot become {:?}",
                p.value.dim(),
                value.dim()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn buffer(&self, name: &str) -> Result<&Array2<f64>> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown buffer {name}")))
    }

    pub fn set_buffer(&mut self, name: &str, value: Array2<f64>) -> Result<()> {
        let b = self
            .buffers
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown buffer {name}")))?;
        if b.dim() != value.dim() {
            return Err(Error::Shape(format!("buffer {name} shape changed")));
        }
        *b = value;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|k| k.as_str())
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running statistics are updated on
    /// [`Session::commit_batch_norm`].
    Train,
    /// Running statistics in batch norm.
    Eval,
}

/// One forward/backward evaluation: a tape plus the binding of store
/// parameters to tape variables.
pub struct Session {
    pub tape: Tape,
    mode: Mode,
    track: bool,
    bound: Vec<Option<Var>>,
    bn_batches: IndexMap<String, Vec<(Array2<f64>, Array2<f64>)>>,
}

impl Session {
    /// `track = false` binds parameters as constants, for forwards that
    /// never need parameter gradients.
    pub fn new(store: &ParamStore, mode: Mode, track: bool) -> Self {
        Self {
            tape: Tape::new(),
            mode,
            track,
            bound: vec![None; store.len()],
            bn_batches: IndexMap::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Tape variable for a named parameter, created on first use.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let i = store
            .index_of(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        if i >= self.bound.len() {
            self.bound.resize(store.len(), None);
        }
        if let Some(v) = self.bound[i] {
            return Ok(v);
        }
        let value = store.value(name)?.clone();
        let v = if self.track {
            self.tape.variable(value)
        } else {
            self.tape.constant(value)
        };
        self.bound[i] = Some(v);
        Ok(v)
    }

    /// Records the batch mean and unbiased variance seen by a batch-norm
    /// layer in training mode.
    pub(crate) fn record_batch_norm(&mut self, layer: &str, mean: Array2<f64>, var: Array2<f64>) {
        self.bn_batches
            .entry(layer.to_string())
            .or_default()
            .push((mean, var));
    }

    /// Folds the batch statistics recorded this step into the running
    /// buffers: one momentum update per layer with the average over calls.
    pub fn commit_batch_norm(&mut self, store: &mut ParamStore, momentum: f64) -> Result<()> {
        for (layer, stats) in self.bn_batches.drain(..) {
            let k = stats.len() as f64;
            let mut mean = Array2::zeros(stats[0].0.dim());
            let mut var = Array2::zeros(stats[0].1.dim());
            for (m, v) in &stats {
                mean = mean + m;
                var = var + v;
            }
            mean /= k;
            var /= k;
            let rm_name = format!("{layer}.running_mean");
            let rv_name = format!("{layer}.running_var");
            let rm = store.buffer(&rm_name)? * (1.0 - momentum) + mean * momentum;
            let rv = store.buffer(&rv_name)? * (1.0 - momentum) + var * momentum;
            store.set_buffer(&rm_name, rm)?;
            store.set_buffer(&rv_name, rv)?;
        }
        Ok(())
    }

    /// Reverse pass from `loss`; every parameter's gradient slot is
    /// overwritten, with exact zeros for parameters off the loss path.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let mut grads = self.tape.backward(loss)?;
        for (i, (_, p)) in store.iter_mut().enumerate() {
            let g = self
                .bound
                .get(i)
                .copied()
                .flatten()
                .and_then(|v| grads.take(v));
            match g {
                Some(g) => p.grad.assign(&g),
                None => p.grad.fill(0.0),
            }
        }
        Ok(())
    }
}

/// Storage class of a checkpoint tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    Buffer,
    OptimFirst,
    OptimSecond,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: [usize; 2],
    pub dtype: String,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub blob: String,
    pub blob_sha256: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optim_step: Option<u64>,
    /// Free-form run information (configuration snapshot, step counts).
    pub meta: serde_json::Value,
}

/// Adam moment accumulators, keyed like the parameters they track.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub first: IndexMap<String, Array2<f64>>,
    pub second: IndexMap<String, Array2<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub store: ParamStore,
    pub optim: Option<OptimState>,
    pub meta: serde_json::Value,
}

pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";
pub const CHECKPOINT_BLOB: &str = "checkpoint.bin";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes `checkpoint.json` and `checkpoint.bin` into `dir`. Tensors are
/// stored as little-endian f64 so a reload is bit-exact.
pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut blob: Vec<u8> = Vec::new();
    let mut tensors = Vec::new();
    let mut push = |name: &str, kind: TensorKind, a: &Array2<f64>| {
        let offset = blob.len() as u64;
        for v in a.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.to_string(),
            kind,
            shape: [a.nrows(), a.ncols()],
            dtype: "f64".into(),
            offset,
            nbytes: blob.len() as u64 - offset,
        });
    };
    for (name, p) in ckpt.store.iter() {
        push(name, TensorKind::Param, &p.value);
    }
    for (name, b) in ckpt.store.buffers() {
        push(name, TensorKind::Buffer, b);
    }
    if let Some(o) = &ckpt.optim {
        for (name, m) in &o.first {
            push(name, TensorKind::OptimFirst, m);
        }
        for (name, v) in &o.second {
            push(name, TensorKind::OptimSecond, v);
        }
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        blob: CHECKPOINT_BLOB.into(),
        blob_sha256: hex::encode(Sha256::digest(&blob)),
        tensors,
        optim_step: ckpt.optim.as_ref().map(|o| o.step),
        meta: ckpt.meta.clone(),
    };
    let blob_path = dir.join(CHECKPOINT_BLOB);
    let manifest_path = dir.join(CHECKPOINT_MANIFEST);
    write_atomic(&blob_path, &blob)?;
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_atomic(&manifest_path, text.as_bytes())?;
    Ok(vec![manifest_path, blob_path])
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(dir.join(CHECKPOINT_MANIFEST))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    let blob = fs::read(dir.join(&manifest.blob))?;
    if hex::encode(Sha256::digest(&blob)) != manifest.blob_sha256 {
        return Err(Error::Checkpoint("blob checksum mismatch".into()));
    }
    let mut store = ParamStore::new();
    let mut optim = OptimState::default();
    let mut has_optim = false;
    for e in &manifest.tensors {
        if e.dtype != "f64" {
            return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        let count = e.shape[0] * e.shape[1];
        let (start, len) = (e.offset as usize, e.nbytes as usize);
        if len != count * 8 || start + len > blob.len() {
            return Err(Error::Checkpoint(format!("{}: bad extent", e.name)));
        }
        let values: Vec<f64> = blob[start..start + len]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let a = Array2::from_shape_vec((e.shape[0], e.shape[1]), values)
            .map_err(|err| Error::Checkpoint(err.to_string()))?;
        match e.kind {
            TensorKind::Param => store.insert(e.name.clone(), a)?,
            TensorKind::Buffer => store.insert_buffer(e.name.clone(), a)?,
            TensorKind::OptimFirst => {
                has_optim = true;
                optim.first.insert(e.name.clone(), a);
            }
            TensorKind::OptimSecond => {
                has_optim = true;
                optim.second.insert(e.name.clone(), a);
            }
        }
    }
    if let Some(step) = manifest.optim_step {
        optim.step = step;
        has_optim = true;
    }
    Ok(Checkpoint {
        store,
        optim: has_optim.then_some(optim),
        meta: manifest.meta,
    })
}
