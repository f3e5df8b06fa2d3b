//! Named parameter storage, the per-sample forward context, and the
//! checkpoint container.
//!
//! Parameters are created once, in a deterministic order, and referenced by
//! [`ParamId`] from the module structs. A [`ForwardPass`] binds parameters
//! onto its private tape lazily; after `backward` the accumulated leaf
//! gradients are handed back keyed by `ParamId`, so independent samples can
//! run on separate tapes in parallel and reduce in sample order.
//!
//! Checkpoint file (`.eqck`): magic `EQCK`, version u16, dtype u8, meta
//! length u32 + UTF-8 meta (the run configuration, kept for provenance),
//! entry count u32, then per entry: name length u16 + name, decay flag u8,
//! and the tensor container.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Profile, Tape, TensorId};
use crate::tensor::{Dtype, Real, Tensor};
use crate::util::trunc_normal_f64;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EQCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Standard deviation for projection weight initialization.
pub const INIT_SIGMA: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug)]
struct ParamEntry<F: Real> {
    name: String,
    tensor: Tensor<F>,
    decay: bool,
}

#[derive(Debug, Default)]
pub struct ParamStore<F: Real> {
    entries: Vec<ParamEntry<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<F>, decay: bool) -> ParamId {
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.into(),
            tensor: tensor.with_grad(),
            decay,
        });
        id
    }

    /// Truncated-Gaussian weight (σ = 0.02), subject to weight decay.
    pub fn add_weight(&mut self, name: impl Into<String>, shape: Vec<usize>, rng: &mut ChaCha8Rng) -> ParamId {
        let numel: usize = shape.iter().product();
        let data: Vec<F> = (0..numel)
            .map(|_| F::from_f64(trunc_normal_f64(rng, INIT_SIGMA)))
            .collect();
        self.add(name, Tensor::new(shape, data).expect("consistent"), true)
    }

    /// Zero-initialized bias, excluded from weight decay.
    pub fn add_bias(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        self.add(name, Tensor::zeros(shape), false)
    }

    /// One-initialized normalization gain, excluded from weight decay.
    pub fn add_gain(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        self.add(name, Tensor::full(shape, F::one()), false)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].tensor
    }

    pub fn decay(&self, id: ParamId) -> bool {
        self.entries[id.0].decay
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn accumulate_grad(&mut self, id: ParamId, delta: &[F]) {
        self.entries[id.0].tensor.accumulate_grad(delta);
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }
}

// ── forward context ─────────────────────────────────────────────────

struct DropoutState {
    rate: f64,
    rng: ChaCha8Rng,
}

/// One sample's forward (and optional backward) execution over a private
/// tape, borrowing the parameter store read-only.
pub struct ForwardPass<'a, F: Real> {
    pub tape: Tape<F>,
    store: &'a ParamStore<F>,
    bound: Vec<Option<TensorId>>,
    train: bool,
    dropout: Option<DropoutState>,
}

impl<'a, F: Real> ForwardPass<'a, F> {
    pub fn new(store: &'a ParamStore<F>, profile: Profile, train: bool) -> Self {
        ForwardPass {
            tape: Tape::new(profile),
            store,
            bound: vec![None; store.len()],
            train,
            dropout: None,
        }
    }

    /// Enable attention dropout for this pass. No-op when rate is 0.
    pub fn with_dropout(mut self, rate: f64, rng: ChaCha8Rng) -> Self {
        if rate > 0.0 {
            self.dropout = Some(DropoutState { rate, rng });
        }
        self
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    /// Bind a parameter onto the tape (cached per pass).
    pub fn param(&mut self, id: ParamId) -> Result<TensorId> {
        if let Some(t) = self.bound[id.0] {
            return Ok(t);
        }
        let tensor = self.store.tensor(id);
        let tid = self.tape.leaf_values(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            self.train,
        )?;
        self.bound[id.0] = Some(tid);
        Ok(tid)
    }

    /// Bind a non-parameter input (no gradient).
    pub fn input(&mut self, t: &Tensor<F>) -> Result<TensorId> {
        self.tape
            .leaf_values(t.shape().to_vec(), t.data().to_vec(), false)
    }

    /// Apply attention dropout if enabled; identity otherwise.
    pub fn maybe_dropout(&mut self, x: TensorId) -> Result<TensorId> {
        let Some(state) = self.dropout.as_mut() else {
            return Ok(x);
        };
        use rand::Rng;
        let n = self.tape.value(x).len();
        let rate = state.rate;
        let mask: Vec<bool> = (0..n).map(|_| state.rng.random::<f64>() >= rate).collect();
        self.tape.dropout(x, mask, rate)
    }

    /// Consume the pass after `backward`, returning accumulated parameter
    /// gradients in binding order.
    pub fn take_grads(self) -> Vec<(ParamId, Vec<F>)> {
        let mut out = Vec::new();
        for (idx, bound) in self.bound.iter().enumerate() {
            if let Some(tid) = bound {
                if let Some(g) = self.tape.grad(*tid) {
                    out.push((ParamId(idx), g.to_vec()));
                }
            }
        }
        out
    }
}

// ── checkpoints ─────────────────────────────────────────────────────

pub fn write_checkpoint<F: Real>(path: &Path, meta: &str, store: &ParamStore<F>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&[F::DTYPE.code()])?;
    let meta_bytes = meta.as_bytes();
    w.write_all(&(meta_bytes.len() as u32).to_le_bytes())?;
    w.write_all(meta_bytes)?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for id in store.ids() {
        let name = store.name(id).as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[store.decay(id) as u8])?;
        store.tensor(id).write_container(&mut w)?;
    }
    w.flush()?;
    Ok(())
}

pub struct CheckpointHeader {
    pub dtype: Dtype,
    pub meta: String,
    pub entries: u32,
}

fn read_checkpoint_header<R: Read>(r: &mut R) -> Result<CheckpointHeader> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let mut v = [0u8; 2];
    r.read_exact(&mut v)?;
    if u16::from_le_bytes(v) != CHECKPOINT_VERSION {
        return Err(Error::Format("unsupported checkpoint version".into()));
    }
    let mut dt = [0u8; 1];
    r.read_exact(&mut dt)?;
    let dtype = Dtype::from_code(dt[0])?;
    let mut len4 = [0u8; 4];
    r.read_exact(&mut len4)?;
    let meta_len = u32::from_le_bytes(len4) as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta)?;
    let meta = String::from_utf8(meta).map_err(|_| Error::Format("checkpoint meta is not UTF-8".into()))?;
    r.read_exact(&mut len4)?;
    let entries = u32::from_le_bytes(len4);
    Ok(CheckpointHeader { dtype, meta, entries })
}

/// Read only the stored dtype and configuration text.
pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointHeader> {
    let mut r = BufReader::new(File::open(path)?);
    read_checkpoint_header(&mut r)
}

/// Load checkpoint values into an already-constructed store, matching by
/// name. Every store entry must be covered and no extras may remain.
pub fn read_checkpoint_into<F: Real>(path: &Path, store: &mut ParamStore<F>) -> Result<String> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_checkpoint_header(&mut r)?;
    if header.entries as usize != store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} entries, model expects {}",
            header.entries,
            store.len()
        )));
    }
    for _ in 0..header.entries {
        let mut len2 = [0u8; 2];
        r.read_exact(&mut len2)?;
        let name_len = u16::from_le_bytes(len2) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name =
            String::from_utf8(name).map_err(|_| Error::Format("param name is not UTF-8".into()))?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let tensor = Tensor::<F>::read_container(&mut r)?;
        let id = store
            .find(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint param {name} unknown to model")))?;
        if store.tensor(id).shape() != tensor.shape() {
            return Err(Error::Format(format!(
                "checkpoint param {name} has shape {:?}, model expects {:?}",
                tensor.shape(),
                store.tensor(id).shape()
            )));
        }
        let requires = store.tensor(id).requires_grad;
        *store.tensor_mut(id) = if requires { tensor.with_grad() } else { tensor };
    }
    Ok(header.meta)
}
