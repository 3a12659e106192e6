//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! magic        4 bytes  "EVKM"
//! version      u32      1
//! n_layers     u64
//! d_model      u64
//! d_ff         u64
//! n_heads      u64
//! vocab_size   u64
//! max_seq      u64
//! activation   u32      0 = gelu_tanh, 1 = relu
//! ln_eps       u64      IEEE-754 bits of the f64
//! n_tensors    u32
//! n_tensors times:
//!   name_len   u32
//!   name       name_len bytes, UTF-8
//!   rows       u64
//!   cols       u64
//!   data       rows*cols f64, row-major
//! ```
//!
//! Tensors appear in [`Params::tensors`] order. Trailing bytes are an error.

use std::fs;
use std::path::Path;

use super::{Activation, ModelConfig, ModelError, Params, ToyModel};
use crate::linalg::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EVKM";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(model: &ToyModel) -> Vec<u8> {
    let c = &model.config;
    let mut out = Vec::with_capacity(64 + model.params.num_scalars() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [c.n_layers, c.d_model, c.d_ff, c.n_heads, c.vocab_size, c.max_seq] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    let act: u32 = match c.activation {
        Activation::GeluTanh => 0,
        Activation::Relu => 1,
    };
    out.extend_from_slice(&act.to_le_bytes());
    out.extend_from_slice(&c.ln_eps.to_bits().to_le_bytes());
    let tensors = model.params.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, m) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for x in m.as_slice() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ModelError> {
        if self.buf.len() - self.pos < n {
            return Err(ModelError::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn count(&mut self, what: &str) -> Result<usize, ModelError> {
        usize::try_from(self.u64(what)?)
            .map_err(|_| ModelError::Checkpoint(format!("{what} does not fit in usize")))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<ToyModel, ModelError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let n_layers = r.count("n_layers")?;
    let d_model = r.count("d_model")?;
    let d_ff = r.count("d_ff")?;
    let n_heads = r.count("n_heads")?;
    let vocab_size = r.count("vocab_size")?;
    let max_seq = r.count("max_seq")?;
    let activation = match r.u32("activation")? {
        0 => Activation::GeluTanh,
        1 => Activation::Relu,
        other => return Err(ModelError::Checkpoint(format!("unknown activation {other}"))),
    };
    let ln_eps = f64::from_bits(r.u64("ln_eps")?);
    let config = ModelConfig {
        n_layers,
        d_model,
        d_ff,
        n_heads,
        vocab_size,
        max_seq,
        activation,
        ln_eps,
    };
    config
        .validate()
        .map_err(|e| ModelError::Checkpoint(format!("header: {e}")))?;

    let mut params = Params::zeros(&config);
    let expected: Vec<(String, (usize, usize))> = params
        .tensors()
        .into_iter()
        .map(|(n, m)| (n, m.shape()))
        .collect();
    let n_tensors = r.u32("tensor count")? as usize;
    if n_tensors != expected.len() {
        return Err(ModelError::Checkpoint(format!(
            "expected {} tensors, header says {n_tensors}",
            expected.len()
        )));
    }
    let mut loaded = Vec::with_capacity(n_tensors);
    for (want_name, want_shape) in &expected {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| ModelError::Checkpoint("tensor name is not UTF-8".into()))?;
        if name != want_name {
            return Err(ModelError::Checkpoint(format!(
                "expected tensor {want_name}, found {name}"
            )));
        }
        let rows = r.count("rows")?;
        let cols = r.count("cols")?;
        if (rows, cols) != *want_shape {
            return Err(ModelError::Checkpoint(format!(
                "tensor {name}: shape {rows}x{cols}, expected {}x{}",
                want_shape.0, want_shape.1
            )));
        }
        let raw = r.take(rows * cols * 8, name)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(ModelError::Checkpoint(format!("tensor {name} has non-finite values")));
        }
        loaded.push(Matrix::from_vec(rows, cols, data)?);
    }
    if r.pos != bytes.len() {
        return Err(ModelError::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    for (dst, src) in params.tensors_mut().into_iter().zip(loaded) {
        *dst = src;
    }
    ToyModel::from_params(config, params)
}

/// Writes to a temporary sibling and renames, so `path` is never half-written.
pub fn save(model: &ToyModel, path: &Path) -> Result<(), ModelError> {
    crate::io::write_atomic(path, &write_checkpoint(model)).map_err(ModelError::Io)
}

pub fn load(path: &Path) -> Result<ToyModel, ModelError> {
    let bytes = fs::read(path)?;
    read_checkpoint(&bytes)
}
