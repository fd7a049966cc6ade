//! Versioned binary container for model parameters and optimizer state.
//!
//! Layout: 8-byte magic, little-endian `u32` version, `u64` header length,
//! a JSON header, then every tensor as raw little-endian `f64` in header
//! order. Values round-trip bit-exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::nn::{Adam, ParamId, ParamStore};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"AUDCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Model family, e.g. `fvae` or `hmmvae`.
    pub kind: String,
    /// Model configuration and training counters.
    pub meta: serde_json::Value,
    pub params: ParamStore,
    pub optimizers: Vec<(String, Adam)>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct OptimizerEntry {
    name: String,
    state: Adam,
    /// Parameters (by index) whose moments follow the model tensors.
    with_moments: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
    optimizers: Vec<OptimizerEntry>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut data: Vec<&Array2<f64>> = self.params.values().iter().collect();
        let tensors = self
            .params
            .names()
            .iter()
            .zip(self.params.values())
            .map(|(n, v)| TensorEntry {
                name: n.clone(),
                rows: v.nrows(),
                cols: v.ncols(),
            })
            .collect();
        let mut optimizers = Vec::new();
        for (name, opt) in &self.optimizers {
            let mut with_moments = Vec::new();
            for (id, mv) in opt.params().iter().zip(opt.moments()) {
                if let Some((m, v)) = mv {
                    with_moments.push(id.0);
                    data.push(m);
                    data.push(v);
                }
            }
            optimizers.push(OptimizerEntry {
                name: name.clone(),
                state: opt.clone(),
                with_moments,
            });
        }
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors,
            optimizers,
        })?;

        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut w = std::io::BufWriter::new(fs::File::create(&tmp)?);
            w.write_all(MAGIC)?;
            w.write_all(&FORMAT_VERSION.to_le_bytes())?;
            w.write_all(&(header.len() as u64).to_le_bytes())?;
            w.write_all(&header)?;
            for t in data {
                for v in t.iter() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            w.flush()?;
        }
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
        let mut r = std::io::BufReader::new(fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated".into()))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let mut header = vec![0u8; u64::from_le_bytes(b8) as usize];
        r.read_exact(&mut header).map_err(|_| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&header)?;

        let mut read_tensor = |rows: usize, cols: usize| -> Result<Array2<f64>> {
            let mut buf = vec![0u8; rows * cols * 8];
            r.read_exact(&mut buf).map_err(|_| bad("truncated tensor data".into()))?;
            let vals = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            Ok(Array2::from_shape_vec((rows, cols), vals).expect("shape matches length"))
        };
        let mut names = Vec::new();
        let mut values = Vec::new();
        for t in &header.tensors {
            names.push(t.name.clone());
            values.push(read_tensor(t.rows, t.cols)?);
        }
        let mut optimizers = Vec::new();
        for entry in header.optimizers {
            let mut opt = entry.state;
            for idx in entry.with_moments {
                let t = header
                    .tensors
                    .get(idx)
                    .ok_or_else(|| bad(format!("moment for unknown tensor {idx}")))?;
                let m = read_tensor(t.rows, t.cols)?;
                let v = read_tensor(t.rows, t.cols)?;
                opt.set_moment(ParamId(idx), m, v);
            }
            optimizers.push((entry.name, opt));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            params: ParamStore::from_parts(names, values),
            optimizers,
        })
    }

    /// Copies stored values into `store` by parameter name, checking shapes.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count {} does not match model ({})",
                self.params.len(),
                store.len()
            )));
        }
        for (name, value) in self.params.names().iter().zip(self.params.values()) {
            let id = store
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            let target = store.value_mut(id);
            if target.dim() != value.dim() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, model expects {:?}",
                    value.dim(),
                    target.dim()
                )));
            }
            target.assign(value);
        }
        Ok(())
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}
