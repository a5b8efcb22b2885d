//! Binary parameter container.
//!
//! Layout:
//!
//! ```text
//! magic    8 bytes  "EGOSCKPT"
//! version  u32 LE
//! hdr_len  u64 LE
//! header   hdr_len bytes of JSON (tensor table, optimizer scalars, metadata)
//! payload  little-endian f32 values, tensors back to back in table order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::array::{ParamStore, Tensor};
use super::error::{Result, TensorError};
use super::optim::{OptimizerConfig, OptimizerState};

pub const MAGIC: &[u8; 8] = b"EGOSCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    config: OptimizerConfig,
    step_count: u64,
    /// Moment tensors are stored in the table as `__m/<i>` and `__v/<i>`.
    num_params: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerHeader>,
    meta: serde_json::Value,
}

/// Named tensors plus optional optimizer state and free-form metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorArchive {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub optimizer: Option<OptimizerState>,
    pub meta: serde_json::Value,
}

fn bad(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

impl TensorArchive {
    pub fn new(meta: serde_json::Value) -> Self {
        TensorArchive {
            tensors: Vec::new(),
            optimizer: None,
            meta,
        }
    }

    /// Adds every parameter of `store` under `prefix/<name>`.
    pub fn add_store(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for (_, name, t) in store.iter() {
            let mut t = t.clone();
            t.clear_grad();
            self.tensors.push((format!("{prefix}/{name}"), t));
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| bad(format!("missing tensor `{name}`")))
    }

    /// Copies `prefix/<name>` entries into a store with the same layout.
    pub fn restore_store(&self, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
        let ids: Vec<_> = store.iter().map(|(id, n, _)| (id, n.to_string())).collect();
        for (id, name) in ids {
            let src = self.get(&format!("{prefix}/{name}"))?;
            let dst = store.get_mut(id);
            if src.shape() != dst.shape() {
                return Err(bad(format!(
                    "`{prefix}/{name}` has shape {:?}, model expects {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut entries = Vec::new();
        let mut offset = 0u64;
        let mut push = |name: String, shape: Vec<usize>, len: usize| {
            entries.push(TensorEntry {
                name,
                shape,
                offset,
                len: len as u64,
            });
            offset += len as u64;
        };
        for (n, t) in &self.tensors {
            push(n.clone(), t.shape().to_vec(), t.numel());
        }
        if let Some(opt) = &self.optimizer {
            for (i, m) in opt.first_moment.iter().enumerate() {
                push(format!("__m/{i}"), vec![m.len().max(1)], m.len());
            }
            for (i, v) in opt.second_moment.iter().enumerate() {
                push(format!("__v/{i}"), vec![v.len().max(1)], v.len());
            }
        }
        let header = Header {
            version: FORMAT_VERSION,
            tensors: entries,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                config: o.config.clone(),
                step_count: o.step_count,
                num_params: o.first_moment.len(),
            }),
            meta: self.meta.clone(),
        };
        let hdr = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(hdr.len() as u64).to_le_bytes())?;
        w.write_all(&hdr)?;
        let mut write_vals = |vals: &[f32]| -> std::io::Result<()> {
            for v in vals {
                w.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        };
        for (_, t) in &self.tensors {
            write_vals(t.data())?;
        }
        if let Some(opt) = &self.optimizer {
            for m in &opt.first_moment {
                write_vals(m)?;
            }
            for v in &opt.second_moment {
                write_vals(v)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let hdr_len = u64::from_le_bytes(b8) as usize;
        let mut hdr = vec![0u8; hdr_len];
        r.read_exact(&mut hdr)?;
        let header: Header = serde_json::from_slice(&hdr).map_err(|e| bad(e.to_string()))?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let total: u64 = header.tensors.iter().map(|e| e.len).sum();
        if payload.len() as u64 != total * 4 {
            return Err(bad(format!(
                "payload has {} bytes, header describes {}",
                payload.len(),
                total * 4
            )));
        }
        let read_vals = |e: &TensorEntry| -> Vec<f32> {
            let start = e.offset as usize * 4;
            payload[start..start + e.len as usize * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect()
        };
        let mut tensors = Vec::new();
        let mut first = Vec::new();
        let mut second = Vec::new();
        for e in &header.tensors {
            let vals = read_vals(e);
            if e.name.starts_with("__m/") {
                first.push(vals);
            } else if e.name.starts_with("__v/") {
                second.push(vals);
            } else {
                tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), vals)?));
            }
        }
        let optimizer = match header.optimizer {
            Some(h) => {
                if first.len() != h.num_params || second.len() != h.num_params {
                    return Err(bad("optimizer moment count mismatch"));
                }
                Some(OptimizerState {
                    config: h.config,
                    step_count: h.step_count,
                    first_moment: first,
                    second_moment: second,
                })
            }
            None => None,
        };
        Ok(TensorArchive {
            tensors,
            optimizer,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path)?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_with_optimizer() {
        let mut store = ParamStore::new();
        store
            .insert(
                "w",
                Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 3.25]).unwrap(),
            )
            .unwrap();
        store
            .insert("b", Tensor::new(vec![2], vec![0.0, 1e-9]).unwrap())
            .unwrap();
        let mut arch = TensorArchive::new(serde_json::json!({"epoch": 3}));
        arch.add_store("model", &store);
        let mut opt =
            OptimizerState::new(OptimizerConfig::adamw(5e-4, 1e-4).with_clip(0.3), &store).unwrap();
        opt.step_count = 7;
        opt.first_moment[0][1] = 0.25;
        arch.optimizer = Some(opt);

        let mut buf = Vec::new();
        arch.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        let back = TensorArchive::read_from(&buf[..]).unwrap();
        assert_eq!(back, arch);

        let mut fresh = store.detached();
        fresh.tensors_mut().for_each(|t| t.data_mut().fill(0.0));
        back.restore_store("model", &mut fresh).unwrap();
        assert_eq!(
            fresh.by_name("w").unwrap().data(),
            store.by_name("w").unwrap().data()
        );
    }

    #[test]
    fn rejects_wrong_version() {
        let arch = TensorArchive::new(serde_json::Value::Null);
        let mut buf = Vec::new();
        arch.write_to(&mut buf).unwrap();
        buf[8] = 99;
        assert!(TensorArchive::read_from(&buf[..]).is_err());
    }
}
