//! Binary checkpoint files.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "TUNX" | version | tensor count |
//!   per tensor: name length | UTF-8 name | rank | dims… | f32 payload
//! ```
//!
//! Model parameters use their own names. Optimiser moments live under
//! `opt/m/<name>` and `opt/v/<name>`, the update counter under `opt/step`.
//! `meta/epoch` and `meta/best_val_loss` are scalars and `meta/config` holds
//! the model configuration as JSON, one byte per element.

use std::path::Path;

use super::adam::{Adam, AdamConfig};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::pipeline::io::write_atomic;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TUNX";
pub const VERSION: u32 = 1;

/// Named tensors in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorFile {
    pub tensors: Vec<(String, Tensor)>,
}

impl TensorFile {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<TensorFile> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(r.bad("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.bad(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut file = TensorFile::default();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.bad("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let bytes = n.and_then(|n| n.checked_mul(4)).ok_or_else(|| r.bad("tensor too large"))?;
            let data = r
                .take(bytes)?
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
                .collect();
            let t = Tensor::new(dims, data).map_err(|e| r.bad(format!("{name}: {e}")))?;
            file.push(name, t);
        }
        if r.pos != bytes.len() {
            return Err(r.bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<TensorFile> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn bad(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        match self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()) {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.bad(format!("truncated at byte {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Everything needed to rebuild a model and continue training it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub adam: Option<Adam>,
    /// Last completed epoch (1-based; 0 before training).
    pub epoch: usize,
    pub best_val_loss: f64,
}

fn bytes_tensor(bytes: &[u8]) -> Tensor {
    Tensor::new([bytes.len()], bytes.iter().map(|&b| f64::from(b)).collect()).expect("non-empty config")
}

impl Checkpoint {
    pub fn to_file(&self) -> TensorFile {
        let mut file = TensorFile::default();
        for (name, t) in self.model.params().iter() {
            file.push(name, t.clone());
        }
        if let Some(adam) = &self.adam {
            for (i, (name, _)) in self.model.params().iter().enumerate() {
                file.push(format!("opt/m/{name}"), adam.m[i].clone());
                file.push(format!("opt/v/{name}"), adam.v[i].clone());
            }
            file.push("opt/step", Tensor::scalar(adam.step as f64));
        }
        file.push("meta/epoch", Tensor::scalar(self.epoch as f64));
        file.push("meta/best_val_loss", Tensor::scalar(self.best_val_loss));
        let config = serde_json::to_vec(self.model.config()).expect("config serialises");
        file.push("meta/config", bytes_tensor(&config));
        file
    }

    /// Rebuilds the model from its stored configuration and tensors.
    /// `adam_cfg` supplies hyper-parameters for restored optimiser state.
    pub fn from_file(file: &TensorFile, path: &Path, adam_cfg: AdamConfig) -> Result<Checkpoint> {
        let bad = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        let config_bytes: Vec<u8> = file
            .get("meta/config")
            .ok_or_else(|| bad("missing meta/config".into()))?
            .data()
            .iter()
            .map(|&v| v as u8)
            .collect();
        let config: ModelConfig = serde_json::from_slice(&config_bytes).map_err(|e| bad(format!("meta/config: {e}")))?;
        let mut model = Model::build(config, 0)?;
        let names: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
        for name in &names {
            let t = file.get(name).ok_or_else(|| bad(format!("missing parameter {name}")))?;
            model.params_mut().set(name, t.clone()).map_err(|e| bad(e.to_string()))?;
        }
        for (name, _) in &file.tensors {
            if !name.starts_with("opt/") && !name.starts_with("meta/") && model.params().id(name).is_none() {
                return Err(bad(format!("unexpected tensor {name}")));
            }
        }
        let adam = match file.get("opt/step") {
            None => None,
            Some(step) => {
                let mut adam = Adam::new(adam_cfg, model.params());
                adam.step = step.item() as u64;
                for (i, name) in names.iter().enumerate() {
                    for (slot, prefix) in [(&mut adam.m[i], "opt/m/"), (&mut adam.v[i], "opt/v/")] {
                        let t = file
                            .get(&format!("{prefix}{name}"))
                            .ok_or_else(|| bad(format!("missing {prefix}{name}")))?;
                        if t.shape() != slot.shape() {
                            return Err(bad(format!("{prefix}{name}: shape {:?}", t.shape())));
                        }
                        *slot = t.clone();
                    }
                }
                Some(adam)
            }
        };
        let scalar = |name: &str| -> Result<f64> {
            Ok(file.get(name).ok_or_else(|| bad(format!("missing {name}")))?.item())
        };
        Ok(Checkpoint {
            model,
            adam,
            epoch: scalar("meta/epoch")? as usize,
            best_val_loss: scalar("meta/best_val_loss")?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_file().save(path)
    }

    pub fn load(path: impl AsRef<Path>, adam_cfg: AdamConfig) -> Result<Checkpoint> {
        let path = path.as_ref();
        Self::from_file(&TensorFile::load(path)?, path, adam_cfg)
    }
}
