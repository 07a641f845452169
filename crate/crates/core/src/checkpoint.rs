//! `ADMK` checkpoint container.
//!
//! Layout (little-endian): magic `ADMK`, u16 version, u32 tensor count, then
//! for each tensor a u32 name length, the UTF-8 name and an MTNS blob. A
//! CRC32 of every preceding byte closes the file.
//!
//! The model kind and its configuration travel as JSON text stored byte-wise
//! in the tensor [`META_TENSOR`].

use std::path::Path;

use indexmap::IndexMap;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::numkit::mtns::{self, AnyTensor};
use crate::numkit::{ParamStore, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"ADMK";
pub const VERSION: u16 = 1;
pub const META_TENSOR: &str = "meta.config_json";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: Value,
    pub tensors: IndexMap<String, AnyTensor>,
}

impl Checkpoint {
    pub fn new(kind: &str, config: &impl Serialize) -> Result<Self> {
        Ok(Self { kind: kind.into(), config: serde_json::to_value(config)?, tensors: IndexMap::new() })
    }

    pub fn insert(&mut self, name: impl Into<String>, t: impl Into<AnyTensor>) -> Result<()> {
        let name = name.into();
        if name == META_TENSOR || self.tensors.contains_key(&name) {
            return Err(Error::State(format!("checkpoint already has a tensor named {name}")));
        }
        self.tensors.insert(name, t.into());
        Ok(())
    }

    /// Add every parameter of `store` under its own name.
    pub fn add_store<F: Real>(&mut self, store: &ParamStore<F>) -> Result<()>
    where
        AnyTensor: From<Tensor<F>>,
    {
        for (name, p) in store.iter() {
            self.insert(name, p.value.clone())?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&AnyTensor> {
        self.tensors.get(name).ok_or_else(|| Error::State(format!("checkpoint has no tensor {name}")))
    }

    /// Tensors whose names pass `keep`, as trainable parameters.
    pub fn store_where<F: Real>(&self, keep: impl Fn(&str) -> bool) -> Result<ParamStore<F>> {
        let mut s = ParamStore::new();
        for (name, t) in &self.tensors {
            if keep(name) {
                s.insert(name.clone(), t.to())?;
            }
        }
        Ok(s)
    }

    pub fn config_as<T: DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.config.clone())?)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Input(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    fn meta_tensor(&self) -> Result<Tensor<f32>> {
        let text = serde_json::to_vec(&serde_json::json!({ "kind": self.kind, "config": self.config }))?;
        Tensor::new(vec![text.len()], text.into_iter().map(f32::from).collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = AnyTensor::F32(self.meta_tensor()?);
        let entries = std::iter::once((META_TENSOR, &meta)).chain(self.tensors.iter().map(|(k, v)| (k.as_str(), v)));
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32 + 1).to_le_bytes());
        for (name, t) in entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&t.encode());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 14 || &buf[..4] != MAGIC {
            return Err(Error::Format("not an ADMK checkpoint".into()));
        }
        let (body, tail) = buf.split_at(buf.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(Error::Format("checkpoint CRC mismatch (corrupt or truncated file)".into()));
        }
        let version = u16::from_le_bytes(body[4..6].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("checkpoint version {version}, this build reads {VERSION}")));
        }
        let count = u32::from_le_bytes(body[6..10].try_into().unwrap()) as usize;
        let mut pos = 10;
        let mut tensors = IndexMap::new();
        let mut meta = None;
        for _ in 0..count {
            let len = body.get(pos..pos + 4).ok_or_else(|| Error::Format("truncated tensor name".into()))?;
            let len = u32::from_le_bytes(len.try_into().unwrap()) as usize;
            pos += 4;
            let name = body.get(pos..pos + len).ok_or_else(|| Error::Format("truncated tensor name".into()))?;
            let name = String::from_utf8(name.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            pos += len;
            let (t, used) = mtns::decode(&body[pos..])?;
            pos += used;
            if name == META_TENSOR {
                meta = Some(t);
            } else if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Format(format!("duplicate tensor {name}")));
            }
        }
        if pos != body.len() {
            return Err(Error::Format("trailing bytes before checksum".into()));
        }
        let meta = meta.ok_or_else(|| Error::Format("checkpoint lacks its config snapshot".into()))?;
        let text: Vec<u8> = meta.to::<f32>().data().iter().map(|&b| b as u8).collect();
        let mut v: Value = serde_json::from_slice(&text)?;
        let kind = v.get("kind").and_then(Value::as_str).unwrap_or_default().to_string();
        let config = v.get_mut("config").map(Value::take).unwrap_or(Value::Null);
        Ok(Self { kind, config, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            e => e,
        })
    }
}
