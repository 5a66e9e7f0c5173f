//! `FDCKPT1` checkpoints: magic line, length-prefixed TOML config, the
//! optimizer step, then named tensors in the tensor dump format.

use std::collections::HashMap;
use std::io::{Cursor, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::config::ModelConfig;
use super::model::{build_model, Model};
use super::optim::AdamState;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FDCKPT1\n";

pub fn checkpoint_bytes<T: Scalar>(model: &Model<T>, opt: &AdamState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let cfg = model.cfg.to_toml();
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&(opt.step as u64).to_le_bytes());
    let moments = opt.to_tensors(&model.store);
    out.extend_from_slice(&((model.store.len() + moments.len()) as u64).to_le_bytes());
    let mut put = |name: &str, dump: Vec<u8>| {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&dump);
    };
    for (name, t) in model.store.iter() {
        put(&format!("param.{name}"), t.to_dump_bytes());
    }
    for (name, t) in moments {
        put(&name, t.to_dump_bytes());
    }
    out
}

pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, model: &Model<T>, opt: &AdamState) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, checkpoint_bytes(model, opt)).map_err(|e| Error::io(path, e))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| Error::Format(format!("checkpoint truncated: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

/// Top-level config keys whose values differ.
pub fn config_diff(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    let ta: toml::Table = toml::from_str(&a.to_toml()).expect("valid toml");
    let tb: toml::Table = toml::from_str(&b.to_toml()).expect("valid toml");
    let mut keys: Vec<&String> = ta.keys().chain(tb.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter().filter(|k| ta.get(*k) != tb.get(*k)).cloned().collect()
}

/// Decode a checkpoint. With `expected`, any config difference is an error.
pub fn load_checkpoint_bytes<T: Scalar>(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<(Model<T>, AdamState)> {
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| Error::Format("checkpoint too short".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not an FDCKPT1 checkpoint".into()));
    }
    let len = read_u64(&mut r)? as usize;
    let mut text = vec![0u8; len.min(bytes.len())];
    r.read_exact(&mut text).map_err(|_| Error::Format("checkpoint config truncated".into()))?;
    let text = String::from_utf8(text).map_err(|_| Error::Format("checkpoint config is not UTF-8".into()))?;
    let cfg = ModelConfig::from_toml(&text)?;
    if let Some(exp) = expected {
        let diff = config_diff(exp, &cfg);
        if !diff.is_empty() {
            return Err(Error::ConfigMismatch(format!("differing keys: {}", diff.join(", "))));
        }
    }
    let step = read_u64(&mut r)? as usize;
    let count = read_u64(&mut r)? as usize;
    let mut tensors: HashMap<String, Tensor<f64>> = HashMap::with_capacity(count);
    for _ in 0..count {
        let mut nb = [0u8; 4];
        r.read_exact(&mut nb).map_err(|_| Error::Format("checkpoint truncated".into()))?;
        let mut name = vec![0u8; u32::from_le_bytes(nb) as usize];
        r.read_exact(&mut name).map_err(|_| Error::Format("checkpoint truncated".into()))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        tensors.insert(name, Tensor::read_dump(&mut r)?);
    }
    let mut model = build_model::<T>(&cfg)?;
    for id in model.store.ids().collect::<Vec<_>>() {
        let key = format!("param.{}", model.store.name(id));
        let t = tensors.get(&key).ok_or_else(|| Error::Format(format!("checkpoint lacks {key}")))?;
        model.store.set(id, t.cast())?;
    }
    let opt = AdamState::from_tensors(&model.store, step, |k| tensors.get(k).cloned())?;
    Ok((model, opt))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<(Model<T>, AdamState)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_checkpoint_bytes(&bytes, expected)
}
