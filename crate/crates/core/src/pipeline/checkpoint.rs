//! Checkpoints: a sequence of `(name, tensor)` entries until end of file.
//! Each entry is a u32 LE byte length, the UTF-8 name, then a `KJT1` tensor.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::io::Reader;
use crate::tensor::{write_tensor, Scalar, Tensor};

pub fn write_checkpoint<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    for (_, name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        write_tensor(t, &mut out);
    }
    out
}

pub fn read_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let mut r = Reader::new(bytes);
    let mut entries = Vec::new();
    while !r.at_end() {
        let at = r.pos();
        let len = r.u32("name length")? as usize;
        let raw = r.take(len, "parameter name")?;
        let name = std::str::from_utf8(raw).map_err(|_| r.fail(at + 4, "name is not UTF-8"))?;
        entries.push((name.to_string(), r.tensor()?));
    }
    Ok(entries)
}

pub fn save_checkpoint<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    Ok(std::fs::write(path, write_checkpoint(store))?)
}

/// Loads every parameter of `store` from `path`. The checkpoint must name
/// exactly the store's parameters, with matching shapes.
pub fn load_checkpoint<T: Scalar>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    let entries = read_checkpoint::<T>(&std::fs::read(path)?)?;
    if entries.len() != store.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} tensors, model expects {}",
            entries.len(),
            store.len()
        )));
    }
    for (name, t) in entries {
        store.assign(&name, t)?;
    }
    Ok(())
}
