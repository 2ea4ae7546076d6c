//! Flat binary weight files.
//!
//! Layout (little-endian): magic `SPKR`, version `u32`, 32-byte SHA-256
//! config digest, array count `u32`, then per array: name length `u32`,
//! UTF-8 name, rank `u32`, `rank` dims as `u64`, values as `f32`.

use std::fs;
use std::path::Path;

use ndarray::{Array1, ArrayD, IxDyn};

use super::Model;
use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"SPKR";
pub const WEIGHTS_VERSION: u32 = 1;

fn bn_prefix(model: &Model, gamma: crate::tensor::ParamId) -> String {
    model.params().name(gamma).trim_end_matches(".gamma").to_string()
}

fn push_array(out: &mut Vec<u8>, name: &str, values: &ArrayD<f64>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(values.ndim() as u32).to_le_bytes());
    for &d in values.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in values.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Serializes every parameter and batch-norm running statistic.
pub fn weights_to_bytes(model: &Model) -> Vec<u8> {
    let mut arrays: Vec<(String, ArrayD<f64>)> =
        model.params().iter().map(|(_, n, t)| (n.to_string(), t.values.clone())).collect();
    for (_, _, bn) in model.batch_norms() {
        let p = bn_prefix(model, bn.gamma);
        arrays.push((format!("{p}.running_mean"), bn.running_mean.clone().into_dyn()));
        arrays.push((format!("{p}.running_var"), bn.running_var.clone().into_dyn()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend(hex::decode(model.config().digest()).expect("hex digest"));
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (n, a) in &arrays {
        push_array(&mut out, n, a);
    }
    out
}

pub fn save_weights(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, weights_to_bytes(model))?;
    Ok(())
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self.b.get(self.pos..self.pos + n).ok_or_else(|| Error::Format("weights file truncated".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Loads weights saved for an identically configured model.
pub fn weights_from_bytes(model: &mut Model, bytes: &[u8]) -> Result<()> {
    let mut r = Reader { b: bytes, pos: 0 };
    if r.take(4)? != WEIGHTS_MAGIC {
        return Err(Error::Format("not a weights file".into()));
    }
    let version = r.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(Error::Format(format!("unsupported weights version {version}")));
    }
    if hex::encode(r.take(32)?) != model.config().digest() {
        return Err(Error::Format("weights were saved for a different model configuration".into()));
    }
    let count = r.u32()? as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| Error::Format(e.to_string()))?;
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let total: usize = dims.iter().product();
        let vals = r.take(total * 4)?;
        let vals: Vec<f64> =
            vals.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))).collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), vals).map_err(|e| Error::Format(e.to_string()))?;
        arrays.push((name, arr));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes in weights file".into()));
    }
    let prefixes: Vec<String> = model.batch_norms().iter().map(|(_, _, bn)| bn_prefix(model, bn.gamma)).collect();
    for (name, arr) in arrays {
        if let Some(id) = model.params().find(&name) {
            let t = model.params_mut().get_mut(id);
            if t.values.shape() != arr.shape() {
                return Err(Error::Format(format!("shape mismatch for {name}")));
            }
            t.values = arr;
            continue;
        }
        let (prefix, stat) = name.rsplit_once('.').ok_or_else(|| Error::Format(format!("unknown array {name}")))?;
        let i = prefixes
            .iter()
            .position(|p| p == prefix)
            .ok_or_else(|| Error::Format(format!("unknown array {name}")))?;
        let bn = model.batch_norms_mut().swap_remove(i);
        let v: Array1<f64> = arr.into_dimensionality().map_err(|e| Error::Format(e.to_string()))?;
        if v.len() != bn.channels() {
            return Err(Error::Format(format!("shape mismatch for {name}")));
        }
        match stat {
            "running_mean" => bn.running_mean = v,
            "running_var" => bn.running_var = v,
            _ => return Err(Error::Format(format!("unknown array {name}"))),
        }
    }
    Ok(())
}

pub fn load_weights(model: &mut Model, path: &Path) -> Result<()> {
    weights_from_bytes(model, &fs::read(path)?)
}
