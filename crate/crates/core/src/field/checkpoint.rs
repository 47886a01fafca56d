//! Versioned checkpoint files for [`FieldParams`].
//!
//! Binary layout, all integers little-endian:
//!
//! ```text
//! magic    4 bytes  "AVFD"
//! version  u32      currently 1
//! meta_len u64      length of the JSON block that follows
//! meta     JSON     config, context and the name and shape of every tensor
//! tensors  f64 LE   row-major, in `FieldParams::tensors` order: the three
//!                   planes, deform/color/sdf layers (weight then bias),
//!                   style, alpha
//! ```
//!
//! The ASCII dump carries the same meta line followed by one block per
//! tensor, each value printed in shortest round-trip form.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::body::BodySpec;
use crate::error::{Error, Result};
use crate::field::{FieldConfig, FieldParams};
use crate::math::Aabb;

pub const MAGIC: &[u8; 4] = b"AVFD";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: FieldConfig,
    pub height: f64,
    pub pose_dim: usize,
    pub shape_dim: usize,
    pub bounds: Aabb,
    #[serde(default)]
    pub body: Option<BodySpec>,
    pub tensors: Vec<TensorInfo>,
}

impl CheckpointMeta {
    pub fn of(params: &FieldParams) -> Self {
        Self {
            config: params.config.clone(),
            height: params.height,
            pose_dim: params.pose_dim,
            shape_dim: params.shape_dim,
            bounds: params.bounds(),
            body: params.body.clone(),
            tensors: params
                .tensor_names()
                .into_iter()
                .zip(params.tensors())
                .map(|(name, t)| TensorInfo { name, rows: t.nrows(), cols: t.ncols() })
                .collect(),
        }
    }

    /// Parameters with the recorded structure and zeroed tensors.
    fn skeleton(&self) -> Result<FieldParams> {
        let mut p = FieldParams::init_with(&self.config, self.bounds, self.height, self.pose_dim, 0)?;
        p.body = self.body.clone();
        if p.shape_dim != self.shape_dim {
            return Err(Error::Format(format!("shape dimension {} is not supported", self.shape_dim)));
        }
        let names = p.tensor_names();
        let shapes: Vec<(usize, usize)> = p.tensors().iter().map(|t| t.dim()).collect();
        if names.len() != self.tensors.len() {
            return Err(Error::Format("tensor count does not match the configuration".into()));
        }
        for ((name, shape), info) in names.iter().zip(&shapes).zip(&self.tensors) {
            if *name != info.name || *shape != (info.rows, info.cols) {
                return Err(Error::Format(format!("tensor {} has an unexpected name or shape", info.name)));
            }
        }
        Ok(p)
    }
}

pub fn to_bytes(params: &FieldParams) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&CheckpointMeta::of(params))?;
    let mut out = Vec::with_capacity(16 + meta.len() + params.parameter_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((meta.len() as u64).to_le_bytes());
    out.extend(meta);
    for t in params.tensors() {
        for v in t.iter() {
            out.extend(v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<FieldParams> {
    let bad = |why: &str| Error::Format(format!("checkpoint: {why}"));
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("missing magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let meta_end = 16usize.checked_add(meta_len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated meta"))?;
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[16..meta_end])?;
    let mut params = meta.skeleton()?;
    let mut rest = &bytes[meta_end..];
    let total: usize = params.parameter_count();
    if rest.len() != total * 8 {
        return Err(bad(&format!("expected {} tensor bytes, found {}", total * 8, rest.len())));
    }
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v = f64::from_le_bytes(rest[..8].try_into().expect("8 bytes"));
            rest = &rest[8..];
        }
    }
    params.validate().map_err(|e| bad(&e.to_string()))?;
    Ok(params)
}

pub fn save(params: &FieldParams, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(params)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<FieldParams> {
    from_bytes(&fs::read(path)?)
}

pub fn to_ascii(params: &FieldParams) -> Result<String> {
    use std::fmt::Write;
    let mut s = String::new();
    let meta = serde_json::to_string(&CheckpointMeta::of(params))?;
    writeln!(s, "avatarfield-ascii {VERSION}").expect("string write");
    writeln!(s, "{meta}").expect("string write");
    for (name, t) in params.tensor_names().iter().zip(params.tensors()) {
        writeln!(s, "{name} {} {}", t.nrows(), t.ncols()).expect("string write");
        for row in t.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            writeln!(s, "{}", line.join(" ")).expect("string write");
        }
    }
    Ok(s)
}

pub fn from_ascii(text: &str) -> Result<FieldParams> {
    let bad = |why: String| Error::Format(format!("ascii checkpoint: {why}"));
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == format!("avatarfield-ascii {VERSION}") => {}
        _ => return Err(bad("bad header".into())),
    }
    let meta: CheckpointMeta = serde_json::from_str(lines.next().ok_or_else(|| bad("missing meta".into()))?)?;
    let mut params = meta.skeleton()?;
    let names = params.tensor_names();
    for (name, t) in names.iter().zip(params.tensors_mut()) {
        let head = lines.next().ok_or_else(|| bad(format!("missing tensor {name}")))?;
        if head != format!("{name} {} {}", t.nrows(), t.ncols()) {
            return Err(bad(format!("unexpected tensor header {head:?}")));
        }
        let mut values = Vec::with_capacity(t.len());
        for _ in 0..t.nrows() {
            let line = lines.next().ok_or_else(|| bad(format!("tensor {name} truncated")))?;
            for tok in line.split_whitespace() {
                values.push(tok.parse::<f64>().map_err(|e| bad(format!("{name}: {e}")))?);
            }
        }
        *t = Array2::from_shape_vec(t.dim(), values).map_err(|e| bad(format!("{name}: {e}")))?;
    }
    params.validate().map_err(|e| bad(e.to_string()))?;
    Ok(params)
}
