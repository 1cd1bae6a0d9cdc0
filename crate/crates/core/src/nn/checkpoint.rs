//! Checkpoint archives.
//!
//! Layout (little-endian):
//!
//! ```text
//! b"HPCK" | u32 version | u32 header_len | header (UTF-8 TOML)
//! u32 tensor_count
//! per tensor: u32 name_len | name | u32 rank | u64 dims[rank] | f32 values[prod(dims)]
//! ```
//!
//! The header carries the model kind, the epoch the archive was written after,
//! and the full network spec. Loading against a different spec is an error.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use super::multitask::MultiTaskModel;
use super::refiner::RefinerModel;
use super::spec::{MultiTaskSpec, RefinerSpec};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HPCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    MultiTask,
    Refiner,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header<S> {
    kind: ModelKind,
    epoch: usize,
    spec: S,
}

type Blob = (String, Vec<usize>, Vec<f32>);

fn encode<S: Serialize>(header: &Header<S>, blobs: &[Blob]) -> Result<Vec<u8>> {
    let text = toml::to_string(header).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
    for (name, dims, data) in blobs {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn truncated(e: std::io::Error) -> Error {
    Error::Format(format!("truncated checkpoint: {e}"))
}

fn read_u32(c: &mut Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    c.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string(c: &mut Cursor<&[u8]>, len: usize) -> Result<String> {
    let remaining = c.get_ref().len() - c.position() as usize;
    if len > remaining {
        return Err(Error::Format("truncated checkpoint string".into()));
    }
    let mut b = vec![0u8; len];
    c.read_exact(&mut b).map_err(truncated)?;
    String::from_utf8(b).map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
}

/// Splits an archive into its header text and tensor blobs.
fn decode(bytes: &[u8]) -> Result<(String, Vec<Blob>)> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint archive (bad magic)".into()));
    }
    let mut c = Cursor::new(bytes);
    c.set_position(4);
    let version = read_u32(&mut c)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let header_len = read_u32(&mut c)? as usize;
    let header = read_string(&mut c, header_len)?;
    let count = read_u32(&mut c)? as usize;
    let mut blobs = Vec::new();
    for _ in 0..count {
        let name_len = read_u32(&mut c)? as usize;
        let name = read_string(&mut c, name_len)?;
        let rank = read_u32(&mut c)? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            let mut b = [0u8; 8];
            c.read_exact(&mut b).map_err(truncated)?;
            dims.push(u64::from_le_bytes(b) as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("tensor {name} dims overflow")))?;
        let remaining = bytes.len() - c.position() as usize;
        if n.checked_mul(4).is_none_or(|b| b > remaining) {
            return Err(Error::Format(format!("tensor {name} is truncated")));
        }
        let mut raw = vec![0u8; n * 4];
        c.read_exact(&mut raw).map_err(truncated)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        blobs.push((name, dims, data));
    }
    if (c.position() as usize) != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint tensors".into()));
    }
    Ok((header, blobs))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn parse_header<S: for<'de> Deserialize<'de>>(text: &str, want: ModelKind) -> Result<Header<S>> {
    #[derive(Deserialize)]
    struct KindOnly {
        kind: ModelKind,
    }
    let kind: KindOnly =
        toml::from_str(text).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    if kind.kind != want {
        return Err(Error::CheckpointMismatch(format!(
            "archive holds a {:?} model, expected {:?}",
            kind.kind, want
        )));
    }
    toml::from_str(text).map_err(|e| Error::Format(format!("checkpoint header: {e}")))
}

/// Model kind and epoch of an archive without building the model.
pub fn peek(path: &Path) -> Result<(ModelKind, usize)> {
    #[derive(Deserialize)]
    struct Meta {
        kind: ModelKind,
        epoch: usize,
    }
    let (text, _) = decode(&read_file(path)?)?;
    let meta: Meta =
        toml::from_str(&text).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    Ok((meta.kind, meta.epoch))
}

pub fn save_multitask(path: &Path, model: &MultiTaskModel, epoch: usize) -> Result<()> {
    let header = Header {
        kind: ModelKind::MultiTask,
        epoch,
        spec: model.spec.clone(),
    };
    write_file(path, &encode(&header, &model.params.export()?)?)
}

/// Loads a multi-task model. With `expected`, the stored spec must match it exactly.
pub fn load_multitask(
    path: &Path,
    expected: Option<&MultiTaskSpec>,
    dtype: DType,
) -> Result<(MultiTaskModel, usize)> {
    let (text, blobs) = decode(&read_file(path)?)?;
    let header: Header<MultiTaskSpec> = parse_header(&text, ModelKind::MultiTask)?;
    if let Some(want) = expected {
        if *want != header.spec {
            return Err(Error::CheckpointMismatch(format!(
                "{} was trained with spec {:?}, requested {:?}",
                path.display(),
                header.spec,
                want
            )));
        }
    }
    let model = MultiTaskModel::build(&header.spec, dtype, 0)?;
    model.params.import(&blobs)?;
    Ok((model, header.epoch))
}

pub fn save_refiner(path: &Path, model: &RefinerModel, epoch: usize) -> Result<()> {
    let header = Header {
        kind: ModelKind::Refiner,
        epoch,
        spec: model.spec.clone(),
    };
    write_file(path, &encode(&header, &model.params.export()?)?)
}

pub fn load_refiner(
    path: &Path,
    expected: Option<&RefinerSpec>,
    dtype: DType,
) -> Result<(RefinerModel, usize)> {
    let (text, blobs) = decode(&read_file(path)?)?;
    let header: Header<RefinerSpec> = parse_header(&text, ModelKind::Refiner)?;
    if let Some(want) = expected {
        if *want != header.spec {
            return Err(Error::CheckpointMismatch(format!(
                "{} was trained with spec {:?}, requested {:?}",
                path.display(),
                header.spec,
                want
            )));
        }
    }
    let model = RefinerModel::build(&header.spec, dtype, 0)?;
    model.params.import(&blobs)?;
    Ok((model, header.epoch))
}
