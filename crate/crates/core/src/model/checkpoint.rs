//! Binary checkpoints and line-delimited metrics.
//!
//! Layout: magic `GPSNCKPT`, `u32` version, `u32` header length, JSON header
//! (graph spec, model config and, for trained models, the training config),
//! `u32` parameter count, then per parameter in
//! name order: `u32` name length, name bytes, four `u32` dims and the values
//! as little-endian `f64`. All integers little-endian.

use super::supernet::{ModelConfig, SuperNetModel};
use super::train::{MetricRecord, TrainConfig};
use super::{ModelError, Result};
use crate::netspec::GraphSpec;
use crate::tensor::Tensor4;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

pub const MAGIC: &[u8; 8] = b"GPSNCKPT";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    graph: GraphSpec,
    model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train: Option<TrainConfig>,
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

pub fn write_checkpoint(model: &SuperNetModel, w: &mut impl Write) -> Result<()> {
    write_trained_checkpoint(model, None, w)
}

/// Like [`write_checkpoint`], also recording how the model was trained.
pub fn write_trained_checkpoint(model: &SuperNetModel, train: Option<&TrainConfig>, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    let header = serde_json::to_vec(&Header {
        graph: model.graph.clone(),
        model: model.config,
        train: train.cloned(),
    })
    .map_err(|e| bad(e.to_string()))?;
    put_u32(w, header.len() as u32)?;
    w.write_all(&header)?;
    let mut entries: Vec<_> = model.params.iter().map(|(_, e)| e).collect();
    entries.sort_by(|a, b| a.name.cmp(&b.name));
    put_u32(w, entries.len() as u32)?;
    for e in entries {
        put_u32(w, e.name.len() as u32)?;
        w.write_all(e.name.as_bytes())?;
        for d in e.tensor.shape().dims() {
            put_u32(w, d as u32)?;
        }
        for v in e.tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<SuperNetModel> {
    Ok(read_trained_checkpoint(r)?.0)
}

/// Model plus the training config recorded with it, if any.
pub fn read_trained_checkpoint(r: &mut impl Read) -> Result<(SuperNetModel, Option<TrainConfig>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let len = get_u32(r)? as usize;
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header).map_err(|e| bad(e.to_string()))?;
    let mut model = SuperNetModel::new(header.graph, header.model, 0)?;
    let count = get_u32(r)? as usize;
    if count != model.params.len() {
        return Err(bad(format!("{count} parameters stored, model has {}", model.params.len())));
    }
    for _ in 0..count {
        let name_len = get_u32(r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8"))?;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = get_u32(r)? as usize;
        }
        let id = model
            .params
            .find(&name)
            .ok_or_else(|| bad(format!("unknown parameter `{name}`")))?;
        if model.params.get(id).shape().dims() != dims {
            return Err(bad(format!("parameter `{name}` has shape {dims:?} on disk")));
        }
        let mut data = vec![0.0; dims.iter().product()];
        let mut b = [0u8; 8];
        for v in &mut data {
            r.read_exact(&mut b)?;
            *v = f64::from_le_bytes(b);
        }
        *model.params.get_mut(id) = Tensor4::from_vec(dims, data)?;
    }
    Ok((model, header.train))
}

pub fn write_metrics(records: &[MetricRecord], w: &mut impl Write) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| ModelError::Config(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}
