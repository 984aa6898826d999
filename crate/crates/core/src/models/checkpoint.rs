//! Checkpoint layout:
//!
//! ```text
//! 8 bytes   magic "FP4LAB01"
//! 4 bytes   header length H, little-endian u32
//! H bytes   UTF-8 JSON header
//! rest      every tensor listed in the header, in order, as little-endian f64
//! ```
//!
//! The header holds `config`, `step`, `adam_t` and `tensors`, a list of
//! `{name, shape}`. Parameters come first in layout order, followed by the
//! AdamW first and second moments (`adam.m.<name>`, `adam.v.<name>`).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, ModelConfig, ModelError, ModelState};
use crate::tensorcore::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FP4LAB01";

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
    adam_t: u64,
    tensors: Vec<Entry>,
}

pub fn write_checkpoint<W: Write>(state: &ModelState, mut w: W) -> Result<(), ModelError> {
    let specs = state.specs();
    let mut tensors: Vec<Entry> = specs
        .iter()
        .map(|s| Entry {
            name: s.name.clone(),
            shape: s.shape.clone(),
        })
        .collect();
    for moment in ["m", "v"] {
        for s in specs {
            tensors.push(Entry {
                name: format!("adam.{moment}.{}", s.name),
                shape: s.shape.clone(),
            });
        }
    }
    let header = Header {
        config: state.config().clone(),
        step: state.step,
        adam_t: state.adam.t,
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let len =
        u32::try_from(json.len()).map_err(|_| ModelError::Checkpoint("header too large".into()))?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&json)?;
    let blocks = state
        .params()
        .iter()
        .map(|p| p.data())
        .chain(state.adam.m.iter().map(|v| v.as_slice()))
        .chain(state.adam.v.iter().map(|v| v.as_slice()));
    let mut buf = Vec::new();
    for b in blocks {
        buf.clear();
        buf.extend(b.iter().flat_map(|x| x.to_le_bytes()));
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ModelState, ModelError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: Header =
        serde_json::from_slice(&json).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Tensor::new(e.shape.clone(), data)?);
    }
    if tensors.len() % 3 != 0 {
        return Err(ModelError::Checkpoint(
            "tensor count is not params + two moments".into(),
        ));
    }
    let k = tensors.len() / 3;
    let mut it = tensors.into_iter();
    let params: Vec<Tensor> = it.by_ref().take(k).collect();
    let m = it.by_ref().take(k).map(Tensor::into_data).collect();
    let v = it.map(Tensor::into_data).collect();
    let adam = AdamState {
        m,
        v,
        t: header.adam_t,
    };
    ModelState::from_parts(header.config, params, adam, header.step)
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<(), ModelError> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_checkpoint(state, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState, ModelError> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}
