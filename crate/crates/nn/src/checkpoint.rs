//! Checkpoint container.
//!
//! Layout: the 9-byte magic `DINCKPT1\n`, a little-endian `u64` header length,
//! a JSON header `{"config": .., "tensors": [{"name", "shape"}, ..]}`, then
//! every tensor's values as little-endian `f64` in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::graph::Tensor;
use crate::model::{DinConfig, DinModel};

pub const MAGIC: &[u8; 9] = b"DINCKPT1\n";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: DinConfig,
    tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint<W: Write>(model: &DinModel, mut out: W) -> Result<()> {
    let header = Header {
        config: model.config,
        tensors: model
            .params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(MAGIC)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for (_, t) in model.params.iter() {
        for v in t.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<DinModel> {
    let mut magic = [0u8; 9];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::Checkpoint("not a model checkpoint".into()));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    input.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    let mut model = DinModel::new(header.config)?;
    if header.tensors.len() != model.params.len() {
        return Err(NnError::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {}",
            header.tensors.len(),
            model.params.len()
        )));
    }
    for (i, entry) in header.tensors.iter().enumerate() {
        let (name, t) = (&model.params.names()[i], &model.params.values()[i]);
        if *name != entry.name || t.shape() != entry.shape.as_slice() {
            return Err(NnError::Checkpoint(format!(
                "tensor {i}: checkpoint {} {:?} vs model {name} {:?}",
                entry.name,
                entry.shape,
                t.shape()
            )));
        }
        let n: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        input.read_exact(&mut bytes)?;
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        model.params.values_mut()[i] = Tensor::from_shape_vec(IxDyn(&entry.shape), values)
            .map_err(|e| NnError::Checkpoint(e.to_string()))?;
    }
    Ok(model)
}

pub fn save(model: &DinModel, path: &Path) -> Result<()> {
    write_checkpoint(model, BufWriter::new(File::create(path)?))
}

pub fn load(path: &Path) -> Result<DinModel> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
