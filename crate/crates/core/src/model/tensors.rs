// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tensor container IO (the safetensors layout: 8-byte little-endian header
//! length, JSON header, raw little-endian buffer).

use std::collections::BTreeMap;
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use crate::error::{Error, Result};

/// Dense row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::DimensionError {
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub type TensorMap = BTreeMap<String, Tensor>;

/// Decode a container held in memory. f16 tensors are widened to f32; any
/// other dtype is rejected.
pub fn decode(bytes: &[u8]) -> Result<TensorMap> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Container(e.to_string()))?;
    let mut out = TensorMap::new();
    for (name, view) in st.tensors() {
        out.insert(name.clone(), widen(&name, &view)?);
    }
    Ok(out)
}

/// Like [`decode`] but only materializes tensors accepted by `keep`.
pub fn decode_filtered(bytes: &[u8], keep: impl Fn(&str) -> bool) -> Result<TensorMap> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Container(e.to_string()))?;
    let mut out = TensorMap::new();
    for name in st.names() {
        if !keep(name) {
            continue;
        }
        let view = st
            .tensor(name)
            .map_err(|e| Error::Container(e.to_string()))?;
        out.insert(name.to_string(), widen(name, &view)?);
    }
    Ok(out)
}

fn widen(name: &str, view: &TensorView<'_>) -> Result<Tensor> {
    let raw = view.data();
    let data: Vec<f32> = match view.dtype() {
        Dtype::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        Dtype::F16 => raw
            .chunks_exact(2)
            .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
        other => {
            return Err(Error::SchemaViolation(format!(
                "tensor `{name}` has unsupported dtype {other:?} (expected F32 or F16)"
            )))
        }
    };
    Tensor::new(view.shape().to_vec(), data)
}

pub fn read_file(path: &Path) -> Result<TensorMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Serialize f32 tensors (name order is the map order).
pub fn encode(tensors: &TensorMap, metadata: Option<BTreeMap<String, String>>) -> Result<Vec<u8>> {
    let bytes: Vec<(String, Vec<u8>)> = tensors
        .iter()
        .map(|(name, t)| {
            let mut buf = Vec::with_capacity(t.data.len() * 4);
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            (name.clone(), buf)
        })
        .collect();
    let views = tensors
        .iter()
        .zip(&bytes)
        .map(|((name, t), (_, buf))| {
            TensorView::new(Dtype::F32, t.shape.clone(), buf)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Container(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let metadata = metadata.map(|m| m.into_iter().collect());
    safetensors::serialize(views, metadata).map_err(|e| Error::Container(e.to_string()))
}

pub fn write_file(
    path: &Path,
    tensors: &TensorMap,
    metadata: Option<BTreeMap<String, String>>,
) -> Result<()> {
    let bytes = encode(tensors, metadata)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
