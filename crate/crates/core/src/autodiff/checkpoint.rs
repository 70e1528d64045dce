//! Binary checkpoints.
//!
//! Layout: an 8-byte little-endian header length `h`, then `h` bytes of JSON
//! header, then the tensor data as little-endian `f64`. The header lists each
//! tensor's name, shape and byte offset (relative to the start of the data
//! block) plus a free-form `meta` object.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::optim::AdamState;
use super::ParamSet;
use crate::error::{Error, Result};

pub const FORMAT: &str = "pocketforge-f64le";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub struct Tensor {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

pub fn encode(meta: serde_json::Value, tensors: &[(&str, [usize; 2], &[f64])]) -> Vec<u8> {
    let mut offset = 0u64;
    let entries = tensors
        .iter()
        .map(|(name, shape, data)| {
            debug_assert_eq!(shape[0] * shape[1], data.len());
            let e = TensorEntry {
                name: name.to_string(),
                shape: *shape,
                offset,
            };
            offset += 8 * data.len() as u64;
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        format: FORMAT.into(),
        meta,
        tensors: entries,
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, _, data) in tensors {
        for v in data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<(serde_json::Value, Vec<Tensor>)> {
    let bad = |message: &str| Error::Parse {
        path: origin.to_path_buf(),
        line: 0,
        message: message.to_string(),
    };
    if bytes.len() < 8 {
        return Err(bad("truncated checkpoint"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let data = bytes.get(8 + hlen..).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[8..8 + hlen])?;
    if header.format != FORMAT {
        return Err(bad("unknown checkpoint format"));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n = e.shape[0] * e.shape[1];
        let start = e.offset as usize;
        let chunk = data
            .get(start..start + 8 * n)
            .ok_or_else(|| bad("tensor extends past end of file"))?;
        let values = chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor {
            name: e.name,
            shape: e.shape,
            data: values,
        });
    }
    Ok((header.meta, tensors))
}

pub fn save_params(path: impl AsRef<Path>, params: &ParamSet, meta: serde_json::Value) -> Result<()> {
    let path = path.as_ref();
    let tensors: Vec<_> = params
        .iter()
        .map(|(_, name, v)| {
            (
                name,
                [v.nrows(), v.ncols()],
                v.as_slice().expect("parameters are contiguous"),
            )
        })
        .collect();
    fs::write(path, encode(meta, &tensors)).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<(ParamSet, serde_json::Value)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (meta, tensors) = decode(&bytes, path)?;
    let mut params = ParamSet::default();
    for t in tensors {
        let a = Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data).expect("shape matches length");
        params.add(t.name, a);
    }
    Ok((params, meta))
}

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step_count: u64,
}

/// Saves optimizer moments; tensors are named `<slot>.m` / `<slot>.v`.
pub fn save_adam(path: impl AsRef<Path>, state: &AdamState, slot_names: &[&str]) -> Result<()> {
    let path = path.as_ref();
    let meta = serde_json::to_value(AdamMeta {
        lr: state.lr,
        beta1: state.beta1,
        beta2: state.beta2,
        epsilon: state.epsilon,
        step_count: state.step_count,
    })?;
    let names: Vec<(String, String)> = slot_names
        .iter()
        .map(|n| (format!("{n}.m"), format!("{n}.v")))
        .collect();
    let mut tensors = Vec::new();
    for (i, (m, v)) in names.iter().enumerate() {
        let len = state.first_moment[i].len();
        tensors.push((m.as_str(), [1, len], state.first_moment[i].as_slice()));
        tensors.push((v.as_str(), [1, len], state.second_moment[i].as_slice()));
    }
    fs::write(path, encode(meta, &tensors)).map_err(|e| Error::io(path, e))
}

pub fn load_adam(path: impl AsRef<Path>) -> Result<AdamState> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (meta, tensors) = decode(&bytes, path)?;
    let meta: AdamMeta = serde_json::from_value(meta)?;
    let mut first = Vec::new();
    let mut second = Vec::new();
    for pair in tensors.chunks(2) {
        match pair {
            [m, v] if m.name.ends_with(".m") && v.name.ends_with(".v") => {
                first.push(m.data.clone());
                second.push(v.data.clone());
            }
            _ => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: 0,
                    message: "optimizer tensors must come in .m/.v pairs".into(),
                })
            }
        }
    }
    Ok(AdamState {
        lr: meta.lr,
        beta1: meta.beta1,
        beta2: meta.beta2,
        epsilon: meta.epsilon,
        step_count: meta.step_count,
        first_moment: first,
        second_moment: second,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn params_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut params = ParamSet::default();
        params.add("a.weight", array![[1.0, -2.5], [std::f64::consts::PI, 1e-300]]);
        params.add("a.bias", array![[0.1, 0.2]]);
        let path = dir.path().join("p.ckpt");
        save_params(&path, &params, serde_json::json!({"k": 1})).unwrap();
        let (back, meta) = load_params(&path).unwrap();
        assert_eq!(back, params);
        assert_eq!(meta["k"], 1);

        let raw = fs::read(&path).unwrap();
        let hlen = u64::from_le_bytes(raw[..8].try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(&raw[8..8 + hlen]).unwrap();
        assert_eq!(header.tensors[1].offset, 32);
        assert_eq!(raw.len(), 8 + hlen + 6 * 8);
    }

    #[test]
    fn adam_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut state = AdamState::new(1e-3, &[2, 1]);
        state.step_slices(&mut [&mut [1.0, 2.0], &mut [3.0]], &[Some(&[0.5, -0.5]), None]).unwrap();
        let path = dir.path().join("o.ckpt");
        save_adam(&path, &state, &["x", "y"]).unwrap();
        assert_eq!(load_adam(&path).unwrap(), state);
    }

    #[test]
    fn truncated_file_is_an_error() {
        let bytes = encode(serde_json::Value::Null, &[("t", [1, 2], &[1.0, 2.0])]);
        assert!(decode(&bytes[..bytes.len() - 3], Path::new("x")).is_err());
        assert!(decode(&bytes[..4], Path::new("x")).is_err());
    }
}
