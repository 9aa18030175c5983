//! Parameter archives in the safetensors format. Every parameter is stored
//! under its hierarchical name; the run configuration is kept as JSON in the
//! `config` metadata entry.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use sdfa_autograd::{ParamStore, Scalar, Tensor};

use crate::error::{io_err, Result, SdfaError};

const CONFIG_KEY: &str = "config";

fn encode<T: Scalar>(t: &Tensor<T>) -> (Dtype, Vec<u8>) {
    if T::NAME == "f64" {
        let bytes = t.data().iter().flat_map(|v| v.to_f64_lossy().to_le_bytes()).collect();
        (Dtype::F64, bytes)
    } else {
        let bytes = t
            .data()
            .iter()
            .flat_map(|v| (v.to_f64_lossy() as f32).to_le_bytes())
            .collect();
        (Dtype::F32, bytes)
    }
}

fn decode<T: Scalar>(view: &TensorView<'_>) -> Result<Tensor<T>> {
    let values: Vec<T> = match view.dtype() {
        Dtype::F32 => view
            .data()
            .chunks_exact(4)
            .map(|b| T::from_f64_lossy(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect(),
        Dtype::F64 => view
            .data()
            .chunks_exact(8)
            .map(|b| T::from_f64_lossy(f64::from_le_bytes(b.try_into().unwrap())))
            .collect(),
        other => return Err(SdfaError::Checkpoint(format!("unsupported dtype {other:?}"))),
    };
    Ok(Tensor::from_vec(view.shape(), values)?)
}

/// Serializes all parameters plus the configuration JSON to bytes.
pub fn to_bytes<T: Scalar>(store: &ParamStore<T>, config_json: &str) -> Result<Vec<u8>> {
    let encoded: Vec<(String, Vec<usize>, Dtype, Vec<u8>)> = store
        .iter()
        .map(|(name, t)| {
            let (dtype, bytes) = encode(t);
            (name.to_string(), t.shape().to_vec(), dtype, bytes)
        })
        .collect();
    let mut views = Vec::with_capacity(encoded.len());
    for (name, shape, dtype, bytes) in &encoded {
        let view =
            TensorView::new(*dtype, shape.clone(), bytes).map_err(|e| SdfaError::Checkpoint(format!("{name}: {e}")))?;
        views.push((name.as_str(), view));
    }
    let meta = HashMap::from([(CONFIG_KEY.to_string(), config_json.to_string())]);
    safetensors::serialize(views, Some(meta)).map_err(|e| SdfaError::Checkpoint(e.to_string()))
}

pub fn save<T: Scalar>(path: &Path, store: &ParamStore<T>, config_json: &str) -> Result<()> {
    let bytes = to_bytes(store, config_json)?;
    std::fs::write(path, bytes).map_err(io_err(path))
}

/// Configuration JSON stored in a checkpoint.
pub fn read_config(bytes: &[u8]) -> Result<String> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| SdfaError::Checkpoint(e.to_string()))?;
    meta.metadata()
        .as_ref()
        .and_then(|m| m.get(CONFIG_KEY).cloned())
        .ok_or_else(|| SdfaError::Checkpoint("missing config metadata".into()))
}

/// Overwrites every parameter of `store` from the archive. All names must be
/// present with matching shapes; extra entries are rejected too.
pub fn load_into<T: Scalar>(bytes: &[u8], store: &mut ParamStore<T>) -> Result<String> {
    let archive = SafeTensors::deserialize(bytes).map_err(|e| SdfaError::Checkpoint(e.to_string()))?;
    if archive.len() != store.len() {
        return Err(SdfaError::Checkpoint(format!(
            "archive holds {} tensors, model has {}",
            archive.len(),
            store.len()
        )));
    }
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let view = archive
            .tensor(&name)
            .map_err(|_| SdfaError::Checkpoint(format!("missing tensor {name}")))?;
        store
            .set(&name, decode(&view)?)
            .map_err(|e| SdfaError::Checkpoint(format!("{name}: {e}")))?;
    }
    read_config(bytes)
}

pub fn load<T: Scalar>(path: &Path, store: &mut ParamStore<T>) -> Result<String> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    load_into(&bytes, store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(offset: f32) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::from_fn(&[2, 3], |i| i as f32 + offset))
            .unwrap();
        s.add("a.bias", Tensor::from_fn(&[3], |i| -(i as f32) * 0.5 + offset))
            .unwrap();
        s
    }

    #[test]
    fn round_trip() {
        let src = store(0.25);
        let bytes = to_bytes(&src, "{\"k\":1}").unwrap();
        let mut dst = store(9.0);
        assert_eq!(load_into(&bytes, &mut dst).unwrap(), "{\"k\":1}");
        for ((n1, t1), (n2, t2)) in src.iter().zip(dst.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data());
        }
        assert_eq!(bytes, to_bytes(&src, "{\"k\":1}").unwrap());
    }

    #[test]
    fn mismatched_archive_rejected() {
        let bytes = to_bytes(&store(0.0), "{}").unwrap();
        let mut other = ParamStore::<f32>::new();
        other.add("a.weight", Tensor::zeros(&[3, 2])).unwrap();
        other.add("a.bias", Tensor::zeros(&[3])).unwrap();
        assert!(load_into(&bytes, &mut other).is_err());
        let mut fewer = ParamStore::<f32>::new();
        fewer.add("a.bias", Tensor::zeros(&[3])).unwrap();
        assert!(load_into(&bytes, &mut fewer).is_err());
        assert!(load_into(b"garbage", &mut fewer).is_err());
    }
}
