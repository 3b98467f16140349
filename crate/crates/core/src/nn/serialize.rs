//! Weight container: a flat binary payload (little-endian f64 per
//! parameter, concatenated) plus a JSON manifest describing name, shape
//! and offset of each entry. This is the artifact exchanged between
//! sites in the decentralized setting, so the layout is fixed and
//! versioned.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT: &str = "traffic-weights-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in f64 elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub meta: Value,
    pub params: Vec<ManifestEntry>,
}

pub fn save_container(
    bin_path: &Path,
    manifest_path: &Path,
    meta: Value,
    entries: &[(String, &Tensor)],
) -> Result<()> {
    let mut params = Vec::with_capacity(entries.len());
    let total: usize = entries.iter().map(|(_, t)| t.len()).sum();
    let mut payload = Vec::with_capacity(total * 8);
    let mut offset = 0;
    for (name, tensor) in entries {
        params.push(ManifestEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            offset,
            len: tensor.len(),
        });
        for v in tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        offset += tensor.len();
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        meta,
        params,
    };
    fs::write(bin_path, payload)?;
    fs::write(manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_container(bin_path: &Path, manifest_path: &Path) -> Result<(Value, Vec<(String, Tensor)>)> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    if manifest.format != FORMAT {
        return Err(Error::InvalidData(format!(
            "unsupported weight container format {:?}",
            manifest.format
        )));
    }
    let payload = fs::read(bin_path)?;
    let total: usize = manifest.params.iter().map(|e| e.len).sum();
    if payload.len() != total * 8 {
        return Err(Error::InvalidData(format!(
            "weight payload is {} bytes, manifest expects {}",
            payload.len(),
            total * 8
        )));
    }
    let mut out = Vec::with_capacity(manifest.params.len());
    for entry in &manifest.params {
        let numel: usize = entry.shape.iter().product();
        if numel != entry.len {
            return Err(Error::InvalidData(format!(
                "manifest entry {:?}: shape {:?} does not match len {}",
                entry.name, entry.shape, entry.len
            )));
        }
        let start = entry.offset * 8;
        let end = start + entry.len * 8;
        if end > payload.len() {
            return Err(Error::InvalidData(format!(
                "manifest entry {:?} exceeds payload size",
                entry.name
            )));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
    }
    Ok((manifest.meta, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn round_trip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("w.bin");
        let man = dir.path().join("w.json");
        let a = Tensor::new(vec![2, 3], vec![1.5, -2.25, 0.0, f64::MIN_POSITIVE, 3.7, -0.125])
            .unwrap();
        let b = Tensor::new(vec![4], vec![9.0, 8.0, 7.0, 6.0]).unwrap();
        save_container(
            &bin,
            &man,
            json!({"arch": "test"}),
            &[("layer0.w".into(), &a), ("layer1.b".into(), &b)],
        )
        .unwrap();
        let (meta, params) = load_container(&bin, &man).unwrap();
        assert_eq!(meta["arch"], "test");
        assert_eq!(params.len(), 2);
        assert_eq!(params[0].0, "layer0.w");
        assert_eq!(&params[0].1, &a);
        assert_eq!(&params[1].1, &b);
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("w.bin");
        let man = dir.path().join("w.json");
        let a = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        save_container(&bin, &man, json!({}), &[("p".into(), &a)]).unwrap();
        let payload = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &payload[..16]).unwrap();
        assert!(load_container(&bin, &man).is_err());
    }
}
