//! Named-tensor checkpoint container.
//!
//! A checkpoint directory holds `params.bin` (concatenated little-endian f64
//! data) and `manifest.json` describing each entry plus caller metadata.
//! Save and load round-trip byte-exactly.

use crate::error::{Error, Result};
use crate::ioutil::{write_atomic, write_json_atomic};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into params.bin.
    offset: u64,
    /// Element count.
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    meta: serde_json::Value,
    entries: Vec<ManifestEntry>,
}

pub fn save_checkpoint(
    dir: &Path,
    entries: &[(String, Tensor)],
    meta: &serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut manifest = Manifest {
        meta: meta.clone(),
        entries: Vec::with_capacity(entries.len()),
    };
    for (name, tensor) in entries {
        let offset = blob.len() as u64;
        for v in tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        manifest.entries.push(ManifestEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            offset,
            len: tensor.len() as u64,
        });
    }
    write_atomic(&dir.join("params.bin"), &blob)?;
    write_json_atomic(&dir.join("manifest.json"), &manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<(Vec<(String, Tensor)>, serde_json::Value)> {
    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let blob = fs::read(dir.join("params.bin"))?;
    let mut entries = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let start = e.offset as usize;
        let end = start + e.len as usize * 8;
        if end > blob.len() {
            return Err(Error::Config(format!(
                "checkpoint entry '{}' overruns params.bin ({} > {})",
                e.name,
                end,
                blob.len()
            )));
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    Ok((entries, manifest.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn roundtrip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = crate::rng::stream(&[3]);
        let entries: Vec<(String, Tensor)> = (0..4)
            .map(|i| {
                let data: Vec<f64> = (0..6).map(|_| rng.gen::<f64>() * 1e3 - 500.0).collect();
                (format!("layer{i}.w"), Tensor::new(vec![2, 3], data).unwrap())
            })
            .collect();
        let meta = serde_json::json!({"resolution": 32, "note": "test"});
        save_checkpoint(dir.path(), &entries, &meta).unwrap();
        let (loaded, loaded_meta) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded_meta, meta);
        assert_eq!(loaded.len(), entries.len());
        for ((ln, lt), (n, t)) in loaded.iter().zip(&entries) {
            assert_eq!(ln, n);
            assert_eq!(lt, t);
        }
        // Saving the loaded state reproduces identical bytes.
        let dir2 = tempfile::tempdir().unwrap();
        save_checkpoint(dir2.path(), &loaded, &loaded_meta).unwrap();
        let a = fs::read(dir.path().join("params.bin")).unwrap();
        let b = fs::read(dir2.path().join("params.bin")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_blob_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![("w".to_string(), Tensor::zeros(vec![4]))];
        save_checkpoint(dir.path(), &entries, &serde_json::Value::Null).unwrap();
        fs::write(dir.path().join("params.bin"), [0u8; 8]).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
