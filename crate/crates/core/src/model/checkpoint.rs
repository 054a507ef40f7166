//! Parameter checkpoints: flat little-endian f32 binary per named tensor
//! plus a JSON manifest (names, shapes, config, seed, build id, checksum).

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::ontology::EmbeddingMatrix;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub build: String,
    pub config: ModelConfig,
    pub seed: u64,
    pub threshold: Option<f64>,
    pub tensors: Vec<TensorEntry>,
    pub sha256: String,
}

/// Write params as binary + manifest. Values are stored as f32.
pub fn save_checkpoint(
    params: &ModelParams,
    config: &ModelConfig,
    seed: u64,
    threshold: Option<f64>,
    bin_path: &Path,
    manifest_path: &Path,
) -> Result<()> {
    let mut bytes: Vec<u8> = Vec::new();
    let mut entries = Vec::new();
    for t in params.set.tensors() {
        entries.push(TensorEntry {
            name: t.name.clone(),
            shape: t.tensor.shape(),
        });
        for i in 0..t.tensor.len() {
            bytes.extend_from_slice(&(t.tensor.get(i) as f32).to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        build: format!("chronorisk-core {}", env!("CARGO_PKG_VERSION")),
        config: config.clone(),
        seed,
        threshold,
        tensors: entries,
        sha256: hex::encode(Sha256::digest(&bytes)),
    };
    std::fs::File::create(bin_path)?.write_all(&bytes)?;
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::File::create(manifest_path)?.write_all(json.as_bytes())?;
    Ok(())
}

/// Load a checkpoint against its manifest; shapes and checksum must match.
pub fn load_checkpoint(
    bin_path: &Path,
    manifest_path: &Path,
    embedding: Arc<EmbeddingMatrix>,
) -> Result<(ModelParams, CheckpointManifest)> {
    let manifest: CheckpointManifest =
        serde_json::from_str(&std::fs::read_to_string(manifest_path)?)?;
    let bytes = std::fs::read(bin_path)?;
    let digest = hex::encode(Sha256::digest(&bytes));
    if digest != manifest.sha256 {
        return Err(Error::format("checkpoint binary checksum mismatch"));
    }
    let mut params = ModelParams::zeros(&manifest.config, embedding)?;
    let mut offset = 0usize;
    {
        let mut tensors = params.set.tensors_mut();
        if tensors.len() != manifest.tensors.len() {
            return Err(Error::format(format!(
                "checkpoint has {} tensors, config implies {}",
                manifest.tensors.len(),
                tensors.len()
            )));
        }
        for (tensor, entry) in tensors.iter_mut().zip(&manifest.tensors) {
            if tensor.name != entry.name {
                return Err(Error::format(format!(
                    "tensor order mismatch: expected {}, manifest has {}",
                    tensor.name, entry.name
                )));
            }
            let len = tensor.tensor.len();
            let expected: usize = entry.shape.iter().product();
            if expected != len {
                return Err(Error::format(format!(
                    "tensor {} has shape {:?} in manifest but {} values in config",
                    entry.name, entry.shape, len
                )));
            }
            for i in 0..len {
                let chunk = bytes.get(offset..offset + 4).ok_or_else(|| {
                    Error::format("checkpoint binary shorter than manifest implies")
                })?;
                let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
                tensor.tensor.set(i, f64::from(v));
                offset += 4;
            }
        }
    }
    if offset != bytes.len() {
        return Err(Error::format("checkpoint binary longer than manifest implies"));
    }
    Ok((params, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_matrix() -> EmbeddingMatrix {
        let mut bundle = crate::ontology::OntologyBundle::new();
        bundle.add_concept("S0", "zero").unwrap();
        bundle.add_mapping("C0", "S0").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let text = vec![Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0))];
        let graph = vec![Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0))];
        crate::ontology::build_embedding_matrix(&["C0".to_string()], &bundle, &text, &graph)
            .unwrap()
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact_on_disk() {
        let matrix = Arc::new(tiny_matrix());
        let mut config = ModelConfig::new(8, 2, 3, 2);
        config.h = 4;
        config.heads = 2;
        let params = ModelParams::init(&config, Arc::clone(&matrix), 21).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("ckpt.bin");
        let man = dir.path().join("ckpt.json");
        save_checkpoint(&params, &config, 21, Some(0.4), &bin, &man).unwrap();
        let first = std::fs::read(&bin).unwrap();

        let (loaded, manifest) = load_checkpoint(&bin, &man, matrix).unwrap();
        assert_eq!(manifest.threshold, Some(0.4));
        let bin2 = dir.path().join("ckpt2.bin");
        let man2 = dir.path().join("ckpt2.json");
        save_checkpoint(&loaded, &config, 21, Some(0.4), &bin2, &man2).unwrap();
        let second = std::fs::read(&bin2).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn corrupted_checkpoint_is_rejected() {
        let matrix = Arc::new(tiny_matrix());
        let mut config = ModelConfig::new(8, 2, 3, 2);
        config.h = 4;
        config.heads = 2;
        let params = ModelParams::init(&config, Arc::clone(&matrix), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("ckpt.bin");
        let man = dir.path().join("ckpt.json");
        save_checkpoint(&params, &config, 3, None, &bin, &man).unwrap();
        let mut bytes = std::fs::read(&bin).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(&bin, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&bin, &man, matrix).unwrap_err(),
            Error::Format(_)
        ));
    }
}
