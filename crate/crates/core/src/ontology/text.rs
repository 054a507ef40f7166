//! Concept description embedding.
//!
//! The default embedder hashes word n-grams into a fixed-dimension vector
//! through a seeded signed projection, then L2-normalizes. An adapter accepts
//! externally computed vectors keyed by concept id, which covers pretrained
//! clinical language models without bundling one.

use std::collections::BTreeMap;

use ndarray::Array1;

use super::OntologyBundle;
use crate::error::{Error, Result};

pub trait TextEmbedder {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Array1<f64>>;
}

/// Feature-hashing embedder over word unigrams and bigrams.
#[derive(Debug, Clone)]
pub struct HashingTextEmbedder {
    dim: usize,
    seed: u64,
}

impl HashingTextEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("text embedding dimension must be >= 1"));
        }
        Ok(Self { dim, seed })
    }
}

// FNV-1a, salted with the embedder seed; stable across platforms and runs.
fn hash_feature(seed: u64, feature: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for byte in feature.as_bytes() {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl TextEmbedder for HashingTextEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Array1<f64>> {
        let tokens: Vec<String> = text
            .split(|c: char| !c.is_ascii_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(|t| t.to_lowercase())
            .collect();
        if tokens.is_empty() {
            return Err(Error::data(format!("text `{text}` has no tokens to embed")));
        }
        let mut vec = Array1::<f64>::zeros(self.dim);
        let mut add = |feature: &str| {
            let h = hash_feature(self.seed, feature);
            let idx = (h % self.dim as u64) as usize;
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            vec[idx] += sign;
        };
        for token in &tokens {
            add(token);
        }
        for pair in tokens.windows(2) {
            add(&format!("{} {}", pair[0], pair[1]));
        }
        let norm = vec.dot(&vec).sqrt();
        if norm > 0.0 {
            vec /= norm;
        } else {
            // Signed counts cancelled exactly; fall back to a deterministic unit vector.
            let h = hash_feature(self.seed, text);
            vec[(h % self.dim as u64) as usize] = 1.0;
        }
        Ok(vec)
    }
}

/// Externally computed description vectors keyed by concept id.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct ExternalVectors {
    pub dim: usize,
    pub vectors: BTreeMap<String, Vec<f64>>,
}

impl ExternalVectors {
    pub fn get(&self, concept: &str) -> Result<Array1<f64>> {
        let v = self
            .vectors
            .get(concept)
            .ok_or_else(|| Error::config(format!("no external vector for concept {concept}")))?;
        if v.len() != self.dim {
            return Err(Error::config(format!(
                "external vector for {concept} has dimension {}, expected {}",
                v.len(),
                self.dim
            )));
        }
        Ok(Array1::from_vec(v.clone()))
    }
}

/// Where concept text vectors come from.
pub enum TextSource {
    Hashing(HashingTextEmbedder),
    External(ExternalVectors),
}

impl TextSource {
    pub fn dim(&self) -> usize {
        match self {
            TextSource::Hashing(e) => e.dim(),
            TextSource::External(e) => e.dim,
        }
    }
}

/// Compute one text vector per concept, indexed by the bundle's concept order.
pub fn concept_text_vectors(bundle: &OntologyBundle, source: &TextSource) -> Result<Vec<Array1<f64>>> {
    let mut out = Vec::with_capacity(bundle.concept_count());
    for (idx, concept) in bundle.concepts().iter().enumerate() {
        let v = match source {
            TextSource::Hashing(embedder) => embedder.embed(bundle.description(idx))?,
            TextSource::External(ext) => ext.get(concept)?,
        };
        if v.len() != source.dim() {
            return Err(Error::config(format!(
                "text vector for {concept} has dimension {}, expected {}",
                v.len(),
                source.dim()
            )));
        }
        out.push(v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_normalized() {
        let e = HashingTextEmbedder::new(64, 9).unwrap();
        let a = e.embed("chronic obstructive pulmonary disease").unwrap();
        let b = e.embed("chronic obstructive pulmonary disease").unwrap();
        assert_eq!(a, b);
        let norm = a.dot(&a).sqrt();
        assert!((norm - 1.0).abs() < 1e-6, "norm {norm}");
    }

    #[test]
    fn disjoint_vocabulary_texts_are_nearly_orthogonal() {
        let e = HashingTextEmbedder::new(64, 3).unwrap();
        let pairs = [
            ("cardiac arrest ventricular failure", "renal cyst nephropathy stage"),
            ("sepsis bacteremia shock lactate", "femur fracture orthopedic pin"),
            ("glioma cortex lesion biopsy", "asthma wheeze bronchodilator spacer"),
        ];
        for (ta, tb) in pairs {
            let a = e.embed(ta).unwrap();
            let b = e.embed(tb).unwrap();
            let cos = a.dot(&b);
            assert!(cos.abs() < 0.2, "cosine {cos} for `{ta}` vs `{tb}`");
        }
    }

    #[test]
    fn external_vectors_check_dimension() {
        let mut ext = ExternalVectors {
            dim: 3,
            vectors: BTreeMap::new(),
        };
        ext.vectors.insert("S1".into(), vec![1.0, 0.0, 0.0]);
        ext.vectors.insert("S2".into(), vec![1.0, 0.0]);
        assert!(ext.get("S1").is_ok());
        assert!(ext.get("S2").is_err());
        assert!(ext.get("S3").is_err());
    }

    #[test]
    fn empty_text_is_an_error() {
        let e = HashingTextEmbedder::new(16, 0).unwrap();
        assert!(e.embed("   ").is_err());
    }
}
