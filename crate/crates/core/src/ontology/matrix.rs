//! The frozen code-embedding matrix: one row per mapped ICD code (the mean of
//! its concepts' concatenated text+graph vectors), a zero padding row 0, and
//! a shared unknown row for unmapped codes.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{normalize_icd, OntologyBundle};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: Array2<f32>,
    row_index: BTreeMap<String, u32>,
    unknown_row: u32,
    d_t: usize,
    d_g: usize,
    unmapped_fraction: f64,
    frozen: bool,
}

impl EmbeddingMatrix {
    pub fn dim(&self) -> usize {
        self.d_t + self.d_g
    }

    pub fn d_t(&self) -> usize {
        self.d_t
    }

    pub fn d_g(&self) -> usize {
        self.d_g
    }

    pub fn n_rows(&self) -> usize {
        self.rows.nrows()
    }

    pub fn unknown_row(&self) -> u32 {
        self.unknown_row
    }

    pub fn unmapped_fraction(&self) -> f64 {
        self.unmapped_fraction
    }

    pub fn row_index(&self) -> &BTreeMap<String, u32> {
        &self.row_index
    }

    pub fn rows(&self) -> &Array2<f32> {
        &self.rows
    }

    pub fn row(&self, idx: u32) -> ArrayView1<'_, f32> {
        self.rows.row(idx as usize)
    }

    /// L2 norm of a row, accumulated at 64-bit.
    pub fn row_norm(&self, idx: u32) -> f64 {
        self.rows
            .row(idx as usize)
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    /// Resolve a raw code string to its embedding row; unknown codes land on
    /// the shared unknown row.
    pub fn lookup(&self, raw_code: &str) -> Result<u32> {
        let norm = normalize_icd(raw_code)?;
        Ok(self.lookup_norm(&norm))
    }

    pub fn lookup_norm(&self, norm: &str) -> u32 {
        self.row_index.get(norm).copied().unwrap_or(self.unknown_row)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Overwrite a row. Errors once the matrix is frozen.
    pub fn set_row(&mut self, idx: u32, values: &[f32]) -> Result<()> {
        if self.frozen {
            return Err(Error::data("embedding matrix is frozen"));
        }
        if values.len() != self.dim() {
            return Err(Error::config(format!(
                "row has dimension {}, expected {}",
                values.len(),
                self.dim()
            )));
        }
        for (dst, src) in self.rows.row_mut(idx as usize).iter_mut().zip(values) {
            *dst = *src;
        }
        Ok(())
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        let mut bytes = Vec::with_capacity(self.rows.len() * 4);
        for v in self.rows.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes
    }

    /// SHA-256 of the row data; used to prove frozen invariance.
    pub fn content_digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_le_bytes()))
    }

    /// A frozen matrix of identical shape and index whose non-padding rows
    /// are seeded Gaussian noise scaled to the source matrix's row norms.
    pub fn random_like(&self, seed: u64) -> EmbeddingMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.n_rows();
        let dim = self.dim();
        let mean_norm = (1..n)
            .map(|i| self.row_norm(i as u32))
            .sum::<f64>()
            / (n.saturating_sub(1)).max(1) as f64;
        let scale = if mean_norm > 0.0 { mean_norm } else { 1.0 };
        let normal = Normal::new(0.0, 1.0).expect("valid normal");
        let mut rows = Array2::<f32>::zeros((n, dim));
        for i in 1..n {
            let mut v: Array1<f64> = Array1::from_shape_fn(dim, |_| normal.sample(&mut rng));
            let norm = v.dot(&v).sqrt().max(1e-12);
            v *= scale / norm;
            for (dst, src) in rows.row_mut(i).iter_mut().zip(v.iter()) {
                *dst = *src as f32;
            }
        }
        EmbeddingMatrix {
            rows,
            row_index: self.row_index.clone(),
            unknown_row: self.unknown_row,
            d_t: self.d_t,
            d_g: self.d_g,
            unmapped_fraction: self.unmapped_fraction,
            frozen: true,
        }
    }
}

/// Assemble the frozen matrix for an ICD vocabulary.
///
/// Layout: row 0 is all-zero padding; rows 1..=M hold the mapped codes in
/// sorted normalized order; row M+1 is the shared unknown row, initialized to
/// the mean of the mapped rows. Unmapped vocabulary codes index the unknown
/// row. Text and graph vectors are indexed by bundle concept order.
pub fn build_embedding_matrix(
    icd_vocab: &[String],
    bundle: &OntologyBundle,
    text_vectors: &[Array1<f64>],
    graph_vectors: &[Array1<f64>],
) -> Result<EmbeddingMatrix> {
    if icd_vocab.is_empty() {
        return Err(Error::config("ICD vocabulary is empty"));
    }
    let n_concepts = bundle.concept_count();
    if text_vectors.len() != n_concepts || graph_vectors.len() != n_concepts {
        return Err(Error::config(format!(
            "expected {n_concepts} text and graph vectors, got {} and {}",
            text_vectors.len(),
            graph_vectors.len()
        )));
    }
    let d_t = text_vectors.first().map(|v| v.len()).unwrap_or(0);
    let d_g = graph_vectors.first().map(|v| v.len()).unwrap_or(0);
    if text_vectors.iter().any(|v| v.len() != d_t) {
        return Err(Error::config("text vectors have inconsistent dimensions"));
    }
    if graph_vectors.iter().any(|v| v.len() != d_g) {
        return Err(Error::config("graph vectors have inconsistent dimensions"));
    }
    let dim = d_t + d_g;

    let mut norm_vocab: Vec<String> = icd_vocab
        .iter()
        .map(|raw| normalize_icd(raw))
        .collect::<Result<Vec<_>>>()?;
    norm_vocab.sort();
    norm_vocab.dedup();

    let mut mapped: Vec<(String, Array1<f64>)> = Vec::new();
    let mut unmapped: Vec<String> = Vec::new();
    for norm in &norm_vocab {
        let concepts = super::map_icd_to_snomed(norm, bundle);
        if concepts.is_empty() {
            unmapped.push(norm.clone());
            continue;
        }
        let mut mean = Array1::<f64>::zeros(dim);
        for concept in &concepts {
            let idx = bundle
                .index_of(concept)
                .ok_or_else(|| Error::data(format!("mapped concept {concept} missing")))?;
            mean.slice_mut(ndarray::s![..d_t])
                .scaled_add(1.0, &text_vectors[idx]);
            mean.slice_mut(ndarray::s![d_t..])
                .scaled_add(1.0, &graph_vectors[idx]);
        }
        mean /= concepts.len() as f64;
        mapped.push((norm.clone(), mean));
    }
    if mapped.is_empty() {
        return Err(Error::config(
            "no ICD code in the vocabulary maps to any concept",
        ));
    }

    let n_mapped = mapped.len();
    let unknown_row = (n_mapped + 1) as u32;
    let mut rows = Array2::<f32>::zeros((n_mapped + 2, dim));
    let mut row_index = BTreeMap::new();
    let mut unknown_init = Array1::<f64>::zeros(dim);
    for (i, (norm, vec)) in mapped.iter().enumerate() {
        let row = (i + 1) as u32;
        row_index.insert(norm.clone(), row);
        for (dst, src) in rows.row_mut(row as usize).iter_mut().zip(vec.iter()) {
            *dst = *src as f32;
        }
        unknown_init += vec;
    }
    unknown_init /= n_mapped as f64;
    for (dst, src) in rows
        .row_mut(unknown_row as usize)
        .iter_mut()
        .zip(unknown_init.iter())
    {
        *dst = *src as f32;
    }
    for norm in &unmapped {
        row_index.insert(norm.clone(), unknown_row);
    }

    let unmapped_fraction = unmapped.len() as f64 / norm_vocab.len() as f64;
    if unmapped_fraction > 0.0 {
        log::info!(
            "{:.2}% of the vocabulary is unmapped and shares the unknown row",
            unmapped_fraction * 100.0
        );
    }
    if rows.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("embedding matrix contains non-finite values"));
    }

    Ok(EmbeddingMatrix {
        rows,
        row_index,
        unknown_row,
        d_t,
        d_g,
        unmapped_fraction,
        frozen: true,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct MatrixSidecar {
    n_rows: usize,
    dim: usize,
    d_t: usize,
    d_g: usize,
    unknown_row: u32,
    unmapped_fraction: f64,
    row_index: BTreeMap<String, u32>,
    sha256: String,
}

/// Write the matrix as flat little-endian f32 binary plus a JSON sidecar.
pub fn save_matrix(matrix: &EmbeddingMatrix, bin_path: &Path, sidecar_path: &Path) -> Result<()> {
    let bytes = matrix.to_le_bytes();
    let sidecar = MatrixSidecar {
        n_rows: matrix.n_rows(),
        dim: matrix.dim(),
        d_t: matrix.d_t,
        d_g: matrix.d_g,
        unknown_row: matrix.unknown_row,
        unmapped_fraction: matrix.unmapped_fraction,
        row_index: matrix.row_index.clone(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    };
    std::fs::File::create(bin_path)?.write_all(&bytes)?;
    let json = serde_json::to_string_pretty(&sidecar)?;
    std::fs::File::create(sidecar_path)?.write_all(json.as_bytes())?;
    Ok(())
}

/// Load a matrix written by [`save_matrix`], validating shape and checksum.
pub fn load_matrix(bin_path: &Path, sidecar_path: &Path) -> Result<EmbeddingMatrix> {
    let sidecar: MatrixSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path)?)?;
    let bytes = std::fs::read(bin_path)?;
    let expected_len = sidecar.n_rows * sidecar.dim * 4;
    if bytes.len() != expected_len {
        return Err(Error::format(format!(
            "matrix binary has {} bytes, sidecar shape {}x{} implies {}",
            bytes.len(),
            sidecar.n_rows,
            sidecar.dim,
            expected_len
        )));
    }
    let digest = hex::encode(Sha256::digest(&bytes));
    if digest != sidecar.sha256 {
        return Err(Error::format("matrix binary checksum mismatch"));
    }
    if sidecar.d_t + sidecar.d_g != sidecar.dim {
        return Err(Error::format("sidecar d_t + d_g does not match dim"));
    }
    let mut rows = Array2::<f32>::zeros((sidecar.n_rows, sidecar.dim));
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        rows[(i / sidecar.dim, i % sidecar.dim)] =
            f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
    }
    Ok(EmbeddingMatrix {
        rows,
        row_index: sidecar.row_index,
        unknown_row: sidecar.unknown_row,
        d_t: sidecar.d_t,
        d_g: sidecar.d_g,
        unmapped_fraction: sidecar.unmapped_fraction,
        frozen: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::RelationKind;

    fn fixture() -> (OntologyBundle, Vec<Array1<f64>>, Vec<Array1<f64>>) {
        let mut bundle = OntologyBundle::new();
        bundle.add_concept("S1", "one").unwrap();
        bundle.add_concept("S2", "two").unwrap();
        bundle.add_concept("S3", "three").unwrap();
        bundle.add_relation("S1", "S2", RelationKind::IsA).unwrap();
        bundle.add_mapping("A1", "S1").unwrap();
        bundle.add_mapping("B2", "S1").unwrap();
        bundle.add_mapping("B2", "S2").unwrap();
        let text = vec![
            Array1::from_vec(vec![1.0, 0.0]),
            Array1::from_vec(vec![0.0, 1.0]),
            Array1::from_vec(vec![0.5, 0.5]),
        ];
        let graph = vec![
            Array1::from_vec(vec![2.0]),
            Array1::from_vec(vec![4.0]),
            Array1::from_vec(vec![6.0]),
        ];
        (bundle, text, graph)
    }

    #[test]
    fn single_concept_row_equals_its_vector() {
        let (bundle, text, graph) = fixture();
        let vocab = vec!["A1".to_string(), "B2".to_string()];
        let matrix = build_embedding_matrix(&vocab, &bundle, &text, &graph).unwrap();
        let row = matrix.row(matrix.lookup_norm("A1"));
        assert_eq!(row.to_vec(), vec![1.0, 0.0, 2.0]);
    }

    #[test]
    fn multi_concept_row_is_elementwise_mean() {
        let (bundle, text, graph) = fixture();
        let vocab = vec!["A1".to_string(), "B2".to_string()];
        let matrix = build_embedding_matrix(&vocab, &bundle, &text, &graph).unwrap();
        let row = matrix.row(matrix.lookup_norm("B2"));
        assert_eq!(row.to_vec(), vec![0.5, 0.5, 3.0]);
    }

    #[test]
    fn unmapped_codes_share_the_unknown_row() {
        let (bundle, text, graph) = fixture();
        let vocab = vec![
            "A1".to_string(),
            "B2".to_string(),
            "Z8".to_string(),
            "Z9".to_string(),
        ];
        let matrix = build_embedding_matrix(&vocab, &bundle, &text, &graph).unwrap();
        assert_eq!(matrix.lookup_norm("Z8"), matrix.lookup_norm("Z9"));
        assert_eq!(matrix.lookup_norm("Z8"), matrix.unknown_row());
        // Unknown row is the mean of mapped rows.
        let unk = matrix.row(matrix.unknown_row()).to_vec();
        assert_eq!(unk, vec![0.75, 0.25, 2.5]);
        assert!((matrix.unmapped_fraction() - 0.5).abs() < 1e-12);
        // Out-of-vocabulary lookups also land there.
        assert_eq!(matrix.lookup("unseen.9").unwrap(), matrix.unknown_row());
    }

    #[test]
    fn padding_row_is_zero_and_matrix_is_frozen() {
        let (bundle, text, graph) = fixture();
        let vocab = vec!["A1".to_string()];
        let mut matrix = build_embedding_matrix(&vocab, &bundle, &text, &graph).unwrap();
        assert!(matrix.row(0).iter().all(|&v| v == 0.0));
        assert!(matrix.is_frozen());
        let err = matrix.set_row(1, &[9.0, 9.0, 9.0]).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn every_mapped_row_is_recomputable_by_brute_force() {
        let (bundle, text, graph) = fixture();
        let vocab = vec!["A1".to_string(), "B2".to_string()];
        let matrix = build_embedding_matrix(&vocab, &bundle, &text, &graph).unwrap();
        for (norm, &row_idx) in matrix.row_index() {
            if row_idx == matrix.unknown_row() {
                continue;
            }
            let concepts = crate::ontology::map_icd_to_snomed(norm, &bundle);
            let mut expect = vec![0.0f64; matrix.dim()];
            for c in &concepts {
                let i = bundle.index_of(c).unwrap();
                for (j, v) in text[i].iter().enumerate() {
                    expect[j] += v;
                }
                for (j, v) in graph[i].iter().enumerate() {
                    expect[matrix.d_t() + j] += v;
                }
            }
            for e in &mut expect {
                *e /= concepts.len() as f64;
            }
            let actual = matrix.row(row_idx);
            for (a, e) in actual.iter().zip(&expect) {
                assert!((f64::from(*a) - e).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn save_load_roundtrip_is_bitwise() {
        let (bundle, text, graph) = fixture();
        let vocab = vec!["A1".to_string(), "B2".to_string(), "Z9".to_string()];
        let matrix = build_embedding_matrix(&vocab, &bundle, &text, &graph).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("m.bin");
        let sidecar = dir.path().join("m.json");
        save_matrix(&matrix, &bin, &sidecar).unwrap();
        let loaded = load_matrix(&bin, &sidecar).unwrap();
        assert_eq!(matrix, loaded);
        assert_eq!(matrix.content_digest(), loaded.content_digest());
    }

    #[test]
    fn corrupted_binary_is_rejected() {
        let (bundle, text, graph) = fixture();
        let vocab = vec!["A1".to_string()];
        let matrix = build_embedding_matrix(&vocab, &bundle, &text, &graph).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("m.bin");
        let sidecar = dir.path().join("m.json");
        save_matrix(&matrix, &bin, &sidecar).unwrap();
        let mut bytes = std::fs::read(&bin).unwrap();
        bytes.truncate(bytes.len() - 4);
        std::fs::write(&bin, &bytes).unwrap();
        assert!(matches!(
            load_matrix(&bin, &sidecar).unwrap_err(),
            Error::Format(_)
        ));
    }

    #[test]
    fn random_like_preserves_shape_and_index() {
        let (bundle, text, graph) = fixture();
        let vocab = vec!["A1".to_string(), "B2".to_string()];
        let matrix = build_embedding_matrix(&vocab, &bundle, &text, &graph).unwrap();
        let random = matrix.random_like(99);
        assert_eq!(random.n_rows(), matrix.n_rows());
        assert_eq!(random.row_index(), matrix.row_index());
        assert!(random.row(0).iter().all(|&v| v == 0.0));
        assert_ne!(random.rows(), matrix.rows());
        let again = matrix.random_like(99);
        assert_eq!(random, again);
    }
}
