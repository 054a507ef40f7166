//! Medical ontology: concept bundle, ICD normalization and mapping, text and
//! graph embeddings, and the frozen code-embedding matrix.

mod graph;
mod matrix;
mod synthetic;
mod text;

pub use graph::{build_relation_graph, graphsage_embed, GraphEmbedConfig, RelationGraph};
pub use matrix::{build_embedding_matrix, load_matrix, save_matrix, EmbeddingMatrix};
pub use synthetic::{generate_synthetic_ontology, SyntheticOntologyConfig};
pub use text::{concept_text_vectors, ExternalVectors, HashingTextEmbedder, TextEmbedder, TextSource};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Relation kinds recognized by the relation graph, with fixed edge weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum RelationKind {
    IsA,
    SynonymAssoc,
    Other,
}

impl RelationKind {
    pub fn weight(self) -> f64 {
        match self {
            RelationKind::IsA => 1.0,
            RelationKind::SynonymAssoc => 0.8,
            RelationKind::Other => 0.5,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RelationKind::IsA => "is_a",
            RelationKind::SynonymAssoc => "synonym_assoc",
            RelationKind::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "is_a" => Some(RelationKind::IsA),
            "synonym_assoc" => Some(RelationKind::SynonymAssoc),
            "other" => Some(RelationKind::Other),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Relation {
    pub src: usize,
    pub dst: usize,
    pub kind: RelationKind,
}

/// Concepts, descriptions, relations, and the ICD→concept mapping.
///
/// Concepts keep their insertion order; node indices, iteration order, and
/// the randomized parts of the graph embedder all follow that order, so two
/// bundles with the same structure produce structurally identical outputs.
#[derive(Debug, Clone, Default)]
pub struct OntologyBundle {
    concepts: Vec<String>,
    concept_index: HashMap<String, usize>,
    descriptions: Vec<String>,
    relations: Vec<Relation>,
    icd_mapping: BTreeMap<String, BTreeSet<String>>,
}

impl OntologyBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_concept(&mut self, id: impl Into<String>, description: impl Into<String>) -> Result<usize> {
        let id = id.into();
        let description = description.into();
        if self.concept_index.contains_key(&id) {
            return Err(Error::data(format!("duplicate concept id {id}")));
        }
        if description.trim().is_empty() {
            return Err(Error::data(format!("concept {id} has an empty description")));
        }
        let idx = self.concepts.len();
        self.concept_index.insert(id.clone(), idx);
        self.concepts.push(id);
        self.descriptions.push(description);
        Ok(idx)
    }

    pub fn add_relation(&mut self, src: &str, dst: &str, kind: RelationKind) -> Result<()> {
        let src = self
            .index_of(src)
            .ok_or_else(|| Error::data(format!("relation endpoint {src} is not a known concept")))?;
        let dst = self
            .index_of(dst)
            .ok_or_else(|| Error::data(format!("relation endpoint {dst} is not a known concept")))?;
        self.relations.push(Relation { src, dst, kind });
        Ok(())
    }

    /// Register an ICD→concept mapping entry. The ICD key is normalized here.
    pub fn add_mapping(&mut self, icd: &str, concept: &str) -> Result<()> {
        if !self.concept_index.contains_key(concept) {
            return Err(Error::data(format!(
                "mapping target {concept} is not a known concept"
            )));
        }
        let norm = normalize_icd(icd)?;
        self.icd_mapping
            .entry(norm)
            .or_default()
            .insert(concept.to_string());
        Ok(())
    }

    pub fn concept_count(&self) -> usize {
        self.concepts.len()
    }

    pub fn concepts(&self) -> &[String] {
        &self.concepts
    }

    pub fn index_of(&self, concept: &str) -> Option<usize> {
        self.concept_index.get(concept).copied()
    }

    pub fn description(&self, idx: usize) -> &str {
        &self.descriptions[idx]
    }

    pub fn relations(&self) -> &[Relation] {
        &self.relations
    }

    pub fn icd_mapping(&self) -> &BTreeMap<String, BTreeSet<String>> {
        &self.icd_mapping
    }

    /// Concepts that appear as a mapping target of at least one ICD code.
    pub fn mapped_concept_count(&self) -> usize {
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        for targets in self.icd_mapping.values() {
            for c in targets {
                seen.insert(c);
            }
        }
        seen.len()
    }
}

/// Normalize a raw ICD code: trim, uppercase, drop an `ICD9:`/`ICD10:`-style
/// prefix, and strip punctuation. Idempotent.
pub fn normalize_icd(code: &str) -> Result<String> {
    let upper = code.trim().to_uppercase();
    let body = strip_icd_prefix(&upper);
    let norm: String = body.chars().filter(|c| c.is_ascii_alphanumeric()).collect();
    if norm.is_empty() {
        return Err(Error::data(format!(
            "ICD code `{code}` is empty after normalization"
        )));
    }
    Ok(norm)
}

fn strip_icd_prefix(s: &str) -> &str {
    let Some(rest) = s.strip_prefix("ICD") else {
        return s;
    };
    let rest = rest.strip_prefix('-').unwrap_or(rest);
    let rest = rest
        .strip_prefix("10")
        .or_else(|| rest.strip_prefix('9'))
        .unwrap_or(rest);
    let rest = rest.strip_prefix("CM").unwrap_or(rest);
    match rest.strip_prefix(':') {
        Some(tail) => tail,
        // "ICD" not followed by a version/colon prefix: treat as code content.
        None => s,
    }
}

/// Look up the concept set a normalized ICD code maps to; misses return the
/// empty set (unknown-code handling belongs to matrix assembly).
pub fn map_icd_to_snomed(icd_norm: &str, bundle: &OntologyBundle) -> BTreeSet<String> {
    bundle
        .icd_mapping
        .get(icd_norm)
        .cloned()
        .unwrap_or_default()
}

const MAPPING_HEADER: &str = "icd_norm,concept_id";
const DESCRIPTIONS_HEADER: &str = "concept_id,text";
const RELATIONS_HEADER: &str = "src,dst,relation_type";

/// Load a bundle from the three delimited files. The descriptions file
/// defines the concept set and its order.
pub fn load_ontology(
    mapping_path: &Path,
    descriptions_path: &Path,
    relations_path: &Path,
) -> Result<OntologyBundle> {
    let mut bundle = OntologyBundle::new();

    let text = std::fs::read_to_string(descriptions_path)?;
    let mut lines = text.lines().enumerate();
    expect_header(&mut lines, DESCRIPTIONS_HEADER, descriptions_path)?;
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let (id, desc) = line.split_once(',').ok_or_else(|| {
            Error::parse(descriptions_path, idx + 1, "expected `concept_id,text`")
        })?;
        bundle
            .add_concept(id.trim(), desc.trim())
            .map_err(|e| Error::parse(descriptions_path, idx + 1, e.to_string()))?;
    }

    let text = std::fs::read_to_string(relations_path)?;
    let mut lines = text.lines().enumerate();
    expect_header(&mut lines, RELATIONS_HEADER, relations_path)?;
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(Error::parse(
                relations_path,
                idx + 1,
                format!("expected 3 columns, got {}", parts.len()),
            ));
        }
        let kind = RelationKind::parse(parts[2]).ok_or_else(|| {
            Error::parse(
                relations_path,
                idx + 1,
                format!("unknown relation_type `{}`", parts[2]),
            )
        })?;
        bundle
            .add_relation(parts[0], parts[1], kind)
            .map_err(|e| Error::parse(relations_path, idx + 1, e.to_string()))?;
    }

    let text = std::fs::read_to_string(mapping_path)?;
    let mut lines = text.lines().enumerate();
    expect_header(&mut lines, MAPPING_HEADER, mapping_path)?;
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let (icd, concept) = line
            .split_once(',')
            .ok_or_else(|| Error::parse(mapping_path, idx + 1, "expected `icd_norm,concept_id`"))?;
        bundle
            .add_mapping(icd.trim(), concept.trim())
            .map_err(|e| Error::parse(mapping_path, idx + 1, e.to_string()))?;
    }

    Ok(bundle)
}

/// Write a bundle to the three delimited files read by [`load_ontology`].
pub fn save_ontology(
    bundle: &OntologyBundle,
    mapping_path: &Path,
    descriptions_path: &Path,
    relations_path: &Path,
) -> Result<()> {
    let mut out = String::from(DESCRIPTIONS_HEADER);
    out.push('\n');
    for (idx, id) in bundle.concepts.iter().enumerate() {
        let desc = bundle.descriptions[idx].replace(['\n', '\r'], " ");
        out.push_str(&format!("{id},{desc}\n"));
    }
    std::fs::File::create(descriptions_path)?.write_all(out.as_bytes())?;

    let mut out = String::from(RELATIONS_HEADER);
    out.push('\n');
    for rel in &bundle.relations {
        out.push_str(&format!(
            "{},{},{}\n",
            bundle.concepts[rel.src],
            bundle.concepts[rel.dst],
            rel.kind.as_str()
        ));
    }
    std::fs::File::create(relations_path)?.write_all(out.as_bytes())?;

    let mut out = String::from(MAPPING_HEADER);
    out.push('\n');
    for (icd, targets) in &bundle.icd_mapping {
        for concept in targets {
            out.push_str(&format!("{icd},{concept}\n"));
        }
    }
    std::fs::File::create(mapping_path)?.write_all(out.as_bytes())?;
    Ok(())
}

fn expect_header<'a>(
    lines: &mut impl Iterator<Item = (usize, &'a str)>,
    expected: &str,
    path: &Path,
) -> Result<()> {
    match lines.next() {
        Some((_, header)) if header.trim() == expected => Ok(()),
        _ => Err(Error::parse(path, 1, format!("expected header `{expected}`"))),
    }
}
