//! Synthetic ontology generator: clustered concepts with shared description
//! vocabulary, is_a trees inside clusters, sparse cross-cluster links, and
//! ICD-style codes mapped into single clusters.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{OntologyBundle, RelationKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticOntologyConfig {
    pub n_clusters: usize,
    pub concepts_per_cluster: usize,
    pub codes_per_cluster: usize,
    /// Weak `other` edges between random concepts of different clusters.
    pub cross_links: usize,
    pub seed: u64,
}

impl Default for SyntheticOntologyConfig {
    fn default() -> Self {
        Self {
            n_clusters: 8,
            concepts_per_cluster: 8,
            codes_per_cluster: 30,
            cross_links: 8,
            seed: 0,
        }
    }
}

const SYLLABLES: &[&str] = &[
    "ka", "re", "mo", "tis", "lun", "ver", "dos", "pex", "nari", "slo", "gra", "bin", "tor",
    "hep", "myo", "derm", "neu", "card", "ren", "ost",
];

fn make_word(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(2..=3);
    let mut word = String::new();
    for _ in 0..n {
        word.push_str(SYLLABLES[rng.random_range(0..SYLLABLES.len())]);
    }
    word
}

/// Generate a clustered bundle. Deterministic given the seed.
pub fn generate_synthetic_ontology(config: &SyntheticOntologyConfig) -> Result<OntologyBundle> {
    if config.n_clusters == 0 || config.concepts_per_cluster == 0 {
        return Err(Error::config(
            "synthetic ontology needs at least one cluster with one concept",
        ));
    }
    if config.codes_per_cluster == 0 {
        return Err(Error::config("codes_per_cluster must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut bundle = OntologyBundle::new();

    // Per-cluster vocabulary so text embeddings carry cluster structure.
    let vocabularies: Vec<Vec<String>> = (0..config.n_clusters)
        .map(|_| (0..8).map(|_| make_word(&mut rng)).collect())
        .collect();

    let concept_id = |c: usize, j: usize| format!("SC{c:02}N{j:03}");

    for c in 0..config.n_clusters {
        let vocab = &vocabularies[c];
        for j in 0..config.concepts_per_cluster {
            let mut words = vec![vocab[0].clone()];
            for _ in 0..3 {
                words.push(vocab[rng.random_range(0..vocab.len())].clone());
            }
            let desc = if j == 0 {
                format!("{} root disorder", vocab[0])
            } else {
                format!("{} disorder", words.join(" "))
            };
            bundle.add_concept(concept_id(c, j), desc)?;
        }
    }

    for c in 0..config.n_clusters {
        for j in 1..config.concepts_per_cluster {
            // Shallow tree: early members hang off the root, later ones off
            // earlier members.
            let parent = if j <= 3 { 0 } else { 1 + (j - 4) % 3 };
            bundle.add_relation(&concept_id(c, j), &concept_id(c, parent), RelationKind::IsA)?;
            if j >= 2 && rng.random::<f64>() < 0.4 {
                let other = rng.random_range(0..j);
                if other != j {
                    bundle.add_relation(
                        &concept_id(c, j),
                        &concept_id(c, other),
                        RelationKind::SynonymAssoc,
                    )?;
                }
            }
        }
    }

    if config.n_clusters > 1 {
        for _ in 0..config.cross_links {
            let ca = rng.random_range(0..config.n_clusters);
            let mut cb = rng.random_range(0..config.n_clusters);
            while cb == ca {
                cb = rng.random_range(0..config.n_clusters);
            }
            let ja = rng.random_range(0..config.concepts_per_cluster);
            let jb = rng.random_range(0..config.concepts_per_cluster);
            bundle.add_relation(&concept_id(ca, ja), &concept_id(cb, jb), RelationKind::Other)?;
        }
    }

    let mut used: BTreeSet<String> = BTreeSet::new();
    for c in 0..config.n_clusters {
        for _ in 0..config.codes_per_cluster {
            let code = loop {
                let letter = (b'A' + rng.random_range(0..26u8)) as char;
                let number = rng.random_range(0..10_000u32);
                let candidate = format!("{letter}{number:04}");
                if used.insert(candidate.clone()) {
                    break candidate;
                }
            };
            let n_targets = 1 + usize::from(rng.random::<f64>() < 0.3);
            let mut targets = BTreeSet::new();
            while targets.len() < n_targets {
                targets.insert(rng.random_range(0..config.concepts_per_cluster));
            }
            for j in targets {
                bundle.add_mapping(&code, &concept_id(c, j))?;
            }
        }
    }

    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_is_deterministic() {
        let config = SyntheticOntologyConfig::default();
        let a = generate_synthetic_ontology(&config).unwrap();
        let b = generate_synthetic_ontology(&config).unwrap();
        assert_eq!(a.concepts(), b.concepts());
        assert_eq!(a.relations(), b.relations());
        assert_eq!(a.icd_mapping(), b.icd_mapping());
    }

    #[test]
    fn generated_counts_match_config() {
        let config = SyntheticOntologyConfig {
            n_clusters: 3,
            concepts_per_cluster: 5,
            codes_per_cluster: 10,
            cross_links: 2,
            seed: 4,
        };
        let bundle = generate_synthetic_ontology(&config).unwrap();
        assert_eq!(bundle.concept_count(), 15);
        assert_eq!(bundle.icd_mapping().len(), 30);
        assert!(bundle.mapped_concept_count() <= 15);
    }
}
