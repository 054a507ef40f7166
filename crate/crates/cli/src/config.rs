//! Static TOML config file with per-stage sections. Every field has a
//! default; command-line flags override file values.

use std::path::Path;

use chronorisk_core::cohort::SyntheticConfig;
use chronorisk_core::ontology::{GraphEmbedConfig, SyntheticOntologyConfig};
use chronorisk_core::preprocess::PreprocessConfig;
use chronorisk_core::train::TrainConfig;
use chronorisk_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OntologySection {
    pub n_clusters: usize,
    pub concepts_per_cluster: usize,
    pub codes_per_cluster: usize,
    pub cross_links: usize,
    pub seed: u64,
}

impl Default for OntologySection {
    fn default() -> Self {
        let d = SyntheticOntologyConfig::default();
        Self {
            n_clusters: d.n_clusters,
            concepts_per_cluster: d.concepts_per_cluster,
            codes_per_cluster: d.codes_per_cluster,
            cross_links: d.cross_links,
            seed: d.seed,
        }
    }
}

impl OntologySection {
    pub fn to_core(&self) -> SyntheticOntologyConfig {
        SyntheticOntologyConfig {
            n_clusters: self.n_clusters,
            concepts_per_cluster: self.concepts_per_cluster,
            codes_per_cluster: self.codes_per_cluster,
            cross_links: self.cross_links,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSection {
    pub n_patients: usize,
    pub visit_count_range: (usize, usize),
    pub gap_days_range: (i64, i64),
    pub signal_strength: f64,
    pub severe_concept_fraction: f64,
    pub codes_per_visit_range: (usize, usize),
    pub seed: u64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        let d = SyntheticConfig::default();
        Self {
            n_patients: d.n_patients,
            visit_count_range: d.visit_count_range,
            gap_days_range: d.gap_days_range,
            signal_strength: d.signal_strength,
            severe_concept_fraction: d.severe_concept_fraction,
            codes_per_visit_range: d.codes_per_visit_range,
            seed: d.seed,
        }
    }
}

impl SyntheticSection {
    pub fn to_core(&self) -> SyntheticConfig {
        SyntheticConfig {
            n_patients: self.n_patients,
            visit_count_range: self.visit_count_range,
            gap_days_range: self.gap_days_range,
            signal_strength: self.signal_strength,
            severe_concept_fraction: self.severe_concept_fraction,
            codes_per_visit_range: self.codes_per_visit_range,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingsSection {
    pub d_t: usize,
    pub text_seed: u64,
    pub d_g: usize,
    pub layers: usize,
    pub neighbor_sample_size: usize,
    pub negative_samples: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for EmbeddingsSection {
    fn default() -> Self {
        let g = GraphEmbedConfig::default();
        Self {
            d_t: 64,
            text_seed: 1,
            d_g: g.d_g,
            layers: g.layers,
            neighbor_sample_size: g.neighbor_sample_size,
            negative_samples: g.negative_samples,
            epochs: g.epochs,
            learning_rate: g.learning_rate,
            seed: g.seed,
        }
    }
}

impl EmbeddingsSection {
    pub fn graph_config(&self) -> GraphEmbedConfig {
        GraphEmbedConfig {
            d_g: self.d_g,
            layers: self.layers,
            neighbor_sample_size: self.neighbor_sample_size,
            negative_samples: self.negative_samples,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessSection {
    pub t_s: usize,
    pub f_ts: usize,
    pub k_max: usize,
    pub epsilon: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        let p = PreprocessConfig::default();
        Self {
            t_s: p.t_s,
            f_ts: p.f_ts,
            k_max: p.k_max,
            epsilon: p.epsilon,
            test_fraction: 0.2,
            seed: 7,
        }
    }
}

impl PreprocessSection {
    pub fn to_core(&self) -> PreprocessConfig {
        PreprocessConfig {
            t_s: self.t_s,
            f_ts: self.f_ts,
            k_max: self.k_max,
            epsilon: self.epsilon,
            delta_max: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub h: usize,
    pub layers: usize,
    pub heads: usize,
    pub lambda: f64,
    pub dropout: f64,
    pub mlp_hidden: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            h: 32,
            layers: 2,
            heads: 2,
            lambda: 10_000.0,
            dropout: 0.2,
            mlp_hidden: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub delta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub l2_coefficient: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            delta: t.delta,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            l2_coefficient: t.l2_coefficient,
            validation_fraction: t.validation_fraction,
            seed: t.seed,
        }
    }
}

impl TrainSection {
    pub fn to_core(&self) -> TrainConfig {
        TrainConfig {
            delta: self.delta,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            l2_coefficient: self.l2_coefficient,
            validation_fraction: self.validation_fraction,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct StudySection {
    pub seeds: Vec<u64>,
}

impl Default for StudySection {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FileConfig {
    pub ontology: OntologySection,
    pub synthetic: SyntheticSection,
    pub embeddings: EmbeddingsSection,
    pub preprocess: PreprocessSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub study: StudySection,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(FileConfig::default()),
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                toml::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn defaults_and_partial_file() {
        let defaults = FileConfig::load(None).unwrap();
        assert_eq!(defaults.train.delta, 0.7);
        assert_eq!(defaults.preprocess.t_s, 4);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.toml");
        writeln!(
            std::fs::File::create(&path).unwrap(),
            "[train]\ndelta = 0.8\n\n[preprocess]\nt_s = 6\n"
        )
        .unwrap();
        let cfg = FileConfig::load(Some(&path)).unwrap();
        assert_eq!(cfg.train.delta, 0.8);
        assert_eq!(cfg.preprocess.t_s, 6);
        // untouched sections keep defaults
        assert_eq!(cfg.train.patience, 10);
        assert_eq!(cfg.synthetic.n_patients, 2000);
    }

    #[test]
    fn bad_toml_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.toml");
        std::fs::write(&path, "[train\n").unwrap();
        assert!(matches!(
            FileConfig::load(Some(&path)).unwrap_err(),
            Error::Config(_)
        ));
    }
}
