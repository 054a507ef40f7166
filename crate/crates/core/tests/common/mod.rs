//! Shared fixtures for integration tests: a small clustered ontology, its
//! embedding matrix, and study contexts over synthetic cohorts.

use std::sync::Arc;

use chronorisk_core::cohort::{generate_synthetic_cohort, CohortTable, SyntheticConfig};
use chronorisk_core::evaluate::ExperimentContext;
use chronorisk_core::model::ModelConfig;
use chronorisk_core::ontology::{
    build_embedding_matrix, build_relation_graph, concept_text_vectors, generate_synthetic_ontology,
    graphsage_embed, EmbeddingMatrix, GraphEmbedConfig, HashingTextEmbedder, OntologyBundle,
    SyntheticOntologyConfig, TextSource,
};
use chronorisk_core::preprocess::PreprocessConfig;
use chronorisk_core::train::TrainConfig;

pub fn small_ontology(seed: u64) -> OntologyBundle {
    generate_synthetic_ontology(&SyntheticOntologyConfig {
        n_clusters: 8,
        concepts_per_cluster: 8,
        codes_per_cluster: 30,
        cross_links: 8,
        seed,
    })
    .expect("ontology generation")
}

pub fn matrix_for(bundle: &OntologyBundle, d_t: usize, d_g: usize, seed: u64) -> EmbeddingMatrix {
    let texts = concept_text_vectors(
        bundle,
        &TextSource::Hashing(HashingTextEmbedder::new(d_t, seed).expect("embedder")),
    )
    .expect("text vectors");
    let graph = build_relation_graph(bundle);
    let graph_vectors = graphsage_embed(
        &graph,
        &texts,
        &GraphEmbedConfig {
            d_g,
            epochs: 8,
            seed,
            ..Default::default()
        },
    )
    .expect("graph vectors");
    let vocab: Vec<String> = bundle.icd_mapping().keys().cloned().collect();
    build_embedding_matrix(&vocab, bundle, &texts, &graph_vectors).expect("matrix")
}

pub fn synthetic_cohort(bundle: &OntologyBundle, n_patients: usize, seed: u64) -> CohortTable {
    generate_synthetic_cohort(
        &SyntheticConfig {
            n_patients,
            seed,
            ..Default::default()
        },
        bundle,
    )
    .expect("cohort generation")
}

/// Study context over a synthetic cohort; training settings sized for
/// desk-scale learnability runs.
pub fn study_context(cohort: CohortTable, matrix: EmbeddingMatrix, max_epochs: usize) -> ExperimentContext {
    let matrix = Arc::new(matrix);
    let mut model = ModelConfig::new(matrix.dim(), 3, 4, 16);
    model.h = 16;
    model.heads = 2;
    model.dropout = 0.1;
    model.mlp_hidden = vec![32];
    ExperimentContext {
        cohort,
        matrix,
        preprocess: PreprocessConfig {
            t_s: 4,
            f_ts: 1,
            k_max: 16,
            ..Default::default()
        },
        model,
        train: TrainConfig {
            max_epochs,
            batch_size: 64,
            learning_rate: 0.002,
            l2_coefficient: 0.0,
            ..Default::default()
        },
        test_fraction: 0.2,
    }
}
