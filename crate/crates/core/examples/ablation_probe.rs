//! Scratch probe: per-seed ablation ordering on a mid-size synthetic cohort.

use std::sync::Arc;
use std::time::Instant;

use chronorisk_core::cohort::{generate_synthetic_cohort, SyntheticConfig};
use chronorisk_core::evaluate::{run_ablation, AblationVariant, ExperimentContext};
use chronorisk_core::model::ModelConfig;
use chronorisk_core::ontology::{
    build_embedding_matrix, build_relation_graph, concept_text_vectors, generate_synthetic_ontology,
    graphsage_embed, GraphEmbedConfig, HashingTextEmbedder, SyntheticOntologyConfig, TextSource,
};
use chronorisk_core::preprocess::PreprocessConfig;
use chronorisk_core::train::TrainConfig;

fn main() {
    let t0 = Instant::now();
    let ontology = generate_synthetic_ontology(&SyntheticOntologyConfig {
        n_clusters: 8,
        concepts_per_cluster: 8,
        codes_per_cluster: 30,
        cross_links: 8,
        seed: 1,
    })
    .unwrap();
    let texts = concept_text_vectors(
        &ontology,
        &TextSource::Hashing(HashingTextEmbedder::new(16, 1).unwrap()),
    )
    .unwrap();
    let graph = build_relation_graph(&ontology);
    let graph_vecs = graphsage_embed(
        &graph,
        &texts,
        &GraphEmbedConfig {
            d_g: 16,
            epochs: 8,
            seed: 1,
            ..Default::default()
        },
    )
    .unwrap();
    let vocab: Vec<String> = ontology.icd_mapping().keys().cloned().collect();
    let matrix = Arc::new(build_embedding_matrix(&vocab, &ontology, &texts, &graph_vecs).unwrap());

    let n: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(600);
    let cohort = generate_synthetic_cohort(
        &SyntheticConfig {
            n_patients: n,
            ..Default::default()
        },
        &ontology,
    )
    .unwrap();

    let mut model = ModelConfig::new(matrix.dim(), 3, 4, 16);
    model.h = 16;
    model.heads = 2;
    model.mlp_hidden = vec![32];
    model.dropout = 0.1;
    let ctx = ExperimentContext {
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
            max_epochs: 80,
            batch_size: 64,
            learning_rate: 0.002,
            l2_coefficient: 0.0,
            ..Default::default()
        },
        test_fraction: 0.2,
    };

    let seeds = [1u64, 2, 3, 4, 5];
    let table = run_ablation(&ctx, &AblationVariant::standard_set(), &seeds).unwrap();
    println!("{}", table.to_delimited());
    let full = table.result("full").unwrap();
    for r in &table.results {
        if r.variant.name == "full" {
            continue;
        }
        let wins = full
            .reports
            .iter()
            .zip(&r.reports)
            .filter(|(f, v)| f.auc >= v.auc)
            .count();
        let pairs: Vec<String> = full
            .reports
            .iter()
            .zip(&r.reports)
            .map(|(f, v)| format!("{:.3}/{:.3}", f.auc, v.auc))
            .collect();
        println!("full vs {}: wins {}/5  [{}]", r.variant.name, wins, pairs.join(" "));
    }
    println!("total {:.1?}", t0.elapsed());
}
