//! Small end-to-end run: synthetic ontology -> embeddings -> cohort ->
//! train -> test metrics. Useful for eyeballing learnability and runtime.

use std::sync::Arc;
use std::time::Instant;

use chronorisk_core::cohort::{generate_synthetic_cohort, SyntheticConfig};
use chronorisk_core::evaluate::{run_single, AblationVariant, ExperimentContext};
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
    println!("embeddings built in {:.1?} (dim {})", t0.elapsed(), matrix.dim());

    let cohort_cfg = SyntheticConfig {
        n_patients: std::env::args()
            .nth(1)
            .and_then(|s| s.parse().ok())
            .unwrap_or(400),
        ..Default::default()
    };
    let cohort = generate_synthetic_cohort(&cohort_cfg, &ontology).unwrap();
    println!("cohort: {} patients in {:.1?}", cohort.n_patients(), t0.elapsed());

    let mut model = ModelConfig::new(matrix.dim(), 3, 4, 16);
    model.h = 16;
    model.heads = 2;
    model.mlp_hidden = vec![32];
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
            max_epochs: 60,
            batch_size: 64,
            ..Default::default()
        },
        test_fraction: 0.2,
    };

    for seed in [1u64, 2, 3] {
        let t = Instant::now();
        let out = run_single(&ctx, seed, &AblationVariant::full(), false).unwrap();
        println!(
            "seed {seed}: auc {:.4} f2 {:.4} acc {:.4} thr {:.3} best_epoch {} epochs {} ({:.1?})",
            out.report.auc,
            out.report.f2,
            out.report.accuracy,
            out.report.threshold,
            out.history.best_epoch,
            out.history.train_loss.len(),
            t.elapsed()
        );
    }
    println!("total {:.1?}", t0.elapsed());
}
