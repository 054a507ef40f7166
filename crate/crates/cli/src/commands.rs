//! Subcommand implementations. Each command validates and digests its
//! inputs first, writes artifacts, and finishes with the run manifest.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use chronorisk_core::cohort::{
    generate_synthetic_cohort, load_cohort, save_cohort, CohortTable,
};
use chronorisk_core::evaluate::{
    evaluate_model, run_ablation, run_multiseed, AblationVariant, ExperimentContext,
};
use chronorisk_core::interpret::{
    generate_report, write_attention_svg, write_risk_gauge_svg, write_trajectory_svg, ReportMeta,
};
use chronorisk_core::model::{load_checkpoint, save_checkpoint, ModelConfig};
use chronorisk_core::ontology::{
    build_embedding_matrix, build_relation_graph, concept_text_vectors, generate_synthetic_ontology,
    graphsage_embed, load_matrix, load_ontology, save_matrix, save_ontology, EmbeddingMatrix,
    ExternalVectors, HashingTextEmbedder, OntologyBundle, TextSource,
};
use chronorisk_core::preprocess::{
    assemble_dataset, dataset_manifest, filter_patients, fit_delta_max, fit_normalizer,
    load_dataset, save_dataset, Dataset, NormStats, PreprocessConfig,
};
use chronorisk_core::train::train_model;
use chronorisk_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::FileConfig;
use crate::manifest::{write_artifact, RunRecorder};
use crate::{
    BuildEmbeddingsArgs, EvaluateArgs, ExplainArgs, GenCohortArgs, GenOntologyArgs,
    PreprocessArgs, StudyArgs, TrainArgs,
};

const MAPPING: &str = "mapping.csv";
const DESCRIPTIONS: &str = "descriptions.csv";
const RELATIONS: &str = "relations.csv";
const VISITS: &str = "visits.csv";
const DEMOGRAPHICS: &str = "demographics.csv";
const COHORT_META: &str = "cohort_meta.json";
const EMB_BIN: &str = "embeddings.bin";
const EMB_SIDECAR: &str = "embeddings.json";
const TRAIN_DATA: &str = "train.json";
const TEST_DATA: &str = "test.json";
const PREP_STATE: &str = "preprocess.json";
const CKPT_BIN: &str = "checkpoint.bin";
const CKPT_MANIFEST: &str = "checkpoint.json";

fn ontology_paths(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (dir.join(MAPPING), dir.join(DESCRIPTIONS), dir.join(RELATIONS))
}

fn load_ontology_dir(recorder: &mut RunRecorder, dir: &Path) -> Result<OntologyBundle> {
    let (mapping, descriptions, relations) = ontology_paths(dir);
    for p in [&mapping, &descriptions, &relations] {
        recorder.record_input(p)?;
    }
    load_ontology(&mapping, &descriptions, &relations)
}

fn load_cohort_dir(recorder: &mut RunRecorder, dir: &Path) -> Result<CohortTable> {
    let visits = dir.join(VISITS);
    let demo = dir.join(DEMOGRAPHICS);
    recorder.record_input(&visits)?;
    recorder.record_input(&demo)?;
    let meta = dir.join(COHORT_META);
    if meta.exists() {
        recorder.record_input(&meta)?;
    }
    load_cohort(&visits, &demo, Some(&meta))
}

fn load_matrix_dir(recorder: &mut RunRecorder, dir: &Path) -> Result<EmbeddingMatrix> {
    let bin = dir.join(EMB_BIN);
    let sidecar = dir.join(EMB_SIDECAR);
    recorder.record_input(&bin)?;
    recorder.record_input(&sidecar)?;
    load_matrix(&bin, &sidecar)
}

pub fn gen_ontology(args: GenOntologyArgs) -> Result<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let mut section = file.ontology.clone();
    if let Some(seed) = args.seed {
        section.seed = seed;
    }
    if let Some(n) = args.n_clusters {
        section.n_clusters = n;
    }
    let mut recorder = RunRecorder::create(&args.common.run_dir, "gen-ontology", args.common.force)?;
    recorder.set_config(&section)?;
    recorder.set_seed(section.seed);

    let bundle = generate_synthetic_ontology(&section.to_core())?;
    let (mapping, descriptions, relations) = ontology_paths(recorder.run_dir());
    save_ontology(&bundle, &mapping, &descriptions, &relations)?;
    for p in [&mapping, &descriptions, &relations] {
        recorder.record_artifact(p);
    }
    println!(
        "ontology: {} concepts, {} relations, {} codes",
        bundle.concept_count(),
        bundle.relations().len(),
        bundle.icd_mapping().len()
    );
    recorder.finish()
}

pub fn gen_cohort(args: GenCohortArgs) -> Result<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let mut section = file.synthetic.clone();
    if let Some(seed) = args.seed {
        section.seed = seed;
    }
    if let Some(n) = args.n_patients {
        section.n_patients = n;
    }
    if let Some(s) = args.signal_strength {
        section.signal_strength = s;
    }
    let mut recorder = RunRecorder::create(&args.common.run_dir, "gen-cohort", args.common.force)?;
    recorder.set_config(&section)?;
    recorder.set_seed(section.seed);
    let bundle = load_ontology_dir(&mut recorder, &args.ontology_dir)?;

    let cohort = generate_synthetic_cohort(&section.to_core(), &bundle)?;
    let visits = recorder.run_dir().join(VISITS);
    let demo = recorder.run_dir().join(DEMOGRAPHICS);
    let meta = recorder.run_dir().join(COHORT_META);
    save_cohort(&cohort, &visits, &demo, Some(&meta))?;
    recorder.record_artifact(&visits);
    recorder.record_artifact(&demo);
    recorder.record_artifact(&meta);
    println!(
        "cohort: {} patients, {} codes in vocabulary",
        cohort.n_patients(),
        cohort.code_vocabulary.len()
    );
    recorder.finish()
}

pub fn build_embeddings(args: BuildEmbeddingsArgs) -> Result<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let mut section = file.embeddings.clone();
    if let Some(seed) = args.seed {
        section.seed = seed;
    }
    let mut recorder =
        RunRecorder::create(&args.common.run_dir, "build-embeddings", args.common.force)?;
    recorder.set_config(&section)?;
    recorder.set_seed(section.seed);

    let bundle = load_ontology_dir(&mut recorder, &args.ontology_dir)?;
    let cohort = load_cohort_dir(&mut recorder, &args.cohort_dir)?;

    let source = match &args.text_vectors {
        Some(path) => {
            recorder.record_input(path)?;
            let ext: ExternalVectors = serde_json::from_str(&std::fs::read_to_string(path)?)?;
            TextSource::External(ext)
        }
        None => TextSource::Hashing(HashingTextEmbedder::new(section.d_t, section.text_seed)?),
    };
    let texts = concept_text_vectors(&bundle, &source)?;
    recorder.record_timing("text_embedding");
    let graph = build_relation_graph(&bundle);
    let graph_vectors = graphsage_embed(&graph, &texts, &section.graph_config())?;
    recorder.record_timing("graph_embedding");
    let matrix = build_embedding_matrix(&cohort.code_vocabulary, &bundle, &texts, &graph_vectors)?;

    let bin = recorder.run_dir().join(EMB_BIN);
    let sidecar = recorder.run_dir().join(EMB_SIDECAR);
    save_matrix(&matrix, &bin, &sidecar)?;
    recorder.record_artifact(&bin);
    recorder.record_artifact(&sidecar);
    println!(
        "matrix: {} rows x {} dims, unmapped fraction {:.4}",
        matrix.n_rows(),
        matrix.dim(),
        matrix.unmapped_fraction()
    );
    recorder.finish()
}

/// Fitted preprocessing state shared by downstream commands.
#[derive(Debug, Serialize, Deserialize)]
pub struct PrepState {
    pub config: PreprocessConfig,
    pub stats: NormStats,
    pub test_fraction: f64,
    pub split_seed: u64,
}

pub fn preprocess(args: PreprocessArgs) -> Result<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let mut section = file.preprocess.clone();
    if let Some(seed) = args.seed {
        section.seed = seed;
    }
    if let Some(t_s) = args.t_s {
        section.t_s = t_s;
    }
    if let Some(f_ts) = args.f_ts {
        section.f_ts = f_ts;
    }
    if let Some(f) = args.test_fraction {
        section.test_fraction = f;
    }
    let mut recorder = RunRecorder::create(&args.common.run_dir, "preprocess", args.common.force)?;
    recorder.set_config(&section)?;
    recorder.set_seed(section.seed);

    let cohort = load_cohort_dir(&mut recorder, &args.cohort_dir)?;
    let matrix = load_matrix_dir(&mut recorder, &args.embeddings_dir)?;

    let mut config = section.to_core();
    let filtered = filter_patients(&cohort, config.t_s, config.f_ts);
    let (train_cohort, test_cohort) =
        chronorisk_core::cohort::split_patients(&filtered, section.test_fraction, section.seed)?;
    config.delta_max = Some(fit_delta_max(&train_cohort)?);
    let stats = fit_normalizer(&train_cohort, config.epsilon)?;

    let train_samples = assemble_dataset(&train_cohort, &config, &stats, &matrix)?;
    let test_samples = assemble_dataset(&test_cohort, &config, &stats, &matrix)?;
    if train_samples.is_empty() || test_samples.is_empty() {
        return Err(Error::Data(
            "a split produced no samples; lower t_s/f_ts or enlarge the cohort".into(),
        ));
    }

    let train_path = recorder.run_dir().join(TRAIN_DATA);
    let test_path = recorder.run_dir().join(TEST_DATA);
    save_dataset(
        &Dataset {
            config: config.clone(),
            stats: stats.clone(),
            samples: train_samples.clone(),
        },
        &train_path,
    )?;
    save_dataset(
        &Dataset {
            config: config.clone(),
            stats: stats.clone(),
            samples: test_samples.clone(),
        },
        &test_path,
    )?;
    recorder.record_artifact(&train_path);
    recorder.record_artifact(&test_path);

    let state = PrepState {
        config: config.clone(),
        stats,
        test_fraction: section.test_fraction,
        split_seed: section.seed,
    };
    write_artifact(&mut recorder, PREP_STATE, &serde_json::to_string_pretty(&state)?)?;
    write_artifact(
        &mut recorder,
        "train_manifest.json",
        &serde_json::to_string_pretty(&dataset_manifest(&train_samples, &config))?,
    )?;
    write_artifact(
        &mut recorder,
        "test_manifest.json",
        &serde_json::to_string_pretty(&dataset_manifest(&test_samples, &config))?,
    )?;
    println!(
        "datasets: {} train / {} test samples ({} / {} patients)",
        train_samples.len(),
        test_samples.len(),
        train_cohort.n_patients(),
        test_cohort.n_patients()
    );
    recorder.finish()
}

fn model_config_from(
    section: &crate::config::ModelSection,
    matrix: &EmbeddingMatrix,
    stats: &NormStats,
    pre: &PreprocessConfig,
) -> ModelConfig {
    let d = matrix.dim();
    let mut config = ModelConfig::new(d, stats.demo_dim(), pre.t_s, pre.k_max);
    config.h = section.h;
    config.layers = section.layers;
    config.heads = section.heads;
    config.lambda = section.lambda;
    config.dropout = section.dropout;
    config.mlp_hidden = if section.mlp_hidden.is_empty() {
        vec![d]
    } else {
        section.mlp_hidden.clone()
    };
    config
}

pub fn train(args: TrainArgs) -> Result<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let mut train_section = file.train.clone();
    if let Some(seed) = args.seed {
        train_section.seed = seed;
    }
    if let Some(epochs) = args.max_epochs {
        train_section.max_epochs = epochs;
    }
    let mut recorder = RunRecorder::create(&args.common.run_dir, "train", args.common.force)?;
    recorder.set_config(&serde_json::json!({
        "train": &train_section,
        "model": &file.model,
    }))?;
    recorder.set_seed(train_section.seed);

    let data_path = args.data_dir.join(TRAIN_DATA);
    recorder.record_input(&data_path)?;
    let dataset = load_dataset(&data_path)?;
    let matrix = Arc::new(load_matrix_dir(&mut recorder, &args.embeddings_dir)?);

    let model_config = model_config_from(&file.model, &matrix, &dataset.stats, &dataset.config);
    let (params, history) = train_model(
        &dataset.samples,
        &train_section.to_core(),
        &model_config,
        Arc::clone(&matrix),
    )?;
    recorder.record_timing("training");

    let bin = recorder.run_dir().join(CKPT_BIN);
    let man = recorder.run_dir().join(CKPT_MANIFEST);
    save_checkpoint(
        &params,
        &model_config,
        train_section.seed,
        Some(history.chosen_threshold),
        &bin,
        &man,
    )?;
    recorder.record_artifact(&bin);
    recorder.record_artifact(&man);

    let mut csv = String::from("epoch,train_loss,val_loss,val_auc,val_f2\n");
    for e in 0..history.train_loss.len() {
        csv.push_str(&format!(
            "{e},{:.6},{:.6},{:.6},{:.6}\n",
            history.train_loss[e], history.val_loss[e], history.val_auc[e], history.val_f2[e]
        ));
    }
    write_artifact(&mut recorder, "history.csv", &csv)?;
    write_artifact(
        &mut recorder,
        "history.json",
        &serde_json::to_string_pretty(&history)?,
    )?;
    println!(
        "trained: best epoch {} of {}, threshold {:.4}",
        history.best_epoch,
        history.train_loss.len(),
        history.chosen_threshold
    );
    recorder.finish()
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    let mut recorder = RunRecorder::create(&args.common.run_dir, "evaluate", args.common.force)?;
    let data_path = args.data_dir.join(TEST_DATA);
    recorder.record_input(&data_path)?;
    let dataset = load_dataset(&data_path)?;
    let matrix = Arc::new(load_matrix_dir(&mut recorder, &args.embeddings_dir)?);

    let ckpt_bin = args.checkpoint_dir.join(CKPT_BIN);
    let ckpt_man = args.checkpoint_dir.join(CKPT_MANIFEST);
    recorder.record_input(&ckpt_bin)?;
    recorder.record_input(&ckpt_man)?;
    let (params, manifest) = load_checkpoint(&ckpt_bin, &ckpt_man, Arc::clone(&matrix))?;

    let threshold = args
        .threshold
        .or(manifest.threshold)
        .ok_or_else(|| Error::Config("no threshold stored or given; pass --threshold".into()))?;
    recorder.set_config(&serde_json::json!({ "threshold": threshold }))?;

    let report = evaluate_model(&params, &manifest.config, &dataset.samples, threshold)?;
    write_artifact(
        &mut recorder,
        "metrics.json",
        &serde_json::to_string_pretty(&report)?,
    )?;
    let csv = format!(
        "accuracy,auc,precision,recall,f1,f2,threshold\n{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
        report.accuracy, report.auc, report.precision, report.recall, report.f1, report.f2,
        report.threshold
    );
    write_artifact(&mut recorder, "metrics.csv", &csv)?;
    println!(
        "test: accuracy {:.4} auc {:.4} f2 {:.4} (threshold {:.4})",
        report.accuracy, report.auc, report.f2, threshold
    );
    recorder.finish()
}

fn parse_seeds(spec: Option<&str>, fallback: &[u64]) -> Result<Vec<u64>> {
    let Some(spec) = spec else {
        return Ok(fallback.to_vec());
    };
    let seeds: Vec<u64> = if spec.contains(',') {
        spec.split(',')
            .map(|t| t.trim().parse::<u64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("bad --seeds list: {e}")))?
    } else {
        let count: u64 = spec
            .parse()
            .map_err(|e| Error::Config(format!("bad --seeds value: {e}")))?;
        (1..=count).collect()
    };
    if seeds.is_empty() {
        return Err(Error::Config("--seeds resolved to an empty list".into()));
    }
    Ok(seeds)
}

fn study_context(
    recorder: &mut RunRecorder,
    file: &FileConfig,
    cohort_dir: &Path,
    embeddings_dir: &Path,
) -> Result<ExperimentContext> {
    let cohort = load_cohort_dir(recorder, cohort_dir)?;
    let matrix = Arc::new(load_matrix_dir(recorder, embeddings_dir)?);
    let pre = file.preprocess.to_core();
    let stats_placeholder = NormStats {
        numeric: Default::default(),
        categorical: Default::default(),
        epsilon: pre.epsilon,
    };
    let model = model_config_from(&file.model, &matrix, &stats_placeholder, &pre);
    Ok(ExperimentContext {
        cohort,
        matrix,
        preprocess: pre,
        model,
        train: file.train.to_core(),
        test_fraction: file.preprocess.test_fraction,
    })
}

pub fn ablate(args: StudyArgs) -> Result<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let seeds = parse_seeds(args.seeds.as_deref(), &file.study.seeds)?;
    let mut recorder = RunRecorder::create(&args.common.run_dir, "ablate", args.common.force)?;
    recorder.set_config(&serde_json::json!({
        "seeds": &seeds,
        "preprocess": &file.preprocess,
        "model": &file.model,
        "train": &file.train,
    }))?;
    let ctx = study_context(&mut recorder, &file, &args.cohort_dir, &args.embeddings_dir)?;
    let table = run_ablation(&ctx, &AblationVariant::standard_set(), &seeds)?;
    write_artifact(&mut recorder, "ablation.csv", &table.to_delimited())?;
    write_artifact(
        &mut recorder,
        "ablation.json",
        &serde_json::to_string_pretty(&table)?,
    )?;
    print!("{}", table.to_delimited());
    recorder.finish()
}

pub fn multiseed(args: StudyArgs) -> Result<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let seeds = parse_seeds(args.seeds.as_deref(), &file.study.seeds)?;
    let mut recorder = RunRecorder::create(&args.common.run_dir, "multiseed", args.common.force)?;
    recorder.set_config(&serde_json::json!({
        "seeds": &seeds,
        "preprocess": &file.preprocess,
        "model": &file.model,
        "train": &file.train,
    }))?;
    let ctx = study_context(&mut recorder, &file, &args.cohort_dir, &args.embeddings_dir)?;
    let study = run_multiseed(&ctx, &seeds)?;
    write_artifact(&mut recorder, "multiseed.csv", &study.to_delimited())?;
    write_artifact(
        &mut recorder,
        "study.json",
        &serde_json::to_string_pretty(&study)?,
    )?;
    print!("{}", study.to_delimited());
    recorder.finish()
}

pub fn explain(args: ExplainArgs) -> Result<()> {
    let mut recorder = RunRecorder::create(&args.common.run_dir, "explain", args.common.force)?;
    let cohort = load_cohort_dir(&mut recorder, &args.cohort_dir)?;
    let matrix = Arc::new(load_matrix_dir(&mut recorder, &args.embeddings_dir)?);
    let prep_path = args.data_dir.join(PREP_STATE);
    recorder.record_input(&prep_path)?;
    let state: PrepState = serde_json::from_str(&std::fs::read_to_string(&prep_path)?)?;
    let ckpt_bin = args.checkpoint_dir.join(CKPT_BIN);
    let ckpt_man = args.checkpoint_dir.join(CKPT_MANIFEST);
    recorder.record_input(&ckpt_bin)?;
    recorder.record_input(&ckpt_man)?;
    let (params, manifest) = load_checkpoint(&ckpt_bin, &ckpt_man, Arc::clone(&matrix))?;
    recorder.set_config(&serde_json::json!({
        "patient": &args.patient,
        "window": args.window,
    }))?;

    let patient = cohort
        .patients
        .get(&args.patient)
        .ok_or_else(|| Error::Config(format!("patient {} not in cohort", args.patient)))?
        .clone();
    let mut single = CohortTable {
        patients: [(args.patient.clone(), patient.clone())].into_iter().collect(),
        schema: cohort.schema.clone(),
        code_vocabulary: Vec::new(),
        metadata: None,
    };
    single.rebuild_vocabulary();
    let samples = assemble_dataset(&single, &state.config, &state.stats, &matrix)?;
    if samples.is_empty() {
        return Err(Error::Data(format!(
            "patient {} has fewer than t_s + f_ts = {} visits",
            args.patient,
            state.config.min_visits()
        )));
    }
    let sample = match args.window {
        None => samples.last().expect("non-empty"),
        Some(k) => samples
            .iter()
            .find(|s| s.window_start == k)
            .ok_or_else(|| {
                Error::Config(format!(
                    "window {k} not available; patient has windows 0..={}",
                    samples.last().expect("non-empty").window_start
                ))
            })?,
    };

    let output = chronorisk_core::model::forward(sample, &params, &manifest.config)?;
    let visit_codes: Vec<Vec<String>> = patient.visits
        [sample.window_start..sample.window_start + state.config.t_s]
        .iter()
        .map(|v| v.codes.clone())
        .collect();
    let threshold = manifest.threshold.unwrap_or(0.5);
    let report = generate_report(
        &args.patient,
        sample.window_start,
        &visit_codes,
        &output,
        &matrix,
        ReportMeta {
            checkpoint_id: manifest.sha256.clone(),
            threshold,
        },
    )?;

    let name = format!("report_{}_w{}.json", args.patient, sample.window_start);
    write_artifact(&mut recorder, &name, &serde_json::to_string_pretty(&report)?)?;
    if args.plots {
        let gauge = recorder.run_dir().join("risk_gauge.svg");
        let attention = recorder.run_dir().join("visit_attention.svg");
        let trajectory = recorder.run_dir().join("disease_trajectories.svg");
        write_risk_gauge_svg(&report, &gauge)?;
        write_attention_svg(&report, &attention)?;
        write_trajectory_svg(&report, 6, &trajectory)?;
        recorder.record_artifact(&gauge);
        recorder.record_artifact(&attention);
        recorder.record_artifact(&trajectory);
    }
    println!(
        "patient {} window {}: risk {:.4} ({:?}), {} attributed codes",
        args.patient,
        sample.window_start,
        report.risk,
        report.category,
        report.attributions.len()
    );
    recorder.finish()
}
