//! Full train/evaluate runs: single-seed pipeline, the multi-seed protocol,
//! and the component-ablation study.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{auc, confusion_counts, AblationVariant, MetricReport};
use crate::cohort::{split_patients, CohortTable};
use crate::error::{Error, Result};
use crate::model::{forward, ModelConfig, ModelParams};
use crate::ontology::EmbeddingMatrix;
use crate::preprocess::{
    assemble_dataset, filter_patients, fit_delta_max, fit_normalizer, PreprocessConfig,
    WindowSample,
};
use crate::train::{train_model, TrainConfig, TrainHistory};

/// Score a test set at a fixed threshold. Deterministic; every derived
/// metric is recomputable from the returned confusion counts.
pub fn evaluate_model(
    params: &ModelParams,
    config: &ModelConfig,
    samples: &[WindowSample],
    threshold: f64,
) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::config("empty test set"));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::config(format!("threshold {threshold} outside [0,1]")));
    }
    let mut scores = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        scores.push(forward(s, params, config)?.risk);
        labels.push(u8::from(s.target() > 0.5));
    }
    let area = auc(&scores, &labels)?;
    Ok(MetricReport::from_counts(
        confusion_counts(&scores, &labels, threshold),
        area,
        threshold,
    ))
}

/// Everything a full run needs: the cohort, the knowledge matrix, and the
/// three config blocks. Per-run seeds drive the split, initialization, and
/// batch order.
#[derive(Debug, Clone)]
pub struct ExperimentContext {
    pub cohort: CohortTable,
    pub matrix: Arc<EmbeddingMatrix>,
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub test_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: MetricReport,
    pub history: TrainHistory,
}

fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z ^ (z >> 27)
}

fn shuffle_sample_labels(samples: &mut [WindowSample], seed: u64) {
    let mut labels: Vec<Vec<u8>> = samples.iter().map(|s| s.labels.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labels.shuffle(&mut rng);
    for (s, l) in samples.iter_mut().zip(labels) {
        s.labels = l;
    }
}

/// One complete pipeline run: patient split, train-only fitting, training
/// with early stopping, and test evaluation at the F2-optimal threshold.
/// `shuffle_labels` is the chance-level control.
pub fn run_single(
    ctx: &ExperimentContext,
    seed: u64,
    variant: &AblationVariant,
    shuffle_labels: bool,
) -> Result<RunOutcome> {
    let filtered = filter_patients(&ctx.cohort, ctx.preprocess.t_s, ctx.preprocess.f_ts);
    if filtered.n_patients() < 2 {
        return Err(Error::config(
            "cohort too small after the minimum-visit filter",
        ));
    }
    let (train_cohort, test_cohort) = split_patients(&filtered, ctx.test_fraction, seed)?;

    let mut pre = ctx.preprocess.clone();
    pre.delta_max = Some(fit_delta_max(&train_cohort)?);
    let stats = fit_normalizer(&train_cohort, pre.epsilon)?;

    let matrix = if variant.use_knowledge_embeddings {
        Arc::clone(&ctx.matrix)
    } else {
        Arc::new(ctx.matrix.random_like(mix(seed, 0xab1a)))
    };

    let mut train_samples = assemble_dataset(&train_cohort, &pre, &stats, &matrix)?;
    let mut test_samples = assemble_dataset(&test_cohort, &pre, &stats, &matrix)?;
    if shuffle_labels {
        shuffle_sample_labels(&mut train_samples, mix(seed, 0x51));
        shuffle_sample_labels(&mut test_samples, mix(seed, 0x52));
    }

    let mut model_config = ctx.model.clone();
    model_config.d = matrix.dim();
    model_config.demo_dim = stats.demo_dim();
    model_config.t_s = pre.t_s;
    model_config.k_max = pre.k_max;
    model_config.visit_attention = variant.use_visit_attention;
    model_config.feature_attention = variant.use_feature_attention;
    model_config.time_encoding = variant.use_time_encoding;

    let mut train_config = ctx.train.clone();
    train_config.seed = seed;

    let (params, history) = train_model(&train_samples, &train_config, &model_config, matrix)?;
    let report = evaluate_model(&params, &model_config, &test_samples, history.chosen_threshold)?;
    Ok(RunOutcome { report, history })
}

/// Per-metric mean or spread over a seed study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub accuracy: f64,
    pub auc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub f2: f64,
}

fn summarize(reports: &[MetricReport]) -> (MetricSummary, MetricSummary) {
    let n = reports.len() as f64;
    let get = |f: &dyn Fn(&MetricReport) -> f64| -> (f64, f64) {
        let values: Vec<f64> = reports.iter().map(|r| f(r)).collect();
        let mean = values.iter().sum::<f64>() / n;
        let std = if reports.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        (mean, std)
    };
    let (acc_m, acc_s) = get(&|r| r.accuracy);
    let (auc_m, auc_s) = get(&|r| r.auc);
    let (p_m, p_s) = get(&|r| r.precision);
    let (r_m, r_s) = get(&|r| r.recall);
    let (f1_m, f1_s) = get(&|r| r.f1);
    let (f2_m, f2_s) = get(&|r| r.f2);
    (
        MetricSummary {
            accuracy: acc_m,
            auc: auc_m,
            precision: p_m,
            recall: r_m,
            f1: f1_m,
            f2: f2_m,
        },
        MetricSummary {
            accuracy: acc_s,
            auc: auc_s,
            precision: p_s,
            recall: r_s,
            f1: f1_s,
            f2: f2_s,
        },
    )
}

/// Independent full runs across seeds with mean ± std per metric.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedStudy {
    pub seeds: Vec<u64>,
    pub reports: Vec<MetricReport>,
    pub mean: MetricSummary,
    pub std: MetricSummary,
}

impl SeedStudy {
    /// One row per seed plus a mean ± std footer, comma-delimited.
    pub fn to_delimited(&self) -> String {
        let mut out = String::from("seed,accuracy,auc,precision,recall,f1,f2\n");
        for (seed, r) in self.seeds.iter().zip(&self.reports) {
            out.push_str(&format!(
                "{seed},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
                r.accuracy, r.auc, r.precision, r.recall, r.f1, r.f2
            ));
        }
        out.push_str(&format!(
            "mean,{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
            self.mean.accuracy,
            self.mean.auc,
            self.mean.precision,
            self.mean.recall,
            self.mean.f1,
            self.mean.f2
        ));
        out.push_str(&format!(
            "std,{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
            self.std.accuracy,
            self.std.auc,
            self.std.precision,
            self.std.recall,
            self.std.f1,
            self.std.f2
        ));
        out
    }

    /// Per-metric vectors for significance testing against another study.
    pub fn metric_series(&self, metric: &str) -> Option<Vec<f64>> {
        let f: fn(&MetricReport) -> f64 = match metric {
            "accuracy" => |r| r.accuracy,
            "auc" => |r| r.auc,
            "precision" => |r| r.precision,
            "recall" => |r| r.recall,
            "f1" => |r| r.f1,
            "f2" => |r| r.f2,
            _ => return None,
        };
        Some(self.reports.iter().map(f).collect())
    }
}

/// Independent full train/evaluate per seed.
pub fn run_multiseed(ctx: &ExperimentContext, seeds: &[u64]) -> Result<SeedStudy> {
    if seeds.len() < 2 {
        return Err(Error::config("multi-seed study needs >= 2 seeds"));
    }
    let mut reports = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let outcome = run_single(ctx, seed, &AblationVariant::full(), false)
            .map_err(|e| Error::Training(format!("seed {seed}: {e}")))?;
        reports.push(outcome.report);
    }
    let (mean, std) = summarize(&reports);
    Ok(SeedStudy {
        seeds: seeds.to_vec(),
        reports,
        mean,
        std,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationResult {
    pub variant: AblationVariant,
    pub seeds: Vec<u64>,
    pub reports: Vec<MetricReport>,
    pub mean: MetricSummary,
    pub std: MetricSummary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub results: Vec<AblationResult>,
}

impl AblationTable {
    /// Mean metrics per variant, comma-delimited, full model first.
    pub fn to_delimited(&self) -> String {
        let mut out = String::from("variant,accuracy,auc,f1,f2\n");
        for r in &self.results {
            out.push_str(&format!(
                "{},{:.4},{:.4},{:.4},{:.4}\n",
                r.variant.name, r.mean.accuracy, r.mean.auc, r.mean.f1, r.mean.f2
            ));
        }
        out
    }

    pub fn result(&self, name: &str) -> Option<&AblationResult> {
        self.results.iter().find(|r| r.variant.name == name)
    }
}

/// Run every variant across every seed with otherwise identical settings:
/// knowledge off swaps in a seeded random frozen matrix of equal shape;
/// visit attention off pools uniformly; feature attention off drops the
/// elementwise gate; time encoding off zeroes the temporal embedding.
pub fn run_ablation(
    ctx: &ExperimentContext,
    variants: &[AblationVariant],
    seeds: &[u64],
) -> Result<AblationTable> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::config("ablation needs >= 1 variant and >= 1 seed"));
    }
    let mut results = Vec::with_capacity(variants.len());
    for variant in variants {
        let mut reports = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let outcome = run_single(ctx, seed, variant, false).map_err(|e| {
                Error::Training(format!("variant {} seed {seed}: {e}", variant.name))
            })?;
            reports.push(outcome.report);
        }
        let (mean, std) = summarize(&reports);
        results.push(AblationResult {
            variant: variant.clone(),
            seeds: seeds.to_vec(),
            reports,
            mean,
            std,
        });
    }
    Ok(AblationTable { results })
}
