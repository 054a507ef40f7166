//! Evaluation: confusion-derived metrics, rank-based AUC, significance
//! testing, and the multi-seed / ablation harnesses.

mod harness;

pub use harness::{
    evaluate_model, run_ablation, run_multiseed, run_single, AblationResult, AblationTable,
    ExperimentContext, MetricSummary, RunOutcome, SeedStudy,
};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// F-beta from precision and recall; 0 when both are 0.
pub fn fbeta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let denom = b2 * precision + recall;
    if denom == 0.0 {
        return 0.0;
    }
    (1.0 + b2) * precision * recall / denom
}

/// Rank-based (Mann–Whitney) AUC with ties counted as one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::config("scores and labels must be equal-length and non-empty"));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Degenerate(
            "AUC is undefined with a single class".into(),
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::numeric("AUC input contains non-finite scores"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Average rank for the tie group spanning sorted positions i..=j.
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let np = n_pos as f64;
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_pos: usize,
    pub false_pos: usize,
    pub true_neg: usize,
    pub false_neg: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }
}

/// Count predictions with the decision rule `score >= threshold`.
pub fn confusion_counts(scores: &[f64], labels: &[u8], threshold: f64) -> ConfusionCounts {
    let mut c = ConfusionCounts {
        true_pos: 0,
        false_pos: 0,
        true_neg: 0,
        false_neg: 0,
    };
    for (&s, &y) in scores.iter().zip(labels) {
        let pred = s >= threshold;
        match (pred, y == 1) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_pos += 1,
            (false, false) => c.true_neg += 1,
            (false, true) => c.false_neg += 1,
        }
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub auc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub f2: f64,
    pub threshold: f64,
    pub counts: ConfusionCounts,
}

impl MetricReport {
    pub fn from_counts(counts: ConfusionCounts, auc: f64, threshold: f64) -> Self {
        let tp = counts.true_pos as f64;
        let fp = counts.false_pos as f64;
        let tn = counts.true_neg as f64;
        let fnn = counts.false_neg as f64;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fnn > 0.0 { tp / (tp + fnn) } else { 0.0 };
        let total = (tp + fp + tn + fnn).max(1.0);
        MetricReport {
            accuracy: (tp + tn) / total,
            auc,
            precision,
            recall,
            f1: fbeta(precision, recall, 1.0),
            f2: fbeta(precision, recall, 2.0),
            threshold,
            counts,
        }
    }

    /// Recompute every derived metric from the stored counts and compare.
    pub fn is_self_consistent(&self) -> bool {
        let recomputed = MetricReport::from_counts(self.counts, self.auc, self.threshold);
        recomputed.accuracy == self.accuracy
            && recomputed.precision == self.precision
            && recomputed.recall == self.recall
            && recomputed.f1 == self.f1
            && recomputed.f2 == self.f2
    }
}

/// Two-sided paired t-test on per-seed metric values.
pub fn paired_t_test(metric_a: &[f64], metric_b: &[f64]) -> Result<(f64, f64)> {
    if metric_a.len() != metric_b.len() {
        return Err(Error::config("paired samples must have equal length"));
    }
    let n = metric_a.len();
    if n < 2 {
        return Err(Error::config("paired t-test needs n >= 2"));
    }
    let diffs: Vec<f64> = metric_a.iter().zip(metric_b).map(|(a, b)| a - b).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n as f64 - 1.0);
    if var <= 0.0 {
        return Err(Error::Degenerate(
            "paired differences have zero variance".into(),
        ));
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map_err(|e| Error::numeric(format!("t distribution: {e}")))?;
    let p = 2.0 * dist.cdf(-t.abs());
    Ok((t, p))
}

/// Cohen's d with pooled unbiased variances.
pub fn cohens_d(metric_a: &[f64], metric_b: &[f64]) -> Result<f64> {
    if metric_a.len() < 2 || metric_b.len() < 2 {
        return Err(Error::config("cohens_d needs n >= 2 in each sample"));
    }
    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        (n, mean, var)
    };
    let (na, ma, va) = stats(metric_a);
    let (nb, mb, vb) = stats(metric_b);
    let pooled = (((na - 1.0) * va + (nb - 1.0) * vb) / (na + nb - 2.0)).sqrt();
    if pooled <= 0.0 {
        return Err(Error::Degenerate("pooled standard deviation is zero".into()));
    }
    Ok((ma - mb) / pooled)
}

/// One row of the component-ablation study.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub use_knowledge_embeddings: bool,
    pub use_visit_attention: bool,
    pub use_feature_attention: bool,
    pub use_time_encoding: bool,
}

impl AblationVariant {
    pub fn full() -> Self {
        AblationVariant {
            name: "full".into(),
            use_knowledge_embeddings: true,
            use_visit_attention: true,
            use_feature_attention: true,
            use_time_encoding: true,
        }
    }

    pub fn is_full(&self) -> bool {
        self.use_knowledge_embeddings
            && self.use_visit_attention
            && self.use_feature_attention
            && self.use_time_encoding
    }

    /// The full model plus the four single-component removals.
    pub fn standard_set() -> Vec<Self> {
        let full = Self::full();
        vec![
            full.clone(),
            AblationVariant {
                name: "wo_knowledge_embeddings".into(),
                use_knowledge_embeddings: false,
                ..full.clone()
            },
            AblationVariant {
                name: "wo_visit_attention".into(),
                use_visit_attention: false,
                ..full.clone()
            },
            AblationVariant {
                name: "wo_feature_attention".into(),
                use_feature_attention: false,
                ..full.clone()
            },
            AblationVariant {
                name: "wo_time_encoding".into(),
                use_time_encoding: false,
                ..full
            },
        ]
    }
}
