//! End-to-end optimization: recall-weighted BCE, Adam, patient-level
//! validation split, early stopping with best-parameter restore, and
//! F2-optimal decision-threshold selection.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluate::{confusion_counts, fbeta, MetricReport};
use crate::model::{
    forward, loss_and_grads, ModelConfig, ModelParams, ParamSet, TensorMut,
};
use crate::ontology::EmbeddingMatrix;
use crate::preprocess::WindowSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Positive-class weight in the loss.
    pub delta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub l2_coefficient: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            delta: 0.7,
            learning_rate: 0.001,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            l2_coefficient: 1e-5,
            validation_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.delta && self.delta < 1.0) {
            return Err(Error::config("delta must be in (0,1)"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be >= 1"));
        }
        if !(0.0 < self.validation_fraction && self.validation_fraction < 1.0) {
            return Err(Error::config("validation_fraction must be in (0,1)"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::config("batch_size and max_epochs must be >= 1"));
        }
        if !(self.learning_rate > 0.0) || !(self.l2_coefficient >= 0.0) {
            return Err(Error::config("bad learning_rate or l2_coefficient"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_auc: Vec<f64>,
    pub val_f2: Vec<f64>,
    pub best_epoch: usize,
    pub chosen_threshold: f64,
}

/// Recall-weighted binary cross-entropy over probability scores:
/// `-(1/N) Σ [δ·y·log p + (1-δ)(1-y)·log(1-p)]`. Scores at exactly 0 or 1
/// are clamped to [1e-7, 1-1e-7] with a warning.
pub fn weighted_bce(scores: &[f64], labels: &[u8], delta: f64) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::config(
            "scores and labels must be equal-length and non-empty",
        ));
    }
    if !(0.0 < delta && delta < 1.0) {
        return Err(Error::config("delta must be in (0,1)"));
    }
    let mut total = 0.0;
    let mut clamped = 0usize;
    for (&p, &y) in scores.iter().zip(labels) {
        if !p.is_finite() {
            return Err(Error::numeric("non-finite score in weighted_bce"));
        }
        let p = if !(1e-7..=1.0 - 1e-7).contains(&p) {
            clamped += 1;
            p.clamp(1e-7, 1.0 - 1e-7)
        } else {
            p
        };
        // Logit-space form: with s = ln(p/(1-p)), the weighted BCE is
        // δ·y·softplus(-s) + (1-δ)(1-y)·softplus(s).
        let s = (p / (1.0 - p)).ln();
        total += delta * f64::from(y) * crate::model::softplus(-s)
            + (1.0 - delta) * f64::from(1 - y) * crate::model::softplus(s);
    }
    if clamped > 0 {
        log::warn!("weighted_bce clamped {clamped} scores at the (0,1) boundary");
    }
    Ok(total / scores.len() as f64)
}

/// Decision threshold maximizing F_beta over the candidate set
/// {midpoints of consecutive sorted unique scores} ∪ {0, 1}; ties break
/// toward the lower threshold (higher recall).
pub fn optimize_threshold(scores: &[f64], labels: &[u8], beta: f64) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::config(
            "scores and labels must be equal-length and non-empty",
        ));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    if n_pos == labels.len() {
        log::warn!("single-class validation (all positive): threshold 0 maximizes recall");
        return Ok(0.0);
    }
    if n_pos == 0 {
        log::warn!("single-class validation (all negative): falling back to threshold 0.5");
        return Ok(0.5);
    }
    let mut unique: Vec<f64> = scores.to_vec();
    unique.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    unique.dedup();
    let mut candidates = vec![0.0, 1.0];
    for pair in unique.windows(2) {
        candidates.push((pair[0] + pair[1]) / 2.0);
    }
    candidates.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let mut best_threshold = candidates[0];
    let mut best_f = f64::NEG_INFINITY;
    for &threshold in &candidates {
        let counts = confusion_counts(scores, labels, threshold);
        let report = MetricReport::from_counts(counts, 0.5, threshold);
        let f = fbeta(report.precision, report.recall, beta);
        if f > best_f {
            best_f = f;
            best_threshold = threshold;
        }
    }
    Ok(best_threshold)
}

/// Adam with bias correction; state is kept per named tensor.
struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    fn new(lr: f64, template: &ParamSet) -> Self {
        let sizes: Vec<usize> = template.tensors().iter().map(|t| t.tensor.len()).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    fn update(&mut self, params: &mut ParamSet, grads: &ParamSet) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let grad_tensors = grads.tensors();
        for (k, target) in params.tensors_mut().iter_mut().enumerate() {
            let g = &grad_tensors[k].tensor;
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            let tensor: &mut TensorMut = &mut target.tensor;
            for i in 0..tensor.len() {
                let gi = g.get(i);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                tensor.add(i, -self.lr * mhat / (vhat.sqrt() + self.eps));
            }
        }
    }
}

/// Carve a patient-level validation split out of the training samples.
fn patient_level_split(
    samples: &[WindowSample],
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<usize>) {
    let mut ids: Vec<&str> = samples
        .iter()
        .map(|s| s.patient_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    ids.shuffle(rng);
    let n_val = ((fraction * ids.len() as f64).round() as usize).clamp(1, ids.len() - 1);
    let val_ids: BTreeSet<&str> = ids.iter().take(n_val).copied().collect();
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if val_ids.contains(s.patient_id.as_str()) {
            val_idx.push(i);
        } else {
            train_idx.push(i);
        }
    }
    (train_idx, val_idx)
}

/// Train the network: Adam on the weighted loss with L2 decay, early
/// stopping on validation loss, best-parameter restore, and F2-optimal
/// threshold selection on the validation scores. Deterministic given
/// `config.seed`.
pub fn train_model(
    samples: &[WindowSample],
    train_config: &TrainConfig,
    model_config: &ModelConfig,
    embedding: Arc<EmbeddingMatrix>,
) -> Result<(ModelParams, TrainHistory)> {
    train_config.validate()?;
    model_config.validate()?;
    if samples.len() < 2 {
        return Err(Error::Training("need at least 2 training samples".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    let (train_idx, val_idx) =
        patient_level_split(samples, train_config.validation_fraction, &mut rng);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Training(
            "validation split left an empty partition".into(),
        ));
    }
    let has_both_classes = |idx: &[usize]| {
        let mut pos = false;
        let mut neg = false;
        for &i in idx {
            if samples[i].target() > 0.5 {
                pos = true;
            } else {
                neg = true;
            }
        }
        pos && neg
    };
    if !has_both_classes(&train_idx) {
        return Err(Error::Training(
            "training portion contains a single class".into(),
        ));
    }

    let mut params = ModelParams::init(model_config, embedding, train_config.seed)?;
    let mut adam = Adam::new(train_config.learning_rate, &params.set);

    let val_samples: Vec<WindowSample> = val_idx.iter().map(|&i| samples[i].clone()).collect();
    let val_labels: Vec<u8> = val_samples
        .iter()
        .map(|s| u8::from(s.target() > 0.5))
        .collect();

    let mut history = TrainHistory {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        val_auc: Vec::new(),
        val_f2: Vec::new(),
        best_epoch: 0,
        chosen_threshold: 0.5,
    };
    let mut best_val = f64::INFINITY;
    let mut best_params = params.set.clone();
    let mut epochs_since_best = 0usize;

    let mut order: Vec<usize> = train_idx.clone();
    for epoch in 0..train_config.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(train_config.batch_size) {
            let batch: Vec<WindowSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let (loss, grads) = loss_and_grads(
                &batch,
                &params,
                model_config,
                train_config.delta,
                train_config.l2_coefficient,
                Some(&mut rng),
            )?;
            if !loss.is_finite() {
                return Err(Error::numeric(format!(
                    "training diverged at epoch {epoch}: non-finite loss"
                )));
            }
            adam.update(&mut params.set, &grads);
            epoch_loss += loss * batch.len() as f64;
            seen += batch.len();
        }
        let train_loss = epoch_loss / seen as f64;

        let mut val_scores = Vec::with_capacity(val_samples.len());
        for s in &val_samples {
            val_scores.push(forward(s, &params, model_config)?.risk);
        }
        let val_loss = weighted_bce(&val_scores, &val_labels, train_config.delta)?;
        if !val_loss.is_finite() {
            return Err(Error::numeric(format!(
                "training diverged at epoch {epoch}: non-finite validation loss"
            )));
        }
        let val_auc = crate::evaluate::auc(&val_scores, &val_labels).unwrap_or(f64::NAN);
        let val_counts = confusion_counts(&val_scores, &val_labels, 0.5);
        let val_report = MetricReport::from_counts(val_counts, 0.5, 0.5);

        history.train_loss.push(train_loss);
        history.val_loss.push(val_loss);
        history.val_auc.push(val_auc);
        history.val_f2.push(val_report.f2);

        if val_loss < best_val {
            best_val = val_loss;
            best_params = params.set.clone();
            history.best_epoch = epoch;
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best >= train_config.patience {
                break;
            }
        }
    }

    params.set = best_params;
    let mut val_scores = Vec::with_capacity(val_samples.len());
    for s in &val_samples {
        val_scores.push(forward(s, &params, model_config)?.risk);
    }
    history.chosen_threshold = optimize_threshold(&val_scores, &val_labels, 2.0)?;
    Ok((params, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn weighted_bce_hand_values() {
        // delta = 0.5 is exactly half the unweighted BCE.
        let scores = [0.8, 0.3, 0.6];
        let labels = [1u8, 0, 1];
        let weighted = weighted_bce(&scores, &labels, 0.5).unwrap();
        let unweighted: f64 = scores
            .iter()
            .zip(&labels)
            .map(|(&p, &y)| {
                -(f64::from(y) * p.ln() + f64::from(1 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 3.0;
        assert!((weighted - 0.5 * unweighted).abs() < 1e-12);

        // y=[1,0], p=[0.5,0.5], delta=0.7 -> 0.5 ln 2
        let loss = weighted_bce(&[0.5, 0.5], &[1, 0], 0.7).unwrap();
        assert!((loss - 0.5 * 2f64.ln()).abs() < 1e-12);
        assert!((loss - 0.3466).abs() < 1e-4);

        // near-perfect prediction: loss vanishes
        let loss = weighted_bce(&[1.0 - 1e-7], &[1], 0.9).unwrap();
        assert!(loss < 1e-6);
    }

    #[test]
    fn weighted_bce_clamps_boundary_scores() {
        let loss = weighted_bce(&[1.0], &[1], 0.7).unwrap();
        assert!(loss.is_finite());
        let loss = weighted_bce(&[0.0], &[1], 0.7).unwrap();
        assert!(loss.is_finite() && loss > 1.0);
    }

    #[test]
    fn weighting_is_monotone_in_delta_for_positive_errors() {
        let low = weighted_bce(&[0.3], &[1], 0.5).unwrap();
        let high = weighted_bce(&[0.3], &[1], 0.9).unwrap();
        assert!(high > low);
    }

    #[test]
    fn threshold_on_separable_fixture() {
        let scores = [0.1, 0.2, 0.8, 0.9];
        let labels = [0u8, 0, 1, 1];
        let threshold = optimize_threshold(&scores, &labels, 2.0).unwrap();
        assert!(threshold > 0.2 && threshold < 0.8, "threshold {threshold}");
        // F2 at the returned threshold is perfect.
        let counts = confusion_counts(&scores, &labels, threshold);
        let report = MetricReport::from_counts(counts, 1.0, threshold);
        assert_eq!(report.f2, 1.0);
        // Midpoint of the separating gap.
        assert!((threshold - 0.5).abs() < 1e-12);
    }

    #[test]
    fn threshold_degenerate_label_sets() {
        assert_eq!(optimize_threshold(&[0.3, 0.9], &[1, 1], 2.0).unwrap(), 0.0);
        assert_eq!(optimize_threshold(&[0.3, 0.9], &[0, 0], 2.0).unwrap(), 0.5);
    }

    #[test]
    fn threshold_matches_exhaustive_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..25 {
            let n = rng.random_range(4..40);
            let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random::<f64>() < 0.4)).collect();
            if labels.iter().all(|&y| y == 0) {
                labels[0] = 1;
            }
            if labels.iter().all(|&y| y == 1) {
                labels[0] = 0;
            }
            let chosen = optimize_threshold(&scores, &labels, 2.0).unwrap();
            let f2_at = |th: f64| {
                let c = confusion_counts(&scores, &labels, th);
                let r = MetricReport::from_counts(c, 0.5, th);
                fbeta(r.precision, r.recall, 2.0)
            };
            let best_grid = (0..=10_000)
                .map(|i| f2_at(i as f64 / 10_000.0))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(
                f2_at(chosen) >= best_grid - 1e-12,
                "chosen {chosen}: {} < grid best {best_grid}",
                f2_at(chosen)
            );
            // Never worse than the default threshold.
            assert!(f2_at(chosen) >= f2_at(0.5) - 1e-12);
        }
    }
}
