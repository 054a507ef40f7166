//! Cohort → model-ready windowed tensors: visit reindexing, patient
//! filtering, sliding windows, demographic normalization, elapsed-time
//! features, and dataset assembly. All statistics are fitted on the training
//! split only.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::cohort::{CohortTable, Demographics, Patient, VisitRecord};
use crate::error::{Error, Result};
use crate::ontology::EmbeddingMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    /// History window length (visits fed to the model).
    pub t_s: usize,
    /// Future horizon length (visits whose labels are predicted).
    pub f_ts: usize,
    /// Maximum diagnosis codes kept per visit.
    pub k_max: usize,
    pub epsilon: f64,
    /// Global elapsed-time normalizer, fitted as the maximum inter-visit gap
    /// over the training split.
    pub delta_max: Option<f64>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            t_s: 4,
            f_ts: 1,
            k_max: 32,
            epsilon: 1e-8,
            delta_max: None,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_s == 0 || self.f_ts == 0 || self.k_max == 0 {
            return Err(Error::config("t_s, f_ts, and k_max must all be >= 1"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon must be > 0"));
        }
        if let Some(d) = self.delta_max {
            if !(d > 0.0) {
                return Err(Error::config("delta_max must be > 0"));
            }
        }
        Ok(())
    }

    pub fn min_visits(&self) -> usize {
        self.t_s + self.f_ts
    }
}

/// Align visit indices to the regular six-month reference grid. Original
/// dates stay with the records for elapsed-time computation.
pub fn reindex_visits(visits: &[VisitRecord]) -> Result<Vec<u32>> {
    if visits.is_empty() {
        return Err(Error::data("cannot reindex an empty visit list"));
    }
    Ok((0..visits.len() as u32).map(|t| 6 * t).collect())
}

/// Keep exactly the patients with at least `t_s + f_ts` visits.
pub fn filter_patients(cohort: &CohortTable, t_s: usize, f_ts: usize) -> CohortTable {
    let min = t_s + f_ts;
    let patients: BTreeMap<String, Patient> = cohort
        .patients
        .iter()
        .filter(|(_, p)| p.visits.len() >= min)
        .map(|(id, p)| (id.clone(), p.clone()))
        .collect();
    let mut table = CohortTable {
        patients,
        schema: cohort.schema.clone(),
        code_vocabulary: Vec::new(),
        metadata: cohort.metadata.clone(),
    };
    table.rebuild_vocabulary();
    table
}

/// Largest inter-visit gap in days across the cohort; the global
/// elapsed-time normalizer when computed on the training split.
pub fn fit_delta_max(train: &CohortTable) -> Result<f64> {
    let mut max_gap: i64 = 0;
    for patient in train.patients.values() {
        for pair in patient.visits.windows(2) {
            max_gap = max_gap.max(pair[1].visit_date - pair[0].visit_date);
        }
    }
    if max_gap <= 0 {
        return Err(Error::data(
            "training cohort has no inter-visit gaps to fit delta_max",
        ));
    }
    Ok(max_gap as f64)
}

/// Normalized elapsed-time feature: `e_0 = 0`, `e_t = Δt_t / Δ_max` clipped
/// to [0,1] for t >= 1.
pub fn compute_elapsed(dates: &[i64], delta_max: f64) -> Result<Array1<f64>> {
    if dates.is_empty() {
        return Err(Error::data("empty date window"));
    }
    if !(delta_max > 0.0) {
        return Err(Error::config("delta_max must be > 0"));
    }
    let mut elapsed = Array1::<f64>::zeros(dates.len());
    for t in 1..dates.len() {
        let gap = dates[t] - dates[t - 1];
        if gap <= 0 {
            return Err(Error::data(format!(
                "visit dates not strictly increasing: {} then {}",
                dates[t - 1],
                dates[t]
            )));
        }
        elapsed[t] = (gap as f64 / delta_max).clamp(0.0, 1.0);
    }
    Ok(elapsed)
}

/// One sliding window: inputs are visits `start .. start + t_s`, labels are
/// visits `start + t_s .. start + t_s + f_ts`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub start: usize,
    pub input_end: usize,
    pub label_end: usize,
}

/// Enumerate sliding windows for a patient with `t` visits.
pub fn make_windows(t: usize, config: &PreprocessConfig) -> Vec<WindowSpec> {
    if t < config.min_visits() {
        return Vec::new();
    }
    (0..=t - config.min_visits())
        .map(|start| WindowSpec {
            start,
            input_end: start + config.t_s,
            label_end: start + config.t_s + config.f_ts,
        })
        .collect()
}

/// Training-split normalization statistics: per-numeric-field mean/std
/// (population) and per-categorical-field category inventories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub numeric: BTreeMap<String, (f64, f64)>,
    pub categorical: BTreeMap<String, Vec<String>>,
    pub epsilon: f64,
}

impl NormStats {
    pub fn demo_dim(&self) -> usize {
        self.numeric.len() + self.categorical.values().map(Vec::len).sum::<usize>()
    }

    /// Z-score a single numeric value against the fitted statistics.
    pub fn apply_numeric(&self, field: &str, value: f64) -> Result<f64> {
        if !value.is_finite() {
            return Err(Error::data(format!("non-finite value for field {field}")));
        }
        let (mean, std) = self
            .numeric
            .get(field)
            .ok_or_else(|| Error::config(format!("field {field} was not fitted")))?;
        Ok((value - mean) / (std + self.epsilon))
    }

    /// Encode a full demographic vector: z-scored numerics then one-hot
    /// categorical blocks, fields in sorted order. Missing numerics impute
    /// to zero (the training mean after z-scoring); unseen or missing
    /// categories map to an all-zero block.
    pub fn encode(&self, demo: &Demographics) -> Result<Array1<f64>> {
        let mut out = Vec::with_capacity(self.demo_dim());
        for (field, _) in &self.numeric {
            match demo.numeric.get(field) {
                Some(&v) => out.push(self.apply_numeric(field, v)?),
                None => out.push(0.0),
            }
        }
        for (field, categories) in &self.categorical {
            let value = demo.categorical.get(field);
            for cat in categories {
                out.push(if value == Some(cat) { 1.0 } else { 0.0 });
            }
        }
        Ok(Array1::from_vec(out))
    }
}

/// Fit normalization statistics from the training split only.
pub fn fit_normalizer(train: &CohortTable, epsilon: f64) -> Result<NormStats> {
    if !(epsilon > 0.0) {
        return Err(Error::config("epsilon must be > 0"));
    }
    if train.patients.is_empty() {
        return Err(Error::config("cannot fit a normalizer on an empty cohort"));
    }
    let mut numeric = BTreeMap::new();
    for field in &train.schema.numeric_fields {
        let values: Vec<f64> = train
            .patients
            .values()
            .filter_map(|p| p.demographics.numeric.get(field).copied())
            .collect();
        if values.is_empty() {
            return Err(Error::config(format!(
                "numeric field {field} has no values in the training split"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::data(format!("non-finite value for field {field}")));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        numeric.insert(field.clone(), (mean, var.sqrt()));
    }
    let mut categorical = BTreeMap::new();
    for field in &train.schema.categorical_fields {
        let mut cats: Vec<String> = train
            .patients
            .values()
            .filter_map(|p| p.demographics.categorical.get(field).cloned())
            .collect();
        cats.sort();
        cats.dedup();
        categorical.insert(field.clone(), cats);
    }
    Ok(NormStats {
        numeric,
        categorical,
        epsilon,
    })
}

/// One supervised sample: `t_s` historical visits as embedding-row indices
/// plus elapsed times and demographics, predicting the labels of the next
/// `f_ts` visits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSample {
    pub patient_id: String,
    pub window_start: usize,
    /// t_s × k_max embedding-row indices; 0 is padding.
    pub code_ids: Array2<u32>,
    /// Length t_s, values in [0,1], first entry 0.
    pub elapsed: Array1<f64>,
    pub demo_vec: Array1<f64>,
    /// Length f_ts horizon labels.
    pub labels: Vec<u8>,
}

impl WindowSample {
    /// Single supervised target for the window: any event over the horizon.
    pub fn target(&self) -> f64 {
        f64::from(self.labels.iter().copied().max().unwrap_or(0))
    }
}

/// Build the supervised dataset. All fitted components (`stats`,
/// `config.delta_max`) must come from the training split; codes resolve
/// through the frozen matrix's row index with unknowns on the shared row.
pub fn assemble_dataset(
    cohort: &CohortTable,
    config: &PreprocessConfig,
    stats: &NormStats,
    code_index: &EmbeddingMatrix,
) -> Result<Vec<WindowSample>> {
    config.validate()?;
    let delta_max = config
        .delta_max
        .ok_or_else(|| Error::config("delta_max has not been fitted"))?;
    let mut samples = Vec::new();
    let mut truncated = 0usize;
    for (pid, patient) in &cohort.patients {
        let visits = &patient.visits;
        let windows = make_windows(visits.len(), config);
        if windows.is_empty() {
            continue;
        }
        let demo_vec = stats.encode(&patient.demographics)?;
        for spec in windows {
            let input = &visits[spec.start..spec.input_end];
            let dates: Vec<i64> = input.iter().map(|v| v.visit_date).collect();
            let elapsed = compute_elapsed(&dates, delta_max)?;
            let mut code_ids = Array2::<u32>::zeros((config.t_s, config.k_max));
            for (t, visit) in input.iter().enumerate() {
                if visit.codes.len() > config.k_max {
                    truncated += 1;
                }
                for (j, code) in visit.codes.iter().take(config.k_max).enumerate() {
                    code_ids[(t, j)] = code_index.lookup(code)?;
                }
            }
            let labels: Vec<u8> = visits[spec.input_end..spec.label_end]
                .iter()
                .map(|v| v.mortality_label)
                .collect();
            samples.push(WindowSample {
                patient_id: pid.clone(),
                window_start: spec.start,
                code_ids,
                elapsed,
                demo_vec: demo_vec.clone(),
                labels,
            });
        }
    }
    if truncated > 0 {
        log::warn!("{truncated} visits had more than k_max codes and were truncated");
    }
    Ok(samples)
}

/// Audit summary emitted next to a preprocessed dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n_samples: usize,
    pub n_patients: usize,
    pub label_prevalence: f64,
    pub t_s: usize,
    pub f_ts: usize,
    pub k_max: usize,
    pub delta_max: f64,
    pub demo_dim: usize,
}

pub fn dataset_manifest(samples: &[WindowSample], config: &PreprocessConfig) -> DatasetManifest {
    let n_samples = samples.len();
    let n_patients = samples
        .iter()
        .map(|s| s.patient_id.as_str())
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    let positives = samples.iter().filter(|s| s.target() > 0.5).count();
    DatasetManifest {
        n_samples,
        n_patients,
        label_prevalence: if n_samples > 0 {
            positives as f64 / n_samples as f64
        } else {
            0.0
        },
        t_s: config.t_s,
        f_ts: config.f_ts,
        k_max: config.k_max,
        delta_max: config.delta_max.unwrap_or(0.0),
        demo_dim: samples.first().map(|s| s.demo_vec.len()).unwrap_or(0),
    }
}

/// A preprocessed dataset together with the fitted components that built it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub config: PreprocessConfig,
    pub stats: NormStats,
    pub samples: Vec<WindowSample>,
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let json = serde_json::to_string(dataset)?;
    std::fs::File::create(path)?.write_all(json.as_bytes())?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{DemographicSchema, Patient};
    use crate::ontology::{build_embedding_matrix, OntologyBundle};

    fn visit(pid: &str, date: i64, codes: &[&str], label: u8) -> VisitRecord {
        VisitRecord {
            patient_id: pid.into(),
            visit_date: date,
            codes: codes.iter().map(|s| s.to_string()).collect(),
            mortality_label: label,
        }
    }

    fn patient_with(dates: &[i64]) -> Patient {
        Patient {
            demographics: Demographics::default(),
            visits: dates
                .iter()
                .map(|&d| visit("X", d, &["A1"], 0))
                .collect(),
        }
    }

    fn cohort_of(counts: &[usize]) -> CohortTable {
        let mut patients = BTreeMap::new();
        for (i, &t) in counts.iter().enumerate() {
            let dates: Vec<i64> = (0..t as i64).map(|k| k * 10).collect();
            patients.insert(format!("P{i}"), patient_with(&dates));
        }
        let mut table = CohortTable {
            patients,
            schema: DemographicSchema::default(),
            code_vocabulary: Vec::new(),
            metadata: None,
        };
        table.rebuild_vocabulary();
        table
    }

    fn tiny_matrix() -> EmbeddingMatrix {
        let mut bundle = OntologyBundle::new();
        bundle.add_concept("S1", "one").unwrap();
        bundle.add_mapping("A1", "S1").unwrap();
        bundle.add_mapping("B2", "S1").unwrap();
        let text = vec![ndarray::Array1::from_vec(vec![1.0, 0.0])];
        let graph = vec![ndarray::Array1::from_vec(vec![0.5])];
        build_embedding_matrix(
            &["A1".to_string(), "B2".to_string()],
            &bundle,
            &text,
            &graph,
        )
        .unwrap()
    }

    #[test]
    fn reindex_follows_six_month_grid() {
        let p = patient_with(&[0, 40, 90]);
        assert_eq!(reindex_visits(&p.visits).unwrap(), vec![0, 6, 12]);
        let p1 = patient_with(&[7]);
        assert_eq!(reindex_visits(&p1.visits).unwrap(), vec![0]);
        let p5 = patient_with(&[0, 1, 2, 3, 4]);
        assert_eq!(reindex_visits(&p5.visits).unwrap(), vec![0, 6, 12, 18, 24]);
        assert!(reindex_visits(&[]).is_err());
    }

    #[test]
    fn filter_keeps_boundary_and_drops_short() {
        let cohort = cohort_of(&[4, 3]);
        let kept = filter_patients(&cohort, 2, 2);
        assert_eq!(kept.n_patients(), 1);
        assert!(kept.patients.contains_key("P0"));

        let cohort = cohort_of(&[5, 3, 8]);
        let kept = filter_patients(&cohort, 3, 2);
        assert_eq!(kept.n_patients(), 2);
    }

    #[test]
    fn elapsed_matches_hand_arithmetic() {
        let e = compute_elapsed(&[0, 30, 90], 60.0).unwrap();
        assert_eq!(e.to_vec(), vec![0.0, 0.5, 1.0]);
        let single = compute_elapsed(&[42], 60.0).unwrap();
        assert_eq!(single.to_vec(), vec![0.0]);
        let equal = compute_elapsed(&[0, 60, 120, 180], 60.0).unwrap();
        assert_eq!(equal.to_vec(), vec![0.0, 1.0, 1.0, 1.0]);
        assert!(compute_elapsed(&[10, 10], 60.0).is_err());
        // Test-time gaps above the training maximum clip to 1.
        let clipped = compute_elapsed(&[0, 500], 60.0).unwrap();
        assert_eq!(clipped[1], 1.0);
    }

    #[test]
    fn window_counts_match_counting_oracle() {
        let config = PreprocessConfig {
            t_s: 2,
            f_ts: 2,
            ..Default::default()
        };
        assert_eq!(make_windows(4, &config).len(), 1);
        assert_eq!(make_windows(6, &config).len(), 3);
        assert_eq!(make_windows(3, &config).len(), 0);
        // Brute-force counting oracle: number of k with k + t_s + f_ts <= T.
        for t in 0..12usize {
            let expected = (0..t)
                .filter(|k| k + config.t_s + config.f_ts <= t)
                .count();
            assert_eq!(make_windows(t, &config).len(), expected, "T={t}");
        }
    }

    #[test]
    fn windows_never_leak_labels_into_inputs() {
        let config = PreprocessConfig {
            t_s: 3,
            f_ts: 2,
            ..Default::default()
        };
        for spec in make_windows(9, &config) {
            assert!(spec.input_end <= spec.label_end);
            assert_eq!(spec.input_end - spec.start, 3);
            assert_eq!(spec.label_end - spec.input_end, 2);
        }
    }

    fn demo_cohort() -> CohortTable {
        let mut patients = BTreeMap::new();
        for (i, (age, sex)) in [(0.0, "F"), (10.0, "M")].iter().enumerate() {
            let mut demo = Demographics::default();
            demo.numeric.insert("age".into(), *age);
            demo.categorical.insert("sex".into(), sex.to_string());
            patients.insert(
                format!("P{i}"),
                Patient {
                    demographics: demo,
                    visits: vec![visit(&format!("P{i}"), 0, &["A1"], 0)],
                },
            );
        }
        let mut table = CohortTable {
            patients,
            schema: DemographicSchema {
                categorical_fields: vec!["sex".into()],
                numeric_fields: vec!["age".into()],
            },
            code_vocabulary: Vec::new(),
            metadata: None,
        };
        table.rebuild_vocabulary();
        table
    }

    #[test]
    fn zscore_centering_and_bounds() {
        let stats = fit_normalizer(&demo_cohort(), 1e-8).unwrap();
        // x = mean -> 0
        assert!(stats.apply_numeric("age", 5.0).unwrap().abs() < 1e-12);
        // train [0,10], x=10 -> (10-5)/(5+eps) ~ 1.0
        let z = stats.apply_numeric("age", 10.0).unwrap();
        assert!((z - 1.0).abs() < 1e-6, "z = {z}");
        assert!(stats.apply_numeric("age", f64::NAN).is_err());
    }

    #[test]
    fn constant_feature_maps_to_zero() {
        let mut cohort = demo_cohort();
        for p in cohort.patients.values_mut() {
            p.demographics.numeric.insert("age".into(), 7.0);
        }
        let stats = fit_normalizer(&cohort, 1e-8).unwrap();
        assert_eq!(stats.apply_numeric("age", 7.0).unwrap(), 0.0);
    }

    #[test]
    fn unseen_category_encodes_to_zero_block() {
        let stats = fit_normalizer(&demo_cohort(), 1e-8).unwrap();
        let mut demo = Demographics::default();
        demo.numeric.insert("age".into(), 5.0);
        demo.categorical.insert("sex".into(), "U".into());
        let vec = stats.encode(&demo).unwrap();
        // layout: [age, sex=F, sex=M]
        assert_eq!(vec.len(), 3);
        assert_eq!(vec[1], 0.0);
        assert_eq!(vec[2], 0.0);
    }

    #[test]
    fn assemble_counts_and_padding() {
        let mut cohort = cohort_of(&[5, 3, 8]);
        // Give one patient an empty (no-diagnosis) visit.
        cohort.patients.get_mut("P0").unwrap().visits[1].codes.clear();
        let matrix = tiny_matrix();
        let config = PreprocessConfig {
            t_s: 2,
            f_ts: 1,
            k_max: 3,
            epsilon: 1e-8,
            delta_max: Some(10.0),
        };
        let stats = fit_normalizer(&cohort, 1e-8).unwrap();
        let samples = assemble_dataset(&cohort, &config, &stats, &matrix).unwrap();
        // per-patient count T - t_s - f_ts + 1 for T >= 3: 3 + 1 + 6
        assert_eq!(samples.len(), 10);
        // P0's first window covers the emptied visit at t=1: all padding.
        let s0 = &samples[0];
        assert_eq!(s0.patient_id, "P0");
        assert!(s0.code_ids.row(1).iter().all(|&id| id == 0));
        // Non-empty visits point at real rows.
        assert!(s0.code_ids[(0, 0)] > 0);
        for s in &samples {
            assert_eq!(s.elapsed[0], 0.0);
            assert!(s.elapsed.iter().all(|&e| (0.0..=1.0).contains(&e)));
        }
    }

    #[test]
    fn delta_max_fit_requires_gaps() {
        let cohort = cohort_of(&[4]);
        assert_eq!(fit_delta_max(&cohort).unwrap(), 10.0);
        let single = cohort_of(&[1, 1]);
        assert!(fit_delta_max(&single).is_err());
    }
}
