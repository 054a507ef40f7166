//! Longitudinal cohort data: visit records, demographics, patient-level
//! splits, file ingestion and the synthetic generator.

mod io;
mod synthetic;

pub use io::{load_cohort, save_cohort};
pub use synthetic::{generate_synthetic_cohort, SyntheticConfig};

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One clinical visit: a dated set of diagnosis codes plus the visit's
/// mortality indicator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisitRecord {
    pub patient_id: String,
    /// Days since an arbitrary epoch. Integer so elapsed-time arithmetic is exact.
    pub visit_date: i64,
    /// Raw diagnosis code strings, in recorded order. Empty only for an
    /// explicit no-diagnosis visit.
    pub codes: Vec<String>,
    pub mortality_label: u8,
}

/// Static per-patient covariates, split by kind.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Demographics {
    pub categorical: BTreeMap<String, String>,
    pub numeric: BTreeMap<String, f64>,
}

/// Declared demographic fields; loaders and normalizers validate against this.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DemographicSchema {
    pub categorical_fields: Vec<String>,
    pub numeric_fields: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patient {
    pub demographics: Demographics,
    /// Sorted by `visit_date`, strictly increasing.
    pub visits: Vec<VisitRecord>,
}

/// Generator-side ground truth kept out of the model's reach; used by
/// attribution sanity checks and oracle evaluations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortMetadata {
    /// Codes the generator designated as severe (normalized form).
    pub severe_codes: BTreeSet<String>,
    /// Per-patient per-visit hazard probabilities the labels were drawn from.
    pub hazards: BTreeMap<String, Vec<f64>>,
    pub signal_strength: f64,
}

/// A full cohort: patients keyed by id, the demographic schema, and the
/// sorted unique code vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortTable {
    pub patients: BTreeMap<String, Patient>,
    pub schema: DemographicSchema,
    pub code_vocabulary: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<CohortMetadata>,
}

impl CohortTable {
    pub fn n_patients(&self) -> usize {
        self.patients.len()
    }

    /// Rebuild the sorted unique vocabulary from the stored visits.
    pub fn rebuild_vocabulary(&mut self) {
        let mut vocab: BTreeSet<String> = BTreeSet::new();
        for patient in self.patients.values() {
            for visit in &patient.visits {
                for code in &visit.codes {
                    vocab.insert(code.clone());
                }
            }
        }
        self.code_vocabulary = vocab.into_iter().collect();
    }

    /// Validate the table invariants: unique patient ids are implied by the
    /// map; dates strictly increasing; every code in the vocabulary.
    pub fn validate(&self) -> Result<()> {
        let vocab: BTreeSet<&str> = self.code_vocabulary.iter().map(|s| s.as_str()).collect();
        for (pid, patient) in &self.patients {
            for pair in patient.visits.windows(2) {
                if pair[1].visit_date <= pair[0].visit_date {
                    return Err(Error::data(format!(
                        "patient {pid}: visit dates not strictly increasing ({} then {})",
                        pair[0].visit_date, pair[1].visit_date
                    )));
                }
            }
            for visit in &patient.visits {
                if visit.mortality_label > 1 {
                    return Err(Error::data(format!(
                        "patient {pid}: label {} not in {{0,1}}",
                        visit.mortality_label
                    )));
                }
                for code in &visit.codes {
                    if !vocab.contains(code.as_str()) {
                        return Err(Error::data(format!(
                            "patient {pid}: code {code} missing from vocabulary"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Partition a cohort at patient granularity into (train, test).
///
/// Deterministic given `seed`; `|test| = round(test_fraction * n_patients)`.
pub fn split_patients(
    cohort: &CohortTable,
    test_fraction: f64,
    seed: u64,
) -> Result<(CohortTable, CohortTable)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::config(format!(
            "test_fraction must be in (0,1), got {test_fraction}"
        )));
    }
    let n = cohort.n_patients();
    if n < 2 {
        return Err(Error::config(format!(
            "need at least 2 patients to split, got {n}"
        )));
    }
    let mut ids: Vec<&String> = cohort.patients.keys().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_test = (test_fraction * n as f64).round() as usize;
    let test_ids: BTreeSet<&String> = ids.iter().take(n_test).copied().collect();

    let take = |keep_test: bool| -> CohortTable {
        let patients: BTreeMap<String, Patient> = cohort
            .patients
            .iter()
            .filter(|(pid, _)| test_ids.contains(pid) == keep_test)
            .map(|(pid, p)| (pid.clone(), p.clone()))
            .collect();
        let mut table = CohortTable {
            patients,
            schema: cohort.schema.clone(),
            code_vocabulary: Vec::new(),
            metadata: cohort.metadata.clone(),
        };
        table.rebuild_vocabulary();
        table
    };
    Ok((take(false), take(true)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cohort(n: usize) -> CohortTable {
        let mut patients = BTreeMap::new();
        for i in 0..n {
            let pid = format!("P{i:03}");
            let visits = (0..3)
                .map(|t| VisitRecord {
                    patient_id: pid.clone(),
                    visit_date: t * 30,
                    codes: vec![format!("C{}", i % 5)],
                    mortality_label: (i % 2) as u8,
                })
                .collect();
            patients.insert(
                pid,
                Patient {
                    demographics: Demographics::default(),
                    visits,
                },
            );
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

    #[test]
    fn split_sizes_and_disjointness() {
        let cohort = tiny_cohort(10);
        let (train, test) = split_patients(&cohort, 0.2, 7).unwrap();
        assert_eq!(train.n_patients(), 8);
        assert_eq!(test.n_patients(), 2);
        let overlap: Vec<_> = train
            .patients
            .keys()
            .filter(|k| test.patients.contains_key(*k))
            .collect();
        assert!(overlap.is_empty());
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let cohort = tiny_cohort(17);
        let (tr1, te1) = split_patients(&cohort, 0.3, 42).unwrap();
        let (tr2, te2) = split_patients(&cohort, 0.3, 42).unwrap();
        assert_eq!(tr1, tr2);
        assert_eq!(te1, te2);
        let mut all: Vec<&String> = tr1.patients.keys().chain(te1.patients.keys()).collect();
        all.sort();
        let orig: Vec<&String> = cohort.patients.keys().collect();
        assert_eq!(all, orig);
    }

    #[test]
    fn split_rejects_tiny_or_invalid() {
        let cohort = tiny_cohort(1);
        assert!(split_patients(&cohort, 0.5, 0).is_err());
        let cohort = tiny_cohort(4);
        assert!(split_patients(&cohort, 0.0, 0).is_err());
        assert!(split_patients(&cohort, 1.0, 0).is_err());
    }

    #[test]
    fn validate_catches_unknown_code() {
        let mut cohort = tiny_cohort(2);
        cohort
            .patients
            .get_mut("P000")
            .unwrap()
            .visits[0]
            .codes
            .push("ZZZ".into());
        assert!(cohort.validate().is_err());
        cohort.rebuild_vocabulary();
        assert!(cohort.validate().is_ok());
    }
}
