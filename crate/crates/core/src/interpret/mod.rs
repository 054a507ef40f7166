//! Closed-form interpretability: risk stratification, per-disease
//! contribution scores from visit attention and embedding norms, severity /
//! chronicity / progression annotations, and patient-level reports.

mod plots;

pub use plots::{write_attention_svg, write_risk_gauge_svg, write_trajectory_svg};

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ForwardOutput;
use crate::ontology::{normalize_icd, EmbeddingMatrix};

/// Risk stratum induced by thresholds 0.20 / 0.40 / 0.70 on the risk score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RiskCategory {
    Low,
    Moderate,
    High,
    Critical,
}

/// Half-open stratification: Low < 0.20 <= Moderate < 0.40 <= High < 0.70 <= Critical.
pub fn risk_category(r: f64) -> Result<RiskCategory> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::data(format!("risk score {r} outside [0,1]")));
    }
    Ok(if r < 0.20 {
        RiskCategory::Low
    } else if r < 0.40 {
        RiskCategory::Moderate
    } else if r < 0.70 {
        RiskCategory::High
    } else {
        RiskCategory::Critical
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SeverityLevel {
    Mild,
    Moderate,
    Severe,
}

/// Severe above 0.70, Moderate in (0.40, 0.70], Mild otherwise.
pub fn severity(normalized_importance: f64) -> SeverityLevel {
    if normalized_importance > 0.70 {
        SeverityLevel::Severe
    } else if normalized_importance > 0.40 {
        SeverityLevel::Moderate
    } else {
        SeverityLevel::Mild
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Trend {
    Increasing,
    Decreasing,
    Stable,
}

/// Per-disease track across the window: presence flags and contribution
/// values `C_d(t) = alpha_t * ||e_d||` at visits where the disease occurs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionTrack {
    pub present: Vec<bool>,
    pub contributions: Vec<f64>,
    pub row: u32,
    pub unknown: bool,
}

/// Contributions for every distinct (normalized) code in a window.
/// Duplicate codes within one visit count once.
pub fn disease_contribution(
    alpha: &Array1<f64>,
    visit_codes: &[Vec<String>],
    matrix: &EmbeddingMatrix,
) -> Result<BTreeMap<String, ContributionTrack>> {
    let t_s = alpha.len();
    if visit_codes.len() != t_s {
        return Err(Error::config(format!(
            "{} visits but alpha has {} entries",
            visit_codes.len(),
            t_s
        )));
    }
    let mut tracks: BTreeMap<String, ContributionTrack> = BTreeMap::new();
    for (t, codes) in visit_codes.iter().enumerate() {
        let mut seen_here: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
        for raw in codes {
            let norm = normalize_icd(raw)?;
            if !seen_here.insert(norm.clone()) {
                continue;
            }
            let row = matrix.lookup_norm(&norm);
            let track = tracks.entry(norm).or_insert_with(|| ContributionTrack {
                present: vec![false; t_s],
                contributions: vec![0.0; t_s],
                row,
                unknown: row == matrix.unknown_row(),
            });
            track.present[t] = true;
            track.contributions[t] = alpha[t] * matrix.row_norm(row);
        }
    }
    Ok(tracks)
}

/// Cumulative importance `S_d = Σ_t C_d(t)` and its max-normalized form.
/// When every disease sums to zero, all normalized scores are zero.
pub fn cumulative_importance(
    tracks: &BTreeMap<String, ContributionTrack>,
) -> BTreeMap<String, (f64, f64)> {
    let sums: BTreeMap<String, f64> = tracks
        .iter()
        .map(|(code, t)| (code.clone(), t.contributions.iter().sum::<f64>()))
        .collect();
    let max = sums.values().copied().fold(0.0f64, f64::max);
    sums.into_iter()
        .map(|(code, s)| {
            let normalized = if max > 0.0 { s / max } else { 0.0 };
            (code, (s, normalized))
        })
        .collect()
}

/// Chronic means appearing in at least two distinct visits of the window.
pub fn chronicity(track: &ContributionTrack) -> bool {
    track.present.iter().filter(|&&p| p).count() >= 2
}

/// OLS slope over the full trajectory (zeros where the disease is absent);
/// the trend tolerance is 0.01 × the peak contribution. Returns the trend
/// and the earliest peak index.
pub fn progression_trend(trajectory: &[f64]) -> Result<(Trend, usize)> {
    if trajectory.is_empty() {
        return Err(Error::config("empty contribution trajectory"));
    }
    let mut t_peak = 0usize;
    let mut peak = trajectory[0];
    for (t, &c) in trajectory.iter().enumerate() {
        if c > peak {
            peak = c;
            t_peak = t;
        }
    }
    if trajectory.len() == 1 {
        return Ok((Trend::Stable, 0));
    }
    let n = trajectory.len() as f64;
    let t_mean = (n - 1.0) / 2.0;
    let c_mean = trajectory.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (t, &c) in trajectory.iter().enumerate() {
        let dt = t as f64 - t_mean;
        num += dt * (c - c_mean);
        den += dt * dt;
    }
    let slope = num / den;
    let tolerance = 0.01 * peak.max(0.0);
    let trend = if slope > tolerance {
        Trend::Increasing
    } else if slope < -tolerance {
        Trend::Decreasing
    } else {
        Trend::Stable
    };
    Ok((trend, t_peak))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiseaseAttribution {
    pub code: String,
    pub contributions: Vec<f64>,
    pub cumulative: f64,
    pub normalized: f64,
    pub severity: SeverityLevel,
    pub chronic: bool,
    pub trend: Trend,
    pub t_peak: usize,
    pub unknown_code: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub checkpoint_id: String,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub patient_id: String,
    pub window_start: usize,
    pub risk: f64,
    pub category: RiskCategory,
    pub alpha: Vec<f64>,
    /// Sorted by normalized importance descending (code ascending on ties).
    pub attributions: Vec<DiseaseAttribution>,
    /// Set when the window carried no resolvable diagnosis signal.
    pub uninformative: bool,
    pub meta: ReportMeta,
}

impl AttributionReport {
    pub fn validate(&self) -> Result<()> {
        let alpha_sum: f64 = self.alpha.iter().sum();
        if (alpha_sum - 1.0).abs() > 1e-6 {
            return Err(Error::data(format!(
                "report alpha sums to {alpha_sum}, expected 1"
            )));
        }
        for pair in self.attributions.windows(2) {
            if pair[1].normalized > pair[0].normalized + 1e-12 {
                return Err(Error::data(
                    "attributions are not sorted by normalized importance",
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.risk) {
            return Err(Error::data(format!("risk {} outside [0,1]", self.risk)));
        }
        Ok(())
    }
}

/// Assemble the full per-window report from a forward pass.
pub fn generate_report(
    patient_id: &str,
    window_start: usize,
    visit_codes: &[Vec<String>],
    output: &ForwardOutput,
    matrix: &EmbeddingMatrix,
    meta: ReportMeta,
) -> Result<AttributionReport> {
    let tracks = disease_contribution(&output.alpha, visit_codes, matrix)?;
    let importance = cumulative_importance(&tracks);
    let mut attributions = Vec::with_capacity(tracks.len());
    for (code, track) in &tracks {
        let (cumulative, normalized) = importance[code];
        let (trend, t_peak) = progression_trend(&track.contributions)?;
        attributions.push(DiseaseAttribution {
            code: code.clone(),
            contributions: track.contributions.clone(),
            cumulative,
            normalized,
            severity: severity(normalized),
            chronic: chronicity(track),
            trend,
            t_peak,
            unknown_code: track.unknown,
        });
    }
    attributions.sort_by(|a, b| {
        b.normalized
            .partial_cmp(&a.normalized)
            .expect("finite importance")
            .then_with(|| a.code.cmp(&b.code))
    });
    let uninformative = attributions.iter().all(|a| a.cumulative == 0.0);
    let report = AttributionReport {
        patient_id: patient_id.to_string(),
        window_start,
        risk: output.risk,
        category: risk_category(output.risk)?,
        alpha: output.alpha.to_vec(),
        attributions,
        uninformative,
        meta,
    };
    report.validate()?;
    Ok(report)
}

pub fn save_report(report: &AttributionReport, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report)?;
    std::fs::File::create(path)?.write_all(json.as_bytes())?;
    Ok(())
}

pub fn load_report(path: &Path) -> Result<AttributionReport> {
    let report: AttributionReport = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    report.validate()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn fixture_matrix() -> EmbeddingMatrix {
        let mut bundle = crate::ontology::OntologyBundle::new();
        bundle.add_concept("S1", "one").unwrap();
        bundle.add_concept("S2", "two").unwrap();
        bundle.add_mapping("A1", "S1").unwrap();
        bundle.add_mapping("B2", "S2").unwrap();
        let text = vec![arr1(&[2.0, 0.0]), arr1(&[0.0, 3.0])];
        let graph = vec![arr1(&[0.0]), arr1(&[4.0])];
        crate::ontology::build_embedding_matrix(
            &["A1".to_string(), "B2".to_string(), "Z9".to_string()],
            &bundle,
            &text,
            &graph,
        )
        .unwrap()
    }

    #[test]
    fn risk_category_boundaries() {
        assert_eq!(risk_category(0.0).unwrap(), RiskCategory::Low);
        assert_eq!(risk_category(0.20).unwrap(), RiskCategory::Moderate);
        assert_eq!(risk_category(0.39).unwrap(), RiskCategory::Moderate);
        assert_eq!(risk_category(0.40).unwrap(), RiskCategory::High);
        assert_eq!(risk_category(0.70).unwrap(), RiskCategory::Critical);
        assert!(risk_category(1.2).is_err());
        assert!(risk_category(-0.1).is_err());
    }

    #[test]
    fn severity_boundaries() {
        assert_eq!(severity(0.70), SeverityLevel::Moderate);
        assert_eq!(severity(0.71), SeverityLevel::Severe);
        assert_eq!(severity(0.40), SeverityLevel::Mild);
        assert_eq!(severity(0.41), SeverityLevel::Moderate);
    }

    #[test]
    fn monotone_step_functions() {
        let mut last_risk = risk_category(0.0).unwrap();
        for i in 1..=100 {
            let r = risk_category(i as f64 / 100.0).unwrap();
            assert!(r >= last_risk);
            last_risk = r;
        }
        let mut last_sev = severity(0.0);
        for i in 1..=100 {
            let s = severity(i as f64 / 100.0);
            assert!(s >= last_sev);
            last_sev = s;
        }
    }

    #[test]
    fn contribution_direct_product_and_absence() {
        let matrix = fixture_matrix();
        let alpha = arr1(&[0.5, 0.5]);
        let visits = vec![vec!["A1".to_string()], vec![]];
        let tracks = disease_contribution(&alpha, &visits, &matrix).unwrap();
        let a1 = &tracks["A1"];
        // ||e_A1|| = ||(2,0,0)|| = 2, alpha = 0.5 -> 1.0
        assert!((a1.contributions[0] - 1.0).abs() < 1e-6);
        assert_eq!(a1.contributions[1], 0.0);
        assert!(!a1.present[1]);
    }

    #[test]
    fn duplicates_count_once_and_unknowns_are_flagged() {
        let matrix = fixture_matrix();
        let alpha = arr1(&[1.0]);
        let visits = vec![vec!["A1".to_string(), "A1".to_string(), "Z9".to_string()]];
        let tracks = disease_contribution(&alpha, &visits, &matrix).unwrap();
        assert_eq!(tracks.len(), 2);
        assert!(!tracks["A1"].unknown);
        assert!(tracks["Z9"].unknown);
    }

    #[test]
    fn contribution_matches_loop_oracle() {
        let matrix = fixture_matrix();
        let alpha = arr1(&[0.2, 0.3, 0.5]);
        let visits = vec![
            vec!["A1".to_string(), "B2".to_string()],
            vec!["B2".to_string()],
            vec!["A1".to_string()],
        ];
        let tracks = disease_contribution(&alpha, &visits, &matrix).unwrap();
        for (code, track) in &tracks {
            for (t, codes) in visits.iter().enumerate() {
                let present = codes.iter().any(|c| c == code);
                let expect = if present {
                    alpha[t] * matrix.row_norm(matrix.lookup_norm(code))
                } else {
                    0.0
                };
                assert!((track.contributions[t] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn importance_normalization() {
        let mut tracks = BTreeMap::new();
        tracks.insert(
            "D1".to_string(),
            ContributionTrack {
                present: vec![true, true],
                contributions: vec![2.0, 2.0],
                row: 1,
                unknown: false,
            },
        );
        tracks.insert(
            "D2".to_string(),
            ContributionTrack {
                present: vec![true, false],
                contributions: vec![2.0, 0.0],
                row: 2,
                unknown: false,
            },
        );
        let imp = cumulative_importance(&tracks);
        assert_eq!(imp["D1"], (4.0, 1.0));
        assert_eq!(imp["D2"], (2.0, 0.5));

        // single disease self-normalizes; all-zero stays zero
        tracks.remove("D2");
        let imp = cumulative_importance(&tracks);
        assert_eq!(imp["D1"].1, 1.0);
        tracks.get_mut("D1").unwrap().contributions = vec![0.0, 0.0];
        let imp = cumulative_importance(&tracks);
        assert_eq!(imp["D1"].1, 0.0);
    }

    #[test]
    fn chronicity_rules() {
        let mut track = ContributionTrack {
            present: vec![true, false, true],
            contributions: vec![1.0, 0.0, 1.0],
            row: 1,
            unknown: false,
        };
        assert!(chronicity(&track));
        track.present = vec![true, false, false];
        assert!(!chronicity(&track));
    }

    #[test]
    fn trend_cases() {
        assert_eq!(
            progression_trend(&[1.0, 2.0, 3.0]).unwrap(),
            (Trend::Increasing, 2)
        );
        assert_eq!(
            progression_trend(&[3.0, 2.0, 1.0]).unwrap(),
            (Trend::Decreasing, 0)
        );
        assert_eq!(
            progression_trend(&[0.7, 0.7, 0.7]).unwrap(),
            (Trend::Stable, 0)
        );
        assert_eq!(progression_trend(&[0.4]).unwrap(), (Trend::Stable, 0));
    }

    #[test]
    fn conservation_between_views() {
        // sum_d S_d == sum_t alpha_t * (sum of norms of codes present at t)
        let matrix = fixture_matrix();
        let alpha = arr1(&[0.1, 0.6, 0.3]);
        let visits = vec![
            vec!["A1".to_string(), "B2".to_string()],
            vec!["A1".to_string()],
            vec!["B2".to_string(), "Z9".to_string()],
        ];
        let tracks = disease_contribution(&alpha, &visits, &matrix).unwrap();
        let total: f64 = tracks
            .values()
            .map(|t| t.contributions.iter().sum::<f64>())
            .sum();
        let mut expect = 0.0;
        for (t, codes) in visits.iter().enumerate() {
            let mut distinct: Vec<String> = codes.clone();
            distinct.sort();
            distinct.dedup();
            for code in distinct {
                expect += alpha[t] * matrix.row_norm(matrix.lookup_norm(&code));
            }
        }
        assert!((total - expect).abs() < 1e-10);
    }
}
