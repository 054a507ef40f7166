//! Cohort file format.
//!
//! Visits file (UTF-8, comma-delimited, one visit per row):
//! `patient_id,visit_date,codes,mortality_label` where `codes` joins raw
//! code strings with `;` (empty for a no-diagnosis visit).
//!
//! Demographics file: `patient_id,field` columns where each field is
//! `name:num=value` or `name:cat=value`.
//!
//! Metadata (generator ground truth) travels in an optional JSON sidecar.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use super::{
    CohortMetadata, CohortTable, DemographicSchema, Demographics, Patient, VisitRecord,
};
use crate::error::{Error, Result};

const VISITS_HEADER: &str = "patient_id,visit_date,codes,mortality_label";
const DEMO_HEADER: &str = "patient_id,demographics";

/// Write a cohort as a visits file plus a demographics file; generator
/// metadata, when present, goes to `meta_path`.
pub fn save_cohort(
    cohort: &CohortTable,
    visits_path: &Path,
    demo_path: &Path,
    meta_path: Option<&Path>,
) -> Result<()> {
    let mut visits = String::new();
    visits.push_str(VISITS_HEADER);
    visits.push('\n');
    for (pid, patient) in &cohort.patients {
        for visit in &patient.visits {
            visits.push_str(&format!(
                "{},{},{},{}\n",
                pid,
                visit.visit_date,
                visit.codes.join(";"),
                visit.mortality_label
            ));
        }
    }
    std::fs::File::create(visits_path)?.write_all(visits.as_bytes())?;

    let mut demo = String::new();
    demo.push_str(DEMO_HEADER);
    demo.push('\n');
    for (pid, patient) in &cohort.patients {
        let mut fields: Vec<String> = Vec::new();
        for name in &cohort.schema.numeric_fields {
            if let Some(v) = patient.demographics.numeric.get(name) {
                fields.push(format!("{name}:num={v}"));
            }
        }
        for name in &cohort.schema.categorical_fields {
            if let Some(v) = patient.demographics.categorical.get(name) {
                fields.push(format!("{name}:cat={v}"));
            }
        }
        demo.push_str(&format!("{pid},{}\n", fields.join(",")));
    }
    std::fs::File::create(demo_path)?.write_all(demo.as_bytes())?;

    if let (Some(path), Some(meta)) = (meta_path, &cohort.metadata) {
        let json = serde_json::to_string_pretty(meta)?;
        std::fs::File::create(path)?.write_all(json.as_bytes())?;
    }
    Ok(())
}

/// Load a cohort from the visits + demographics files; reads the metadata
/// sidecar when a path is given and the file exists.
pub fn load_cohort(
    visits_path: &Path,
    demo_path: &Path,
    meta_path: Option<&Path>,
) -> Result<CohortTable> {
    let visits_text = std::fs::read_to_string(visits_path)?;
    let mut per_patient: BTreeMap<String, Vec<VisitRecord>> = BTreeMap::new();
    let mut lines = visits_text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == VISITS_HEADER => {}
        _ => {
            return Err(Error::parse(
                visits_path,
                1,
                format!("expected header `{VISITS_HEADER}`"),
            ))
        }
    }
    for (idx, line) in lines {
        let row = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(Error::parse(
                visits_path,
                row,
                format!("expected 4 columns, got {}", parts.len()),
            ));
        }
        let patient_id = parts[0].trim().to_string();
        if patient_id.is_empty() {
            return Err(Error::parse(visits_path, row, "empty patient_id"));
        }
        let visit_date: i64 = parts[1]
            .trim()
            .parse()
            .map_err(|e| Error::parse(visits_path, row, format!("bad visit_date: {e}")))?;
        let codes: Vec<String> = if parts[2].trim().is_empty() {
            Vec::new()
        } else {
            parts[2].split(';').map(|c| c.trim().to_string()).collect()
        };
        let mortality_label: u8 = match parts[3].trim() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::parse(
                    visits_path,
                    row,
                    format!("mortality_label must be 0 or 1, got `{other}`"),
                ))
            }
        };
        per_patient
            .entry(patient_id.clone())
            .or_default()
            .push(VisitRecord {
                patient_id,
                visit_date,
                codes,
                mortality_label,
            });
    }

    let demo_text = std::fs::read_to_string(demo_path)?;
    let mut demographics: BTreeMap<String, Demographics> = BTreeMap::new();
    let mut numeric_fields: BTreeSet<String> = BTreeSet::new();
    let mut categorical_fields: BTreeSet<String> = BTreeSet::new();
    let mut lines = demo_text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == DEMO_HEADER => {}
        _ => {
            return Err(Error::parse(
                demo_path,
                1,
                format!("expected header `{DEMO_HEADER}`"),
            ))
        }
    }
    for (idx, line) in lines {
        let row = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let pid = parts
            .next()
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::parse(demo_path, row, "empty patient_id"))?
            .to_string();
        let mut demo = Demographics::default();
        for field in parts {
            let field = field.trim();
            if field.is_empty() {
                continue;
            }
            let (name_kind, value) = field.split_once('=').ok_or_else(|| {
                Error::parse(demo_path, row, format!("field `{field}` missing `=`"))
            })?;
            let (name, kind) = name_kind.split_once(':').ok_or_else(|| {
                Error::parse(demo_path, row, format!("field `{field}` missing `:kind`"))
            })?;
            match kind {
                "num" => {
                    let v: f64 = value.parse().map_err(|e| {
                        Error::parse(demo_path, row, format!("bad numeric value in `{field}`: {e}"))
                    })?;
                    if !v.is_finite() {
                        return Err(Error::parse(
                            demo_path,
                            row,
                            format!("non-finite numeric value in `{field}`"),
                        ));
                    }
                    numeric_fields.insert(name.to_string());
                    demo.numeric.insert(name.to_string(), v);
                }
                "cat" => {
                    categorical_fields.insert(name.to_string());
                    demo.categorical.insert(name.to_string(), value.to_string());
                }
                other => {
                    return Err(Error::parse(
                        demo_path,
                        row,
                        format!("unknown field kind `{other}` (expected num|cat)"),
                    ))
                }
            }
        }
        demographics.insert(pid, demo);
    }

    let mut patients: BTreeMap<String, Patient> = BTreeMap::new();
    for (pid, mut visits) in per_patient {
        visits.sort_by_key(|v| v.visit_date);
        for pair in visits.windows(2) {
            if pair[1].visit_date == pair[0].visit_date {
                return Err(Error::data(format!(
                    "patient {pid}: duplicate visit_date {}",
                    pair[0].visit_date
                )));
            }
        }
        let demographics = demographics.remove(&pid).unwrap_or_default();
        patients.insert(
            pid,
            Patient {
                demographics,
                visits,
            },
        );
    }

    let metadata = match meta_path {
        Some(path) if path.exists() => {
            let text = std::fs::read_to_string(path)?;
            Some(serde_json::from_str::<CohortMetadata>(&text)?)
        }
        _ => None,
    };

    let mut table = CohortTable {
        patients,
        schema: DemographicSchema {
            categorical_fields: categorical_fields.into_iter().collect(),
            numeric_fields: numeric_fields.into_iter().collect(),
        },
        code_vocabulary: Vec::new(),
        metadata,
    };
    table.rebuild_vocabulary();
    table.validate()?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_file(dir: &Path, name: &str, content: &str) -> std::path::PathBuf {
        let path = dir.join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        path
    }

    #[test]
    fn loads_three_patient_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let visits = write_file(
            dir.path(),
            "visits.csv",
            "patient_id,visit_date,codes,mortality_label\n\
             A,0,X1;X2,0\nA,30,X1,1\nB,5,X3,0\nB,40,,0\nC,2,X2,1\n",
        );
        let demo = write_file(
            dir.path(),
            "demo.csv",
            "patient_id,demographics\nA,age:num=70,sex:cat=F\nB,age:num=55,sex:cat=M\nC,age:num=61,sex:cat=F\n",
        );
        let table = load_cohort(&visits, &demo, None).unwrap();
        assert_eq!(table.n_patients(), 3);
        assert_eq!(table.code_vocabulary, vec!["X1", "X2", "X3"]);
        assert_eq!(table.patients["B"].visits[1].codes.len(), 0);
        assert_eq!(table.schema.numeric_fields, vec!["age"]);
    }

    #[test]
    fn rejects_duplicate_patient_date() {
        let dir = tempfile::tempdir().unwrap();
        let visits = write_file(
            dir.path(),
            "visits.csv",
            "patient_id,visit_date,codes,mortality_label\nA,0,X1,0\nA,0,X2,0\n",
        );
        let demo = write_file(dir.path(), "demo.csv", "patient_id,demographics\nA,age:num=1\n");
        let err = load_cohort(&visits, &demo, None).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err}");
    }

    #[test]
    fn parse_error_names_row() {
        let dir = tempfile::tempdir().unwrap();
        let visits = write_file(
            dir.path(),
            "visits.csv",
            "patient_id,visit_date,codes,mortality_label\nA,0,X1,0\nA,notadate,X2,0\n",
        );
        let demo = write_file(dir.path(), "demo.csv", "patient_id,demographics\n");
        let err = load_cohort(&visits, &demo, None).unwrap_err();
        match err {
            Error::Parse { row, .. } => assert_eq!(row, 3),
            other => panic!("expected parse error, got {other}"),
        }
    }
}
