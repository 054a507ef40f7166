//! Minimal SVG emission for report figures: risk gauge, visit-attention
//! bars, and per-disease contribution trajectories. Side-effect-only.

use std::io::Write;
use std::path::Path;

use super::AttributionReport;
use crate::error::Result;

const PALETTE: &[&str] = &[
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn write_svg(path: &Path, body: &str, width: u32, height: u32) -> Result<()> {
    let doc = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n{body}</svg>\n"
    );
    std::fs::File::create(path)?.write_all(doc.as_bytes())?;
    Ok(())
}

/// Horizontal gauge with the risk score marked against the four strata.
pub fn write_risk_gauge_svg(report: &AttributionReport, path: &Path) -> Result<()> {
    let (w, h) = (420u32, 90u32);
    let bar_w = 380.0;
    let mut body = String::new();
    let bands = [
        (0.0, 0.20, "#7cb342"),
        (0.20, 0.40, "#fdd835"),
        (0.40, 0.70, "#fb8c00"),
        (0.70, 1.0, "#e53935"),
    ];
    for (lo, hi, color) in bands {
        body.push_str(&format!(
            "<rect x=\"{:.1}\" y=\"35\" width=\"{:.1}\" height=\"20\" fill=\"{color}\"/>\n",
            20.0 + lo * bar_w,
            (hi - lo) * bar_w
        ));
    }
    let x = 20.0 + report.risk * bar_w;
    body.push_str(&format!(
        "<line x1=\"{x:.1}\" y1=\"25\" x2=\"{x:.1}\" y2=\"65\" stroke=\"black\" stroke-width=\"2\"/>\n"
    ));
    body.push_str(&format!(
        "<text x=\"20\" y=\"18\" font-size=\"12\">patient {} risk {:.3} ({:?})</text>\n",
        report.patient_id, report.risk, report.category
    ));
    write_svg(path, &body, w, h)
}

/// One bar per visit, height proportional to attention weight.
pub fn write_attention_svg(report: &AttributionReport, path: &Path) -> Result<()> {
    let t = report.alpha.len().max(1);
    let (w, h) = (60 + 60 * t as u32, 180u32);
    let max = report.alpha.iter().copied().fold(f64::MIN_POSITIVE, f64::max);
    let mut body = String::new();
    for (i, &a) in report.alpha.iter().enumerate() {
        let bar_h = 120.0 * a / max;
        let x = 40.0 + 60.0 * i as f64;
        body.push_str(&format!(
            "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"40\" height=\"{bar_h:.1}\" fill=\"{}\"/>\n",
            150.0 - bar_h,
            PALETTE[0]
        ));
        body.push_str(&format!(
            "<text x=\"{:.1}\" y=\"168\" font-size=\"11\">t{i}</text>\n",
            x + 12.0
        ));
        body.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{:.1}\" font-size=\"10\">{a:.2}</text>\n",
            144.0 - bar_h
        ));
    }
    body.push_str("<text x=\"10\" y=\"16\" font-size=\"12\">visit attention</text>\n");
    write_svg(path, &body, w, h)
}

/// Contribution trajectories for the top-ranked diseases.
pub fn write_trajectory_svg(report: &AttributionReport, top: usize, path: &Path) -> Result<()> {
    let (w, h) = (460u32, 220u32);
    let shown: Vec<_> = report.attributions.iter().take(top).collect();
    let t_len = shown
        .first()
        .map(|a| a.contributions.len())
        .unwrap_or(1)
        .max(1);
    let peak = shown
        .iter()
        .flat_map(|a| a.contributions.iter().copied())
        .fold(1e-12f64, f64::max);
    let x_at = |t: usize| 50.0 + 360.0 * t as f64 / (t_len.max(2) - 1) as f64;
    let y_at = |c: f64| 180.0 - 150.0 * c / peak;
    let mut body = String::from(
        "<line x1=\"50\" y1=\"180\" x2=\"410\" y2=\"180\" stroke=\"#555\"/>\n",
    );
    for (k, attribution) in shown.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let points: Vec<String> = attribution
            .contributions
            .iter()
            .enumerate()
            .map(|(t, &c)| format!("{:.1},{:.1}", x_at(t), y_at(c)))
            .collect();
        body.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            points.join(" ")
        ));
        body.push_str(&format!(
            "<text x=\"50\" y=\"{}\" font-size=\"11\" fill=\"{color}\">{} ({:?}, peak t{})</text>\n",
            16 + 13 * k,
            attribution.code,
            attribution.trend,
            attribution.t_peak
        ));
    }
    write_svg(path, &body, w, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interpret::{
        DiseaseAttribution, ReportMeta, RiskCategory, SeverityLevel, Trend,
    };

    fn report() -> AttributionReport {
        AttributionReport {
            patient_id: "P1".into(),
            window_start: 0,
            risk: 0.63,
            category: RiskCategory::High,
            alpha: vec![0.2, 0.3, 0.5],
            attributions: vec![DiseaseAttribution {
                code: "A1".into(),
                contributions: vec![0.1, 0.3, 0.6],
                cumulative: 1.0,
                normalized: 1.0,
                severity: SeverityLevel::Severe,
                chronic: true,
                trend: Trend::Increasing,
                t_peak: 2,
                unknown_code: false,
            }],
            uninformative: false,
            meta: ReportMeta {
                checkpoint_id: "test".into(),
                threshold: 0.5,
            },
        }
    }

    #[test]
    fn svg_files_are_emitted() {
        let dir = tempfile::tempdir().unwrap();
        let r = report();
        for (name, f) in [
            ("gauge.svg", write_risk_gauge_svg as fn(&AttributionReport, &Path) -> Result<()>),
            ("attention.svg", write_attention_svg),
        ] {
            let path = dir.path().join(name);
            f(&r, &path).unwrap();
            let text = std::fs::read_to_string(&path).unwrap();
            assert!(text.starts_with("<svg"));
        }
        let path = dir.path().join("trajectory.svg");
        write_trajectory_svg(&r, 5, &path).unwrap();
        assert!(std::fs::read_to_string(&path).unwrap().contains("polyline"));
    }
}
