use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{EvaluationReport, MetricsError};

pub const CSV_HEADER: &str = "model,partition,dice,sens,spec,auc,accu,preci,f1";

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportFormat {
    Csv,
    SvgRoc,
    SvgBars,
}

impl ExportFormat {
    pub fn file_name(self) -> &'static str {
        match self {
            ExportFormat::Csv => "metrics.csv",
            ExportFormat::SvgRoc => "roc.svg",
            ExportFormat::SvgBars => "bars.svg",
        }
    }
}

impl FromStr for ExportFormat {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ExportFormat::Csv),
            "svg_roc" | "svg-roc" | "roc" => Ok(ExportFormat::SvgRoc),
            "svg_bars" | "svg-bars" | "bars" => Ok(ExportFormat::SvgBars),
            other => Err(MetricsError::UnsupportedFormat(other.to_string())),
        }
    }
}

/// One metrics row, in table column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub model: String,
    pub partition: String,
    pub dice: Option<f64>,
    pub sens: f64,
    pub spec: f64,
    pub auc: f64,
    pub accu: f64,
    pub preci: f64,
    pub f1: f64,
}

impl From<&EvaluationReport> for CsvRow {
    fn from(r: &EvaluationReport) -> Self {
        Self {
            model: r.model.clone(),
            partition: r.partition.clone(),
            dice: r.dice,
            sens: r.sens,
            spec: r.spec,
            auc: r.auc,
            accu: r.accu,
            preci: r.preci,
            f1: r.f1,
        }
    }
}

pub fn export(reports: &[EvaluationReport], format: ExportFormat) -> Result<String, MetricsError> {
    match format {
        ExportFormat::Csv => export_csv(reports),
        ExportFormat::SvgRoc => Ok(export_roc_svg(reports)),
        ExportFormat::SvgBars => Ok(export_bars_svg(reports)),
    }
}

pub fn export_csv(reports: &[EvaluationReport]) -> Result<String, MetricsError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if reports.is_empty() {
        w.write_record(CSV_HEADER.split(','))?;
    }
    for r in reports {
        w.serialize(CsvRow::from(r))?;
    }
    let bytes = w.into_inner().map_err(|e| MetricsError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>, MetricsError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(MetricsError::from)).collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// ROC curves of several reports on one plot. Curves are drawn in unit
/// coordinates inside a transformed group, so `points` holds raw (fpr, tpr).
pub fn export_roc_svg(reports: &[EvaluationReport]) -> String {
    let (w, h, m, side) = (420, 400, 50, 300);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r##"<rect width="{w}" height="{h}" fill="#ffffff"/>"##);
    let _ = writeln!(
        s,
        r##"<rect x="{m}" y="{m}" width="{side}" height="{side}" fill="none" stroke="#444444"/>"##
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">False positive rate</text>"#,
        m + side / 2,
        m + side + 30
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 15 {})">True positive rate</text>"#,
        m + side / 2,
        m + side / 2
    );
    let _ = writeln!(
        s,
        r#"<g class="curves" transform="translate({m},{}) scale({side},-{side})">"#,
        m + side
    );
    let _ = writeln!(
        s,
        r##"<polyline class="chance" points="0,0 1,1" fill="none" stroke="#bbbbbb" stroke-dasharray="4 4" vector-effect="non-scaling-stroke"/>"##
    );
    for (i, r) in reports.iter().enumerate() {
        let points: Vec<String> = r.roc_points.iter().map(|p| format!("{},{}", p.fpr, p.tpr)).collect();
        let _ = writeln!(
            s,
            r#"<polyline class="roc" data-model="{}" points="{}" fill="none" stroke="{}" stroke-width="2" vector-effect="non-scaling-stroke"/>"#,
            escape(&r.model),
            points.join(" "),
            PALETTE[i % PALETTE.len()]
        );
    }
    s.push_str("</g>\n");
    for (i, r) in reports.iter().enumerate() {
        let y = m + side - 20 - 16 * (reports.len() - 1 - i) as i32;
        let _ = writeln!(
            s,
            r#"<text class="legend" x="{}" y="{y}" font-size="11" fill="{}">{} ({}) AUC {:.3}</text>"#,
            m + side / 2,
            PALETTE[i % PALETTE.len()],
            escape(&r.model),
            escape(&r.partition),
            r.auc
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Grouped bar chart: one group per report with sensitivity, specificity,
/// accuracy and AUC bars.
pub fn export_bars_svg(reports: &[EvaluationReport]) -> String {
    const METRICS: [(&str, &str); 4] = [("sens", "Sensitivity"), ("spec", "Specificity"), ("accu", "Accuracy"), ("auc", "AUC")];
    let bar = 18;
    let gap = 24;
    let group_w = bar * METRICS.len() as i32 + gap;
    let (m, plot_h) = (50, 240);
    let w = 2 * m + group_w * reports.len().max(1) as i32 + 120;
    let h = plot_h + 2 * m + 20;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r##"<rect width="{w}" height="{h}" fill="#ffffff"/>"##);
    let _ = writeln!(
        s,
        r##"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="#444444"/>"##,
        m + plot_h,
        w - m - 110,
        m + plot_h
    );
    for (gi, r) in reports.iter().enumerate() {
        let x0 = m + gap / 2 + gi as i32 * group_w;
        let _ = writeln!(s, r#"<g class="model" data-model="{}">"#, escape(&r.model));
        for (k, (key, _)) in METRICS.iter().enumerate() {
            let v = match *key {
                "sens" => r.sens,
                "spec" => r.spec,
                "accu" => r.accu,
                _ => r.auc,
            };
            let bh = (v.clamp(0.0, 1.0) * plot_h as f64).round() as i32;
            let _ = writeln!(
                s,
                r#"<rect class="bar" data-metric="{key}" data-value="{v}" x="{}" y="{}" width="{bar}" height="{bh}" fill="{}"/>"#,
                x0 + k as i32 * bar,
                m + plot_h - bh,
                PALETTE[k]
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">{}</text>"#,
            x0 + bar * 2,
            m + plot_h + 16,
            escape(&r.model)
        );
        s.push_str("</g>\n");
    }
    for (k, (_, label)) in METRICS.iter().enumerate() {
        let y = m + 14 + 16 * k as i32;
        let x = w - m - 100;
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{y}" font-size="11">{label}</text>"#,
            y - 9,
            PALETTE[k],
            x + 14
        );
    }
    s.push_str("</svg>\n");
    s
}
