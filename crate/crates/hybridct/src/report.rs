//! Report rendering: a plain-text metric table, a machine-readable JSON
//! report, and SVG figures for the confusion matrix and ROC curve.

use std::fmt::Write as _;
use std::path::Path;

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::eval::{format_pct, EvalReport};

/// Write `report.json`, `metrics.txt`, `confusion_matrix.svg`, and
/// `roc_curve.svg` under `out_dir`.
pub fn render_report(report: &EvalReport, out_dir: &Path) -> Result<()> {
    if report.roc.is_empty() {
        return Err(Error::Invalid("cannot render a report with an empty ROC curve".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;

    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Invalid(format!("serializing report: {e}")))?;
    let json_path = out_dir.join("report.json");
    std::fs::write(&json_path, json).map_err(Error::io(json_path))?;

    let table_path = out_dir.join("metrics.txt");
    std::fs::write(&table_path, metrics_table(report)).map_err(Error::io(table_path))?;

    let cm_path = out_dir.join("confusion_matrix.svg");
    std::fs::write(&cm_path, confusion_matrix_svg(report)).map_err(Error::io(cm_path))?;

    let roc_path = out_dir.join("roc_curve.svg");
    std::fs::write(&roc_path, roc_svg(report)).map_err(Error::io(roc_path))?;
    Ok(())
}

/// Read back a machine-readable report.
pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(path.to_path_buf())
        } else {
            Error::io(path)(e)
        }
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        file: path.display().to_string(),
        line: 0,
        msg: e.to_string(),
    })
}

fn class_name(label: Label) -> &'static str {
    match label {
        Label::Covid => "COVID",
        Label::NonCovid => "non-COVID",
    }
}

/// The per-model text table: summary row, class-wise block, confusion
/// counts, and AUC.
pub fn metrics_table(report: &EvalReport) -> String {
    let mut out = String::new();
    let cm = &report.confusion;
    writeln!(out, "Model: {}", report.model).unwrap();
    writeln!(out, "Samples: {}    Positive class: COVID", cm.total()).unwrap();
    writeln!(out).unwrap();
    writeln!(out, "Accuracy / Weighted Precision / Weighted Recall / Weighted F1").unwrap();
    writeln!(
        out,
        "{} / {} / {} / {}",
        format_pct(report.accuracy),
        format_pct(report.weighted.precision),
        format_pct(report.weighted.recall),
        format_pct(report.weighted.f1),
    )
    .unwrap();
    writeln!(out).unwrap();
    writeln!(out, "{:<12} {:>9} {:>9} {:>9} {:>9}", "Class", "Precision", "Recall", "F1", "Support").unwrap();
    for class in &report.per_class {
        writeln!(
            out,
            "{:<12} {:>9} {:>9} {:>9} {:>9}",
            class_name(class.label),
            format_pct(class.precision.value),
            format_pct(class.recall.value),
            format_pct(class.f1.value),
            class.support,
        )
        .unwrap();
    }
    writeln!(out).unwrap();
    writeln!(out, "Confusion matrix (rows = actual, columns = predicted)").unwrap();
    writeln!(out, "{:<12} {:>9} {:>9}", "", "COVID", "non-COVID").unwrap();
    writeln!(out, "{:<12} {:>9} {:>9}", "COVID", cm.tp, cm.fn_).unwrap();
    writeln!(out, "{:<12} {:>9} {:>9}", "non-COVID", cm.fp, cm.tn).unwrap();
    writeln!(out).unwrap();
    writeln!(out, "AUC: {:.4}", report.auc).unwrap();
    out
}

/// Side-by-side summary across models, one row per report.
pub fn comparison_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{:<14} {:>9} {:>12} {:>10} {:>8} {:>8}",
        "Model", "Accuracy", "W-Precision", "W-Recall", "W-F1", "AUC"
    )
    .unwrap();
    for r in reports {
        writeln!(
            out,
            "{:<14} {:>9} {:>12} {:>10} {:>8} {:>8.4}",
            r.model,
            format_pct(r.accuracy),
            format_pct(r.weighted.precision),
            format_pct(r.weighted.recall),
            format_pct(r.weighted.f1),
            r.auc,
        )
        .unwrap();
    }
    out
}

fn svg_header(width: u32, height: u32) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"Helvetica, Arial, sans-serif\">\n\
         <rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    )
}

/// 2x2 heat grid with counts; darker cells hold more samples.
fn confusion_matrix_svg(report: &EvalReport) -> String {
    let cm = &report.confusion;
    let cells = [
        (cm.tp, 0, 0, "TP"),
        (cm.fn_, 1, 0, "FN"),
        (cm.fp, 0, 1, "FP"),
        (cm.tn, 1, 1, "TN"),
    ];
    let max = cells.iter().map(|c| c.0).max().unwrap_or(1).max(1) as f64;
    let (cell, left, top) = (120u32, 110u32, 70u32);

    let mut svg = svg_header(left + 2 * cell + 40, top + 2 * cell + 60);
    writeln!(
        svg,
        "<text x=\"{}\" y=\"28\" font-size=\"16\" text-anchor=\"middle\">Confusion matrix: {}</text>",
        left + cell,
        report.model
    )
    .unwrap();
    for (count, col, row, tag) in cells {
        let x = left + col * cell;
        let y = top + row * cell;
        let intensity = (count as f64 / max * 180.0) as u8;
        let fill = format!("rgb({},{},{})", 240 - intensity, 244 - intensity / 2, 255);
        let text_fill = if intensity > 110 { "white" } else { "black" };
        writeln!(
            svg,
            "<rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"{fill}\" stroke=\"black\"/>"
        )
        .unwrap();
        writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-size=\"22\" text-anchor=\"middle\" fill=\"{text_fill}\">{count}</text>",
            x + cell / 2,
            y + cell / 2
        )
        .unwrap();
        writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\" fill=\"{text_fill}\">{tag}</text>",
            x + cell / 2,
            y + cell / 2 + 22
        )
        .unwrap();
    }
    for (i, name) in ["COVID", "non-COVID"].iter().enumerate() {
        let i = i as u32;
        writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{name}</text>",
            left + i * cell + cell / 2,
            top - 10
        )
        .unwrap();
        writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"end\">{name}</text>",
            left - 8,
            top + i * cell + cell / 2
        )
        .unwrap();
    }
    writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">predicted</text>",
        left + cell,
        top - 32
    )
    .unwrap();
    writeln!(
        svg,
        "<text x=\"18\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">actual</text>",
        top + cell,
        top + cell
    )
    .unwrap();
    svg.push_str("</svg>\n");
    svg
}

/// ROC polyline with the chance diagonal and the AUC in the legend.
fn roc_svg(report: &EvalReport) -> String {
    let (size, margin) = (360f64, 50f64);
    let plot = size - 2.0 * margin;
    let sx = |fpr: f64| margin + fpr * plot;
    let sy = |tpr: f64| size - margin - tpr * plot;

    let mut svg = svg_header(size as u32, size as u32);
    writeln!(
        svg,
        "<text x=\"{}\" y=\"24\" font-size=\"15\" text-anchor=\"middle\">ROC: {}</text>",
        size / 2.0,
        report.model
    )
    .unwrap();
    writeln!(
        svg,
        "<rect x=\"{margin}\" y=\"{margin}\" width=\"{plot}\" height=\"{plot}\" fill=\"none\" stroke=\"black\"/>"
    )
    .unwrap();
    writeln!(
        svg,
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"gray\" stroke-dasharray=\"5,4\"/>",
        sx(0.0),
        sy(0.0),
        sx(1.0),
        sy(1.0)
    )
    .unwrap();
    let points: Vec<String> = report
        .roc
        .iter()
        .map(|p| format!("{:.2},{:.2}", sx(p.fpr), sy(p.tpr)))
        .collect();
    writeln!(
        svg,
        "<polyline points=\"{}\" fill=\"none\" stroke=\"crimson\" stroke-width=\"2\"/>",
        points.join(" ")
    )
    .unwrap();
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">{tick:.2}</text>",
            sx(tick),
            size - margin + 16.0
        )
        .unwrap();
        writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\">{tick:.2}</text>",
            margin - 6.0,
            sy(tick) + 3.0
        )
        .unwrap();
    }
    writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">False positive rate</text>",
        size / 2.0,
        size - 12.0
    )
    .unwrap();
    writeln!(
        svg,
        "<text x=\"16\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">True positive rate</text>",
        size / 2.0,
        size / 2.0
    )
    .unwrap();
    writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"crimson\">AUC = {:.4}</text>",
        margin + 14.0,
        size - margin - 12.0,
        report.auc
    )
    .unwrap();
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{roc_curve, ConfusionMatrix};

    fn hybrid_report() -> EvalReport {
        let cm = ConfusionMatrix::new(182, 0, 4, 187);
        // A curve consistent with near-perfect separation.
        let y: Vec<Label> = std::iter::repeat_n(Label::Covid, 186)
            .chain(std::iter::repeat_n(Label::NonCovid, 187))
            .collect();
        let scores: Vec<f64> = (0..186)
            .map(|i| if i < 182 { 0.9 } else { 0.2 })
            .chain((0..187).map(|_| 0.1))
            .collect();
        let roc = roc_curve(&y, &scores).unwrap();
        let auc = crate::eval::auc_of_curve(&roc);
        EvalReport::from_parts("hybrid", cm, roc, auc, "hash")
    }

    #[test]
    fn table_contains_reference_summary_row() {
        let table = metrics_table(&hybrid_report());
        assert!(table.contains("98.93 / 98.95 / 98.93 / 98.93"), "{table}");
        assert!(table.contains("COVID"));
        assert!(table.contains("186"));
    }

    #[test]
    fn render_writes_all_artifacts_and_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let report = hybrid_report();
        render_report(&report, dir.path()).unwrap();
        for name in ["report.json", "metrics.txt", "confusion_matrix.svg", "roc_curve.svg"] {
            assert!(dir.path().join(name).is_file(), "{name} missing");
        }
        let back = read_report(&dir.path().join("report.json")).unwrap();
        assert_eq!(back, report);

        let svg = std::fs::read_to_string(dir.path().join("roc_curve.svg")).unwrap();
        assert!(svg.contains("AUC ="));
    }

    #[test]
    fn empty_roc_is_a_render_error() {
        let mut report = hybrid_report();
        report.roc.clear();
        let dir = tempfile::tempdir().unwrap();
        assert!(render_report(&report, dir.path()).is_err());
    }

    #[test]
    fn comparison_lists_each_model() {
        let mut a = hybrid_report();
        a.model = "vgg16".into();
        let b = hybrid_report();
        let table = comparison_table(&[a, b]);
        assert!(table.contains("vgg16"));
        assert!(table.contains("hybrid"));
    }
}
