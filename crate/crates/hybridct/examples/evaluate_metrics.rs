//! Reproduce the reported metric tables from the four test-set confusion
//! matrices and render a full report (text table, JSON, SVG figures).

use hybridct::dataset::Label;
use hybridct::eval::{
    accuracy, auc, class_metrics, format_pct, roc_curve, weighted_average, ConfusionMatrix,
    EvalReport,
};
use hybridct::report::{comparison_table, metrics_table, render_report};

fn main() -> hybridct::Result<()> {
    // (model, tp, fp, fn, tn) with COVID as the positive class.
    let models = [
        ("vgg16", ConfusionMatrix::new(161, 18, 25, 169)),
        ("densenet121", ConfusionMatrix::new(170, 11, 16, 176)),
        ("mobilenetv2", ConfusionMatrix::new(171, 7, 15, 180)),
        ("hybrid", ConfusionMatrix::new(182, 0, 4, 187)),
    ];

    println!("{:<14} {:>9} {:>12} {:>10} {:>8}", "Model", "Accuracy", "W-Precision", "W-Recall", "W-F1");
    for (name, cm) in &models {
        let (covid, noncovid) = class_metrics(cm);
        let supports = [covid.support, noncovid.support];
        let wp = weighted_average(&[covid.precision.value, noncovid.precision.value], &supports)?;
        let wr = weighted_average(&[covid.recall.value, noncovid.recall.value], &supports)?;
        let wf = weighted_average(&[covid.f1.value, noncovid.f1.value], &supports)?;
        println!(
            "{name:<14} {:>9} {:>12} {:>10} {:>8}",
            format_pct(accuracy(cm)?),
            format_pct(wp),
            format_pct(wr),
            format_pct(wf)
        );
    }

    // ROC/AUC on a small score vector: positives {0.9, 0.4}, negatives {0.1, 0.6}.
    let y = vec![Label::Covid, Label::Covid, Label::NonCovid, Label::NonCovid];
    let scores = vec![0.9, 0.4, 0.1, 0.6];
    println!("\nROC points for scores {scores:?}:");
    for p in roc_curve(&y, &scores)? {
        println!("  threshold {:>8.2}: fpr {:.2}, tpr {:.2}", p.threshold, p.fpr, p.tpr);
    }
    println!("AUC: {}", auc(&y, &scores)?);

    // Render a complete report for the hybrid confusion matrix.
    let y_true: Vec<Label> = std::iter::repeat_n(Label::Covid, 186)
        .chain(std::iter::repeat_n(Label::NonCovid, 187))
        .collect();
    let scores: Vec<f64> = (0..186)
        .map(|i| if i < 182 { 0.95 } else { 0.3 })
        .chain((0..187).map(|_| 0.05))
        .collect();
    let y_pred: Vec<Label> = scores
        .iter()
        .map(|&s| if s > 0.5 { Label::Covid } else { Label::NonCovid })
        .collect();
    let report = EvalReport::from_predictions("hybrid", &y_true, &y_pred, &scores, "demo")?;
    println!("\n{}", metrics_table(&report));
    println!("{}", comparison_table(std::slice::from_ref(&report)));

    let out = std::env::temp_dir().join("hybridct-report-demo");
    render_report(&report, &out)?;
    println!("report files written under {}", out.display());
    Ok(())
}
