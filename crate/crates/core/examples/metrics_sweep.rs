//! Imbalance-aware metrics, a threshold sweep and a repeated-run summary.

use crossmodal_kd::metrics::{default_grid, evaluate, summarize, threshold_sweep, MetricsReport};

fn show(name: &str, r: &MetricsReport) {
    println!(
        "{name:<14} acc {:.3}  macro-F1 {:.3}  BA {:.3}  spec {:.3}  MCC {:.3}  PR-AUC {:.3}  pos-rate {:.3}",
        r.accuracy, r.macro_f1, r.balanced_accuracy, r.specificity, r.mcc, r.pr_auc, r.positive_rate
    );
}

fn main() -> crossmodal_kd::Result<()> {
    // Three positive images and one negative: the shape of a tiny validation split.
    let labels = [true, true, true, false];
    let collapsed = evaluate(&[0.91, 0.88, 0.97, 0.86], &labels, 0.5)?;
    let separating = evaluate(&[0.91, 0.88, 0.97, 0.12], &labels, 0.5)?;
    show("all-positive", &collapsed);
    show("separating", &separating);

    // Accuracy alone hides the collapse; the sweep shows where it stops.
    let curve = threshold_sweep(&[0.91, 0.88, 0.97, 0.86], &labels, &default_grid())?;
    print!("{}", curve.to_csv());

    let s = summarize(&[collapsed, collapsed, separating, separating])?;
    println!(
        "over 4 seeds: accuracy {:.3} ± {:.3}, macro-F1 {:.3} ± {:.3}",
        s.mean.accuracy, s.std.accuracy, s.mean.macro_f1, s.std.macro_f1
    );
    Ok(())
}
