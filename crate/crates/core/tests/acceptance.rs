//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Runs without the libtest harness so every line is shown.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use crossmodal_kd::cohort::{ingest_metadata, normalize_records, ColumnMap, Label, Manifests};
use crossmodal_kd::experiments::{
    Harness, MatrixKind, MatrixResult, MatrixSettings, Regime, Variant,
};
use crossmodal_kd::losses::{
    total_loss, ClassWeights, DistillParams, FeatureMap, HintAdapter, LossInputs, Mechanism,
};
use crossmodal_kd::metrics::{
    default_grid, evaluate, pr_auc, summarize, threshold_sweep, MetricsReport,
};
use crossmodal_kd::reporting::{export_figure, FigureKind};
use crossmodal_kd::splits::{fixed_split, resample_plan};
use crossmodal_kd::synthetic::SynthConfig;
use crossmodal_kd::trainer::TrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{cli_ok, cli_workspace, find_files, record_manifest, synth_manifests};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit_s: f64, what: &str) -> Result<(), String> {
    ensure(
        elapsed.as_secs_f64() < limit_s,
        format!(
            "{what} took {:.1}s, limit {limit_s}s",
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------
// Metric oracle

struct Oracle {
    accuracy: f64,
    macro_f1: f64,
    balanced_accuracy: f64,
    sensitivity: f64,
    specificity: f64,
    mcc: f64,
    pr_auc: f64,
    positive_rate: f64,
}

fn mean_of(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// F1 of one class from precision and recall; 0 wherever either is undefined.
fn class_f1(pred: &[bool], truth: &[bool], class: bool) -> f64 {
    let predicted = pred.iter().filter(|&&p| p == class).count();
    let actual = truth.iter().filter(|&&t| t == class).count();
    let hits = pred
        .iter()
        .zip(truth)
        .filter(|(&p, &t)| p == class && t == class)
        .count();
    if hits == 0 {
        return 0.0;
    }
    let precision = hits as f64 / predicted as f64;
    let recall = hits as f64 / actual as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Pearson correlation of the 0/1 prediction and label vectors.
fn pearson(pred: &[bool], truth: &[bool]) -> f64 {
    let x: Vec<f64> = pred.iter().map(|&b| b as u8 as f64).collect();
    let y: Vec<f64> = truth.iter().map(|&b| b as u8 as f64).collect();
    let (mx, my) = (mean_of(x.iter().copied()), mean_of(y.iter().copied()));
    let cov: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

/// Mean, over positives, of the precision among items scoring at least as high.
fn average_precision(scores: &[f64], truth: &[bool]) -> f64 {
    mean_of(scores.iter().zip(truth).filter(|(_, &t)| t).map(|(&s, _)| {
        let above: Vec<bool> = scores
            .iter()
            .zip(truth)
            .filter(|(&o, _)| o >= s)
            .map(|(_, &t)| t)
            .collect();
        above.iter().filter(|&&t| t).count() as f64 / above.len() as f64
    }))
}

fn oracle(scores: &[f64], truth: &[bool], threshold: f64) -> Oracle {
    let pred: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
    let recall_of = |class: bool| {
        mean_of(
            pred.iter()
                .zip(truth)
                .filter(|(_, &t)| t == class)
                .map(|(&p, _)| (p == class) as u8 as f64),
        )
    };
    let (sensitivity, specificity) = (recall_of(true), recall_of(false));
    Oracle {
        accuracy: mean_of(pred.iter().zip(truth).map(|(p, t)| (p == t) as u8 as f64)),
        macro_f1: (class_f1(&pred, truth, true) + class_f1(&pred, truth, false)) / 2.0,
        balanced_accuracy: (sensitivity + specificity) / 2.0,
        sensitivity,
        specificity,
        mcc: pearson(&pred, truth),
        pr_auc: if truth.contains(&true) {
            average_precision(scores, truth)
        } else {
            0.0
        },
        positive_rate: mean_of(pred.iter().map(|&p| p as u8 as f64)),
    }
}

fn compare(scores: &[f64], truth: &[bool], threshold: f64) -> Result<(), String> {
    let got = evaluate(scores, truth, threshold).map_err(|e| e.to_string())?;
    let want = oracle(scores, truth, threshold);
    let pairs = [
        ("accuracy", got.accuracy, want.accuracy),
        ("macro_f1", got.macro_f1, want.macro_f1),
        (
            "balanced_accuracy",
            got.balanced_accuracy,
            want.balanced_accuracy,
        ),
        ("sensitivity", got.sensitivity, want.sensitivity),
        ("specificity", got.specificity, want.specificity),
        ("mcc", got.mcc, want.mcc),
        ("pr_auc", got.pr_auc, want.pr_auc),
        ("positive_rate", got.positive_rate, want.positive_rate),
    ];
    for (name, g, w) in pairs {
        if (g - w).abs() > 1e-9 {
            return Err(format!(
                "{name}: {g} vs oracle {w} on scores {scores:?} labels {truth:?} t={threshold}"
            ));
        }
    }
    if truth.contains(&true) {
        let ap = pr_auc(scores, truth).map_err(|e| e.to_string())?;
        if (ap - want.pr_auc).abs() > 1e-9 {
            return Err(format!("pr_auc: {ap} vs oracle {}", want.pr_auc));
        }
    }
    Ok(())
}

fn metric_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut cases = 0;
    for n in 1..=6usize {
        for label_bits in 0..(1u32 << n) {
            for pred_bits in 0..(1u32 << n) {
                let truth: Vec<bool> = (0..n).map(|i| label_bits >> i & 1 == 1).collect();
                // Scores on a coarse grid so ties are common; the bit decides the side of 0.5.
                let scores: Vec<f64> = (0..n)
                    .map(|i| {
                        let k = rng.gen_range(0..10) as f64 / 20.0;
                        if pred_bits >> i & 1 == 1 {
                            0.5 + k
                        } else {
                            k
                        }
                    })
                    .collect();
                compare(&scores, &truth, 0.5)?;
                cases += 1;
            }
        }
    }
    for _ in 0..200 {
        let n = rng.gen_range(1..=50);
        let truth: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.6)).collect();
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.gen_range(0..=20) as f64 / 20.0)
            .collect();
        let threshold = rng.gen_range(0..=20) as f64 / 20.0;
        compare(&scores, &truth, threshold)?;
        cases += 1;
    }
    within(start.elapsed(), 5.0, "oracle comparison")?;
    Ok(format!(
        "{cases} instances agree within 1e-9 in {:.2}s",
        start.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------

fn degenerate_predictor() -> Outcome {
    let r = evaluate(&[1.0; 4], &[true, true, true, false], 0.5).map_err(|e| e.to_string())?;
    for (name, got, want) in [
        ("accuracy", r.accuracy, 0.750),
        ("macro_f1", r.macro_f1, 0.4286),
        ("balanced_accuracy", r.balanced_accuracy, 0.500),
        ("specificity", r.specificity, 0.000),
        ("mcc", r.mcc, 0.000),
    ] {
        ensure(
            (got - want).abs() <= 1e-3,
            format!("{name} = {got}, expected {want}"),
        )?;
    }
    Ok(format!(
        "acc {:.3} macro-F1 {:.4} BA {:.3} spec {:.3} MCC {:.3}",
        r.accuracy, r.macro_f1, r.balanced_accuracy, r.specificity, r.mcc
    ))
}

fn summary_reproduction() -> Outcome {
    let labels = [true, true, true, false];
    let collapsed = evaluate(&[0.9; 4], &labels, 0.5).map_err(|e| e.to_string())?;
    let perfect = evaluate(&[0.9, 0.8, 0.7, 0.1], &labels, 0.5).map_err(|e| e.to_string())?;
    let s = summarize(&[collapsed, collapsed, perfect, perfect]).map_err(|e| e.to_string())?;
    for (name, got, want) in [
        ("accuracy mean", s.mean.accuracy, 0.875),
        ("accuracy std", s.std.accuracy, 0.144),
        ("macro_f1 mean", s.mean.macro_f1, 0.714),
        ("macro_f1 std", s.std.macro_f1, 0.330),
    ] {
        ensure(
            (got - want).abs() <= 1e-3,
            format!("{name} = {got}, expected {want}"),
        )?;
    }
    Ok(format!(
        "accuracy {:.3} ± {:.3}, macro-F1 {:.3} ± {:.3}",
        s.mean.accuracy, s.std.accuracy, s.mean.macro_f1, s.std.macro_f1
    ))
}

// ---------------------------------------------------------------------------
// Gradient check

struct Instance {
    student: Vec<[f64; 2]>,
    teacher: Vec<[f64; 2]>,
    labels: Vec<usize>,
    s_tap: FeatureMap,
    t_tap: FeatureMap,
    adapter: HintAdapter,
    params: DistillParams,
    weights: ClassWeights,
}

impl Instance {
    fn random(mechanism: Mechanism, rng: &mut ChaCha8Rng) -> Self {
        let n = rng.gen_range(1..=4);
        let logit = |rng: &mut ChaCha8Rng| [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
        let (cs, ct) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let (h, w) = (rng.gen_range(2..=4), rng.gen_range(2..=4));
        let (th, tw) = (rng.gen_range(2..=5), rng.gen_range(2..=5));
        let fm = |shape: [usize; 4], rng: &mut ChaCha8Rng| {
            FeatureMap::new(
                shape,
                (0..shape.iter().product())
                    .map(|_| rng.gen_range(-1.5..1.5))
                    .collect(),
            )
        };
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        Self {
            student: (0..n).map(|_| logit(rng)).collect(),
            teacher: (0..n).map(|_| logit(rng)).collect(),
            labels,
            s_tap: fm([n, cs, h, w], rng),
            t_tap: fm([n, ct, th, tw], rng),
            adapter: HintAdapter::new(cs, ct, rng),
            params: DistillParams {
                temperature: rng.gen_range(1.0..6.0),
                alpha: rng.gen_range(0.0..1.0),
                mechanism,
                mechanism_weight: rng.gen_range(0.1..1.0),
            },
            weights: ClassWeights([rng.gen_range(0.3..3.0), rng.gen_range(0.3..3.0)]),
        }
    }

    fn loss(&self) -> crossmodal_kd::losses::TotalLoss {
        total_loss(
            LossInputs {
                student_logits: &self.student,
                teacher_logits: Some(&self.teacher),
                labels: &self.labels,
                student_tap: Some(&self.s_tap),
                teacher_tap: Some(&self.t_tap),
            },
            &self.params,
            self.weights,
            Some(&self.adapter),
        )
        .expect("loss")
    }

    fn set_adapter(&mut self, bias: bool, j: usize, v: f32) {
        let p = if bias {
            &mut self.adapter.bias
        } else {
            &mut self.adapter.weight
        };
        p.value[j] = v;
    }

    /// Relative error of the full analytic gradient against central differences.
    fn relative_error(&mut self) -> f64 {
        let base = self.loss();
        let mech = self.params.mechanism;
        let mut analytic: Vec<f64> = base.d_logits.iter().flatten().copied().collect();
        let mut numeric = Vec::new();
        let eps = 1e-5;
        for i in 0..self.student.len() {
            for k in 0..2 {
                let orig = self.student[i][k];
                self.student[i][k] = orig + eps;
                let up = self.loss().value;
                self.student[i][k] = orig - eps;
                let down = self.loss().value;
                self.student[i][k] = orig;
                numeric.push((up - down) / (2.0 * eps));
            }
        }
        if mech.uses_tap() {
            analytic.extend(&base.d_student_tap.as_ref().expect("tap gradient").data);
            for j in 0..self.s_tap.data.len() {
                let orig = self.s_tap.data[j];
                self.s_tap.data[j] = orig + eps;
                let up = self.loss().value;
                self.s_tap.data[j] = orig - eps;
                let down = self.loss().value;
                self.s_tap.data[j] = orig;
                numeric.push((up - down) / (2.0 * eps));
            }
        }
        if mech == Mechanism::FeatureHint {
            let (dw, db) = base.d_adapter.as_ref().expect("adapter gradient");
            analytic.extend(dw);
            analytic.extend(db);
            // Adapter parameters are f32; the hint term is quadratic in them, so a
            // wide step is exact up to rounding. The realized step is the divisor.
            for bias in [false, true] {
                let len = if bias {
                    self.adapter.bias.len()
                } else {
                    self.adapter.weight.len()
                };
                for j in 0..len {
                    let orig = if bias {
                        self.adapter.bias.value[j]
                    } else {
                        self.adapter.weight.value[j]
                    };
                    let (hi, lo) = (orig + 1e-2, orig - 1e-2);
                    self.set_adapter(bias, j, hi);
                    let up = self.loss().value;
                    self.set_adapter(bias, j, lo);
                    let down = self.loss().value;
                    self.set_adapter(bias, j, orig);
                    numeric.push((up - down) / (hi as f64 - lo as f64));
                }
            }
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        assert_eq!(analytic.len(), numeric.len());
        norm(&diff) / norm(&analytic).max(norm(&numeric)).max(1e-12)
    }
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = [0.0f64; 4];
    for i in 0..100 {
        let m = i % 4;
        let mut inst = Instance::random(Mechanism::ALL[m], &mut rng);
        let err = inst.relative_error();
        worst[m] = worst[m].max(err);
        ensure(
            err < 1e-4,
            format!(
                "instance {i} ({:?}): relative error {err:e}",
                Mechanism::ALL[m]
            ),
        )?;
    }
    within(start.elapsed(), 30.0, "gradient check")?;
    Ok(format!(
        "100 instances, worst relative error none {:.1e} logit-kd {:.1e} attention {:.1e} hint {:.1e}",
        worst[0], worst[1], worst[2], worst[3]
    ))
}

// ---------------------------------------------------------------------------

fn split_invariants() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let patients: Vec<(usize, Label)> = (0..20)
        .map(|p| {
            (
                rng.gen_range(1..=3),
                if p % 3 == 0 {
                    Label::Negative
                } else {
                    Label::Positive
                },
            )
        })
        .collect();
    let m = record_manifest(&patients);
    let by_patient = |ids: &[usize]| -> BTreeSet<&str> {
        ids.iter()
            .map(|&i| m.records[i].patient_id.as_str())
            .collect()
    };
    for seed in 0..1000 {
        let s = fixed_split(&m, 0.2, seed).map_err(|e| e.to_string())?;
        let (tp, vp) = (by_patient(&s.train_indices), by_patient(&s.val_indices));
        ensure(
            tp.is_disjoint(&vp),
            format!("seed {seed}: patient in both sides"),
        )?;
        ensure(
            s.train_indices.len() + s.val_indices.len() == m.len(),
            format!("seed {seed}: images lost or duplicated"),
        )?;
    }
    for plan_seed in 0..1000u64 {
        let plan = resample_plan(&m, 8, 5, 1, plan_seed * 8).map_err(|e| e.to_string())?;
        for s in &plan.splits {
            let labels: Vec<Label> = s
                .val_patients
                .iter()
                .map(|p| m.records.iter().find(|r| &r.patient_id == p).unwrap().label)
                .collect();
            let pos = labels.iter().filter(|l| l.is_positive()).count();
            ensure(
                pos == 4 && labels.len() == 5,
                format!(
                    "plan {plan_seed} {}: {pos} positive of {}",
                    s.id,
                    labels.len()
                ),
            )?;
            ensure(
                by_patient(&s.train_indices)
                    .is_disjoint(&s.val_patients.iter().map(String::as_str).collect()),
                "resample leakage",
            )?;
        }
    }
    within(start.elapsed(), 10.0, "split checks")?;
    Ok(format!(
        "1000 splits leak-free, 1000 plans all (4+, 1-) in {:.2}s",
        start.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// Pipeline-level criteria

const SMALL_CLI_CONFIG: &str = "\
[synth]
n_patients = 20
image_size = 64
[train]
input_size = 64
epochs = 3
";

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    cli_workspace(d, SMALL_CLI_CONFIG);
    let mut observed = Vec::new();
    for out in ["work_a", "work_b"] {
        cli_ok(
            &[
                "ingest",
                "--csv",
                "cohort/metadata.csv",
                "--images",
                "cohort/images",
                "--out",
                out,
                "--config",
                "exp.toml",
            ],
            d,
        );
        cli_ok(
            &[
                "train", "--seed", "42", "--out", out, "--config", "exp.toml",
            ],
            d,
        );
        let preds = find_files(&d.join(out), "predictions.csv");
        let weights = find_files(&d.join(out), "weights.cbor");
        ensure(
            preds.len() == 1 && weights.len() == 1,
            format!("{out}: expected one run, found {}", preds.len()),
        )?;
        let p = fs::read(&preds[0]).unwrap();
        let w = crossmodal_kd::reporting::sha256_hex(&fs::read(&weights[0]).unwrap());
        let manifest = fs::read_to_string(d.join(out).join("manifest.json")).unwrap();
        ensure(
            manifest.contains(&w),
            format!("{out}: weights digest missing from manifest.json"),
        )?;
        observed.push((p, w));
    }
    ensure(observed[0].0 == observed[1].0, "prediction files differ")?;
    ensure(observed[0].1 == observed[1].1, "weight digests differ")?;
    Ok(format!(
        "predictions identical, weights sha256 {}…",
        &observed[0].1[..12]
    ))
}

const MATRIX_CLI_CONFIG: &str = "\
[synth]
n_patients = 40
image_size = 64
[train]
input_size = 64
epochs = 5
[experiment]
seeds = [42]
";

fn read_matrix(root: &Path, name: &str) -> Result<MatrixResult, String> {
    let text = fs::read_to_string(root.join("summaries").join(format!("{name}.json")))
        .map_err(|e| e.to_string())?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn resampled_matrix() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    cli_workspace(d, MATRIX_CLI_CONFIG);
    let start = Instant::now();
    cli_ok(
        &[
            "matrix",
            "--regime",
            "resampled",
            "--out",
            "work",
            "--config",
            "exp.toml",
        ],
        d,
    );
    let elapsed = start.elapsed();
    let m = read_matrix(&d.join("work"), "resampled_matrix")?;
    let names: Vec<&str> = m.specs.iter().map(|s| s.spec.name.as_str()).collect();
    let expected: Vec<&str> = Variant::RESAMPLED_MATRIX
        .iter()
        .map(|v| v.as_str())
        .collect();
    ensure(names == expected, format!("specs {names:?}"))?;
    for s in &m.specs {
        let splits: BTreeSet<&str> = s.runs.iter().map(|r| r.split_id.as_str()).collect();
        ensure(
            s.runs.len() == 8 && splits.len() == 8,
            format!("{}: {} runs", s.spec.name, s.runs.len()),
        )?;
    }
    m.check_same_case().map_err(|e| e.to_string())?;
    let audit = cli_ok(&["audit", "work"], d);
    within(elapsed, 900.0, "resampled matrix")?;
    Ok(format!(
        "7 specs x 8 resamples, same-case ok, {} ({:.0}s)",
        audit.trim(),
        elapsed.as_secs_f64()
    ))
}

fn student_ba(manifests: &Manifests, variant: Variant, train: &TrainConfig) -> Result<f64, String> {
    let settings = MatrixSettings {
        seeds: vec![42],
        ..MatrixSettings::default()
    };
    let h = Harness::new(manifests, train.clone(), settings.clone());
    let r = h
        .run_single(settings.preset(variant, Regime::FixedSplit))
        .map_err(|e| e.to_string())?;
    Ok(r.specs[0].summary.mean.balanced_accuracy)
}

fn modality_signal() -> Outcome {
    let train = TrainConfig {
        input_size: 64,
        ..TrainConfig::default()
    };
    let cohort = |xray: f64, ct: f64| SynthConfig {
        n_patients: 200,
        image_size: 64,
        xray_signal: xray,
        ct_signal: ct,
        seed: 8,
        ..SynthConfig::default()
    };
    let a = tempfile::tempdir().unwrap();
    let xray_rich = synth_manifests(a.path(), &cohort(0.35, 0.0));
    let s1 = student_ba(&xray_rich, Variant::StudentOnly, &train)?;
    let b = tempfile::tempdir().unwrap();
    let ct_rich = synth_manifests(b.path(), &cohort(0.0, 0.35));
    let s2 = student_ba(&ct_rich, Variant::StudentOnly, &train)?;
    let t2 = student_ba(&ct_rich, Variant::TeacherOnlyCt, &train)?;
    let detail = format!(
        "X-ray signal: student BA {s1:.3}; CT signal: student BA {s2:.3}, CT teacher BA {t2:.3}"
    );
    ensure(s1 > 0.9 && s2 <= 0.6 && t2 > 0.9, detail.clone())?;
    Ok(detail)
}

fn grid_and_progressive() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    cli_workspace(d, MATRIX_CLI_CONFIG);
    cli_ok(
        &["ablate", "grid", "--out", "work", "--config", "exp.toml"],
        d,
    );
    let work = d.join("work");
    let grid = read_matrix(&work, "grid_ablation")?;
    ensure(grid.kind == MatrixKind::Grid, "wrong matrix kind")?;
    let cells = grid.grid_cells().map_err(|e| e.to_string())?;
    let values: Vec<f64> = cells.macro_f1.iter().flatten().copied().collect();
    ensure(
        cells.temperatures.len() == 3 && cells.alphas.len() == 3 && values.len() == 9,
        format!("grid {}x{}", cells.temperatures.len(), cells.alphas.len()),
    )?;
    ensure(
        values.iter().all(|v| v.is_finite()),
        format!("non-finite cell in {values:?}"),
    )?;
    let svg =
        fs::read_to_string(work.join("summaries/grid_ablation.svg")).map_err(|e| e.to_string())?;
    ensure(
        svg.matches("class=\"cell\"").count() == 9,
        "heatmap does not hold 9 cells",
    )?;
    ensure(
        svg == export_figure(&grid, FigureKind::GridHeatmap).map_err(|e| e.to_string())?,
        "heatmap out of date",
    )?;
    let csv = fs::read_to_string(work.join("summaries/grid_ablation_cells.csv"))
        .map_err(|e| e.to_string())?;
    ensure(csv.lines().count() == 4, "cells table is not 3x3")?;

    cli_ok(
        &[
            "ablate",
            "progressive",
            "--out",
            "work",
            "--config",
            "exp.toml",
        ],
        d,
    );
    let prog = read_matrix(&work, "progressive")?;
    let names: Vec<&str> = prog.specs.iter().map(|s| s.spec.name.as_str()).collect();
    let want = [
        "plain_cross_modal_kd",
        "plus_dpe",
        "plus_dpe_dfpn",
        "plus_dpe_mhra",
        "full_jdcnet",
    ];
    ensure(names == want, format!("progressive order {names:?}"))?;
    Ok(format!(
        "9 finite cells (macro-F1 {:.3}..{:.3}), heatmap ok, progressive order ok",
        values.iter().copied().fold(f64::INFINITY, f64::min),
        values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    ))
}

fn threshold_sweep_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let grid = default_grid();
    ensure(grid.len() == 21 && grid.contains(&0.5), "grid lacks 0.5")?;
    for i in 0..100 {
        let n = rng.gen_range(1..=40);
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let curve = threshold_sweep(&scores, &labels, &grid).map_err(|e| e.to_string())?;
        let rates = curve.positive_rates();
        ensure(
            rates.windows(2).all(|w| w[1] <= w[0]),
            format!("instance {i}: rate increases"),
        )?;
        let at_half = curve.at(0.5).map(|r| r.positive_rate);
        let direct = evaluate(&scores, &labels, 0.5)
            .map_err(|e| e.to_string())?
            .positive_rate;
        ensure(
            at_half == Some(direct),
            format!("instance {i}: rate at 0.5 {at_half:?} vs {direct}"),
        )?;
        let row = curve
            .to_csv()
            .lines()
            .find(|l| l.starts_with("0.50,"))
            .map(str::to_owned);
        let col = MetricsReport::NAMES
            .iter()
            .position(|&n| n == "positive_rate")
            .unwrap()
            + 1;
        let reported: Option<f64> =
            row.and_then(|r| r.split(',').nth(col).and_then(|v| v.parse().ok()));
        ensure(
            reported.is_some_and(|v| (v - direct).abs() < 1e-6),
            format!("instance {i}: report row at 0.50 missing or wrong"),
        )?;
    }
    Ok("100 sweeps non-increasing; report carries positive_rate at 0.50".into())
}

const DATASET_CSV: &str = "COHORT_METADATA_CSV";
const DATASET_IMAGES: &str = "COHORT_IMAGE_DIR";

fn dataset_counts() -> Outcome {
    let (Ok(csv), Ok(images)) = (std::env::var(DATASET_CSV), std::env::var(DATASET_IMAGES)) else {
        return Ok(format!(
            "skipped: set {DATASET_CSV} and {DATASET_IMAGES} to run"
        ));
    };
    let raw = ingest_metadata(Path::new(&csv), &ColumnMap::default()).map_err(|e| e.to_string())?;
    let (records, _) = normalize_records(&raw, Path::new(&images));
    let m = Manifests::build(&records).map_err(|e| e.to_string())?;
    let expected = [(783, 424, 504, 279), (63, 25, 59, 4), (26, 19, 22, 4)];
    let mut got = Vec::new();
    for (manifest, want) in m.iter().zip(expected) {
        let s = manifest.stats().map_err(|e| e.to_string())?;
        let row = (
            s.n_images,
            s.n_patients,
            s.n_positive_images,
            s.n_negative_images,
        );
        ensure(
            row == want,
            format!("{:?}: {row:?}, expected {want:?}", manifest.kind),
        )?;
        got.push(format!("{}/{}/{}/{}", row.0, row.1, row.2, row.3));
    }
    Ok(got.join(", "))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("metric oracle equivalence", metric_oracle),
        ("degenerate predictor", degenerate_predictor),
        ("seed summary", summary_reproduction),
        ("loss gradients", gradient_check),
        ("split and resample invariants", split_invariants),
        ("train determinism", determinism),
        ("resampled matrix end to end", resampled_matrix),
        ("modality signal discrimination", modality_signal),
        ("grid and progressive ablations", grid_and_progressive),
        ("threshold sweep", threshold_sweep_check),
        ("dataset cohort counts", dataset_counts),
    ];
    // Keep panic messages out of the report; they are folded into FAIL lines.
    panic::set_hook(Box::new(|_| {}));
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.iter().any(|f| *f == id || name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {id:>2} {name}: {detail} [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {id:>2} {name}: {why} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
