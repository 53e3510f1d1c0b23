//! Train an X-ray student alone and then with a frozen CT teacher, on a
//! cohort where only the CT carries the class signal.

use crossmodal_kd::cohort::{ingest_metadata, normalize_records, ColumnMap, Manifests};
use crossmodal_kd::losses::{DistillParams, Mechanism};
use crossmodal_kd::metrics::evaluate;
use crossmodal_kd::model::ModuleFlags;
use crossmodal_kd::splits::fixed_split;
use crossmodal_kd::synthetic::{generate_cohort, SynthConfig};
use crossmodal_kd::trainer::{
    predict_scores, teacher_signals, train_student, train_teacher, Dataset, ImageStore, Stopwatch,
    TrainConfig,
};

fn main() -> crossmodal_kd::Result<()> {
    let root = std::env::temp_dir().join("crossmodal-kd/train_student");
    let cohort = generate_cohort(
        &SynthConfig {
            n_patients: 40,
            image_size: 64,
            xray_signal: 0.0,
            ct_signal: 0.35,
            ..SynthConfig::default()
        },
        &root,
    )?;
    let raw = ingest_metadata(&cohort.metadata_csv, &ColumnMap::default())?;
    let (records, _) = normalize_records(&raw, &cohort.image_root);
    let paired = Manifests::build(&records)?.paired;
    let split = fixed_split(&paired, 0.2, 42)?;

    let config = TrainConfig {
        input_size: 64,
        epochs: 5,
        ..TrainConfig::default()
    };
    let store = ImageStore::new(config.input_size);
    let train_x = Dataset::from_manifest(&paired, &split.train_indices, &store)?;
    let val_x = Dataset::from_manifest(&paired, &split.val_indices, &store)?;
    let train_ct = Dataset::paired_ct(&paired, &split.train_indices, &store)?;
    let val_ct = Dataset::paired_ct(&paired, &split.val_indices, &store)?;
    let labels: Vec<bool> = val_x.labels.iter().map(|l| l.is_positive()).collect();
    println!(
        "{} training / {} validation X-rays",
        train_x.len(),
        val_x.len()
    );

    let clock = Stopwatch::start();
    let mut student = train_student(
        &train_x,
        &config,
        &DistillParams::default(),
        ModuleFlags::NONE,
        None,
    )?;
    let scores = predict_scores(&mut student.model, &val_x, config.batch_size)?;
    let r = evaluate(&scores, &labels, 0.5)?;
    println!(
        "student only    BA {:.3}  pos-rate {:.3}  epoch losses {:.3?}  ({:.1}s)",
        r.balanced_accuracy,
        r.positive_rate,
        student.losses.epoch_means(),
        clock.seconds()
    );

    let mut teacher = train_teacher(&train_ct, &config, ModuleFlags::NONE)?;
    let t_scores = predict_scores(&mut teacher.model, &val_ct, config.batch_size)?;
    println!(
        "CT teacher      BA {:.3}",
        evaluate(&t_scores, &labels, 0.5)?.balanced_accuracy
    );

    let signals = teacher_signals(&mut teacher.model, &train_ct, config.batch_size)?;
    let params = DistillParams::with_mechanism(Mechanism::LogitKd);
    let mut distilled = train_student(
        &train_x,
        &config,
        &params,
        ModuleFlags::NONE,
        Some(&signals),
    )?;
    let scores = predict_scores(&mut distilled.model, &val_x, config.batch_size)?;
    let r = evaluate(&scores, &labels, 0.5)?;
    println!(
        "logit-KD student BA {:.3}  pos-rate {:.3}",
        r.balanced_accuracy, r.positive_rate
    );
    Ok(())
}
