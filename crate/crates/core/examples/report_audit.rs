//! Regenerate every report from persisted summaries, then audit the tree:
//! once clean, once after editing a single prediction.
//!
//! Usage: `cargo run --example report_audit [OUT_DIR]` where OUT_DIR holds a
//! previous harness output. Without it a small matrix is produced first.

use std::fs;
use std::path::PathBuf;

use crossmodal_kd::cohort::{ingest_metadata, normalize_records, ColumnMap, Manifests};
use crossmodal_kd::experiments::{Harness, MatrixKind, MatrixSettings, Regime, Variant};
use crossmodal_kd::reporting::{audit, load_summaries, regenerate_reports, run_dir};
use crossmodal_kd::synthetic::{generate_cohort, SynthConfig};
use crossmodal_kd::trainer::TrainConfig;

fn produce(out: &std::path::Path) -> crossmodal_kd::Result<()> {
    let cohort = generate_cohort(
        &SynthConfig {
            n_patients: 16,
            image_size: 32,
            ..SynthConfig::default()
        },
        &out.join("cohort"),
    )?;
    let raw = ingest_metadata(&cohort.metadata_csv, &ColumnMap::default())?;
    let (records, _) = normalize_records(&raw, &cohort.image_root);
    let manifests = Manifests::build(&records)?;
    let train = TrainConfig {
        input_size: 32,
        epochs: 2,
        ..TrainConfig::default()
    };
    let settings = MatrixSettings {
        seeds: vec![42, 43],
        ..MatrixSettings::default()
    };
    let specs = vec![
        settings.preset(Variant::StudentOnly, Regime::FixedSplit),
        settings.preset(Variant::PlainCrossModalKd, Regime::FixedSplit),
    ];
    Harness::new(&manifests, train, settings)
        .with_output(out)
        .run_fixed_specs(MatrixKind::Fixed, specs)?;
    Ok(())
}

fn main() -> crossmodal_kd::Result<()> {
    let out = match std::env::args().nth(1) {
        Some(dir) => PathBuf::from(dir),
        None => {
            let out = std::env::temp_dir().join("crossmodal-kd/report_audit");
            let _ = fs::remove_dir_all(&out);
            produce(&out)?;
            out
        }
    };

    for path in regenerate_reports(&out)? {
        println!("regenerated {}", path.display());
    }
    let clean = audit(&out)?;
    println!(
        "audit: {} runs, {} summaries, {} problems",
        clean.runs_checked,
        clean.summaries_checked,
        clean.failures.len()
    );

    // Flip the first score of one run and audit again.
    let summaries = load_summaries(&out)?;
    let Some(run) = summaries
        .first()
        .and_then(|m| m.specs.first())
        .and_then(|s| s.runs.first())
    else {
        return Ok(());
    };
    let path = run_dir(&out, &run.run_id).join("predictions.csv");
    let text = fs::read_to_string(&path).expect("predictions written");
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut cells: Vec<String> = lines[1].split(',').map(String::from).collect();
    let score: f64 = cells[2].parse().expect("numeric score");
    cells[2] = format!("{}", 1.0 - score);
    lines[1] = cells.join(",");
    fs::write(&path, lines.join("\n") + "\n").expect("writable");

    for failure in audit(&out)?.failures {
        println!("  {failure}");
    }
    Ok(())
}
