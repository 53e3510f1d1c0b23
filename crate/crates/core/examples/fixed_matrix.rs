//! The six-row fixed-split matrix over several training seeds, persisted
//! with per-run artifacts, summary tables and a figure.
//!
//! Usage: `cargo run --release --example fixed_matrix [OUT_DIR]`

use std::path::PathBuf;

use crossmodal_kd::cohort::{ingest_metadata, normalize_records, ColumnMap, Manifests};
use crossmodal_kd::experiments::{Harness, MatrixSettings};
use crossmodal_kd::reporting::{export_table, TableFormat};
use crossmodal_kd::synthetic::{generate_cohort, SynthConfig};
use crossmodal_kd::trainer::TrainConfig;

fn main() -> crossmodal_kd::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("crossmodal-kd/fixed_matrix"));
    let cohort = generate_cohort(
        &SynthConfig {
            n_patients: 30,
            image_size: 48,
            ..SynthConfig::default()
        },
        &out.join("cohort"),
    )?;
    let raw = ingest_metadata(&cohort.metadata_csv, &ColumnMap::default())?;
    let (records, _) = normalize_records(&raw, &cohort.image_root);
    let manifests = Manifests::build(&records)?;

    let train = TrainConfig {
        input_size: 48,
        epochs: 4,
        ..TrainConfig::default()
    };
    let settings = MatrixSettings {
        seeds: vec![42, 43],
        ..MatrixSettings::default()
    };
    let harness = Harness::new(&manifests, train, settings).with_output(&out.join("work"));
    let result = harness.run_fixed_matrix()?;

    print!("{}", export_table(&result, TableFormat::Markdown)?);
    println!(
        "{} runs under {}",
        result.run_count(),
        out.join("work").display()
    );
    Ok(())
}
