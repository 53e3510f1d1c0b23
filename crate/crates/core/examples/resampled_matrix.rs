//! Same-case Monte Carlo comparison of the seven paired-cohort rows, then
//! the hypothesis ledger built from both matrices.
//!
//! This trains a few hundred small models; use `--release`.

use crossmodal_kd::cohort::{ingest_metadata, normalize_records, ColumnMap, Manifests};
use crossmodal_kd::experiments::{hypothesis_status, Harness, MatrixSettings};
use crossmodal_kd::reporting::{export_table, hypotheses_markdown, TableFormat};
use crossmodal_kd::synthetic::{generate_cohort, SynthConfig};
use crossmodal_kd::trainer::TrainConfig;

fn main() -> crossmodal_kd::Result<()> {
    let root = std::env::temp_dir().join("crossmodal-kd/resampled_matrix");
    let cohort = generate_cohort(
        &SynthConfig {
            n_patients: 40,
            image_size: 48,
            ..SynthConfig::default()
        },
        &root.join("cohort"),
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
        seeds: vec![42],
        n_resamples: 4,
        ..MatrixSettings::default()
    };
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let harness = Harness::new(&manifests, train, settings)
        .with_output(&root.join("work"))
        .with_jobs(threads);

    let resampled = harness.run_resampled_matrix()?;
    // run_resampled_matrix already refuses results whose rows saw different patients.
    println!("{}", resampled.support);
    print!("{}", export_table(&resampled, TableFormat::Markdown)?);

    let fixed = harness.run_fixed_matrix()?;
    let ledger = hypothesis_status(&fixed, &resampled, None)?;
    print!("{}", hypotheses_markdown(&ledger));
    Ok(())
}
