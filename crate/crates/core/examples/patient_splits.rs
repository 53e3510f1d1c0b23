//! Patient-level fixed split and a Monte Carlo resampling plan.
//!
//! Every image of a patient lands on the same side of a split, and each
//! resample holds out the same number of positive and negative patients.

use crossmodal_kd::cohort::{ingest_metadata, normalize_records, ColumnMap, Manifests};
use crossmodal_kd::splits::{fixed_split, resample_plan};
use crossmodal_kd::synthetic::{generate_cohort, SynthConfig};

fn main() -> crossmodal_kd::Result<()> {
    let root = std::env::temp_dir().join("crossmodal-kd/patient_splits");
    let cfg = SynthConfig {
        n_patients: 20,
        image_size: 32,
        ..SynthConfig::default()
    };
    let cohort = generate_cohort(&cfg, &root)?;
    let raw = ingest_metadata(&cohort.metadata_csv, &ColumnMap::default())?;
    let (records, _) = normalize_records(&raw, &cohort.image_root);
    let paired = Manifests::build(&records)?.paired;

    let split = fixed_split(&paired, 0.2, 42)?;
    println!(
        "{}: {} train patients / {} images, {} validation patients / {} images",
        split.id,
        split.train_patients.len(),
        split.train_indices.len(),
        split.val_patients.len(),
        split.val_indices.len()
    );
    println!("  validation patients: {:?}", split.val_patients);
    println!("  digest {}", split.digest());

    let plan = resample_plan(&paired, 8, 5, 1, 42)?;
    for s in &plan.splits {
        println!(
            "{} (seed {}): {:?} -> {} validation images",
            s.id,
            s.seed,
            s.val_patients,
            s.val_indices.len()
        );
    }
    plan.write(&root.join("resample_plan.json"))?;
    Ok(())
}
