//! Generate a paired synthetic cohort and look at what was written.
//!
//! Usage: `cargo run --example synth_cohort [OUT_DIR]`

use std::path::PathBuf;

use crossmodal_kd::synthetic::{generate_cohort, SynthConfig};

fn main() -> crossmodal_kd::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("crossmodal-kd/synth_cohort"));

    // Class signal only in CT: an X-ray student has nothing to learn from
    // its own modality, a CT teacher does.
    let config = SynthConfig {
        n_patients: 30,
        prevalence: 0.6,
        xray_signal: 0.0,
        ct_signal: 0.4,
        image_size: 64,
        seed: 11,
        ..SynthConfig::default()
    };
    let cohort = generate_cohort(&config, &out)?;
    println!("metadata: {}", cohort.metadata_csv.display());
    println!(
        "images:   {} under {}",
        cohort.n_images,
        cohort.image_root.display()
    );
    println!(
        "positive patients: {} of {}",
        cohort.n_positive_patients, config.n_patients
    );

    let head = std::fs::read_to_string(&cohort.metadata_csv).expect("metadata written");
    for line in head.lines().take(6) {
        println!("  {line}");
    }
    Ok(())
}
