//! Ingest a metadata table, normalize it, pair X-rays to CTs and write the
//! three cohort manifests.
//!
//! Usage: `cargo run --example ingest_manifests [METADATA_CSV IMAGE_DIR]`
//!
//! Without arguments a small synthetic cohort is generated first.

use std::path::PathBuf;

use crossmodal_kd::cohort::{ingest_metadata, normalize_records, ColumnMap, Manifests};
use crossmodal_kd::synthetic::{generate_cohort, SynthConfig};

fn main() -> crossmodal_kd::Result<()> {
    let root = std::env::temp_dir().join("crossmodal-kd/ingest_manifests");
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (csv, images) = match args.as_slice() {
        [csv, images] => (PathBuf::from(csv), PathBuf::from(images)),
        _ => {
            let cfg = SynthConfig {
                n_patients: 24,
                image_size: 32,
                todo_rows: 3,
                ..SynthConfig::default()
            };
            let c = generate_cohort(&cfg, &root.join("cohort"))?;
            (c.metadata_csv, c.image_root)
        }
    };

    let raw = ingest_metadata(&csv, &ColumnMap::default())?;
    let (records, dropped) = normalize_records(&raw, &images);
    println!("{} raw rows, {} kept", raw.len(), records.len());
    println!("dropped: {dropped}");

    let manifests = Manifests::build(&records)?;
    println!(
        "{:<20} {:>7} {:>9} {:>9} {:>9}",
        "manifest", "images", "patients", "positive", "negative"
    );
    for m in manifests.iter() {
        let s = m.stats()?;
        println!(
            "{:<20} {:>7} {:>9} {:>9} {:>9}",
            m.kind.file_stem(),
            s.n_images,
            s.n_patients,
            s.n_positive_images,
            s.n_negative_images
        );
    }
    if let Some(p) = manifests.paired.pairs.first() {
        println!(
            "first pair: {} -> {} (gap {})",
            p.xray.image_id, p.ct.image_id, p.offset_gap
        );
    }

    for path in manifests.write_dir(&root.join("manifests"))? {
        println!("wrote {}", path.display());
    }
    Ok(())
}
