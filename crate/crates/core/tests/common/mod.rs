//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use crossmodal_kd::cohort::{
    ingest_metadata, normalize_records, ColumnMap, ImageRecord, Label, Manifest, ManifestKind,
    Manifests, Modality,
};
use crossmodal_kd::synthetic::{generate_cohort, SynthConfig};

pub const BIN: &str = env!("CARGO_BIN_EXE_crossmodal-kd");

/// Generates a synthetic cohort under `dir` and builds its manifests.
pub fn synth_manifests(dir: &Path, cfg: &SynthConfig) -> Manifests {
    let cohort = generate_cohort(cfg, dir).expect("synthetic cohort");
    let raw = ingest_metadata(&cohort.metadata_csv, &ColumnMap::default()).expect("metadata");
    let (records, _) = normalize_records(&raw, &cohort.image_root);
    Manifests::build(&records).expect("manifests")
}

/// An in-memory X-ray manifest; `patients[i]` is (image count, label).
/// Image paths are placeholders, so it suits split logic only.
pub fn record_manifest(patients: &[(usize, Label)]) -> Manifest {
    let mut recs = Vec::new();
    for (p, &(n_img, label)) in patients.iter().enumerate() {
        for i in 0..n_img {
            recs.push(ImageRecord {
                patient_id: format!("p{p:03}"),
                image_id: format!("p{p:03}_{i}.png"),
                image_path: PathBuf::from(format!("p{p:03}_{i}.png")),
                modality: Modality::Xray,
                label,
                offset: None,
            });
        }
    }
    Manifest::new(ManifestKind::AllXray, recs).expect("manifest")
}

pub fn run_cli(args: &[&str], cwd: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn cli")
}

/// Runs the CLI and panics with its stderr on a non-zero exit.
pub fn cli_ok(args: &[&str], cwd: &Path) -> String {
    let out = run_cli(args, cwd);
    assert!(
        out.status.success(),
        "`{}` failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Writes `exp.toml`, generates the cohort and ingests it into `work/`.
pub fn cli_workspace(dir: &Path, config_toml: &str) {
    fs::write(dir.join("exp.toml"), config_toml).unwrap();
    cli_ok(&["synth", "--out", "cohort", "--config", "exp.toml"], dir);
    cli_ok(
        &[
            "ingest",
            "--csv",
            "cohort/metadata.csv",
            "--images",
            "cohort/images",
            "--out",
            "work",
            "--config",
            "exp.toml",
        ],
        dir,
    );
}

/// Every file below `root` whose name is `name`, sorted.
pub fn find_files(root: &Path, name: &str) -> Vec<PathBuf> {
    let mut found: Vec<PathBuf> = walkdir::WalkDir::new(root)
        .into_iter()
        .map(|e| e.expect("walk"))
        .filter(|e| e.file_type().is_file() && e.file_name() == name)
        .map(|e| e.into_path())
        .collect();
    found.sort();
    found
}
