//! Synthetic paired cohorts with controllable per-modality class signal.
//!
//! Positive patients carry a bright disk in their X-rays and a bright ring
//! in their CTs, each scaled by that modality's signal strength. Setting a
//! strength to zero removes the class information from that modality
//! entirely, so the harness can tell where the signal lives.

use std::fs;
use std::path::{Path, PathBuf};

use image::GrayImage;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cohort::Modality;
use crate::error::{Error, Result};
use crate::seeding::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub prevalence: f64,
    pub xray_signal: f64,
    pub ct_signal: f64,
    /// Inclusive (min, max) X-ray images per patient.
    pub xray_images: (usize, usize),
    /// Inclusive (min, max) CT images per patient.
    pub ct_images: (usize, usize),
    pub noise_std: f64,
    pub image_size: usize,
    /// Extra rows with the placeholder finding, pointing at real files.
    pub todo_rows: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 40,
            prevalence: 0.7,
            xray_signal: 0.35,
            ct_signal: 0.35,
            xray_images: (1, 2),
            ct_images: (1, 2),
            noise_std: 0.05,
            image_size: 128,
            todo_rows: 2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.prevalence > 0.0 && self.prevalence < 1.0) {
            return Err(Error::Config(format!(
                "prevalence must lie in (0,1), got {}",
                self.prevalence
            )));
        }
        if self.n_patients == 0 || self.image_size < 16 {
            return Err(Error::Config(
                "need at least one patient and images of at least 16 px".into(),
            ));
        }
        for (name, (lo, hi)) in [
            ("xray_images", self.xray_images),
            ("ct_images", self.ct_images),
        ] {
            if lo > hi {
                return Err(Error::Config(format!("{name}: min {lo} exceeds max {hi}")));
            }
        }
        if self.xray_signal < 0.0 || self.ct_signal < 0.0 || self.noise_std < 0.0 {
            return Err(Error::Config(
                "signal strengths and noise must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Paths written by [`generate_cohort`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthCohort {
    pub metadata_csv: PathBuf,
    pub image_root: PathBuf,
    pub n_images: usize,
    pub n_positive_patients: usize,
}

const BACKGROUND: f64 = 0.35;

fn render(
    size: usize,
    modality: Modality,
    strength: f64,
    center: (f64, f64),
    noise: f64,
    rng: &mut impl Rng,
) -> GrayImage {
    let s = size as f64;
    // Radii scale with the image so the pattern survives resizing.
    let (disk_r, ring_r, ring_w) = (s * 0.14, s * 0.18, s * 0.045);
    let normal = Normal::new(0.0, noise.max(1e-12)).expect("finite std");
    let mut img = GrayImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let d =
                ((x as f64 + 0.5 - center.0).powi(2) + (y as f64 + 0.5 - center.1).powi(2)).sqrt();
            let pattern = match modality {
                Modality::Xray => (disk_r + 0.5 - d).clamp(0.0, 1.0),
                Modality::Ct => (ring_w / 2.0 + 0.5 - (d - ring_r).abs()).clamp(0.0, 1.0),
            };
            let n = if noise > 0.0 { normal.sample(rng) } else { 0.0 };
            let v = BACKGROUND + strength * pattern + n;
            img.put_pixel(
                x as u32,
                y as u32,
                image::Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8]),
            );
        }
    }
    img
}

/// Writes `metadata.csv` and `images/*.png` under `out_root`.
pub fn generate_cohort(config: &SynthConfig, out_root: &Path) -> Result<SynthCohort> {
    config.validate()?;
    let image_root = out_root.join("images");
    fs::create_dir_all(&image_root)
        .map_err(|e| Error::io(format!("create {}", image_root.display()), e))?;

    // Exact class quota so the realized prevalence tracks the configured one.
    let n_pos =
        ((config.prevalence * config.n_patients as f64).round() as usize).min(config.n_patients);
    let mut labels: Vec<bool> = (0..config.n_patients).map(|i| i < n_pos).collect();
    labels.shuffle(&mut rng_for(config.seed, "synth/labels"));

    let size = config.image_size;
    let mut rows: Vec<[String; 5]> = Vec::new();
    let mut files = Vec::new();
    for (p, &positive) in labels.iter().enumerate() {
        let pid = format!("P{p:04}");
        let mut rng = rng_for(config.seed, &format!("synth/patient/{p}"));
        let jitter = size as f64 / 6.0;
        let base = (
            size as f64 / 2.0 + rng.gen_range(-jitter..jitter),
            size as f64 / 2.0 + rng.gen_range(-jitter..jitter),
        );
        let finding = if positive {
            "Pneumonia/Viral/COVID-19"
        } else if p % 2 == 0 {
            "No Finding"
        } else {
            "Pneumonia/Bacterial"
        };
        for (modality, (lo, hi), strength, tag, label) in [
            (
                Modality::Xray,
                config.xray_images,
                config.xray_signal,
                "xray",
                "X-ray",
            ),
            (Modality::Ct, config.ct_images, config.ct_signal, "ct", "CT"),
        ] {
            let count = rng.gen_range(lo..=hi);
            for k in 0..count {
                let center = (
                    base.0 + rng.gen_range(-2.0..2.0),
                    base.1 + rng.gen_range(-2.0..2.0),
                );
                let offset: i64 = rng.gen_range(0..15);
                let amp = if positive { strength } else { 0.0 };
                let img = render(size, modality, amp, center, config.noise_std, &mut rng);
                let name = format!("{pid}_{tag}_{k}.png");
                img.save(image_root.join(&name)).map_err(|e| Error::Image {
                    path: image_root.join(&name),
                    message: e.to_string(),
                })?;
                rows.push([
                    pid.clone(),
                    finding.into(),
                    label.into(),
                    name.clone(),
                    offset.to_string(),
                ]);
                files.push((pid.clone(), name, label));
            }
        }
    }
    let n_images = rows.len();
    if !files.is_empty() {
        let mut rng = rng_for(config.seed, "synth/todo");
        for _ in 0..config.todo_rows {
            let (pid, name, modality) = files.choose(&mut rng).expect("non-empty");
            rows.push([
                pid.clone(),
                "todo".into(),
                (*modality).into(),
                name.clone(),
                String::new(),
            ]);
        }
    }

    let metadata_csv = out_root.join("metadata.csv");
    let mut w = csv::Writer::from_path(&metadata_csv)?;
    w.write_record(["patientid", "finding", "modality", "filename", "offset"])?;
    for r in &rows {
        w.write_record(r)?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("write {}", metadata_csv.display()), e))?;
    Ok(SynthCohort {
        metadata_csv,
        image_root,
        n_images,
        n_positive_patients: n_pos,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{ingest_metadata, normalize_records, ColumnMap, Manifests};

    fn small() -> SynthConfig {
        SynthConfig {
            n_patients: 12,
            image_size: 32,
            todo_rows: 3,
            seed: 5,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn ingests_with_only_planted_drops_and_full_pairing() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate_cohort(&small(), dir.path()).unwrap();
        let raw = ingest_metadata(&c.metadata_csv, &ColumnMap::default()).unwrap();
        let (recs, tally) = normalize_records(&raw, &c.image_root);
        assert_eq!(tally.todo, 3);
        assert_eq!(tally.total(), 3);
        assert_eq!(recs.len(), c.n_images);
        let m = Manifests::build(&recs).unwrap();
        assert_eq!(m.paired.len(), m.all_xray.len());
        assert_eq!(
            m.all_xray.stats().unwrap().n_positive_patients,
            c.n_positive_patients
        );
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_cohort(&small(), a.path()).unwrap();
        generate_cohort(&small(), b.path()).unwrap();
        assert_eq!(
            fs::read(a.path().join("metadata.csv")).unwrap(),
            fs::read(b.path().join("metadata.csv")).unwrap()
        );
        for entry in fs::read_dir(a.path().join("images")).unwrap() {
            let name = entry.unwrap().file_name();
            assert_eq!(
                fs::read(a.path().join("images").join(&name)).unwrap(),
                fs::read(b.path().join("images").join(&name)).unwrap()
            );
        }
    }

    #[test]
    fn zero_signal_images_do_not_depend_on_label() {
        let cfg = SynthConfig {
            xray_signal: 0.0,
            ct_signal: 0.0,
            noise_std: 0.0,
            ..small()
        };
        let dir = tempfile::tempdir().unwrap();
        let c = generate_cohort(&cfg, dir.path()).unwrap();
        let raw = ingest_metadata(&c.metadata_csv, &ColumnMap::default()).unwrap();
        let (recs, _) = normalize_records(&raw, &c.image_root);
        let first = image::open(&recs[0].image_path).unwrap().to_luma8();
        for r in &recs {
            assert_eq!(image::open(&r.image_path).unwrap().to_luma8(), first);
        }
    }

    #[test]
    fn prevalence_quota_is_exact() {
        let cfg = SynthConfig {
            n_patients: 200,
            prevalence: 0.37,
            ..small()
        };
        let n_pos = (0.37f64 * 200.0).round() as usize;
        let dir = tempfile::tempdir().unwrap();
        let c = generate_cohort(
            &SynthConfig {
                image_size: 16,
                ..cfg
            },
            dir.path(),
        )
        .unwrap();
        assert_eq!(c.n_positive_patients, n_pos);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let bad = SynthConfig {
            prevalence: 1.0,
            ..small()
        };
        assert!(generate_cohort(&bad, dir.path()).is_err());
    }
}
