//! Patient-level train/validation splits and Monte Carlo resampling plans.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cohort::{patient_labels, Label, Manifest};
use crate::error::{Error, Result};
use crate::seeding::rng_for;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientLabel {
    pub patient_id: String,
    pub label: Label,
}

/// Any-positive label of one patient.
pub fn patient_label(manifest: &Manifest, patient_id: &str) -> Result<PatientLabel> {
    let mut seen = false;
    let mut label = Label::Negative;
    for r in manifest
        .records
        .iter()
        .filter(|r| r.patient_id == patient_id)
    {
        seen = true;
        if r.label.is_positive() {
            label = Label::Positive;
        }
    }
    if !seen {
        return Err(Error::InvalidInput(format!(
            "patient '{patient_id}' is not in the manifest"
        )));
    }
    Ok(PatientLabel {
        patient_id: patient_id.to_string(),
        label,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub id: String,
    pub seed: u64,
    pub train_patients: BTreeSet<String>,
    pub val_patients: BTreeSet<String>,
    /// Indices into the manifest's records.
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

impl SplitSpec {
    fn from_val_patients(
        id: String,
        seed: u64,
        manifest: &Manifest,
        val: BTreeSet<String>,
    ) -> Result<Self> {
        let all = manifest.patients();
        let train: BTreeSet<String> = all.difference(&val).cloned().collect();
        let (mut ti, mut vi) = (Vec::new(), Vec::new());
        for (i, r) in manifest.records.iter().enumerate() {
            if val.contains(&r.patient_id) {
                vi.push(i);
            } else {
                ti.push(i);
            }
        }
        if ti.is_empty() || vi.is_empty() {
            return Err(Error::InsufficientPatients(format!(
                "split '{id}' leaves the {} side without images",
                if ti.is_empty() { "train" } else { "validation" }
            )));
        }
        Ok(Self {
            id,
            seed,
            train_patients: train,
            val_patients: val,
            train_indices: ti,
            val_indices: vi,
        })
    }

    /// SHA-256 over the canonical JSON form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(
            serde_json::to_vec(self).expect("serializable split"),
        ))
    }

    pub fn val_image_ids(&self, manifest: &Manifest) -> Vec<String> {
        self.val_indices
            .iter()
            .map(|&i| manifest.records[i].image_id.clone())
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(format!("write {}", path.display()), e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Shuffles patients with a seeded generator and holds out the last
/// ⌈val_fraction·n⌉ of them.
pub fn fixed_split(manifest: &Manifest, val_fraction: f64, seed: u64) -> Result<SplitSpec> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!(
            "val_fraction must lie in (0,1), got {val_fraction}"
        )));
    }
    let mut patients: Vec<String> = manifest.patients().into_iter().collect();
    if patients.len() < 2 {
        return Err(Error::InsufficientPatients(format!(
            "{} patient(s); need at least 2",
            patients.len()
        )));
    }
    patients.shuffle(&mut rng_for(seed, "fixed_split"));
    // The tolerance keeps products such as 0.2·15 = 3.0000000000000004 at 3.
    let n_val = ((val_fraction * patients.len() as f64) - 1e-9)
        .ceil()
        .max(1.0) as usize;
    let val = patients[patients.len() - n_val..].iter().cloned().collect();
    SplitSpec::from_val_patients(format!("fixed-s{seed}"), seed, manifest, val)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResamplePlan {
    pub splits: Vec<SplitSpec>,
    pub n_val_patients: usize,
    pub n_val_negative: usize,
    pub base_seed: u64,
}

impl ResamplePlan {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(format!("write {}", path.display()), e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Independent patient-level hold-outs with a fixed validation composition.
/// Split `i` draws with seed `base_seed + i`.
pub fn resample_plan(
    manifest: &Manifest,
    n_resamples: usize,
    n_val_patients: usize,
    n_val_negative: usize,
    base_seed: u64,
) -> Result<ResamplePlan> {
    if n_val_negative > n_val_patients {
        return Err(Error::Config(format!(
            "{n_val_negative} negative validation patients exceed the total {n_val_patients}"
        )));
    }
    let labels = patient_labels(&manifest.records);
    let pos: Vec<&String> = labels
        .iter()
        .filter(|(_, l)| l.is_positive())
        .map(|(p, _)| p)
        .collect();
    let neg: Vec<&String> = labels
        .iter()
        .filter(|(_, l)| !l.is_positive())
        .map(|(p, _)| p)
        .collect();
    let n_val_positive = n_val_patients - n_val_negative;
    if pos.len() < n_val_positive || neg.len() < n_val_negative {
        return Err(Error::InsufficientPatients(format!(
            "need {n_val_positive} positive and {n_val_negative} negative patients, have {} and {}",
            pos.len(),
            neg.len()
        )));
    }
    let splits = (0..n_resamples)
        .map(|i| {
            let seed = base_seed + i as u64;
            let mut rng = rng_for(seed, "resample");
            let val: BTreeSet<String> = neg
                .choose_multiple(&mut rng, n_val_negative)
                .chain(pos.choose_multiple(&mut rng, n_val_positive))
                .map(|p| p.to_string())
                .collect();
            SplitSpec::from_val_patients(format!("resample-{i:02}"), seed, manifest, val)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ResamplePlan {
        splits,
        n_val_patients,
        n_val_negative,
        base_seed,
    })
}
