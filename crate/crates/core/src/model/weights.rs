//! Weight files: a CBOR document holding a format tag and an ordered list of
//! named tensors.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Parameterized;

const FORMAT: &str = "crossmodal-kd-weights/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightFile {
    format: String,
    architecture: serde_json::Value,
    tensors: Vec<WeightEntry>,
}

/// Writes every parameter of each `(prefix, owner)` pair.
pub fn save_weights(
    path: &Path,
    architecture: serde_json::Value,
    owners: &[(&str, &dyn Parameterized)],
) -> Result<()> {
    let mut tensors = Vec::new();
    for (prefix, owner) in owners {
        owner.visit(prefix, &mut |name, p| {
            tensors.push(WeightEntry {
                name: name.to_string(),
                shape: p.shape.clone(),
                data: p.value.clone(),
            })
        });
    }
    let doc = WeightFile {
        format: FORMAT.to_string(),
        architecture,
        tensors,
    };
    let f = File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    ciborium::into_writer(&doc, BufWriter::new(f)).map_err(|e| Error::Weights(e.to_string()))
}

pub fn read_weights_file(path: &Path) -> Result<(serde_json::Value, Vec<WeightEntry>)> {
    let f = File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let doc: WeightFile =
        ciborium::from_reader(BufReader::new(f)).map_err(|e| Error::Weights(e.to_string()))?;
    if doc.format != FORMAT {
        return Err(Error::Weights(format!(
            "unknown weights format '{}'",
            doc.format
        )));
    }
    Ok((doc.architecture, doc.tensors))
}

/// Loads tensors into `owner` by name; every parameter must be present with
/// a matching shape.
pub fn load_weights(
    owner: &mut dyn Parameterized,
    prefix: &str,
    entries: &[WeightEntry],
) -> Result<()> {
    let mut missing = Vec::new();
    owner.visit_mut(
        prefix,
        &mut |name, p| match entries.iter().find(|e| e.name == name) {
            Some(e) if e.shape == p.shape => p.value.copy_from_slice(&e.data),
            Some(e) => missing.push(format!("{name} (shape {:?} vs {:?})", e.shape, p.shape)),
            None => missing.push(name.to_string()),
        },
    );
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Weights(format!(
            "missing or mismatched: {}",
            missing.join(", ")
        )))
    }
}
