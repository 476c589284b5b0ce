//! Detector checkpoints: adapters in a `.lad` container, every other tensor
//! in a JSON sidecar.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapters::{load_lad, save_lad, Dtype};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::protocol::ClassId;
use crate::rng::SeedStream;

use super::detector::{DetectorParams, LAYERS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: [usize; 2],
    /// Row-major.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub classes: Vec<ClassId>,
    pub tensors: BTreeMap<String, TensorRecord>,
}

/// Paths of the container and sidecar written for `stem`.
pub fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("lad"), stem.with_extension("json"))
}

pub fn save_checkpoint(stem: &Path, params: &DetectorParams) -> Result<()> {
    let (lad, json) = checkpoint_paths(stem);
    save_lad(&lad, &params.adapters, Dtype::F64)?;
    let tensors = params
        .named_tensors()
        .into_iter()
        .map(|(name, m)| {
            let (r, c) = m.shape();
            (name, TensorRecord { shape: [r, c], values: m.into_data() })
        })
        .collect();
    let sidecar = Sidecar {
        classes: params.classes.clone(),
        tensors,
    };
    fs::write(json, serde_json::to_string_pretty(&sidecar)? + "\n")?;
    Ok(())
}

pub fn load_checkpoint(stem: &Path) -> Result<DetectorParams> {
    let (lad, json) = checkpoint_paths(stem);
    let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(json)?)?;
    let (adapters, _) = load_lad(&lad)?;
    if adapters.len() != LAYERS.len() || adapters.iter().zip(LAYERS).any(|(a, l)| a.layer_name() != l) {
        return Err(Error::Format(format!("checkpoint adapters must be {LAYERS:?}")));
    }
    let queries = sidecar.tensors.get("queries").ok_or_else(|| Error::Format("sidecar lacks `queries`".into()))?;
    let [n_queries, d] = queries.shape;
    let rank = adapters[0].aggregate.rank();
    let mut params = DetectorParams::init(&SeedStream::new(0), &sidecar.classes, d, n_queries, rank)?;
    let expected: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    if let Some(missing) = expected.iter().find(|n| !sidecar.tensors.contains_key(*n)) {
        return Err(Error::Format(format!("sidecar lacks `{missing}`")));
    }
    if let Some(extra) = sidecar.tensors.keys().find(|n| !expected.contains(n)) {
        return Err(Error::Format(format!("sidecar has unexpected tensor `{extra}`")));
    }
    for (name, rec) in sidecar.tensors {
        params.set_tensor(&name, Matrix::new(rec.shape[0], rec.shape[1], rec.values)?)?;
    }
    params.adapters = adapters;
    Ok(params)
}
