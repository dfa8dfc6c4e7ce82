//! Model checkpoints: a JSON manifest (resolved config, parameter shapes,
//! step counter, metric history) followed by a little-endian 32-bit-float
//! parameter blob in manifest order, in one file.

use crate::config::GraphConfig;
use crate::distributions::Prng;
use crate::error::{Error, Result};
use crate::scm::Scm;
use crate::train::{all_parameters, EpochMetric};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"DSCMCKP1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    /// Hash of the resolved config; verified on load.
    pub config_hash: String,
    pub config: GraphConfig,
    pub step: u64,
    pub epochs_trained: usize,
    pub metrics: Vec<EpochMetric>,
    pub params: Vec<ParamEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub scm: Scm,
    pub manifest: Manifest,
}

/// Serialise the graph's parameters. `override_values`, when given, replaces
/// the live values (e.g. a best-validation snapshot) without mutating them.
pub fn save(
    path: &Path,
    scm: &Scm,
    config: &GraphConfig,
    step: u64,
    epochs_trained: usize,
    metrics: &[EpochMetric],
    override_values: Option<&[Vec<f64>]>,
) -> Result<()> {
    let params = all_parameters(scm);
    if let Some(values) = override_values {
        if values.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "snapshot has {} tensors, model has {}",
                values.len(),
                params.len()
            )));
        }
    }
    let entries: Vec<ParamEntry> = params
        .iter()
        .enumerate()
        .map(|(i, p)| ParamEntry {
            name: p.name().unwrap_or_else(|| format!("param{i}")),
            shape: p.shape(),
        })
        .collect();
    let manifest = Manifest {
        config_hash: config.hash(),
        config: config.clone(),
        step,
        epochs_trained,
        metrics: metrics.to_vec(),
        params: entries,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(MAGIC)?;
    file.write_all(&(json.len() as u64).to_le_bytes())?;
    file.write_all(&json)?;
    for (i, p) in params.iter().enumerate() {
        let data = match override_values {
            Some(values) => values[i].clone(),
            None => p.data(),
        };
        for v in data {
            file.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

/// Rebuild the graph from the embedded resolved config and fill the
/// parameters from the blob. Model evaluation needs no dataset.
pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{path:?} is not a model checkpoint"
        )));
    }
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + json_len {
        return Err(Error::Checkpoint(format!("{path:?} is truncated")));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + json_len])?;
    let recomputed = manifest.config.hash();
    if recomputed != manifest.config_hash {
        return Err(Error::Checkpoint(format!(
            "config hash mismatch: manifest says {}, embedded config hashes to {recomputed}",
            manifest.config_hash
        )));
    }
    let mut rng = Prng::seed_from(manifest.config.training.seed);
    let scm = manifest.config.build(None, &mut rng)?;
    let params = all_parameters(&scm);
    if params.len() != manifest.params.len() {
        return Err(Error::Checkpoint(format!(
            "model has {} parameter tensors, manifest lists {}",
            params.len(),
            manifest.params.len()
        )));
    }
    let blob = &bytes[16 + json_len..];
    let total: usize = manifest
        .params
        .iter()
        .map(|e| e.shape.iter().product::<usize>())
        .sum();
    if blob.len() != total * 4 {
        return Err(Error::Checkpoint(format!(
            "parameter blob has {} bytes, manifest promises {}",
            blob.len(),
            total * 4
        )));
    }
    let mut offset = 0usize;
    for (p, entry) in params.iter().zip(&manifest.params) {
        if p.shape() != entry.shape {
            return Err(Error::Checkpoint(format!(
                "parameter {} has shape {:?} in the model but {:?} in the manifest",
                entry.name,
                p.shape(),
                entry.shape
            )));
        }
        let len: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for k in 0..len {
            let at = (offset + k) * 4;
            data.push(f32::from_le_bytes(blob[at..at + 4].try_into().unwrap()) as f64);
        }
        p.set_data(&data)?;
        offset += len;
    }
    Ok(Checkpoint { scm, manifest })
}
