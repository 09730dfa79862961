use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::deeponet::{Affine, Architecture, DeepOperator, Head, SensorLayout, TargetNorm, TimeEncoding};
use super::mlp::Activation;
use super::train::TrainConfig;
use crate::error::{Error, Result};
use crate::io::{read_blob, read_json, write_blob, write_json};

pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON side of a checkpoint. Parameters live in the blob in the order
/// branch layers (weights row-major, then bias), trunk layers, output bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub head: Head,
    pub branch_sizes: Vec<usize>,
    pub trunk_sizes: Vec<usize>,
    pub activation: Activation,
    pub p: usize,
    pub layout: SensorLayout,
    pub branch_norm: Affine,
    pub trunk_norm: Affine,
    pub target_norm: TargetNorm,
    pub time_encoding: TimeEncoding,
    pub seed: u64,
    pub train_config: Option<TrainConfig>,
    pub final_train_mse: Option<f64>,
    pub final_validation_rel_l2: Option<f64>,
    pub param_count: usize,
    pub blob: String,
    pub blob_sha256: String,
}

/// `(manifest, blob)` paths for a checkpoint named by either file or by a
/// bare stem.
pub fn checkpoint_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("bin") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut manifest = stem.clone().into_os_string();
    manifest.push(".json");
    let mut blob = stem.into_os_string();
    blob.push(".bin");
    (manifest.into(), blob.into())
}

/// Training metadata stored next to the parameters.
#[derive(Debug, Clone, Default)]
pub struct CheckpointInfo {
    pub train_config: Option<TrainConfig>,
    pub final_train_mse: Option<f64>,
    pub final_validation_rel_l2: Option<f64>,
}

pub fn save_checkpoint(op: &DeepOperator, info: &CheckpointInfo, path: &Path) -> Result<CheckpointManifest> {
    let (manifest_path, blob_path) = checkpoint_paths(path);
    if let Some(dir) = manifest_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let params = op.params();
    let sha = write_blob(&blob_path, &params)?;
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        head: op.head,
        branch_sizes: op.branch.sizes(),
        trunk_sizes: op.trunk.sizes(),
        activation: op.branch.activation,
        p: op.p(),
        layout: op.layout.clone(),
        branch_norm: op.branch_norm.clone(),
        trunk_norm: op.trunk_norm.clone(),
        target_norm: op.target_norm.clone(),
        time_encoding: op.time_encoding,
        seed: op.seed,
        train_config: info.train_config.clone(),
        final_train_mse: info.final_train_mse,
        final_validation_rel_l2: info.final_validation_rel_l2,
        param_count: params.len(),
        blob: blob_path.file_name().unwrap().to_string_lossy().into_owned(),
        blob_sha256: sha,
    };
    write_json(&manifest_path, &manifest)?;
    Ok(manifest)
}

pub fn load_checkpoint(path: &Path) -> Result<(DeepOperator, CheckpointManifest)> {
    let (manifest_path, _) = checkpoint_paths(path);
    let m: CheckpointManifest = read_json(&manifest_path)?;
    if m.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("checkpoint version {} is not supported", m.version)));
    }
    let hidden = |s: &[usize]| s.get(1..s.len().saturating_sub(1)).unwrap_or(&[]).to_vec();
    let arch = Architecture {
        branch_hidden: hidden(&m.branch_sizes),
        trunk_hidden: hidden(&m.trunk_sizes),
        p: m.p,
        activation: m.activation,
        time_encoding: m.time_encoding,
    };
    let mut op = DeepOperator::new(m.head, m.layout.clone(), &arch, m.seed)?;
    if op.branch.sizes() != m.branch_sizes || op.trunk.sizes() != m.trunk_sizes {
        return Err(Error::Format("layer sizes disagree with the sensor layout".into()));
    }
    let blob_path = manifest_path.with_file_name(&m.blob);
    let params = read_blob(&blob_path, &m.blob_sha256)?;
    op.set_params(&params)?;
    op.branch_norm = m.branch_norm.clone();
    op.trunk_norm = m.trunk_norm.clone();
    op.target_norm = m.target_norm.clone();
    Ok((op, m))
}
