use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::DropoutState;
use crate::model::{LayerSummary, ModelSpec, Network};
use crate::optim::{Adam, AdamConfig};
use crate::scalar::{DType, Scalar};
use crate::tensor::{ustf, Tensor};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
const TENSOR_DIR: &str = "tensors";

/// Training-loop progress stored with a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub seed: u64,
    pub epochs_done: usize,
    pub loss_curve: Vec<f64>,
    pub best_loss: Option<f64>,
    pub best_epoch: usize,
    /// Loss the plateau rule compares against.
    pub plateau_loss: Option<f64>,
    pub stale_epochs: usize,
    pub stopped_early: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimizerRecord {
    config: AdamConfig,
    t: u64,
    m: BTreeMap<String, String>,
    v: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointManifest {
    dtype: DType,
    spec: ModelSpec,
    layers: Vec<LayerSummary>,
    params: BTreeMap<String, String>,
    buffers: BTreeMap<String, String>,
    dropout: Option<DropoutState>,
    optimizer: Option<OptimizerRecord>,
    trainer: Option<TrainerState>,
}

/// A network together with optional optimizer and trainer state.
pub struct Checkpoint<T: Scalar> {
    pub network: Network<T>,
    pub optimizer: Option<Adam<T>>,
    pub trainer: Option<TrainerState>,
}

fn write_group<T: Scalar>(dir: &Path, group: &str, tensors: &BTreeMap<String, Tensor<T>>) -> Result<BTreeMap<String, String>> {
    let mut files = BTreeMap::new();
    for (name, tensor) in tensors {
        let file = format!("{TENSOR_DIR}/{group}-{name}.ustf");
        ustf::save(dir.join(&file), tensor)?;
        files.insert(name.clone(), file);
    }
    Ok(files)
}

fn read_group<T: Scalar>(dir: &Path, files: &BTreeMap<String, String>) -> Result<BTreeMap<String, Tensor<T>>> {
    files
        .iter()
        .map(|(name, file)| {
            if file.contains("..") || Path::new(file).is_absolute() {
                return Err(Error::Format(format!("tensor path {file:?} leaves the checkpoint")));
            }
            Ok((name.clone(), ustf::load(dir.join(file))?))
        })
        .collect()
}

/// Writes a checkpoint directory, replacing any previous content at `dir`.
pub fn save_checkpoint<T: Scalar>(
    dir: &Path,
    network: &Network<T>,
    optimizer: Option<&Adam<T>>,
    trainer: Option<&TrainerState>,
) -> Result<()> {
    let staging = dir.with_extension("partial");
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(staging.join(TENSOR_DIR)).map_err(|e| Error::io(&staging, e))?;
    let optimizer = match optimizer {
        Some(adam) => Some(OptimizerRecord {
            config: adam.config.clone(),
            t: adam.t,
            m: write_group(&staging, "adam_m", &adam.m)?,
            v: write_group(&staging, "adam_v", &adam.v)?,
        }),
        None => None,
    };
    let manifest = CheckpointManifest {
        dtype: T::DTYPE,
        spec: network.spec().clone(),
        layers: network.describe(),
        params: write_group(&staging, "param", &network.params())?,
        buffers: write_group(&staging, "buffer", &network.buffers())?,
        dropout: network.dropout_state(),
        optimizer,
        trainer: trainer.cloned(),
    };
    let path = staging.join(CHECKPOINT_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))
}

fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(CHECKPOINT_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Precision the checkpoint at `dir` was written in.
pub fn checkpoint_dtype(dir: &Path) -> Result<DType> {
    Ok(read_manifest(dir)?.dtype)
}

pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<Checkpoint<T>> {
    let manifest = read_manifest(dir)?;
    if manifest.dtype != T::DTYPE {
        return Err(Error::Format(format!(
            "checkpoint holds {:?} tensors, requested {:?}",
            manifest.dtype,
            T::DTYPE
        )));
    }
    let mut network = Network::build(&manifest.spec)?;
    if network.describe() != manifest.layers {
        return Err(Error::Format("checkpoint layer list does not match its model spec".into()));
    }
    network.load_state(&read_group(dir, &manifest.params)?, &read_group(dir, &manifest.buffers)?)?;
    if let Some(state) = &manifest.dropout {
        network.restore_dropout(state)?;
    }
    let optimizer = match manifest.optimizer {
        Some(rec) => Some(Adam::restore(rec.config, rec.t, read_group(dir, &rec.m)?, read_group(dir, &rec.v)?, &network.params())?),
        None => None,
    };
    Ok(Checkpoint {
        network,
        optimizer,
        trainer: manifest.trainer,
    })
}
