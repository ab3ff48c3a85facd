//! Training loop, evaluation and result reporting.

mod checkpoint;
mod report;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{one_hot, softmax_cross_entropy, Mode};
use crate::model::{ModelSpec, Network, TwoDMode, Variant};
use crate::optim::{Adam, AdamConfig};
use crate::pipeline::{split_dataset, Dataset};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub use checkpoint::{checkpoint_dtype, load_checkpoint, save_checkpoint, Checkpoint, TrainerState, CHECKPOINT_FILE};
pub use report::{
    aggregate, build_reports, format_table, read_table_csv, write_table_csv, ComparisonRow, ConfusionMatrix, RunMetrics,
    RunReport, RunTiming, Summary,
};

pub const METRICS_FILE: &str = "metrics.json";
pub const TIMING_FILE: &str = "timing.json";

fn default_epochs() -> usize {
    30
}

fn default_batch() -> usize {
    8
}

fn one() -> usize {
    1
}

fn default_lr() -> f64 {
    1e-4
}

fn default_dropout() -> f64 {
    0.5
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_fraction() -> f64 {
    0.8
}

fn default_patience() -> usize {
    5
}

fn default_min_delta() -> f64 {
    1e-4
}

fn default_dtype() -> DType {
    DType::F32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "one")]
    pub eval_batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_fraction")]
    pub train_fraction: f64,
    /// Epochs without a train-loss improvement above `min_delta` before stopping.
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_min_delta")]
    pub min_delta: f64,
    /// Stop as soon as an epoch's mean train loss falls below this value.
    #[serde(default)]
    pub target_loss: Option<f64>,
    #[serde(default)]
    pub clip: Option<f64>,
    #[serde(default = "default_dtype")]
    pub dtype: DType,
    #[serde(default)]
    pub stage_filters: Option<Vec<usize>>,
    #[serde(default)]
    pub interleaved_relu: bool,
    #[serde(default)]
    pub mid_channels: Option<usize>,
    #[serde(default)]
    pub two_d_mode: TwoDMode,
    #[serde(default)]
    pub resize_targets: Option<Vec<[usize; 3]>>,
}

impl TrainConfig {
    pub fn new(variant: Variant, manifest: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        TrainConfig {
            variant,
            manifest: manifest.into(),
            out_dir: out_dir.into(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            eval_batch_size: 1,
            lr: default_lr(),
            dropout: default_dropout(),
            seeds: default_seeds(),
            train_fraction: default_fraction(),
            patience: default_patience(),
            min_delta: default_min_delta(),
            target_loss: None,
            clip: None,
            dtype: default_dtype(),
            stage_filters: None,
            interleaved_relu: false,
            mid_channels: None,
            two_d_mode: TwoDMode::CenterFrame,
            resize_targets: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.patience == 0 || !(self.min_delta >= 0.0) {
            return Err(Error::Config("patience must be positive and min_delta non-negative".into()));
        }
        self.adam().validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            clip: self.clip,
            ..AdamConfig::default()
        }
    }

    pub fn model_spec(&self, num_classes: usize, input_shape: [usize; 4], seed: u64) -> ModelSpec {
        let mut spec = ModelSpec::new(self.variant);
        spec.num_classes = num_classes;
        spec.input_shape = input_shape;
        spec.seed = seed;
        spec.dropout = self.dropout;
        spec.interleaved_relu = self.interleaved_relu;
        spec.mid_channels = self.mid_channels;
        spec.two_d_mode = self.two_d_mode;
        spec.resize_targets = self.resize_targets.clone();
        if let Some(filters) = &self.stage_filters {
            spec.stage_filters = filters.clone();
        }
        spec
    }

    /// Output directory of one seed.
    pub fn run_dir(&self, seed: u64) -> PathBuf {
        self.out_dir.join(format!("{}-seed{seed}", self.variant))
    }
}

/// Index with the largest value; the lowest index wins ties.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Accuracy and confusion matrix of `network` in inference mode on the
/// chosen samples, `batch` samples per forward pass.
pub fn evaluate<T: Scalar>(
    network: &mut Network<T>,
    dataset: &Dataset<T>,
    indices: &[usize],
    batch: usize,
) -> Result<(f64, ConfusionMatrix)> {
    if indices.is_empty() {
        return Err(Error::Data("evaluation on an empty test set".into()));
    }
    let classes = network.spec().num_classes;
    let labels = dataset.labels();
    let mut confusion = ConfusionMatrix::new(classes);
    for chunk in indices.chunks(batch.max(1)) {
        let logits = network.forward(&dataset.batch(chunk)?, Mode::Infer)?;
        for (row, &i) in logits.data().chunks_exact(classes).zip(chunk) {
            confusion.record(labels[i], argmax(row));
        }
    }
    network.clear_cache();
    Ok((confusion.accuracy(), confusion))
}

/// One seed's training run.
pub struct Trainer<T: Scalar> {
    pub config: TrainConfig,
    pub network: Network<T>,
    pub optimizer: Adam<T>,
    pub state: TrainerState,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    best: Option<(BTreeMap<String, Tensor<T>>, BTreeMap<String, Tensor<T>>)>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: &TrainConfig, dataset: &Dataset<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let shape = dataset.sample_shape().ok_or_else(|| Error::Data("dataset has no segments".into()))?;
        let (train_indices, test_indices) = split_dataset(&dataset.manifest.segments, config.train_fraction, seed)?;
        if train_indices.is_empty() {
            return Err(Error::Data("empty training set".into()));
        }
        let spec = config.model_spec(dataset.manifest.num_classes, shape, seed);
        Ok(Trainer {
            config: config.clone(),
            network: Network::build(&spec)?,
            optimizer: Adam::new(config.adam())?,
            state: TrainerState {
                seed,
                epochs_done: 0,
                loss_curve: Vec::new(),
                best_loss: None,
                best_epoch: 0,
                plateau_loss: None,
                stale_epochs: 0,
                stopped_early: false,
            },
            train_indices,
            test_indices,
            best: None,
        })
    }

    /// Continues from the checkpoint at `checkpoint_dir`, using `best_dir`
    /// (if present) as the best-so-far weights.
    pub fn resume(config: &TrainConfig, dataset: &Dataset<T>, checkpoint_dir: &Path, best_dir: Option<&Path>) -> Result<Self> {
        let ckpt = load_checkpoint::<T>(checkpoint_dir)?;
        let state = ckpt
            .trainer
            .ok_or_else(|| Error::Format(format!("{} holds no trainer state", checkpoint_dir.display())))?;
        let mut trainer = Trainer::new(config, dataset, state.seed)?;
        if ckpt.network.spec() != trainer.network.spec() {
            return Err(Error::Config("checkpoint was written for a different model configuration".into()));
        }
        trainer.network = ckpt.network;
        trainer.optimizer = ckpt.optimizer.ok_or_else(|| Error::Format("checkpoint holds no optimizer state".into()))?;
        trainer.state = state;
        trainer.best = match best_dir {
            Some(dir) if dir.join(CHECKPOINT_FILE).exists() => {
                let best = load_checkpoint::<T>(dir)?.network;
                Some((best.params(), best.buffers()))
            }
            _ => Some((trainer.network.params(), trainer.network.buffers())),
        };
        Ok(trainer)
    }

    pub fn finished(&self) -> bool {
        self.state.stopped_early || self.state.epochs_done >= self.config.epochs
    }

    /// One optimizer update on the given samples; returns the batch loss.
    pub fn step(&mut self, dataset: &Dataset<T>, indices: &[usize]) -> Result<f64> {
        let labels = dataset.labels();
        let batch = dataset.batch(indices)?;
        let targets = one_hot::<T>(&indices.iter().map(|&i| labels[i]).collect::<Vec<_>>(), self.network.spec().num_classes)?;
        let logits = self.network.forward(&batch, Mode::Train)?;
        let (loss, grad) = softmax_cross_entropy(&logits, &targets)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at epoch {}", self.state.epochs_done)));
        }
        let grads = self.network.backward(&grad)?;
        let mut params = self.network.params();
        self.optimizer.step(&mut params, &grads)?;
        self.network.visit_params_mut(&mut |name, p| {
            if let Some(v) = params.remove(&name) {
                p.value = v;
            }
            p.grad = None;
        });
        Ok(loss.to_f64_lossy())
    }

    /// Training order for `epoch`, fixed by the run seed.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.state.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order = self.train_indices.clone();
        order.shuffle(&mut rng);
        order
    }

    /// Runs the next epoch and applies the best-weights and plateau rules.
    /// Returns the epoch's mean train loss.
    pub fn train_epoch(&mut self, dataset: &Dataset<T>) -> Result<f64> {
        let order = self.epoch_order(self.state.epochs_done);
        let mut total = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            total += self.step(dataset, chunk)? * chunk.len() as f64;
        }
        self.network.clear_cache();
        let loss = total / order.len() as f64;
        let s = &mut self.state;
        s.epochs_done += 1;
        s.loss_curve.push(loss);
        if s.best_loss.map_or(true, |b| loss < b) {
            s.best_loss = Some(loss);
            s.best_epoch = s.epochs_done;
            self.best = Some((self.network.params(), self.network.buffers()));
        }
        if s.plateau_loss.map_or(true, |p| loss < p - self.config.min_delta) {
            s.plateau_loss = Some(loss);
            s.stale_epochs = 0;
        } else {
            s.stale_epochs += 1;
        }
        let converged = self.config.target_loss.is_some_and(|t| loss < t);
        if (s.stale_epochs >= self.config.patience || converged) && s.epochs_done < self.config.epochs {
            s.stopped_early = true;
        }
        Ok(loss)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &self.network, Some(&self.optimizer), Some(&self.state))
    }

    /// A copy of the network carrying the best weights seen so far.
    pub fn best_network(&self) -> Result<Network<T>> {
        let mut net = Network::build(self.network.spec())?;
        match &self.best {
            Some((params, buffers)) => net.load_state(params, buffers)?,
            None => net.load_state(&self.network.params(), &self.network.buffers())?,
        }
        Ok(net)
    }
}

/// Files written for one seed under [`TrainConfig::run_dir`].
pub struct RunOutput<T: Scalar> {
    pub network: Network<T>,
    pub metrics: RunMetrics,
    pub timing: RunTiming,
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<S> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Trains one seed to completion (resuming from `run_dir/checkpoint` when
/// `resume` is set), evaluates the best weights on the held-out split and
/// writes checkpoints, metrics, timing and the confusion matrix.
pub fn train_run<T: Scalar>(
    config: &TrainConfig,
    dataset: &Dataset<T>,
    seed: u64,
    resume: bool,
    on_epoch: &mut dyn FnMut(u64, usize, f64),
) -> Result<RunOutput<T>> {
    let started = Instant::now();
    let dir = config.run_dir(seed);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let (ckpt_dir, best_dir) = (dir.join("checkpoint"), dir.join("best"));
    let mut trainer = if resume && ckpt_dir.join(CHECKPOINT_FILE).exists() {
        Trainer::resume(config, dataset, &ckpt_dir, Some(&best_dir))?
    } else {
        Trainer::new(config, dataset, seed)?
    };
    while !trainer.finished() {
        let loss = trainer.train_epoch(dataset)?;
        on_epoch(seed, trainer.state.epochs_done, loss);
        trainer.save(&ckpt_dir)?;
        if trainer.state.best_epoch == trainer.state.epochs_done {
            save_checkpoint(&best_dir, &trainer.network, None, Some(&trainer.state))?;
        }
    }
    let mut network = trainer.best_network()?;
    let (accuracy, confusion) = evaluate(&mut network, dataset, &trainer.test_indices, config.eval_batch_size)?;
    let metrics = RunMetrics {
        variant: config.variant,
        seed,
        accuracy,
        loss_curve: trainer.state.loss_curve.clone(),
        confusion,
        param_count: network.count_params(),
        best_epoch: trainer.state.best_epoch,
        stopped_early: trainer.state.stopped_early,
        train_count: trainer.train_indices.len(),
        test_count: trainer.test_indices.len(),
    };
    let timing = RunTiming {
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    write_json(&dir.join(METRICS_FILE), &metrics)?;
    write_json(&dir.join(TIMING_FILE), &timing)?;
    let path = dir.join("confusion.csv");
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    metrics.confusion.write_csv(file)?;
    let path = dir.join("model.txt");
    fs::write(&path, network.describe_text()).map_err(|e| Error::io(&path, e))?;
    Ok(RunOutput {
        network,
        metrics,
        timing,
    })
}

/// Every `metrics.json` below `root`, paired with its `timing.json` if present.
pub fn collect_runs(root: &Path) -> Result<Vec<(RunMetrics, Option<RunTiming>)>> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let mut entries: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io(&dir, e))?;
        entries.sort();
        for path in entries {
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == METRICS_FILE) {
                let metrics: RunMetrics = read_json(&path)?;
                let timing_path = path.with_file_name(TIMING_FILE);
                let timing = if timing_path.exists() { Some(read_json(&timing_path)?) } else { None };
                found.push((metrics, timing));
            }
        }
    }
    found.sort_by_key(|(m, _)| (m.variant, m.seed));
    Ok(found)
}
