//! Training, evaluation, inference and ablation over the assembled model.

mod ablation;
mod pipeline;
pub mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cbhvt_tensor::optim::{clip_grad_norm, Sgd};
use cbhvt_tensor::Gradients;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use ablation::{ablate, comparison_name, AblationRow, AblationTable, SplitResult};
pub use pipeline::{
    build_model, build_pipeline, mask_target, GeneratorOverride, Model, ModelConfig, RoiSettings, RpnSettings,
};

use crate::ctx::Ctx;
use crate::data::ImageSample;
use crate::error::{config_err, data_err, Error, Result};
use crate::heads::{total_loss, Detection, LossBreakdown};
use crate::metrics::{evaluate_dataset, Criterion, MetricsReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub optimizer: Optimizer,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub model: ModelConfig,
    /// Single-threaded, fixed-order execution. The trainer is always
    /// deterministic; the flag is recorded for provenance of runs.
    pub deterministic: bool,
    /// Stops early once this many optimizer steps have run.
    pub max_iterations: Option<usize>,
    /// Global gradient-norm bound.
    pub grad_clip: Option<f64>,
    /// Random horizontal flips of training images.
    pub flip_augmentation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 0.0025,
            weight_decay: 0.0001,
            momentum: 0.9,
            optimizer: Optimizer::Sgd,
            batch_size: 4,
            seed: 0,
            model: ModelConfig::default(),
            deterministic: true,
            max_iterations: None,
            grad_clip: Some(10.0),
            flip_augmentation: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return config_err("epochs and batch_size must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return config_err(format!("learning rate {} must be finite and non-negative", self.learning_rate));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return config_err(format!("grad_clip {c} must be positive"));
            }
        }
        Sgd::new(self.momentum, self.weight_decay).map_err(|e| Error::Config(e.to_string()))?;
        self.model.validate()
    }
}

/// SHA-256 of the canonical (key-sorted, compact) JSON form.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let value = serde_json::to_value(config).map_err(|e| Error::Config(format!("config is not serializable: {e}")))?;
    let canonical = serde_json::to_string(&value).map_err(|e| Error::Config(e.to_string()))?;
    Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    /// 1-based optimizer step.
    pub iteration: usize,
    pub epoch: usize,
    pub loss: LossBreakdown,
    /// Before clipping.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: serde_json::Value,
    pub config_hash: String,
    pub parameter_count: usize,
    pub losses: Vec<StepLog>,
    pub checkpoints: Vec<PathBuf>,
    #[serde(default)]
    pub metrics: BTreeMap<String, MetricsReport>,
}

impl RunRecord {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

pub fn epoch_checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:03}.ckpt"))
}

fn is_numeric(e: &Error) -> bool {
    e.exit_code() == 4
}

/// Trains a freshly built model. Each image contributes its own loss,
/// gradients are averaged over the batch, clipped, and applied with SGD.
/// Checkpoints land in `checkpoint_dir` at the end of every epoch. A
/// non-finite loss aborts the run after saving the last good weights.
pub fn train(config: &TrainConfig, dataset: &[ImageSample], checkpoint_dir: Option<&Path>) -> Result<(Model, RunRecord)> {
    train_with(config, dataset, checkpoint_dir, |_, _| {})
}

pub fn train_with(
    config: &TrainConfig,
    dataset: &[ImageSample],
    checkpoint_dir: Option<&Path>,
    mut on_step: impl FnMut(&StepLog, &Model),
) -> Result<(Model, RunRecord)> {
    config.validate()?;
    if dataset.is_empty() {
        return data_err("training set is empty");
    }
    if config.batch_size > dataset.len() {
        return config_err(format!("batch_size {} exceeds the {} training images", config.batch_size, dataset.len()));
    }
    if let Some(s) = dataset.iter().find(|s| !s.labeled) {
        return data_err(format!("{} is unlabeled and cannot be trained on", s.id));
    }
    let model = build_model(&config.model, config.seed)?;
    let mut record = RunRecord {
        config: serde_json::to_value(config).map_err(|e| Error::Config(e.to_string()))?,
        config_hash: config_hash(config)?,
        parameter_count: model.parameter_count(),
        losses: vec![],
        checkpoints: vec![],
        metrics: BTreeMap::new(),
    };
    let params = model.trainable_params();
    let mut sgd = Sgd::new(config.momentum, config.weight_decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let ctx = Ctx::train();
    let limit = config.max_iterations.unwrap_or(usize::MAX);
    let mut iteration = 0;

    let abort = |e: Error, model: &Model, record: &mut RunRecord| -> Error {
        if !is_numeric(&e) {
            return e;
        }
        let Some(dir) = checkpoint_dir else { return e };
        let path = dir.join("last_good.ckpt");
        match model.save(&path) {
            Ok(()) => {
                record.checkpoints.push(path.clone());
                e.context(format!("training aborted; last good weights saved to {}", path.display()))
            }
            Err(_) => e,
        }
    };

    'epochs: for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            if iteration >= limit {
                break 'epochs;
            }
            let scale = 1.0 / batch.len() as f64;
            let mut grads = Gradients::default();
            let mut sums = [0.0; 3];
            for &i in batch {
                let flipped;
                let sample = if config.flip_augmentation && rng.random::<bool>() {
                    flipped = dataset[i].flip_horizontal();
                    &flipped
                } else {
                    &dataset[i]
                };
                let step = model
                    .loss(sample, &ctx, &mut rng)
                    .and_then(|(loss, br)| Ok((loss.mul_scalar(scale)?.backward()?, br)))
                    .map_err(|e| e.context(format!("iteration {} image {}", iteration + 1, sample.id)));
                let (g, br) = match step {
                    Ok(v) => v,
                    Err(e) => return Err(abort(e, &model, &mut record)),
                };
                grads.merge(g)?;
                sums[0] += br.l_c;
                sums[1] += br.l_l;
                sums[2] += br.l_b;
            }
            let loss = total_loss(sums[0] * scale, sums[1] * scale, sums[2] * scale)?;
            let grad_norm = match config.grad_clip {
                Some(c) => clip_grad_norm(&mut grads, c),
                None => grads.param_norm(),
            };
            if !grad_norm.is_finite() {
                let e = Error::Numeric(format!("gradient norm is {grad_norm} at iteration {}", iteration + 1));
                return Err(abort(e, &model, &mut record));
            }
            sgd.step(&params, &grads, config.learning_rate)?;
            iteration += 1;
            let log = StepLog {
                iteration,
                epoch,
                loss,
                grad_norm,
            };
            log::debug!(
                "iter {iteration} epoch {epoch}: total {:.5} (l_c {:.5}, l_l {:.5}, l_b {:.5}) |g| {grad_norm:.3}",
                loss.total,
                loss.l_c,
                loss.l_l,
                loss.l_b
            );
            on_step(&log, &model);
            record.losses.push(log);
        }
        if let Some(dir) = checkpoint_dir {
            let path = epoch_checkpoint_path(dir, epoch);
            model.save(&path)?;
            record.checkpoints.push(path);
        }
    }
    if iteration >= limit && config.max_iterations.is_some() {
        if let Some(dir) = checkpoint_dir {
            let path = dir.join("final.ckpt");
            model.save(&path)?;
            record.checkpoints.push(path);
        }
    }
    Ok((model, record))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDetections {
    pub id: String,
    pub detections: Vec<Detection>,
}

/// Detections for every image, in dataset order.
pub fn infer(model: &Model, dataset: &[ImageSample]) -> Result<Vec<ImageDetections>> {
    dataset
        .iter()
        .map(|s| {
            Ok(ImageDetections {
                id: s.id.clone(),
                detections: model.predict(s).map_err(|e| e.context(format!("image {}", s.id)))?,
            })
        })
        .collect()
}

pub fn save_detections(dets: &[ImageDetections], path: &Path) -> Result<()> {
    let text = serde_json::to_string(dets).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Inference plus pooled matching against the annotations.
pub fn evaluate(model: &Model, dataset: &[ImageSample], criterion: &Criterion) -> Result<MetricsReport> {
    if let Some(s) = dataset.iter().find(|s| !s.labeled) {
        return data_err(format!(
            "{} has no annotations; metrics need labels, use inference-only mode (`cbhvt infer`) instead",
            s.id
        ));
    }
    criterion.validate()?;
    let dets: BTreeMap<String, Vec<Detection>> = infer(model, dataset)?.into_iter().map(|d| (d.id, d.detections)).collect();
    let gts: BTreeMap<String, Vec<_>> = dataset.iter().map(|s| (s.id.clone(), s.boxes.clone())).collect();
    let mut report = evaluate_dataset(&dets, &gts, criterion)?;
    report.config_hash = Some(config_hash(&model.config)?);
    Ok(report)
}

/// Loads a model checkpoint and evaluates it.
pub fn evaluate_checkpoint(path: &Path, dataset: &[ImageSample], criterion: &Criterion) -> Result<MetricsReport> {
    evaluate(&Model::load(path)?, dataset, criterion)
}
