//! Episodic training loop with batched gradient accumulation, per-epoch
//! validation, best-checkpoint retention, and metrics persistence.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::prelude::*;


use crate::config::Config;
use crate::data::{load_dataset, make_synthetic_dataset, Dataset, EpisodeSampler, FoldSplit, SyntheticSpec};
use crate::error::{Result, TlgError};
use crate::eval::evaluate_fold;
use crate::model::{ForwardMode, TlgModel};
use crate::optim::AdamW;

/// Build the dataset named by the config.
pub fn dataset_from_config(config: &Config) -> Result<Arc<Dataset>> {
    match config.data.source.as_str() {
        "synthetic" => {
            let spec = SyntheticSpec {
                n_categories: config.data.n_categories,
                exemplars_per_category: config.data.exemplars_per_category,
                image_size: config.data.image_size,
                seed: config.data.seed,
                max_distractors: config.data.max_distractors,
            };
            Ok(Arc::new(make_synthetic_dataset(&spec)?))
        }
        "disk" => {
            let ds = load_dataset(Path::new(&config.data.root))?;
            if ds.image_size != config.data.image_size {
                return Err(TlgError::Config(format!(
                    "disk dataset images are {} px but data.image_size is {}",
                    ds.image_size, config.data.image_size
                )));
            }
            Ok(Arc::new(ds))
        }
        other => Err(TlgError::Config(format!("unknown data source {other}"))),
    }
}

/// Fold splits for the configured dataset.
pub fn folds_from_config(config: &Config, dataset: &Dataset) -> Result<Vec<FoldSplit>> {
    if config.data.source == "disk" {
        crate::data::load_folds(
            Path::new(&config.data.root),
            dataset.n_categories(),
            config.data.n_folds,
        )
    } else {
        (0..config.data.n_folds)
            .map(|f| FoldSplit::round_robin(dataset.n_categories(), config.data.n_folds, f))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_miou: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochRecord>,
    pub best_val_miou: f64,
    pub best_epoch: usize,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
}

impl TrainOutcome {
    pub fn final_train_loss(&self) -> f64 {
        self.epochs.last().map(|e| e.train_loss).unwrap_or(f64::NAN)
    }
}

/// Seed for the episode stream of one epoch; distinct from the validation
/// stream so the two never collide.
fn epoch_stream_seed(base: u64, epoch: usize) -> u64 {
    base ^ (epoch as u64).wrapping_mul(0xA076_1D64_78BD_642F)
}

const VAL_STREAM_SALT: u64 = 0x5151_5151_AAAA_0001;

/// Train a model on one fold's base categories, validating each epoch on the
/// fold's held-out categories and retaining the best checkpoint.
pub fn train(
    model: &mut TlgModel,
    dataset: Arc<Dataset>,
    split: &FoldSplit,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    let cfg = model.config.clone();
    let sampler =
        EpisodeSampler::new(dataset.clone(), &split.train_categories, cfg.train.shot, split.fold_id)?;
    let mut optimizer = AdamW::new(model.store(), cfg.train.learning_rate, cfg.train.weight_decay);
    std::fs::create_dir_all(out_dir)?;
    let checkpoint_path = out_dir.join("model.ckpt");
    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = csv::Writer::from_path(&metrics_path)
        .map_err(|e| TlgError::Io(std::io::Error::other(e)))?;
    metrics
        .write_record(["epoch", "train_loss", "val_miou"])
        .map_err(|e| TlgError::Io(std::io::Error::other(e)))?;

    let mut epochs = Vec::with_capacity(cfg.train.epochs);
    let mut best_val_miou = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    for epoch in 0..cfg.train.epochs {
        let stream = epoch_stream_seed(cfg.train.seed, epoch);
        let mut epoch_loss = 0.0;
        let mut batch_grads: Vec<Option<ArrayD<f64>>> = vec![None; model.store().len()];
        let mut batch_count = 0usize;
        for index in 0..cfg.train.episodes_per_epoch {
            let episode = sampler.sample(stream, index as u64);
            let pass = model.forward(&episode, ForwardMode::Train)?;
            let loss = pass.loss_value();
            if !loss.is_finite() {
                return Err(TlgError::Runtime(format!(
                    "non-finite loss at epoch {epoch} on episode f{}-s{}-i{} \
                     (category {}, query {})",
                    episode.fold_id, stream, episode.index, episode.category_id, episode.query_id
                )));
            }
            epoch_loss += loss;
            let grads = pass.graph.backward(pass.loss);
            for (slot, g) in batch_grads.iter_mut().zip(pass.binder.gradients(&grads)) {
                match (slot.as_mut(), g) {
                    (Some(acc), Some(g)) => *acc += &g,
                    (None, Some(g)) => *slot = Some(g),
                    _ => {}
                }
            }
            batch_count += 1;
            if batch_count == cfg.train.batch_size || index + 1 == cfg.train.episodes_per_epoch {
                let scale = 1.0 / batch_count as f64;
                for g in batch_grads.iter_mut().flatten() {
                    g.mapv_inplace(|v| v * scale);
                }
                optimizer.step(model.store_mut(), &batch_grads);
                batch_grads = vec![None; model.store().len()];
                batch_count = 0;
            }
        }
        let train_loss = epoch_loss / cfg.train.episodes_per_epoch as f64;

        let (val, _) = evaluate_fold(
            model,
            dataset.clone(),
            split,
            cfg.eval.shot,
            cfg.train.val_episodes.max(1),
            cfg.train.seed ^ VAL_STREAM_SALT,
        )?;
        if val.miou > best_val_miou {
            best_val_miou = val.miou;
            best_epoch = epoch;
            model.save_checkpoint(&checkpoint_path)?;
        }
        metrics
            .write_record([
                epoch.to_string(),
                format!("{train_loss:.17}"),
                format!("{:.17}", val.miou),
            ])
            .map_err(|e| TlgError::Io(std::io::Error::other(e)))?;
        metrics.flush()?;
        epochs.push(EpochRecord { epoch, train_loss, val_miou: val.miou });
    }
    if !checkpoint_path.exists() {
        model.save_checkpoint(&checkpoint_path)?;
    }
    Ok(TrainOutcome { epochs, best_val_miou, best_epoch, checkpoint_path, metrics_path })
}

/// Sample a fraction of flat parameter indices for gradient verification.
pub fn sample_parameter_indices(total: usize, fraction: f64, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut all: Vec<usize> = (0..total).collect();
    all.shuffle(&mut rng);
    let keep = ((total as f64 * fraction).ceil() as usize).clamp(1, total);
    all.truncate(keep);
    all.sort_unstable();
    all
}

/// Analytic gradient of the episode loss for every parameter, flattened per
/// parameter id.
pub fn parameter_gradients(
    model: &TlgModel,
    episode: &crate::data::Episode,
) -> Result<Vec<Option<ArrayD<f64>>>> {
    let pass = model.forward(episode, ForwardMode::Train)?;
    let grads = pass.graph.backward(pass.loss);
    Ok(pass.binder.gradients(&grads))
}

/// Central finite difference of the episode loss along one parameter element.
pub fn finite_difference_at(
    model: &mut TlgModel,
    episode: &crate::data::Episode,
    param: crate::params::ParamId,
    offset: usize,
    eps: f64,
) -> Result<f64> {
    model.store_mut().perturb(param, offset, eps);
    let plus = model.loss_value(episode, ForwardMode::Train)?;
    model.store_mut().perturb(param, offset, -2.0 * eps);
    let minus = model.loss_value(episode, ForwardMode::Train)?;
    model.store_mut().perturb(param, offset, eps);
    Ok((plus - minus) / (2.0 * eps))
}
