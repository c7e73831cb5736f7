//! SGD with momentum and weight decay, gradient clipping, the
//! reduce-on-plateau schedule, and the windowed training loop.

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{HrtrError, Result};
use crate::loss::{focal_loss, focal_loss_grad, FocalSpec};
use crate::metrics::{evaluate, Aggregation};
use crate::model::{backward, forward_train, ModelConfig, ModelParams};
use crate::windowing::{make_training_windows, WindowSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelSelection {
    #[default]
    Final,
    BestValFrameAcc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PlateauMonitor {
    #[default]
    TrainLoss,
    ValLoss,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub clip_max_norm: f64,
    /// Filled from the run config's top-level seed when absent.
    #[serde(default)]
    pub seed: u64,
    pub min_lr: f64,
    #[serde(default)]
    pub model_selection: ModelSelection,
    #[serde(default)]
    pub plateau_monitor: PlateauMonitor,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(HrtrError::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.min_lr > 0.0) || !(self.clip_max_norm > 0.0) {
            return Err(HrtrError::Config(
                "learning_rate, min_lr and clip_max_norm must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) && self.momentum != 0.0 {
            return Err(HrtrError::Config(format!("momentum must be in [0,1), got {}", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(HrtrError::Config("weight_decay must be non-negative".into()));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(HrtrError::Config(format!(
                "plateau_factor must be in (0,1), got {}",
                self.plateau_factor
            )));
        }
        if self.plateau_patience == 0 {
            return Err(HrtrError::Config("plateau_patience must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-parameter velocities plus the plateau schedule state.
pub struct OptimizerState {
    pub velocity: ModelParams,
    pub lr: f64,
    pub epochs_since_improvement: usize,
    pub best_loss: f64,
}

impl OptimizerState {
    pub fn new(model_config: &ModelConfig, train_config: &TrainConfig) -> Self {
        Self {
            velocity: ModelParams::zeros(model_config),
            lr: train_config.learning_rate,
            epochs_since_improvement: 0,
            best_loss: f64::INFINITY,
        }
    }
}

/// Scales all gradients by max_norm/g when the global L2 norm g exceeds
/// max_norm. Idempotent.
pub fn clip_gradients(grads: &mut ModelParams, max_norm: f64) {
    let mut sq = 0.0;
    for (_, slice) in grads.tensors_mut() {
        for &v in slice.iter() {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, slice) in grads.tensors_mut() {
            for v in slice.iter_mut() {
                *v *= scale;
            }
        }
    }
}

/// Global L2 norm across all tensors.
pub fn global_norm(grads: &mut ModelParams) -> f64 {
    let mut sq = 0.0;
    for (_, slice) in grads.tensors_mut() {
        for &v in slice.iter() {
            sq += v * v;
        }
    }
    sq.sqrt()
}

/// One SGD update: `g' = g + wd*p; v = momentum*v + g'; p -= lr*v`.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &mut ModelParams,
    state: &mut OptimizerState,
    config: &TrainConfig,
) {
    let lr = state.lr;
    for (((_, p), (_, g)), (_, v)) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors_mut())
        .zip(state.velocity.tensors_mut())
    {
        assert_eq!(p.len(), g.len());
        for i in 0..p.len() {
            let g_eff = g[i] + config.weight_decay * p[i];
            v[i] = config.momentum * v[i] + g_eff;
            p[i] -= lr * v[i];
        }
    }
}

/// Plateau schedule: cut lr by plateau_factor after `patience` consecutive
/// non-improving epochs, floored at min_lr.
pub fn plateau_update(state: &mut OptimizerState, epoch_loss: f64, config: &TrainConfig) {
    if epoch_loss < state.best_loss - 1e-8 {
        state.best_loss = epoch_loss;
        state.epochs_since_improvement = 0;
    } else {
        state.epochs_since_improvement += 1;
        if state.epochs_since_improvement >= config.plateau_patience {
            state.lr = (state.lr * config.plateau_factor).max(config.min_lr);
            state.epochs_since_improvement = 0;
        }
    }
}

/// One JSON-lines record per epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_frame_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_es: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
}

struct WindowRef {
    trial_id: String,
    start: usize,
    valid_len: usize,
}

fn collect_training_windows(dataset: &Dataset, spec: &WindowSpec) -> Result<Vec<WindowRef>> {
    let mut windows = Vec::new();
    for id in &dataset.split.train {
        let (features, _) = dataset.trial(id)?;
        let t = features.num_frames();
        for start in make_training_windows(t, spec) {
            windows.push(WindowRef {
                trial_id: id.clone(),
                start,
                valid_len: spec.size.min(t - start),
            });
        }
    }
    Ok(windows)
}

fn assemble_batch(
    dataset: &Dataset,
    windows: &[&WindowRef],
    w: usize,
) -> Result<(Array3<f64>, Array2<usize>, Array2<bool>)> {
    let b = windows.len();
    let d = dataset.feature_dim();
    let mut features = Array3::zeros((b, w, d));
    let mut labels = Array2::zeros((b, w));
    let mut mask = Array2::from_elem((b, w), false);
    for (bi, win) in windows.iter().enumerate() {
        let (f, l) = dataset.trial(&win.trial_id)?;
        for i in 0..win.valid_len {
            let frame = win.start + i;
            for j in 0..d {
                features[[bi, i, j]] = f.features[[frame, j]] as f64;
            }
            labels[[bi, i]] = l.labels[frame];
            mask[[bi, i]] = true;
        }
    }
    Ok((features, labels, mask))
}

/// The full training loop: epoch-seeded window shuffling, focal loss with
/// padding masks, gradient clipping and SGD, plateau scheduling, and optional
/// per-epoch validation. Fully deterministic given the seed.
pub fn train(
    dataset: &Dataset,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    window_spec: &WindowSpec,
    focal: &FocalSpec,
) -> Result<(ModelParams, Vec<EpochRecord>)> {
    model_config.validate()?;
    train_config.validate()?;
    window_spec.validate()?;
    focal.validate()?;
    if dataset.split.train.is_empty() {
        return Err(HrtrError::Data("train split is empty".into()));
    }
    if dataset.feature_dim() != model_config.input_dim
        || dataset.num_classes() != model_config.num_classes
    {
        return Err(HrtrError::Config(format!(
            "model expects D={} C={}, dataset has D={} C={}",
            model_config.input_dim,
            model_config.num_classes,
            dataset.feature_dim(),
            dataset.num_classes()
        )));
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    let mut params = ModelParams::init(model_config, &mut init_rng);
    let mut state = OptimizerState::new(model_config, train_config);
    let windows = collect_training_windows(dataset, window_spec)?;
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut log = Vec::with_capacity(train_config.epochs);
    let mut best_val_acc = f64::NEG_INFINITY;
    let mut best_params: Option<ModelParams> = None;

    for epoch in 0..train_config.epochs {
        let mut epoch_rng = ChaCha8Rng::seed_from_u64(train_config.seed);
        epoch_rng.set_stream(1 + epoch as u64);
        order.shuffle(&mut epoch_rng);

        let mut loss_sum = 0.0;
        let mut frame_count = 0usize;
        for (batch_idx, chunk) in order.chunks(train_config.batch_size).enumerate() {
            let batch: Vec<&WindowRef> = chunk.iter().map(|&i| &windows[i]).collect();
            let (features, labels, mask) = assemble_batch(dataset, &batch, window_spec.size)?;
            let (logits, cache) = forward_train(&params, &features, &mut epoch_rng)?;
            let loss = focal_loss(logits.view(), labels.view(), mask.view(), focal)?;
            if !loss.is_finite() {
                return Err(HrtrError::Numeric(format!(
                    "non-finite loss at epoch {epoch}, batch {batch_idx}"
                )));
            }
            let count = mask.iter().filter(|&&m| m).count();
            loss_sum += loss * count as f64;
            frame_count += count;
            let dlogits = focal_loss_grad(logits.view(), labels.view(), mask.view(), focal)?;
            let mut grads = backward(&params, &cache, &dlogits);
            clip_gradients(&mut grads, train_config.clip_max_norm);
            sgd_step(&mut params, &mut grads, &mut state, train_config);
        }
        let train_loss = loss_sum / frame_count as f64;

        let mut record = EpochRecord {
            epoch,
            train_loss,
            lr: state.lr,
            val_frame_acc: None,
            val_es: None,
            val_loss: None,
        };
        if !dataset.split.val.is_empty() {
            let report = evaluate(
                dataset,
                &dataset.split.val,
                &params,
                window_spec,
                None,
                Aggregation::PerTrialMean,
            )?;
            record.val_frame_acc = Some(report.frame_accuracy);
            record.val_es = Some(report.edit_score);
            if train_config.plateau_monitor == PlateauMonitor::ValLoss {
                record.val_loss = Some(validation_loss(dataset, &params, window_spec, focal)?);
            }
            if train_config.model_selection == ModelSelection::BestValFrameAcc
                && report.frame_accuracy > best_val_acc
            {
                best_val_acc = report.frame_accuracy;
                best_params = Some(params.clone());
            }
        }
        let monitored = match train_config.plateau_monitor {
            PlateauMonitor::TrainLoss => train_loss,
            PlateauMonitor::ValLoss => record.val_loss.ok_or_else(|| {
                HrtrError::Config("plateau_monitor=val_loss requires a val split".into())
            })?,
        };
        plateau_update(&mut state, monitored, train_config);
        log.push(record);
    }

    let selected = match train_config.model_selection {
        ModelSelection::Final => params,
        ModelSelection::BestValFrameAcc => best_params.unwrap_or(params),
    };
    Ok((selected, log))
}

/// Eval-mode focal loss over the validation split's inference windows.
fn validation_loss(
    dataset: &Dataset,
    params: &ModelParams,
    window_spec: &WindowSpec,
    focal: &FocalSpec,
) -> Result<f64> {
    let mut loss_sum = 0.0;
    let mut count = 0usize;
    for id in &dataset.split.val {
        let (f, _) = dataset.trial(id)?;
        let t = f.num_frames();
        for (start, valid) in crate::windowing::make_inference_windows(t, window_spec.size) {
            let win = WindowRef {
                trial_id: id.clone(),
                start,
                valid_len: valid,
            };
            let (features, labels, mask) = assemble_batch(dataset, &[&win], window_spec.size)?;
            let logits = crate::model::forward_eval(params, &features)?;
            let loss = focal_loss(logits.view(), labels.view(), mask.view(), focal)?;
            loss_sum += loss * valid as f64;
            count += valid;
        }
    }
    Ok(loss_sum / count as f64)
}
