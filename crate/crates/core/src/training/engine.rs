use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{spatial_extrema, voltage_stats, NormalizationParams};
use crate::error::{NbfError, Result};
use crate::metrics::{compute_metrics, ChannelMetrics};
use crate::model::{init_model, FieldModel, Layer, Mode};
use crate::recording::{segment_windows, ElectrodeLayout, Recording, TimeWindow};
use crate::training::adam::{adam_step, layer_tensors, layer_tensors_mut, AdamState};
use crate::training::config::{SeedTag, TrainConfig};
use crate::training::loss::Loss;

/// One `(x, y, z, t) -> v` supervision pair, in meters, seconds and volts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSample {
    pub position: [f64; 3],
    pub time: f64,
    pub target_voltage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub window_index: usize,
    pub warm_started: bool,
    pub epochs: usize,
    /// Eval-mode loss over the whole window before the first update.
    pub initial_loss: f64,
    /// Eval-mode loss over the whole window after the last update.
    pub final_loss: f64,
    /// Mean train-mode loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// `final_loss < 0.5 * initial_loss`.
    pub converged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<BTreeMap<String, ChannelMetrics>>,
    /// Kept out of the JSON so reports of identical runs are byte-identical.
    #[serde(skip)]
    pub wall_time_seconds: f64,
}

/// Mean batch loss and its exact gradient with respect to every parameter.
///
/// Dropout masks come from a stream seeded with `dropout_seed`; in eval mode
/// (or with dropout disabled) the seed is irrelevant.
pub fn backward(
    model: &FieldModel,
    batch: &[TrainSample],
    config: &TrainConfig,
    dropout_seed: u64,
) -> Result<(f64, Vec<Layer>)> {
    if batch.is_empty() {
        return Err(NbfError::invalid("backward needs a non-empty batch"));
    }
    let points: Vec<([f64; 3], f64)> = batch.iter().map(|s| (s.position, s.time)).collect();
    let features = model.features_for(&points);
    let targets: Vec<f64> = batch.iter().map(|s| model.target_to_net(s.target_voltage)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let (loss, grads) = batch_gradients(model, &features, &targets, config.loss(), &mut rng)?;
    if !loss.is_finite() {
        return Err(NbfError::NonFiniteLoss(format!(
            "batch of {} samples produced loss {loss}",
            batch.len()
        )));
    }
    Ok((loss, grads))
}

fn batch_gradients(
    model: &FieldModel,
    features: &[f64],
    targets: &[f64],
    loss: Loss,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<Layer>)> {
    let n = targets.len();
    let cache = model.forward_batch(features, n, Mode::Train, Some(rng))?;
    let scale = 1.0 / n as f64;
    let mut total = 0.0;
    let mut d_out = Vec::with_capacity(n);
    for (&pred, &target) in cache.outputs.iter().zip(targets) {
        let (l, d) = loss.eval(pred, target);
        total += l;
        d_out.push(d * scale);
    }
    let grads = model.backward_from_cache(&cache, &d_out);
    Ok((total * scale, grads))
}

fn eval_loss(model: &FieldModel, features: &[f64], targets: &[f64], loss: Loss) -> Result<f64> {
    const CHUNK: usize = 1024;
    let d = model.input_dim();
    let mut total = 0.0;
    for (f, t) in features.chunks(CHUNK * d).zip(targets.chunks(CHUNK)) {
        let cache = model.forward_batch(f, t.len(), Mode::Eval, None)?;
        total += cache.outputs.iter().zip(t).map(|(&p, &y)| loss.eval(p, y).0).sum::<f64>();
    }
    Ok(total / targets.len() as f64)
}

/// Collects every `(train electrode, sample instant)` pair inside `window`.
pub fn window_samples(recording: &Recording, window: &TimeWindow, layout: &ElectrodeLayout) -> Result<Vec<TrainSample>> {
    if window.sample_end > recording.n_samples() || window.is_empty() {
        return Err(NbfError::invalid(format!(
            "window {} (samples {}..{}) does not fit a recording of {} samples",
            window.index,
            window.sample_start,
            window.sample_end,
            recording.n_samples()
        )));
    }
    let mut out = Vec::with_capacity(layout.len() * window.len());
    for e in layout.iter() {
        let channel = recording
            .channel_by_label(&e.label)
            .ok_or_else(|| NbfError::invalid(format!("electrode '{}' is not in the recording", e.label)))?;
        for i in window.sample_range() {
            out.push(TrainSample {
                position: e.pos,
                time: recording.time_of(i),
                target_voltage: channel[i],
            });
        }
    }
    Ok(out)
}

/// Warm-start input for [`train_window_with_state`].
pub struct WarmStart<'a> {
    pub model: &'a FieldModel,
    /// Adam moments to continue from; `None` restarts them at zero.
    pub optimizer: Option<AdamState>,
}

/// Trains one window. See [`train_window_with_state`].
pub fn train_window(
    recording: &Recording,
    window: &TimeWindow,
    train_layout: &ElectrodeLayout,
    validation_layout: Option<&ElectrodeLayout>,
    config: &TrainConfig,
    init: Option<&FieldModel>,
) -> Result<(FieldModel, TrainReport)> {
    let warm = init.map(|model| WarmStart { model, optimizer: None });
    let (model, report, _) = train_window_with_state(recording, window, train_layout, validation_layout, config, warm)?;
    Ok((model, report))
}

/// Trains one window from scratch, or from `warm` for `epochs_subsequent`
/// epochs. Returns the final optimizer state alongside the model.
pub fn train_window_with_state(
    recording: &Recording,
    window: &TimeWindow,
    train_layout: &ElectrodeLayout,
    validation_layout: Option<&ElectrodeLayout>,
    config: &TrainConfig,
    warm: Option<WarmStart<'_>>,
) -> Result<(FieldModel, TrainReport, AdamState)> {
    let started = Instant::now();
    config.validate()?;
    train_layout.require_fit_size()?;
    let samples = window_samples(recording, window, train_layout)?;
    let volts: Vec<f64> = samples.iter().map(|s| s.target_voltage).collect();
    let (s_min, s_max) = spatial_extrema(&train_layout.positions())?;
    let (v_mu, v_sigma) = voltage_stats(&volts)?;
    let norm = NormalizationParams {
        s_min,
        s_max,
        t_min: window.t_start,
        t_max: window.t_end,
        v_mu,
        v_sigma,
    };

    let (mut model, mut adam, warm_started) = match warm {
        None => {
            let model = init_model(
                config.arch(),
                config.basis()?,
                norm,
                config.input_options(),
                window.clone(),
                recording.sample_rate(),
                train_layout.clone(),
                config.derived_seed(SeedTag::Init, window.index as u64),
            )?;
            let adam = AdamState::for_layers(&model.layers);
            (model, adam, false)
        }
        Some(WarmStart { model: prev, optimizer }) => {
            check_compatible(prev, config)?;
            let mut model = prev.clone();
            model.norm = norm;
            model.window = window.clone();
            model.sample_rate = recording.sample_rate();
            model.train_layout = train_layout.clone();
            let adam = match optimizer {
                Some(state) if config.reuse_optimizer_state => state,
                _ => AdamState::for_layers(&model.layers),
            };
            (model, adam, true)
        }
    };

    let points: Vec<([f64; 3], f64)> = samples.iter().map(|s| (s.position, s.time)).collect();
    let features = model.features_for(&points);
    let targets: Vec<f64> = volts.iter().map(|&v| model.target_to_net(v)).collect();
    drop(points);
    let loss = config.loss();
    let d = model.input_dim();

    let initial_loss = eval_loss(&model, &features, &targets, loss).map_err(|e| diverged(e, 0, None))?;
    if !initial_loss.is_finite() {
        return Err(NbfError::TrainingDiverged {
            epoch: 0,
            last_finite_epoch: None,
        });
    }
    let epochs = if warm_started {
        config.epochs_subsequent
    } else {
        config.epochs_first_window
    };
    let mut shuffle = ChaCha8Rng::seed_from_u64(config.derived_seed(SeedTag::Shuffle, window.index as u64));
    let mut dropout = ChaCha8Rng::seed_from_u64(config.derived_seed(SeedTag::Dropout, window.index as u64));
    let mut order: Vec<usize> = (0..targets.len()).collect();
    let mut batch_features = vec![0.0; config.batch_size * d];
    let mut batch_targets = vec![0.0; config.batch_size];
    let mut epoch_losses = Vec::with_capacity(epochs);

    for epoch in 0..epochs {
        let last_finite = epoch.checked_sub(1);
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for idx in order.chunks(config.batch_size) {
            let n = idx.len();
            for (k, &i) in idx.iter().enumerate() {
                batch_features[k * d..(k + 1) * d].copy_from_slice(&features[i * d..(i + 1) * d]);
                batch_targets[k] = targets[i];
            }
            let (l, grads) = batch_gradients(
                &model,
                &batch_features[..n * d],
                &batch_targets[..n],
                loss,
                &mut dropout,
            )
            .map_err(|e| diverged(e, epoch, last_finite))?;
            if !l.is_finite() || l > 1e6 * initial_loss.max(f64::MIN_POSITIVE) {
                return Err(NbfError::TrainingDiverged {
                    epoch,
                    last_finite_epoch: last_finite,
                });
            }
            total += l * n as f64;
            let g = layer_tensors(&grads);
            adam_step(
                &mut layer_tensors_mut(&mut model.layers),
                &g,
                &mut adam,
                config.learning_rate,
                config.grad_clip_norm,
            )?;
        }
        epoch_losses.push(total / targets.len() as f64);
    }

    let final_loss = eval_loss(&model, &features, &targets, loss).map_err(|e| diverged(e, epochs, epochs.checked_sub(1)))?;
    if !final_loss.is_finite() {
        return Err(NbfError::TrainingDiverged {
            epoch: epochs,
            last_finite_epoch: epochs.checked_sub(1),
        });
    }
    let validation = validation_layout
        .filter(|l| !l.is_empty())
        .map(|layout| validate_window(&model, recording, window, layout))
        .transpose()?;
    let report = TrainReport {
        window_index: window.index,
        warm_started,
        epochs,
        initial_loss,
        final_loss,
        epoch_losses,
        converged: final_loss < 0.5 * initial_loss,
        validation,
        wall_time_seconds: started.elapsed().as_secs_f64(),
    };
    log::debug!(
        "window {}: loss {:.4e} -> {:.4e} over {} epochs",
        window.index,
        initial_loss,
        final_loss,
        epochs
    );
    Ok((model, report, adam))
}

fn diverged(e: NbfError, epoch: usize, last_finite_epoch: Option<usize>) -> NbfError {
    match e {
        NbfError::NumericOverflow { .. } => NbfError::TrainingDiverged { epoch, last_finite_epoch },
        other => other,
    }
}

fn check_compatible(prev: &FieldModel, config: &TrainConfig) -> Result<()> {
    if prev.arch != config.arch() {
        return Err(NbfError::invalid("warm-start model architecture differs from the config"));
    }
    if prev.basis != config.basis()? {
        return Err(NbfError::invalid("warm-start model encoding differs from the config"));
    }
    if prev.input != config.input_options() {
        return Err(NbfError::invalid("warm-start model input options differ from the config"));
    }
    Ok(())
}

fn validate_window(
    model: &FieldModel,
    recording: &Recording,
    window: &TimeWindow,
    layout: &ElectrodeLayout,
) -> Result<BTreeMap<String, ChannelMetrics>> {
    let mut out = BTreeMap::new();
    for e in layout.iter() {
        let channel = recording
            .channel_by_label(&e.label)
            .ok_or_else(|| NbfError::invalid(format!("validation electrode '{}' is not in the recording", e.label)))?;
        let points: Vec<_> = window.sample_range().map(|i| (e.pos, recording.time_of(i))).collect();
        let pred = model.predict_many(&points)?;
        out.insert(e.label.clone(), compute_metrics(&pred, &channel[window.sample_range()])?);
    }
    Ok(out)
}

/// Everything one multi-window run produced.
#[derive(Clone, Debug)]
pub struct RecordingRun {
    pub windows: Vec<TimeWindow>,
    pub models: Vec<FieldModel>,
    pub reports: Vec<TrainReport>,
    /// Virtual-electrode signals on the original sample grid.
    pub synthesized: Option<Recording>,
}

/// A run that stopped early: the windows trained before the failure are kept.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: NbfError,
    pub window_index: usize,
    pub models: Vec<FieldModel>,
    pub reports: Vec<TrainReport>,
}

impl std::fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "window {}: {}", self.window_index, self.error)
    }
}

impl std::error::Error for TrainFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Trains every window in order, warm-starting window `k` from `k - 1` when
/// the config asks for it, and optionally synthesizes `virtual_targets`.
pub fn train_recording(
    recording: &Recording,
    config: &TrainConfig,
    train_layout: &ElectrodeLayout,
    validation_layout: Option<&ElectrodeLayout>,
    virtual_targets: Option<&ElectrodeLayout>,
) -> std::result::Result<RecordingRun, TrainFailure> {
    let fail = |error, window_index, models, reports| TrainFailure {
        error,
        window_index,
        models,
        reports,
    };
    if let Err(e) = config.validate() {
        return Err(fail(e, 0, Vec::new(), Vec::new()));
    }
    let windows = match segment_windows(recording, config.window_seconds) {
        Ok(w) => w,
        Err(e) => return Err(fail(e, 0, Vec::new(), Vec::new())),
    };
    let mut models: Vec<FieldModel> = Vec::with_capacity(windows.len());
    let mut reports = Vec::with_capacity(windows.len());
    let mut optimizer: Option<AdamState> = None;
    for window in &windows {
        let warm = match models.last() {
            Some(prev) if config.use_warm_start => Some(WarmStart {
                model: prev,
                optimizer: optimizer.take(),
            }),
            _ => None,
        };
        match train_window_with_state(recording, window, train_layout, validation_layout, config, warm) {
            Ok((model, report, state)) => {
                models.push(model);
                reports.push(report);
                optimizer = Some(state);
            }
            Err(e) => return Err(fail(e, window.index, models, reports)),
        }
    }
    let synthesized = match virtual_targets.filter(|l| !l.is_empty()) {
        None => None,
        Some(targets) => match synthesize(&models, targets) {
            Ok(r) => Some(r),
            Err(e) => return Err(fail(e, windows.len(), models, reports)),
        },
    };
    Ok(RecordingRun {
        windows,
        models,
        reports,
        synthesized,
    })
}

/// Evaluates each window's model at `targets` on that window's sample
/// instants. The models must tile the recording from sample 0 without gaps.
pub fn synthesize(models: &[FieldModel], targets: &ElectrodeLayout) -> Result<Recording> {
    let first = models
        .first()
        .ok_or_else(|| NbfError::MissingCoverage("no window models supplied".into()))?;
    let mut expected_start = 0;
    for (k, model) in models.iter().enumerate() {
        let w = &model.window;
        if w.index != k || w.sample_start != expected_start {
            return Err(NbfError::MissingCoverage(format!("window {k} is missing")));
        }
        if model.sample_rate != first.sample_rate {
            return Err(NbfError::invalid(format!("window {k} has a different sample rate")));
        }
        expected_start = w.sample_end;
    }
    let fs = first.sample_rate;
    let start_time = first.window.t_start;
    let n = expected_start;
    let mut rows = vec![vec![0.0; n]; targets.len()];
    for model in models {
        let range = model.window.sample_range();
        for (row, e) in rows.iter_mut().zip(targets.iter()) {
            let points: Vec<_> = range.clone().map(|i| (e.pos, start_time + i as f64 / fs)).collect();
            let pred = model.predict_many(&points)?;
            row[range.clone()].copy_from_slice(&pred);
        }
    }
    Recording::new(targets.clone(), fs, start_time, rows)
}
