//! Windowed datasets, the MSE objective, Adam, the epoch loop with early
//! stopping, and a finite-difference gradient checker.

mod gradcheck;

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TimeSeries;
use crate::error::{Error, Result};
use crate::model::MultiResFormer;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

pub use gradcheck::{gradient_check, GradCheckOptions, GradCheckReport, Offender};

/// `|a − n| / max(|a|, |n|, 1e-4)`. The floor keeps coordinates whose true
/// gradient is zero from turning finite-difference roundoff into a large
/// ratio.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    /// Cosine-anneal the learning rate to zero over `epochs`.
    pub cosine_decay: bool,
    /// Step between consecutive window origins.
    pub window_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            epochs: 10,
            batch_size: 32,
            patience: 3,
            seed: 0,
            clip_norm: None,
            cosine_decay: false,
            window_stride: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::contract("learning_rate must be positive"));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::contract("betas must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::contract("adam_eps must be positive"));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.window_stride == 0 {
            return Err(Error::contract(
                "epochs, batch_size and window_stride must be positive",
            ));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::contract("clip_norm must be positive"));
        }
        Ok(())
    }

    fn learning_rate_at(&self, epoch: usize) -> f64 {
        if self.cosine_decay {
            let progress = epoch as f64 / self.epochs as f64;
            0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * progress).cos())
        } else {
            self.learning_rate
        }
    }
}

/// One (look-back, horizon) pair cut from a series.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    /// `[I, V]`
    pub x: Tensor,
    /// `[O, V]`, starting at `origin_index + I`
    pub y: Tensor,
    pub origin_index: usize,
}

/// Windows at origins `0, stride, 2·stride, …` while `origin + I + O ≤ T`.
pub fn make_windows(
    series: &TimeSeries,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<WindowSample>> {
    if lookback == 0 || horizon == 0 || stride == 0 {
        return Err(Error::contract(
            "lookback, horizon and stride must be positive",
        ));
    }
    let t = series.len();
    if t < lookback + horizon {
        return Err(Error::EmptyDataset(format!(
            "a series of length {t} holds no window of {lookback} + {horizon} steps"
        )));
    }
    let v = series.num_variates();
    (0..=t - lookback - horizon)
        .step_by(stride)
        .map(|origin| {
            let x = Tensor::new(
                [lookback, v],
                series.rows(origin, origin + lookback).to_vec(),
            )?;
            let end = origin + lookback + horizon;
            let y = Tensor::new([horizon, v], series.rows(origin + lookback, end).to_vec())?;
            Ok(WindowSample {
                x,
                y,
                origin_index: origin,
            })
        })
        .collect()
}

/// Stacks the chosen samples into `([B, I, V], [B, O, V])`.
pub fn stack_batch(samples: &[WindowSample], indices: &[usize]) -> Result<(Tensor, Tensor)> {
    let first = indices
        .first()
        .map(|&i| &samples[i])
        .ok_or_else(|| Error::EmptyDataset("empty batch".into()))?;
    let (xs, ys) = (first.x.shape().to_vec(), first.y.shape().to_vec());
    let mut x = Vec::with_capacity(indices.len() * first.x.numel());
    let mut y = Vec::with_capacity(indices.len() * first.y.numel());
    for &i in indices {
        x.extend_from_slice(samples[i].x.data());
        y.extend_from_slice(samples[i].y.data());
    }
    let b = indices.len();
    Ok((
        Tensor::new([b, xs[0], xs[1]], x)?,
        Tensor::new([b, ys[0], ys[1]], y)?,
    ))
}

/// Mean squared difference over all elements.
pub fn mse_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let diff = g.sub(pred, target)?;
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .iter()
            .map(|(_, p)| vec![0.0; p.tensor().numel()])
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update from the gradients held in `store`,
/// after optional global-norm clipping. Returns the pre-clip gradient norm.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, cfg: &TrainConfig, lr: f64) -> f64 {
    let norm = store
        .iter()
        .filter_map(|(_, p)| p.tensor().grad())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    let clip = match cfg.clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    state.step += 1;
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let tensor = p.tensor_mut();
        let grad = tensor.grad().map(<[f64]>::to_vec);
        let data = tensor.data_mut();
        for i in 0..data.len() {
            let g = grad.as_ref().map_or(0.0, |g| g[i] * clip);
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            data[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.adam_eps);
        }
    }
    norm
}

/// SplitMix64 finaliser over `seed ⊕ tags`, for independent per-epoch and
/// per-batch streams.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut z = seed;
    for &t in tags {
        z = z
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(t.wrapping_mul(0xD1B5_4A32_D192_ED03));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Eval-mode forecasts for every sample, in order, as `[N, O, V]` together
/// with the matching targets. The final partial batch is kept.
pub fn predict_windows(
    model: &MultiResFormer,
    samples: &[WindowSample],
    batch_size: usize,
) -> Result<(Tensor, Tensor)> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("no windows to evaluate".into()));
    }
    let order: Vec<usize> = (0..samples.len()).collect();
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    for chunk in order.chunks(batch_size.max(1)) {
        let (x, y) = stack_batch(samples, chunk)?;
        preds.extend(model.predict(&x)?.into_data());
        targets.extend(y.into_data());
    }
    let ys = samples[0].y.shape();
    let shape = [samples.len(), ys[0], ys[1]];
    Ok((Tensor::new(shape, preds)?, Tensor::new(shape, targets)?))
}

/// Eval-mode MSE over all samples.
pub fn evaluate(
    model: &MultiResFormer,
    samples: &[WindowSample],
    batch_size: usize,
) -> Result<f64> {
    let (pred, target) = predict_windows(model, samples, batch_size)?;
    crate::metrics::mse(&pred, &target)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub stopped_early: bool,
}

/// Writes `epoch,train_mse,val_mse`. Wall-clock seconds are left out so that
/// reruns produce identical files; see [`write_timings_csv`].
pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = String::from("epoch,train_mse,val_mse\n");
    for r in history {
        out.push_str(&format!("{},{},{}\n", r.epoch, r.train_mse, r.val_mse));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes `epoch,seconds`.
pub fn write_timings_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = String::from("epoch,seconds\n");
    for r in history {
        out.push_str(&format!("{},{}\n", r.epoch, r.seconds));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Trains `model` in place and restores the parameters of the epoch with the
/// lowest validation MSE.
pub fn train(
    model: &mut MultiResFormer,
    train_set: &[WindowSample],
    val_set: &[WindowSample],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train_with(model, train_set, val_set, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    model: &mut MultiResFormer,
    train_set: &[WindowSample],
    val_set: &[WindowSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{} training and {} validation windows",
            train_set.len(),
            val_set.len()
        )));
    }
    let mut state = AdamState::new(&model.params.store);
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut bad_epochs = 0;
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = cfg.learning_rate_at(epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            &[epoch as u64],
        )));
        let mut loss_sum = 0.0;
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = stack_batch(train_set, chunk)?;
            let mut g = Graph::train(derive_seed(cfg.seed, &[epoch as u64, batch as u64 + 1]));
            let (xv, yv) = (g.constant(x), g.constant(y));
            let out = model.forward(&mut g, xv)?;
            let loss = mse_loss(&mut g, out.prediction, yv)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "training loss is {value} at epoch {}, batch {batch}",
                    epoch + 1
                )));
            }
            g.backward(loss)?;
            let store = &mut model.params.store;
            store.zero_grad();
            store.accumulate_grads(&g);
            adam_step(store, &mut state, cfg, lr);
            loss_sum += value * chunk.len() as f64;
        }
        let val_mse = evaluate(model, val_set, cfg.batch_size)?;
        if !val_mse.is_finite() {
            return Err(Error::Numeric(format!(
                "validation loss is {val_mse} at epoch {}",
                epoch + 1
            )));
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            train_mse: loss_sum / train_set.len() as f64,
            val_mse,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        history.push(record);
        if best.as_ref().is_none_or(|(_, b, _)| val_mse < *b) {
            best = Some((epoch + 1, val_mse, model.params.store.clone()));
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs > cfg.patience {
                stopped_early = epoch + 1 < cfg.epochs;
                break;
            }
        }
    }
    let (best_epoch, best_val_mse, store) = best.expect("at least one epoch ran");
    model.params.store.copy_values_from(&store)?;
    model.params.store.zero_grad();
    Ok(TrainReport {
        history,
        best_epoch,
        best_val_mse,
        stopped_early,
    })
}
