//! Forecasting models and the k-fold model zoo.
//!
//! Backbones are channel-independent: the same parameters map each channel's
//! lookback of length `l` to its forecast of length `h`, so a prediction is
//! one `[C x l] -> [C x h]` forward pass. `Linear` is a single identity-
//! activation layer; `Mlp` adds one relu hidden layer.
//!
//! The zoo partitions the chronologically ordered training windows into `k`
//! contiguous folds and trains one member per fold on that fold's complement,
//! early-stopping on the held-out fold. A window in fold `j` was training
//! data for every member except member `j`; the spread of prediction errors
//! across those `k - 1` members measures how sensitive the fit at that window
//! is to the exact training subset.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Window;
use crate::error::{Error, Result};
use crate::nn::{
    self, assign_from_flat, flatten_grads, flatten_params, mlp_apply, mlp_backward, mlp_forward,
    Activation, LayerParams,
};
use crate::optim::{optimizer_step, Direction, OptimState};
use crate::seeding;
use crate::tensor::Tensor2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Backbone {
    Linear,
    Mlp { hidden: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecasterParams {
    pub backbone: Backbone,
    pub lookback: usize,
    pub horizon: usize,
    pub layers: Vec<LayerParams>,
}

impl ForecasterParams {
    pub fn init(backbone: Backbone, lookback: usize, horizon: usize, seed: u64) -> Result<Self> {
        if lookback == 0 || horizon == 0 {
            return Err(Error::Config(
                "lookback and horizon must be positive".into(),
            ));
        }
        let mut rng = seeding::rng_for(seed, "forecaster/init");
        let layers = match backbone {
            Backbone::Linear => vec![LayerParams::xavier(
                lookback,
                horizon,
                Activation::Identity,
                &mut rng,
            )],
            Backbone::Mlp { hidden } => {
                if hidden == 0 {
                    return Err(Error::Config("mlp hidden width must be positive".into()));
                }
                vec![
                    LayerParams::xavier(lookback, hidden, Activation::Relu, &mut rng),
                    LayerParams::xavier(hidden, horizon, Activation::Identity, &mut rng),
                ]
            }
        };
        Ok(ForecasterParams {
            backbone,
            lookback,
            horizon,
            layers,
        })
    }

    pub fn param_count(&self) -> usize {
        nn::param_count(&self.layers)
    }
}

/// Forecast for one window: `lookback_values` is `[l x C]`, the result is
/// `[h x C]`. Channels share parameters and are processed as batch rows.
pub fn predict(params: &ForecasterParams, lookback_values: &Tensor2) -> Result<Tensor2> {
    if lookback_values.rows() != params.lookback {
        return Err(Error::dimension(
            "predict",
            format!("{} lookback rows", params.lookback),
            lookback_values.rows().to_string(),
        ));
    }
    let per_channel = lookback_values.transpose();
    let out = mlp_apply(&params.layers, &per_channel)?;
    Ok(out.transpose())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    /// Consecutive non-improving epochs tolerated before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 50,
            patience: 3,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

/// Stacks the lookbacks (and horizons) of a batch of windows into
/// channel-major training matrices `[B*C x l]` and `[B*C x h]`.
fn batch_matrices(
    windows: &[&Window],
    lookback: usize,
    horizon: usize,
) -> Result<(Tensor2, Tensor2)> {
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for w in windows {
        if w.lookback_len() != lookback || w.horizon_len() != horizon {
            return Err(Error::dimension(
                "batch_matrices",
                format!("{lookback}+{horizon} window"),
                format!("{}+{}", w.lookback_len(), w.horizon_len()),
            ));
        }
        inputs.push(w.lookback.transpose());
        targets.push(w.horizon.transpose());
    }
    let input_refs: Vec<&Tensor2> = inputs.iter().collect();
    let target_refs: Vec<&Tensor2> = targets.iter().collect();
    Ok((
        Tensor2::vstack(&input_refs)?,
        Tensor2::vstack(&target_refs)?,
    ))
}

/// Mean squared error of the model over a window set, averaged over every
/// element. Used for early stopping.
fn mse_over(params: &ForecasterParams, windows: &[Window]) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Numerical("mse over an empty window set".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for w in windows {
        let pred = predict(params, &w.lookback)?;
        sum += pred.sum_squared_diff(&w.horizon)?;
        count += w.horizon.len();
    }
    Ok(sum / count as f64)
}

/// Trains a fresh forecaster with Adam and early stopping. The returned
/// parameters are the ones with the best monitored loss (validation MSE, or
/// train MSE when `val_windows` is empty). `epochs == 0` returns the
/// initialization untouched.
pub fn train_forecaster(
    train_windows: &[Window],
    val_windows: &[Window],
    backbone: Backbone,
    options: &TrainOptions,
) -> Result<ForecasterParams> {
    let first = train_windows
        .first()
        .ok_or_else(|| Error::Config("no training windows".into()))?;
    let lookback = first.lookback_len();
    let horizon = first.horizon_len();
    if options.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut params = ForecasterParams::init(backbone, lookback, horizon, options.seed)?;
    if options.epochs == 0 {
        return Ok(params);
    }

    let mut flat = flatten_params(&params.layers);
    let mut optimizer = OptimState::adam(options.learning_rate);
    let mut order: Vec<usize> = (0..train_windows.len()).collect();
    let mut rng = seeding::rng_for(options.seed, "forecaster/shuffle");
    let monitor_windows = if val_windows.is_empty() {
        train_windows
    } else {
        val_windows
    };

    let mut best_flat = flat.clone();
    let mut best_loss = f64::INFINITY;
    let mut stale_epochs = 0usize;

    for _epoch in 0..options.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        for chunk in order.chunks(options.batch_size) {
            let batch: Vec<&Window> = chunk.iter().map(|&i| &train_windows[i]).collect();
            let (input, target) = batch_matrices(&batch, lookback, horizon)?;
            assign_from_flat(&mut params.layers, &flat)?;
            let (pred, cache) = mlp_forward(&params.layers, &input)?;
            // d/dpred of mean((pred - target)^2).
            let scale = 2.0 / pred.len() as f64;
            let upstream = pred.zip_map(&target, |p, t| scale * (p - t))?;
            let (grads, _) = mlp_backward(&params.layers, &cache, &upstream)?;
            optimizer_step(
                &mut optimizer,
                &mut flat,
                &flatten_grads(&grads),
                Direction::Descent,
            )?;
        }
        assign_from_flat(&mut params.layers, &flat)?;
        let loss = mse_over(&params, monitor_windows)?;
        if !loss.is_finite() {
            return Err(Error::Numerical("monitored loss became non-finite".into()));
        }
        if loss < best_loss {
            best_loss = loss;
            best_flat.copy_from_slice(&flat);
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= options.patience {
                break;
            }
        }
    }
    assign_from_flat(&mut params.layers, &best_flat)?;
    Ok(params)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae: f64,
    pub mse: f64,
    pub n_windows: usize,
}

/// MAE and MSE over all horizon elements of all windows, on the scale the
/// windows are in (normalized, unless the caller denormalized them).
pub fn evaluate(params: &ForecasterParams, windows: &[Window]) -> Result<EvalReport> {
    if windows.is_empty() {
        return Err(Error::Numerical("evaluate on an empty window set".into()));
    }
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut count = 0usize;
    for w in windows {
        let pred = predict(params, &w.lookback)?;
        abs_sum += pred.sum_abs_diff(&w.horizon)?;
        sq_sum += pred.sum_squared_diff(&w.horizon)?;
        count += w.horizon.len();
    }
    Ok(EvalReport {
        mae: abs_sum / count as f64,
        mse: sq_sum / count as f64,
        n_windows: windows.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelZoo {
    pub k: usize,
    pub backbone: Backbone,
    pub lookback: usize,
    pub horizon: usize,
    pub channels: usize,
    pub members: Vec<ForecasterParams>,
    /// Fold index of each training window, parallel to the window list the
    /// zoo was built from.
    pub fold_of_window: Vec<usize>,
}

impl ModelZoo {
    /// Indices of the `k - 1` members whose training data included fold
    /// `fold`, i.e. everyone but member `fold`.
    pub fn members_trained_on(&self, fold: usize) -> Vec<usize> {
        (0..self.k).filter(|&j| j != fold).collect()
    }

    pub fn window_span(&self) -> usize {
        self.lookback + self.horizon
    }
}

/// Balanced contiguous fold assignment: window `i` of `n` lands in fold
/// `i * k / n`.
pub fn assign_folds(n_windows: usize, k: usize) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::Config(format!("zoo needs k >= 2, got {k}")));
    }
    if n_windows < k {
        return Err(Error::Config(format!(
            "zoo needs at least k={k} windows, got {n_windows}"
        )));
    }
    Ok((0..n_windows).map(|i| i * k / n_windows).collect())
}

/// Trains the k members in parallel. Member `j` uses the complement of fold
/// `j` as its training set and fold `j` for early stopping, with its own
/// derived seed.
pub fn build_model_zoo(
    train_windows: &[Window],
    k: usize,
    backbone: Backbone,
    options: &TrainOptions,
) -> Result<ModelZoo> {
    let fold_of_window = assign_folds(train_windows.len(), k)?;
    let first = &train_windows[0];
    let members: Vec<ForecasterParams> = (0..k)
        .into_par_iter()
        .map(|j| {
            let train: Vec<Window> = train_windows
                .iter()
                .zip(&fold_of_window)
                .filter(|(_, &f)| f != j)
                .map(|(w, _)| w.clone())
                .collect();
            let held_out: Vec<Window> = train_windows
                .iter()
                .zip(&fold_of_window)
                .filter(|(_, &f)| f == j)
                .map(|(w, _)| w.clone())
                .collect();
            let member_options = TrainOptions {
                seed: seeding::derive_seed(options.seed, &format!("zoo/member/{j}")),
                ..*options
            };
            train_forecaster(&train, &held_out, backbone, &member_options)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelZoo {
        k,
        backbone,
        lookback: first.lookback_len(),
        horizon: first.horizon_len(),
        channels: first.channels(),
        members,
        fold_of_window,
    })
}
