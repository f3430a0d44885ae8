//! Stage B: fine-tune the prior head by REINFORCE so that its samples decode
//! into windows the model zoo disagrees about.
//!
//! Each rollout masks an anchor, optionally re-draws its timestamps from the
//! test range, samples a latent from the prior, and decodes a candidate
//! window. The reward is a scaled sigmoid of f = zoo variance over squared
//! deviation from the anchor; the policy gradient is reward times the score
//! function of the sampled latent, averaged over the batch, applied as one
//! plain gradient-ascent step. Only the prior stack moves: the posterior,
//! encoder, and decoder stay byte-identical through the whole stage.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::augment::shift_timestamps;
use crate::dataset::Window;
use crate::error::{Error, Result};
use crate::forecaster::ModelZoo;
use crate::gaussian::gaussian_log_prob;
use crate::nn::{assign_from_flat, flatten_grads, flatten_params, mlp_apply};
use crate::optim::{optimizer_step, Direction, OptimState};
use crate::ranking::model_zoo_variance;
use crate::seeding;
use crate::tensor::Tensor2;
use crate::vmae::{
    apply_mask, head_backward, head_forward, masked_input_row, MaskedWindow, VmaePolicy,
};

/// Everything observed about one decoded candidate window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub anchor_index: usize,
    /// Variance-to-deviation ratio fed to the sigmoid.
    pub f_value: f64,
    /// Scaled sigmoid of f, strictly inside (0, 1).
    pub reward: f64,
    /// Squared deviation of the decoded window from its anchor, before the
    /// floor.
    pub recon_deviation: f64,
    pub zoo_variance: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReinforceConfig {
    /// Policy learning rate (plain SGD ascent).
    pub alpha: f64,
    /// Sigmoid scale on f.
    pub eta: f64,
    pub steps: usize,
    pub batch: usize,
    /// Floor on the squared deviation so an exact reproduction of the anchor
    /// cannot blow up f.
    pub deviation_floor: f64,
    /// Subtract a moving-average reward baseline from each sample's weight.
    /// Off by default: the plain reward-scaled estimator is the reference
    /// scheme.
    pub use_baseline: bool,
    /// When set, each rollout re-draws its timestamps uniformly from this
    /// range (the pipeline passes the test split's range).
    pub timestamp_range: Option<(f64, f64)>,
}

impl Default for ReinforceConfig {
    fn default() -> Self {
        ReinforceConfig {
            alpha: 1e-3,
            eta: 0.01,
            steps: 500,
            batch: 32,
            deviation_floor: 1e-8,
            use_baseline: false,
            timestamp_range: None,
        }
    }
}

impl ReinforceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !(self.eta > 0.0) {
            return Err(Error::Config(format!(
                "eta must be positive, got {}",
                self.eta
            )));
        }
        if !(self.deviation_floor > 0.0) {
            return Err(Error::Config(format!(
                "deviation floor must be positive, got {}",
                self.deviation_floor
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if let Some((lo, hi)) = self.timestamp_range {
            if !(lo < hi) {
                return Err(Error::Config(format!(
                    "timestamp range must satisfy lo < hi, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }
}

/// Largest double strictly below 1; rewards are clamped into the open
/// interval so the (0,1) contract survives rounding at extreme f.
const ONE_BELOW: f64 = 1.0 - f64::EPSILON / 2.0;

/// f = variance / max(deviation, floor); reward = sigmoid(eta * f).
pub fn reward_from_parts(variance: f64, deviation: f64, eta: f64, floor: f64) -> (f64, f64) {
    let f = variance / deviation.max(floor);
    let reward = (1.0 / (1.0 + (-eta * f).exp()))
        .max(f64::MIN_POSITIVE)
        .min(ONE_BELOW);
    (f, reward)
}

/// Scores a decoded window against its anchor: zoo disagreement on the
/// horizon half over squared full-window deviation, squeezed by the sigmoid.
pub fn compute_reward(
    zoo: &ModelZoo,
    generated: &Window,
    anchor_values: &Tensor2,
    eta: f64,
    deviation_floor: f64,
) -> Result<RewardRecord> {
    let variance = model_zoo_variance(zoo, generated, None)?.variance;
    let deviation = generated.full_values().sum_squared_diff(anchor_values)?;
    let (f_value, reward) = reward_from_parts(variance, deviation, eta, deviation_floor);
    if !f_value.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite reward ratio (variance {variance}, deviation {deviation})"
        )));
    }
    Ok(RewardRecord {
        anchor_index: generated.origin,
        f_value,
        reward,
        recon_deviation: deviation,
        zoo_variance: variance,
    })
}

/// Log-density of `z` under the prior conditioned on the masked window, and
/// its gradient with respect to the flattened prior stack. This is the score
/// function REINFORCE scales by the reward.
pub fn prior_log_prob_grad(
    policy: &VmaePolicy,
    masked: &MaskedWindow,
    z: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let row = masked_input_row(masked)?;
    let head = head_forward(&policy.prior, &row, policy.arch.d_z)?;
    let (logp, grad) = gaussian_log_prob(&head.dist, z)?;
    let layer_grads = head_backward(
        &policy.prior,
        &head.cache,
        &head.clamped,
        &grad.wrt_mean,
        &grad.wrt_log_std,
    )?;
    Ok((logp, flatten_grads(&layer_grads)))
}

/// One rollout's policy-gradient contribution before reward weighting.
struct Rollout {
    score_grad: Vec<f64>,
    generated: Window,
    anchor_values: Tensor2,
}

fn rollout(
    policy: &VmaePolicy,
    anchor_index: usize,
    anchor: &Window,
    config: &ReinforceConfig,
    rng: &mut impl Rng,
) -> Result<Rollout> {
    let arch = &policy.arch;
    let mut masked = apply_mask(anchor, arch.mask_rate, rng)?;
    if let Some(range) = config.timestamp_range {
        masked.timestamps = shift_timestamps(&anchor.timestamps, range, rng)?;
    }
    let row = masked_input_row(&masked)?;
    let head = head_forward(&policy.prior, &row, arch.d_z)?;
    let noise: Vec<f64> = (0..arch.d_z).map(|_| StandardNormal.sample(rng)).collect();
    let z = head.dist.sample(&noise)?;
    let (_, grad) = gaussian_log_prob(&head.dist, &z)?;
    let layer_grads = head_backward(
        &policy.prior,
        &head.cache,
        &head.clamped,
        &grad.wrt_mean,
        &grad.wrt_log_std,
    )?;

    let u = mlp_apply(&policy.encoder, &row)?;
    let mut dec_in = u.row(0).to_vec();
    dec_in.extend_from_slice(&z);
    let dec_in = Tensor2::from_vec(1, arch.d_u + arch.d_z, dec_in)?;
    let flat_out = mlp_apply(&policy.decoder, &dec_in)?;
    let values = Tensor2::from_vec(arch.l_window, arch.channels, flat_out.row(0).to_vec())?;
    let generated = Window::from_full_values(
        &values,
        anchor.lookback_len(),
        masked.timestamps.clone(),
        anchor_index,
    )?;
    Ok(Rollout {
        score_grad: flatten_grads(&layer_grads),
        generated,
        anchor_values: anchor.full_values(),
    })
}

/// One REINFORCE step: rolls out every anchor in the batch, weights each
/// score gradient by its reward (minus `baseline` when given), and applies a
/// single batch-averaged ascent step to the prior stack. Nothing else moves.
/// Latent draws are serial on `rng`; reward evaluation fans out across the
/// batch.
pub fn reinforce_step(
    policy: &mut VmaePolicy,
    batch: &[(usize, &Window)],
    zoo: &ModelZoo,
    config: &ReinforceConfig,
    optimizer: &mut OptimState,
    baseline: Option<f64>,
    rng: &mut impl Rng,
) -> Result<Vec<RewardRecord>> {
    if batch.is_empty() {
        return Err(Error::Config(
            "reinforce_step needs a nonempty batch".into(),
        ));
    }
    let rollouts: Vec<Rollout> = batch
        .iter()
        .map(|&(idx, w)| rollout(policy, idx, w, config, rng))
        .collect::<Result<_>>()?;
    let records: Vec<RewardRecord> = rollouts
        .par_iter()
        .map(|r| {
            compute_reward(
                zoo,
                &r.generated,
                &r.anchor_values,
                config.eta,
                config.deviation_floor,
            )
        })
        .collect::<Result<_>>()?;

    let mut flat = flatten_params(&policy.prior);
    let mut grad = vec![0.0; flat.len()];
    let inv = 1.0 / batch.len() as f64;
    let base = baseline.unwrap_or(0.0);
    for (rec, roll) in records.iter().zip(&rollouts) {
        let weight = (rec.reward - base) * inv;
        for (g, s) in grad.iter_mut().zip(&roll.score_grad) {
            *g += weight * s;
        }
    }
    optimizer_step(optimizer, &mut flat, &grad, Direction::Ascent)?;
    assign_from_flat(&mut policy.prior, &flat)?;
    Ok(records)
}

/// Per-step averages over the batch, exported as the reward trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReinforceTraceRow {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_f: f64,
    pub mean_deviation: f64,
    pub mean_variance: f64,
}

pub struct StageBResult {
    pub policy: VmaePolicy,
    pub trace: Vec<ReinforceTraceRow>,
}

/// Momentum of the optional moving-average reward baseline.
const BASELINE_MOMENTUM: f64 = 0.9;

/// Runs `config.steps` REINFORCE steps over shuffled anchor batches, cycling
/// and reshuffling when the anchor list is exhausted. Deterministic given
/// `seed`. Returns the fine-tuned policy (prior changed, everything else
/// byte-identical) and the per-step trace.
pub fn run_stage_b(
    policy: &VmaePolicy,
    anchors: &[Window],
    anchor_indices: &[usize],
    zoo: &ModelZoo,
    config: &ReinforceConfig,
    seed: u64,
) -> Result<StageBResult> {
    config.validate()?;
    if anchors.is_empty() {
        return Err(Error::Config(
            "stage B needs at least one anchor window".into(),
        ));
    }
    if anchors.len() != anchor_indices.len() {
        return Err(Error::dimension(
            "run_stage_b",
            anchors.len().to_string(),
            anchor_indices.len().to_string(),
        ));
    }
    let span = policy.arch.l_window;
    if zoo.window_span() != span || zoo.channels != policy.arch.channels {
        return Err(Error::dimension(
            "run_stage_b",
            format!("zoo span {} x {} channels", zoo.window_span(), zoo.channels),
            format!("policy span {span} x {} channels", policy.arch.channels),
        ));
    }

    let mut working = policy.clone();
    let mut optimizer = OptimState::sgd(config.alpha);
    let mut shuffle_rng = seeding::rng_for(seed, "stage_b/shuffle");
    let mut sample_rng = seeding::rng_for(seed, "stage_b/sample");
    let mut order: Vec<usize> = (0..anchors.len()).collect();
    order.shuffle(&mut shuffle_rng);
    let mut cursor = 0usize;
    let mut baseline: Option<f64> = None;
    let mut trace = Vec::with_capacity(config.steps);

    for step in 1..=config.steps {
        let mut batch: Vec<(usize, &Window)> = Vec::with_capacity(config.batch);
        while batch.len() < config.batch {
            if cursor == order.len() {
                order.shuffle(&mut shuffle_rng);
                cursor = 0;
            }
            let pos = order[cursor];
            batch.push((anchor_indices[pos], &anchors[pos]));
            cursor += 1;
        }
        let step_baseline = if config.use_baseline { baseline } else { None };
        let records = reinforce_step(
            &mut working,
            &batch,
            zoo,
            config,
            &mut optimizer,
            step_baseline,
            &mut sample_rng,
        )?;
        let n = records.len() as f64;
        let mean_reward = records.iter().map(|r| r.reward).sum::<f64>() / n;
        if config.use_baseline {
            baseline = Some(match baseline {
                None => mean_reward,
                Some(b) => BASELINE_MOMENTUM * b + (1.0 - BASELINE_MOMENTUM) * mean_reward,
            });
        }
        trace.push(ReinforceTraceRow {
            step,
            mean_reward,
            mean_f: records.iter().map(|r| r.f_value).sum::<f64>() / n,
            mean_deviation: records.iter().map(|r| r.recon_deviation).sum::<f64>() / n,
            mean_variance: records.iter().map(|r| r.zoo_variance).sum::<f64>() / n,
        });
    }
    Ok(StageBResult {
        policy: working,
        trace,
    })
}

/// Writes the reward trace as CSV, one row per step.
pub fn write_reward_trace(trace: &[ReinforceTraceRow], mut out: impl Write) -> Result<()> {
    let write = |out: &mut dyn Write| -> std::io::Result<()> {
        writeln!(out, "step,mean_reward,mean_f,mean_deviation,mean_variance")?;
        for row in trace {
            writeln!(
                out,
                "{},{:.17e},{:.17e},{:.17e},{:.17e}",
                row.step, row.mean_reward, row.mean_f, row.mean_deviation, row.mean_variance
            )?;
        }
        Ok(())
    };
    write(&mut out).map_err(|e| Error::io("reward trace", e))
}
