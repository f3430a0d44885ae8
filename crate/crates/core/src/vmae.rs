//! Variational masked autoencoder: the augmentor's generative core.
//!
//! Four MLP stacks share one latent space. The prior head reads the masked
//! window (values with masked steps zeroed, plus timestamp and mask bit per
//! step) and emits a diagonal Gaussian over z. The posterior head reads the
//! original, unmasked window and emits another Gaussian; it exists only to
//! constrain the prior during training and is never consulted at generation
//! time. The encoder maps the masked window to a feature vector u, and the
//! decoder reconstructs the full window from concat(u, z).
//!
//! Training minimizes reconstruction MSE over the whole window plus
//! beta * KL(posterior || prior), with reparameterized posterior samples.
//! Generation decodes a prior sample (or the prior mean) instead.
//!
//! All backward passes are written by hand; `vmae_backward` is checked
//! against central finite differences over every parameter of all four
//! stacks.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::Window;
use crate::error::{Error, Result};
use crate::gaussian::{kl_diag_gaussians_with_grads, DiagonalGaussian, LOG_STD_MAX, LOG_STD_MIN};
use crate::nn::{
    self, assign_from_flat, flatten_grads, flatten_params, mlp_backward, mlp_forward, Activation,
    LayerGrads, LayerParams, MlpCache,
};
use crate::optim::{optimizer_step, Direction, OptimState};
use crate::seeding;
use crate::tensor::Tensor2;

/// Architecture hyperparameters; fixed for the lifetime of a policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VmaeArch {
    pub channels: usize,
    /// Full window length (lookback + horizon).
    pub l_window: usize,
    /// Latent dimension shared by prior and posterior.
    pub d_z: usize,
    /// Encoder feature width.
    pub d_u: usize,
    /// Hidden width of every stack.
    pub hidden: usize,
    pub mask_rate: f64,
}

impl VmaeArch {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.l_window == 0 {
            return Err(Error::Config("window shape must be positive".into()));
        }
        if self.d_z == 0 || self.d_u == 0 || self.hidden == 0 {
            return Err(Error::Config(
                "latent and hidden widths must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(Error::Config(format!(
                "mask rate must be in [0, 1], got {}",
                self.mask_rate
            )));
        }
        Ok(())
    }

    /// Width of the flattened masked-window representation: per step, C
    /// values plus the timestamp and the mask bit.
    pub fn masked_input_width(&self) -> usize {
        self.l_window * (self.channels + 2)
    }

    /// Width of the flattened original-window representation: per step, C
    /// values plus the timestamp.
    pub fn original_input_width(&self) -> usize {
        self.l_window * (self.channels + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VmaePolicy {
    pub arch: VmaeArch,
    /// Prior head (the REINFORCE policy): masked input -> Gaussian over z.
    pub prior: Vec<LayerParams>,
    /// Posterior head: original input -> Gaussian over z. Training only.
    pub posterior: Vec<LayerParams>,
    /// Feature encoder: masked input -> u.
    pub encoder: Vec<LayerParams>,
    /// Decoder: concat(u, z) -> flattened window.
    pub decoder: Vec<LayerParams>,
}

impl VmaePolicy {
    pub fn init(arch: VmaeArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = seeding::rng_for(seed, "vmae/init");
        let prior = vec![
            LayerParams::xavier(
                arch.masked_input_width(),
                arch.hidden,
                Activation::Tanh,
                &mut rng,
            ),
            LayerParams::xavier(arch.hidden, 2 * arch.d_z, Activation::Identity, &mut rng),
        ];
        let posterior = vec![
            LayerParams::xavier(
                arch.original_input_width(),
                arch.hidden,
                Activation::Tanh,
                &mut rng,
            ),
            LayerParams::xavier(arch.hidden, 2 * arch.d_z, Activation::Identity, &mut rng),
        ];
        let encoder = vec![
            LayerParams::xavier(
                arch.masked_input_width(),
                arch.hidden,
                Activation::Tanh,
                &mut rng,
            ),
            LayerParams::xavier(arch.hidden, arch.d_u, Activation::Identity, &mut rng),
        ];
        let decoder = vec![
            LayerParams::xavier(arch.d_u + arch.d_z, arch.hidden, Activation::Tanh, &mut rng),
            LayerParams::xavier(
                arch.hidden,
                arch.l_window * arch.channels,
                Activation::Identity,
                &mut rng,
            ),
        ];
        Ok(VmaePolicy {
            arch,
            prior,
            posterior,
            encoder,
            decoder,
        })
    }

    pub fn param_count(&self) -> usize {
        nn::param_count(&self.prior)
            + nn::param_count(&self.posterior)
            + nn::param_count(&self.encoder)
            + nn::param_count(&self.decoder)
    }

    /// All four stacks as one flat vector, in (prior, posterior, encoder,
    /// decoder) order. The joint Stage-A optimizer works on this layout.
    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = flatten_params(&self.prior);
        flat.extend(flatten_params(&self.posterior));
        flat.extend(flatten_params(&self.encoder));
        flat.extend(flatten_params(&self.decoder));
        flat
    }

    pub fn assign(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::dimension(
                "VmaePolicy::assign",
                self.param_count().to_string(),
                flat.len().to_string(),
            ));
        }
        let mut offset = 0;
        for stack in [
            &mut self.prior,
            &mut self.posterior,
            &mut self.encoder,
            &mut self.decoder,
        ] {
            let n = nn::param_count(stack);
            assign_from_flat(stack, &flat[offset..offset + n])?;
            offset += n;
        }
        Ok(())
    }
}

/// A window with a per-step mask applied: masked steps have every channel
/// zeroed, and the mask itself rides along so downstream inputs can tell
/// masked zeros from genuine zeros.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedWindow {
    pub values: Tensor2,
    pub mask: Vec<bool>,
    pub timestamps: Vec<f64>,
}

impl MaskedWindow {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

/// Masks each time step independently with probability `mask_rate`, zeroing
/// all channels of masked steps.
pub fn apply_mask(window: &Window, mask_rate: f64, rng: &mut impl Rng) -> Result<MaskedWindow> {
    if !(0.0..=1.0).contains(&mask_rate) {
        return Err(Error::Config(format!(
            "mask rate must be in [0, 1], got {mask_rate}"
        )));
    }
    let mut values = window.full_values();
    let l = values.rows();
    let mut mask = Vec::with_capacity(l);
    for step in 0..l {
        let masked = rng.random::<f64>() < mask_rate;
        if masked {
            for v in values.row_mut(step) {
                *v = 0.0;
            }
        }
        mask.push(masked);
    }
    Ok(MaskedWindow {
        values,
        mask,
        timestamps: window.timestamps.clone(),
    })
}

/// Flattens a masked window to the prior/encoder input row: per step, C
/// values then the timestamp then the mask bit.
pub(crate) fn masked_input_row(masked: &MaskedWindow) -> Result<Tensor2> {
    let l = masked.values.rows();
    if masked.mask.len() != l || masked.timestamps.len() != l {
        return Err(Error::dimension(
            "masked_input_row",
            format!("{l} mask bits and timestamps"),
            format!("{}/{}", masked.mask.len(), masked.timestamps.len()),
        ));
    }
    let c = masked.values.cols();
    let mut data = Vec::with_capacity(l * (c + 2));
    for step in 0..l {
        data.extend_from_slice(masked.values.row(step));
        data.push(masked.timestamps[step]);
        data.push(f64::from(masked.mask[step]));
    }
    Tensor2::from_vec(1, l * (c + 2), data)
}

/// Flattens the original window to the posterior input row: per step, C
/// values then the timestamp.
fn original_input_row(original: &Tensor2, timestamps: &[f64]) -> Result<Tensor2> {
    let l = original.rows();
    if timestamps.len() != l {
        return Err(Error::dimension(
            "original_input_row",
            format!("{l} timestamps"),
            timestamps.len().to_string(),
        ));
    }
    let c = original.cols();
    let mut data = Vec::with_capacity(l * (c + 1));
    for step in 0..l {
        data.extend_from_slice(original.row(step));
        data.push(timestamps[step]);
    }
    Tensor2::from_vec(1, l * (c + 1), data)
}

/// A latent head's forward result: the (clamped) Gaussian, the MLP cache and
/// which log-std coordinates hit the clamp (their gradients are zeroed).
pub(crate) struct HeadForward {
    pub(crate) dist: DiagonalGaussian,
    pub(crate) cache: MlpCache,
    pub(crate) clamped: Vec<bool>,
}

pub(crate) fn head_forward(
    stack: &[LayerParams],
    input: &Tensor2,
    d_z: usize,
) -> Result<HeadForward> {
    let (out, cache) = mlp_forward(stack, input)?;
    if out.cols() != 2 * d_z || out.rows() != 1 {
        return Err(Error::dimension(
            "head_forward",
            format!("1x{}", 2 * d_z),
            format!("{}x{}", out.rows(), out.cols()),
        ));
    }
    let mean = out.row(0)[..d_z].to_vec();
    let raw_log_std = &out.row(0)[d_z..];
    let clamped: Vec<bool> = raw_log_std
        .iter()
        .map(|&v| !(LOG_STD_MIN..=LOG_STD_MAX).contains(&v))
        .collect();
    let dist = DiagonalGaussian::new(mean, raw_log_std.to_vec())?;
    Ok(HeadForward {
        dist,
        cache,
        clamped,
    })
}

/// Backpropagates (d_mean, d_log_std) through a latent head. Clamped log-std
/// coordinates receive zero gradient.
pub(crate) fn head_backward(
    stack: &[LayerParams],
    cache: &MlpCache,
    clamped: &[bool],
    d_mean: &[f64],
    d_log_std: &[f64],
) -> Result<Vec<LayerGrads>> {
    let d_z = d_mean.len();
    let mut upstream = Vec::with_capacity(2 * d_z);
    upstream.extend_from_slice(d_mean);
    for (g, &hit) in d_log_std.iter().zip(clamped) {
        upstream.push(if hit { 0.0 } else { *g });
    }
    let upstream = Tensor2::from_vec(1, 2 * d_z, upstream)?;
    let (grads, _) = mlp_backward(stack, cache, &upstream)?;
    Ok(grads)
}

/// Everything the backward pass needs from one training forward pass.
pub struct VmaeCache {
    prior_cache: MlpCache,
    prior_clamped: Vec<bool>,
    posterior_cache: MlpCache,
    posterior_clamped: Vec<bool>,
    encoder_cache: MlpCache,
    decoder_cache: MlpCache,
    noise: Vec<f64>,
}

/// Output of one VMAE forward pass.
pub struct VmaeForward {
    pub reconstruction: Tensor2,
    pub prior: DiagonalGaussian,
    pub posterior: DiagonalGaussian,
}

/// Training-mode forward pass: the decoder consumes a reparameterized sample
/// from the posterior (`z = mean + std * noise`). Timestamps travel inside
/// `masked`. Returns the cache needed by [`vmae_backward`].
pub fn vmae_forward_training(
    policy: &VmaePolicy,
    masked: &MaskedWindow,
    original: &Tensor2,
    noise: &[f64],
) -> Result<(VmaeForward, VmaeCache)> {
    let arch = &policy.arch;
    if original.rows() != arch.l_window || original.cols() != arch.channels {
        return Err(Error::dimension(
            "vmae_forward",
            format!("{}x{} original", arch.l_window, arch.channels),
            format!("{}x{}", original.rows(), original.cols()),
        ));
    }
    if masked.values.rows() != arch.l_window || masked.values.cols() != arch.channels {
        return Err(Error::dimension(
            "vmae_forward",
            format!("{}x{} masked", arch.l_window, arch.channels),
            format!("{}x{}", masked.values.rows(), masked.values.cols()),
        ));
    }
    if noise.len() != arch.d_z {
        return Err(Error::dimension(
            "vmae_forward",
            format!("{} noise values", arch.d_z),
            noise.len().to_string(),
        ));
    }
    let masked_row = masked_input_row(masked)?;
    let original_row = original_input_row(original, &masked.timestamps)?;

    let prior = head_forward(&policy.prior, &masked_row, arch.d_z)?;
    let posterior = head_forward(&policy.posterior, &original_row, arch.d_z)?;
    let (u, encoder_cache) = mlp_forward(&policy.encoder, &masked_row)?;

    let z = posterior.dist.sample(noise)?;
    let mut dec_in = u.row(0).to_vec();
    dec_in.extend_from_slice(&z);
    let dec_in = Tensor2::from_vec(1, arch.d_u + arch.d_z, dec_in)?;
    let (flat_out, decoder_cache) = mlp_forward(&policy.decoder, &dec_in)?;
    let reconstruction = Tensor2::from_vec(arch.l_window, arch.channels, flat_out.row(0).to_vec())?;

    Ok((
        VmaeForward {
            reconstruction,
            prior: prior.dist,
            posterior: posterior.dist,
        },
        VmaeCache {
            prior_cache: prior.cache,
            prior_clamped: prior.clamped,
            posterior_cache: posterior.cache,
            posterior_clamped: posterior.clamped,
            encoder_cache,
            decoder_cache,
            noise: noise.to_vec(),
        },
    ))
}

/// Training forward pass without the cache.
pub fn vmae_forward(
    policy: &VmaePolicy,
    masked: &MaskedWindow,
    original: &Tensor2,
    noise: &[f64],
) -> Result<VmaeForward> {
    vmae_forward_training(policy, masked, original, noise).map(|(f, _)| f)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VmaeLossBreakdown {
    pub reconstruction: f64,
    pub kl: f64,
    pub total: f64,
    pub beta: f64,
}

/// Reconstruction MSE over every step and channel of the full window, plus
/// beta-weighted KL(posterior || prior).
pub fn vmae_loss(
    reconstruction: &Tensor2,
    original: &Tensor2,
    prior: &DiagonalGaussian,
    posterior: &DiagonalGaussian,
    beta: f64,
) -> Result<VmaeLossBreakdown> {
    let recon = reconstruction.sum_squared_diff(original)? / reconstruction.len() as f64;
    let (kl, _) = kl_diag_gaussians_with_grads(posterior, prior)?;
    let total = recon + beta * kl;
    if !total.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite VMAE loss (recon {recon}, kl {kl})"
        )));
    }
    Ok(VmaeLossBreakdown {
        reconstruction: recon,
        kl,
        total,
        beta,
    })
}

/// Per-stack gradients of the total loss.
pub struct VmaeGrads {
    pub prior: Vec<LayerGrads>,
    pub posterior: Vec<LayerGrads>,
    pub encoder: Vec<LayerGrads>,
    pub decoder: Vec<LayerGrads>,
}

impl VmaeGrads {
    /// Same layout as [`VmaePolicy::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = flatten_grads(&self.prior);
        flat.extend(flatten_grads(&self.posterior));
        flat.extend(flatten_grads(&self.encoder));
        flat.extend(flatten_grads(&self.decoder));
        flat
    }
}

/// Analytic gradients of vmae_loss(...).total through all four stacks.
///
/// Chain: the reconstruction error flows through the decoder into u (encoder)
/// and z; z backpropagates into the posterior head via the reparameterization
/// (dz/d_mean = 1, dz/d_log_std = std * noise). The KL term contributes to
/// both heads directly with its closed-form gradients, scaled by beta.
pub fn vmae_backward(
    policy: &VmaePolicy,
    cache: &VmaeCache,
    forward: &VmaeForward,
    original: &Tensor2,
    beta: f64,
) -> Result<VmaeGrads> {
    let arch = &policy.arch;
    let n_elems = (arch.l_window * arch.channels) as f64;

    // d total / d reconstruction, as the decoder's flat output row.
    let scale = 2.0 / n_elems;
    let d_recon = forward
        .reconstruction
        .zip_map(original, |p, t| scale * (p - t))?;
    let d_flat_out = Tensor2::from_vec(1, arch.l_window * arch.channels, d_recon.data().to_vec())?;

    let (decoder_grads, d_dec_in) =
        mlp_backward(&policy.decoder, &cache.decoder_cache, &d_flat_out)?;
    let d_dec_in = d_dec_in.row(0);
    let d_u = Tensor2::from_vec(1, arch.d_u, d_dec_in[..arch.d_u].to_vec())?;
    let d_z = &d_dec_in[arch.d_u..];

    let (encoder_grads, _) = mlp_backward(&policy.encoder, &cache.encoder_cache, &d_u)?;

    let (_, kl_grads) = kl_diag_gaussians_with_grads(&forward.posterior, &forward.prior)?;

    // Posterior head: reparameterization path plus beta-scaled KL path.
    let posterior_std = forward.posterior.std();
    let mut d_post_mean = Vec::with_capacity(arch.d_z);
    let mut d_post_log_std = Vec::with_capacity(arch.d_z);
    for i in 0..arch.d_z {
        d_post_mean.push(d_z[i] + beta * kl_grads.q_mean[i]);
        d_post_log_std
            .push(d_z[i] * posterior_std[i] * cache.noise[i] + beta * kl_grads.q_log_std[i]);
    }
    let posterior_grads = head_backward(
        &policy.posterior,
        &cache.posterior_cache,
        &cache.posterior_clamped,
        &d_post_mean,
        &d_post_log_std,
    )?;

    // Prior head: only the KL term touches it during Stage A.
    let d_prior_mean: Vec<f64> = kl_grads.p_mean.iter().map(|g| beta * g).collect();
    let d_prior_log_std: Vec<f64> = kl_grads.p_log_std.iter().map(|g| beta * g).collect();
    let prior_grads = head_backward(
        &policy.prior,
        &cache.prior_cache,
        &cache.prior_clamped,
        &d_prior_mean,
        &d_prior_log_std,
    )?;

    Ok(VmaeGrads {
        prior: prior_grads,
        posterior: posterior_grads,
        encoder: encoder_grads,
        decoder: decoder_grads,
    })
}

/// Generation: decodes a prior sample (`use_prior` true) or the prior mean
/// (`use_prior` false, deterministic). The posterior stack is never read.
pub fn reconstruct(
    policy: &VmaePolicy,
    masked: &MaskedWindow,
    rng: &mut impl Rng,
    use_prior: bool,
) -> Result<Tensor2> {
    let arch = &policy.arch;
    let masked_row = masked_input_row(masked)?;
    let prior = head_forward(&policy.prior, &masked_row, arch.d_z)?;
    let z = if use_prior {
        let noise: Vec<f64> = (0..arch.d_z).map(|_| StandardNormal.sample(rng)).collect();
        prior.dist.sample(&noise)?
    } else {
        prior.dist.mean().to_vec()
    };
    let (u, _) = mlp_forward(&policy.encoder, &masked_row)?;
    let mut dec_in = u.row(0).to_vec();
    dec_in.extend_from_slice(&z);
    let dec_in = Tensor2::from_vec(1, arch.d_u + arch.d_z, dec_in)?;
    let (flat_out, _) = mlp_forward(&policy.decoder, &dec_in)?;
    Tensor2::from_vec(arch.l_window, arch.channels, flat_out.row(0).to_vec())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VmaeTrainConfig {
    pub beta: f64,
    pub epochs: usize,
    /// Consecutive non-improving epochs tolerated on the holdout.
    pub patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for VmaeTrainConfig {
    fn default() -> Self {
        VmaeTrainConfig {
            beta: 0.1,
            epochs: 100,
            patience: 5,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

/// Result of Stage-A training: the policy plus the loss curves the run
/// produced (useful for reporting and trend checks).
pub struct VmaeTraining {
    pub policy: VmaePolicy,
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Holdout reconstruction MSE per epoch (prior-free, posterior-mean
    /// decode on fixed masks).
    pub holdout_recon: Vec<f64>,
}

/// Holdout metric: reconstruction MSE with zero-noise posterior samples on a
/// fixed set of masks, so early stopping is not chasing sampling noise.
fn holdout_loss(policy: &VmaePolicy, windows: &[&Window], masks: &[MaskedWindow]) -> Result<f64> {
    let zero_noise = vec![0.0; policy.arch.d_z];
    let mut sum = 0.0;
    for (w, m) in windows.iter().zip(masks) {
        let original = w.full_values();
        let out = vmae_forward(policy, m, &original, &zero_noise)?;
        sum += out.reconstruction.sum_squared_diff(&original)? / original.len() as f64;
    }
    Ok(sum / windows.len() as f64)
}

/// Trains all four stacks jointly with Adam on the total loss. The last 10%
/// of the anchors (at least one; everything when fewer than five anchors)
/// form the early-stopping holdout with masks fixed once at the start.
/// Deterministic given the seed. `epochs == 0` returns the initialization.
pub fn train_vmae(
    anchor_windows: &[Window],
    arch: VmaeArch,
    config: &VmaeTrainConfig,
) -> Result<VmaeTraining> {
    let first = anchor_windows
        .first()
        .ok_or_else(|| Error::Config("train_vmae needs at least one anchor window".into()))?;
    let span = first.lookback_len() + first.horizon_len();
    if span != arch.l_window || first.channels() != arch.channels {
        return Err(Error::dimension(
            "train_vmae",
            format!("{}x{} windows", arch.l_window, arch.channels),
            format!("{}x{}", span, first.channels()),
        ));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut policy = VmaePolicy::init(arch, seeding::derive_seed(config.seed, "vmae/init"))?;
    if config.epochs == 0 {
        return Ok(VmaeTraining {
            policy,
            epoch_loss: vec![],
            holdout_recon: vec![],
        });
    }

    // Holdout split: last 10%, at least one window; tiny sets train on
    // everything and monitor themselves.
    let n = anchor_windows.len();
    let (train_set, holdout_set): (Vec<&Window>, Vec<&Window>) = if n < 5 {
        (
            anchor_windows.iter().collect(),
            anchor_windows.iter().collect(),
        )
    } else {
        let cut = n - (n / 10).max(1);
        (
            anchor_windows[..cut].iter().collect(),
            anchor_windows[cut..].iter().collect(),
        )
    };
    let mut holdout_mask_rng = seeding::rng_for(config.seed, "vmae/holdout_mask");
    let holdout_masks: Vec<MaskedWindow> = holdout_set
        .iter()
        .map(|w| apply_mask(w, arch.mask_rate, &mut holdout_mask_rng))
        .collect::<Result<_>>()?;

    let mut flat = policy.flatten();
    let mut optimizer = OptimState::adam(config.learning_rate);
    let mut shuffle_rng = seeding::rng_for(config.seed, "vmae/shuffle");
    let mut mask_rng = seeding::rng_for(config.seed, "vmae/mask");
    let mut noise_rng = seeding::rng_for(config.seed, "vmae/noise");
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut best_flat = flat.clone();
    let mut best_holdout = f64::INFINITY;
    let mut stale = 0usize;
    let mut epoch_loss = Vec::with_capacity(config.epochs);
    let mut holdout_recon = Vec::with_capacity(config.epochs);
    let mut last_finite_loss = f64::NAN;

    for _epoch in 0..config.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for chunk in order.chunks(config.batch_size) {
            policy.assign(&flat)?;
            let mut grad_acc = vec![0.0; flat.len()];
            let inv = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let w = train_set[i];
                let original = w.full_values();
                let masked = apply_mask(w, arch.mask_rate, &mut mask_rng)?;
                let noise: Vec<f64> = (0..arch.d_z)
                    .map(|_| StandardNormal.sample(&mut noise_rng))
                    .collect();
                let (forward, cache) = vmae_forward_training(&policy, &masked, &original, &noise)?;
                let loss = vmae_loss(
                    &forward.reconstruction,
                    &original,
                    &forward.prior,
                    &forward.posterior,
                    config.beta,
                )
                .map_err(|e| match e {
                    Error::Numerical(msg) => Error::Numerical(format!(
                        "{msg}; last finite training loss {last_finite_loss}"
                    )),
                    other => other,
                })?;
                last_finite_loss = loss.total;
                loss_sum += loss.total;
                loss_count += 1;
                let grads = vmae_backward(&policy, &cache, &forward, &original, config.beta)?;
                for (acc, g) in grad_acc.iter_mut().zip(grads.flatten()) {
                    *acc += inv * g;
                }
            }
            optimizer_step(&mut optimizer, &mut flat, &grad_acc, Direction::Descent)?;
        }
        policy.assign(&flat)?;
        epoch_loss.push(loss_sum / loss_count.max(1) as f64);
        let holdout = holdout_loss(&policy, &holdout_set, &holdout_masks)?;
        if !holdout.is_finite() {
            return Err(Error::Numerical(format!(
                "holdout loss became non-finite; last finite training loss {last_finite_loss}"
            )));
        }
        holdout_recon.push(holdout);
        if holdout < best_holdout {
            best_holdout = holdout;
            best_flat.copy_from_slice(&flat);
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    policy.assign(&best_flat)?;
    Ok(VmaeTraining {
        policy,
        epoch_loss,
        holdout_recon,
    })
}
