//! Stage-C data production: decode new windows from the fine-tuned policy,
//! resample their timestamps from the test range, and assemble the enlarged
//! training corpus. Two classical augmenters (Gaussian jitter and smoothing
//! convolution) are provided as comparison arms.
//!
//! Every generated window carries provenance: the anchor it grew from, the
//! per-sample seed that drove all of its randomness, and the timestamps it
//! was decoded with. One seed, fixed draw order (mask, timestamp start,
//! latent noise), so any sample can be regenerated bit-for-bit from its
//! provenance record alone.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Window;
use crate::error::{Error, Result};
use crate::seeding;
use crate::tensor::Tensor2;
use crate::vmae::{apply_mask, reconstruct, VmaePolicy};

/// How a corpus entry came to exist.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    /// Decoded from the fine-tuned policy's prior.
    Policy,
    /// Original window plus independent Gaussian noise.
    Gaussian,
    /// Original window smoothed by a 1-D convolution.
    Convolve,
    /// Untouched training window.
    Original,
}

/// A corpus entry with enough provenance to reproduce it exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentedWindow {
    pub window: Window,
    /// Index of the source window in the original training-window list.
    pub anchor_index: usize,
    /// Seed of the per-sample rng that drew the mask, the timestamp start
    /// and the latent noise, in that order. Zero for originals.
    pub latent_seed: u64,
    /// The timestamps the window was decoded with (resampled when a test
    /// range was supplied, otherwise the anchor's own).
    pub timestamps_shifted: Vec<f64>,
    pub provenance: Provenance,
}

/// Sizing arithmetic for the augmented corpus.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPlan {
    pub anchor_fraction: f64,
    /// Samples drawn per anchor before truncation.
    pub multiplier: usize,
    /// Corpus size after augmentation (originals included).
    pub target_total: usize,
    pub original_count: usize,
    pub generated_count: usize,
}

/// Computes how many samples each anchor must contribute so that originals
/// plus generated windows total `target_total`. The per-anchor multiplier is
/// rounded up; generation truncates back to the exact count.
pub fn plan_augmentation(
    original_count: usize,
    anchor_count: usize,
    anchor_fraction: f64,
    target_total: usize,
) -> Result<AugmentationPlan> {
    if target_total < original_count {
        return Err(Error::Config(format!(
            "target corpus size {target_total} is below the original count {original_count}"
        )));
    }
    let generated_count = target_total - original_count;
    if generated_count > 0 && anchor_count == 0 {
        return Err(Error::Config(
            "cannot generate augmented windows from an empty anchor set".into(),
        ));
    }
    let multiplier = if generated_count == 0 {
        0
    } else {
        generated_count.div_ceil(anchor_count)
    };
    Ok(AugmentationPlan {
        anchor_fraction,
        multiplier,
        target_total,
        original_count,
        generated_count,
    })
}

/// Places a window's timestamps uniformly at random inside `range`,
/// preserving the relative spacing. The start position is uniform over
/// [lo, hi - span].
pub fn shift_timestamps(
    timestamps: &[f64],
    range: (f64, f64),
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let (lo, hi) = range;
    if !(lo < hi) {
        return Err(Error::Config(format!(
            "timestamp range must satisfy lo < hi, got [{lo}, {hi}]"
        )));
    }
    let first = *timestamps
        .first()
        .ok_or_else(|| Error::Config("cannot shift an empty timestamp vector".into()))?;
    let last = *timestamps.last().expect("nonempty");
    let span = last - first;
    let available = hi - span - lo;
    if available < 0.0 {
        return Err(Error::Config(format!(
            "window span {span} exceeds timestamp range [{lo}, {hi}]"
        )));
    }
    // One uniform draw regardless of outcome keeps the rng stream layout
    // fixed for provenance replay.
    let start = lo + rng.random::<f64>() * available;
    Ok(timestamps.iter().map(|&t| start + (t - first)).collect())
}

/// Decodes one augmented window from its provenance inputs. The rng seeded
/// by `latent_seed` is consumed in a fixed order: per-step mask draws, one
/// timestamp-start draw (only when a range is given), then the prior noise.
pub fn generate_one(
    policy: &VmaePolicy,
    anchor: &Window,
    anchor_index: usize,
    latent_seed: u64,
    timestamp_range: Option<(f64, f64)>,
) -> Result<AugmentedWindow> {
    let mut rng = ChaCha12Rng::seed_from_u64(latent_seed);
    let mut masked = apply_mask(anchor, policy.arch.mask_rate, &mut rng)?;
    if let Some(range) = timestamp_range {
        masked.timestamps = shift_timestamps(&anchor.timestamps, range, &mut rng)?;
    }
    let values = reconstruct(policy, &masked, &mut rng, true)?;
    let window = Window::from_full_values(
        &values,
        anchor.lookback_len(),
        masked.timestamps.clone(),
        anchor.origin,
    )?;
    Ok(AugmentedWindow {
        window,
        anchor_index,
        latent_seed,
        timestamps_shifted: masked.timestamps,
        provenance: Provenance::Policy,
    })
}

fn check_anchor_inputs(anchors: &[Window], anchor_indices: &[usize]) -> Result<()> {
    if anchors.len() != anchor_indices.len() {
        return Err(Error::dimension(
            "augment anchors",
            anchors.len().to_string(),
            anchor_indices.len().to_string(),
        ));
    }
    Ok(())
}

/// Generates `plan.generated_count` windows from the policy, cycling over
/// the anchors round-robin (every anchor contributes its r-th sample before
/// any anchor contributes its (r+1)-th). Per-sample seeds derive from
/// `master_seed`, the anchor's original index and the repetition number.
pub fn generate(
    policy: &VmaePolicy,
    anchors: &[Window],
    anchor_indices: &[usize],
    plan: &AugmentationPlan,
    timestamp_range: Option<(f64, f64)>,
    master_seed: u64,
) -> Result<Vec<AugmentedWindow>> {
    check_anchor_inputs(anchors, anchor_indices)?;
    let mut out = Vec::with_capacity(plan.generated_count);
    'outer: for rep in 0..plan.multiplier {
        for (anchor, &idx) in anchors.iter().zip(anchor_indices) {
            if out.len() == plan.generated_count {
                break 'outer;
            }
            let seed = seeding::derive_seed(master_seed, &format!("aug/{idx}/{rep}"));
            out.push(generate_one(policy, anchor, idx, seed, timestamp_range)?);
        }
    }
    if out.len() != plan.generated_count {
        return Err(Error::Config(format!(
            "augmentation plan produced {} windows, expected {}",
            out.len(),
            plan.generated_count
        )));
    }
    Ok(out)
}

/// Classical jitter arm: each value perturbed by independent N(0, sigma^2)
/// noise. Timestamps are untouched. Cycles anchors round-robin to reach
/// `count` windows.
pub fn gaussian_baseline(
    anchors: &[Window],
    anchor_indices: &[usize],
    sigma: f64,
    count: usize,
    master_seed: u64,
) -> Result<Vec<AugmentedWindow>> {
    check_anchor_inputs(anchors, anchor_indices)?;
    if sigma < 0.0 {
        return Err(Error::Config(format!(
            "sigma must be nonnegative, got {sigma}"
        )));
    }
    if count > 0 && anchors.is_empty() {
        return Err(Error::Config(
            "gaussian baseline needs at least one window".into(),
        ));
    }
    let noise = Normal::new(0.0, sigma)
        .map_err(|e| Error::Config(format!("invalid gaussian sigma {sigma}: {e}")))?;
    let mut out = Vec::with_capacity(count);
    let mut rep = 0usize;
    while out.len() < count {
        for (anchor, &idx) in anchors.iter().zip(anchor_indices) {
            if out.len() == count {
                break;
            }
            let seed = seeding::derive_seed(master_seed, &format!("aug-gauss/{idx}/{rep}"));
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let values = anchor.full_values().map(|v| v + noise.sample(&mut rng));
            let window = Window::from_full_values(
                &values,
                anchor.lookback_len(),
                anchor.timestamps.clone(),
                anchor.origin,
            )?;
            out.push(AugmentedWindow {
                window,
                anchor_index: idx,
                latent_seed: seed,
                timestamps_shifted: anchor.timestamps.clone(),
                provenance: Provenance::Gaussian,
            });
        }
        rep += 1;
    }
    Ok(out)
}

/// Per-channel 1-D convolution along time with edge replication padding.
fn convolve_values(values: &Tensor2, kernel: &[f64]) -> Tensor2 {
    let l = values.rows() as isize;
    let half = (kernel.len() / 2) as isize;
    let mut out = Tensor2::zeros(values.rows(), values.cols());
    for t in 0..l {
        for c in 0..values.cols() {
            let mut acc = 0.0;
            for (k, &w) in kernel.iter().enumerate() {
                let src = (t + k as isize - half).clamp(0, l - 1);
                acc += w * values.get(src as usize, c);
            }
            out.set(t as usize, c, acc);
        }
    }
    out
}

/// Classical smoothing arm: convolves each window per channel with `kernel`
/// (odd length, no longer than the window). Deterministic; cycling to reach
/// `count` produces identical copies.
pub fn convolve_baseline(
    anchors: &[Window],
    anchor_indices: &[usize],
    kernel: &[f64],
    count: usize,
) -> Result<Vec<AugmentedWindow>> {
    check_anchor_inputs(anchors, anchor_indices)?;
    if kernel.is_empty() || kernel.len() % 2 == 0 {
        return Err(Error::Config(format!(
            "convolution kernel length must be odd, got {}",
            kernel.len()
        )));
    }
    if count > 0 && anchors.is_empty() {
        return Err(Error::Config(
            "convolve baseline needs at least one window".into(),
        ));
    }
    if let Some(first) = anchors.first() {
        let span = first.lookback_len() + first.horizon_len();
        if kernel.len() > span {
            return Err(Error::Config(format!(
                "kernel length {} exceeds window length {span}",
                kernel.len()
            )));
        }
    }
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        for (anchor, &idx) in anchors.iter().zip(anchor_indices) {
            if out.len() == count {
                break;
            }
            let values = convolve_values(&anchor.full_values(), kernel);
            let window = Window::from_full_values(
                &values,
                anchor.lookback_len(),
                anchor.timestamps.clone(),
                anchor.origin,
            )?;
            out.push(AugmentedWindow {
                window,
                anchor_index: idx,
                latent_seed: 0,
                timestamps_shifted: anchor.timestamps.clone(),
                provenance: Provenance::Convolve,
            });
        }
    }
    Ok(out)
}

/// The Stage-C training corpus: original windows plus augmented ones, in a
/// shuffled order fixed by the recorded seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub entries: Vec<AugmentedWindow>,
    pub shuffle_seed: u64,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn windows(&self) -> Vec<Window> {
        self.entries.iter().map(|e| e.window.clone()).collect()
    }

    pub fn count_by(&self, provenance: Provenance) -> usize {
        self.entries
            .iter()
            .filter(|e| e.provenance == provenance)
            .count()
    }
}

/// Concatenates originals (always included, exactly once) with the augmented
/// windows and shuffles with a recorded seed. All windows must share the
/// original shape.
pub fn assemble_corpus(
    originals: &[Window],
    augmented: Vec<AugmentedWindow>,
    shuffle_seed: u64,
) -> Result<Corpus> {
    let first = originals
        .first()
        .ok_or_else(|| Error::Config("corpus needs at least one original window".into()))?;
    let shape = (first.lookback_len(), first.horizon_len(), first.channels());
    let mut entries: Vec<AugmentedWindow> = Vec::with_capacity(originals.len() + augmented.len());
    for (i, w) in originals.iter().enumerate() {
        entries.push(AugmentedWindow {
            window: w.clone(),
            anchor_index: i,
            latent_seed: 0,
            timestamps_shifted: w.timestamps.clone(),
            provenance: Provenance::Original,
        });
    }
    for e in augmented {
        let got = (
            e.window.lookback_len(),
            e.window.horizon_len(),
            e.window.channels(),
        );
        if got != shape {
            return Err(Error::dimension(
                "assemble_corpus",
                format!("{shape:?}"),
                format!("{got:?}"),
            ));
        }
        entries.push(e);
    }
    let mut rng = seeding::rng_for(shuffle_seed, "corpus/shuffle");
    entries.shuffle(&mut rng);
    Ok(Corpus {
        entries,
        shuffle_seed,
    })
}
