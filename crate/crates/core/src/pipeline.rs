//! End-to-end orchestration: dataset ingest, model zoo, overfit ranking,
//! augmentor pretraining, policy fine-tuning, corpus generation, forecaster
//! retraining, and evaluation, with every artifact persisted and hashed.
//!
//! A run is fully determined by its `RunConfig` (one seed fans out into
//! per-stage streams), so rerunning a config reproduces `metrics.csv` and
//! every artifact hash byte for byte. Failures abort with the stage name and
//! still persist the partial manifest.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::augment::{assemble_corpus, generate, plan_augmentation, Corpus};
use crate::dataset::{
    build_dataset, load_csv_path, PartitionSpec, SplitMode, TimeSeriesDataset, Window,
};
use crate::error::{Error, Result};
use crate::forecaster::{
    build_model_zoo, evaluate, train_forecaster, Backbone, EvalReport, ForecasterParams, ModelZoo,
    TrainOptions,
};
use crate::ranking::{rank_and_split, score_training_windows, write_rank_csv, AnchorSet};
use crate::reinforce::{run_stage_b, write_reward_trace, ReinforceConfig};
use crate::seeding::derive_seed;
use crate::vmae::{train_vmae, VmaeArch, VmaePolicy, VmaeTrainConfig};

// ---------------------------------------------------------------------------
// Configuration

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub path: String,
    /// Row counts from the start of the series.
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// "standard" or "fewshot".
    pub mode: String,
    /// Fraction of the train rows kept in few-shot mode.
    pub fewshot_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: String::new(),
            train: 0,
            val: 0,
            test: 0,
            mode: "fewshot".into(),
            fewshot_fraction: 0.1,
        }
    }
}

impl DataConfig {
    pub fn partition(&self) -> PartitionSpec {
        PartitionSpec {
            train: self.train,
            val: self.val,
            test: self.test,
        }
    }

    pub fn split_mode(&self) -> Result<SplitMode> {
        match self.mode.as_str() {
            "standard" => Ok(SplitMode::Standard),
            "fewshot" => Ok(SplitMode::FewShot {
                fraction: self.fewshot_fraction,
            }),
            other => Err(Error::Config(format!(
                "mode must be \"standard\" or \"fewshot\", got \"{other}\""
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    pub lookback: usize,
    pub horizon: usize,
    /// Full window length; defaults to lookback + horizon and must match it
    /// when given explicitly.
    pub l_window: Option<usize>,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            lookback: 96,
            horizon: 96,
            l_window: None,
        }
    }
}

impl WindowConfig {
    pub fn span(&self) -> usize {
        self.lookback + self.horizon
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForecasterConfig {
    pub backbone: Backbone,
    pub epochs: usize,
    pub patience: usize,
    pub batch: usize,
    pub learning_rate: f64,
}

impl Default for ForecasterConfig {
    fn default() -> Self {
        ForecasterConfig {
            backbone: Backbone::Linear,
            epochs: 50,
            patience: 3,
            batch: 32,
            learning_rate: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ZooConfig {
    pub k: usize,
    pub anchor_fraction: f64,
}

impl Default for ZooConfig {
    fn default() -> Self {
        ZooConfig {
            k: 4,
            anchor_fraction: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VmaeConfig {
    pub d_z: usize,
    pub d_u: usize,
    pub hidden: usize,
    pub mask_rate: f64,
    pub beta: f64,
    pub epochs: usize,
    pub patience: usize,
    pub batch: usize,
    pub learning_rate: f64,
}

impl Default for VmaeConfig {
    fn default() -> Self {
        VmaeConfig {
            d_z: 16,
            d_u: 128,
            hidden: 128,
            mask_rate: 0.3,
            beta: 0.1,
            epochs: 100,
            patience: 5,
            batch: 32,
            learning_rate: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReinforceSection {
    pub alpha: f64,
    pub eta: f64,
    pub steps: usize,
    pub batch: usize,
    pub deviation_floor: f64,
    pub use_baseline: bool,
}

impl Default for ReinforceSection {
    fn default() -> Self {
        let d = ReinforceConfig::default();
        ReinforceSection {
            alpha: d.alpha,
            eta: d.eta,
            steps: d.steps,
            batch: d.batch,
            deviation_floor: d.deviation_floor,
            use_baseline: d.use_baseline,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Corpus size target as a multiple of the original train-window count.
    pub corpus_multiplier: usize,
    /// Jitter scale of the Gaussian comparison arm.
    pub gaussian_sigma: f64,
    /// Kernel of the smoothing comparison arm.
    pub convolve_kernel: Vec<f64>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            corpus_multiplier: 3,
            gaussian_sigma: 0.1,
            convolve_kernel: vec![0.2; 5],
        }
    }
}

/// One complete run description. Every hyperparameter has a config key;
/// unspecified keys take the defaults baked into the per-section `Default`
/// impls.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub windows: WindowConfig,
    pub forecaster: ForecasterConfig,
    pub zoo: ZooConfig,
    pub vmae: VmaeConfig,
    pub reinforce: ReinforceSection,
    pub augment: AugmentConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::format("config", e.to_string()))
    }

    pub fn from_toml_path(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        RunConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::format("config", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.path.is_empty() {
            return Err(Error::Config("data.path must be set".into()));
        }
        self.data.split_mode()?;
        if self.data.mode == "fewshot"
            && !(self.data.fewshot_fraction > 0.0 && self.data.fewshot_fraction <= 1.0)
        {
            return Err(Error::Config(format!(
                "fewshot_fraction must be in (0, 1], got {}",
                self.data.fewshot_fraction
            )));
        }
        if self.windows.lookback == 0 || self.windows.horizon == 0 {
            return Err(Error::Config("window lengths must be positive".into()));
        }
        if let Some(l) = self.windows.l_window {
            if l != self.windows.span() {
                return Err(Error::Config(format!(
                    "l_window {} does not equal lookback + horizon = {}",
                    l,
                    self.windows.span()
                )));
            }
        }
        if self.zoo.k < 2 {
            return Err(Error::Config(format!(
                "zoo needs k >= 2, got {}",
                self.zoo.k
            )));
        }
        if !(self.zoo.anchor_fraction > 0.0 && self.zoo.anchor_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "anchor_fraction must be in (0, 1], got {}",
                self.zoo.anchor_fraction
            )));
        }
        if self.vmae.d_z == 0 || self.vmae.d_u == 0 || self.vmae.hidden == 0 {
            return Err(Error::Config("vmae widths must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.vmae.mask_rate) {
            return Err(Error::Config(format!(
                "mask_rate must be in [0, 1], got {}",
                self.vmae.mask_rate
            )));
        }
        if self.vmae.beta < 0.0 {
            return Err(Error::Config(format!(
                "beta must be nonnegative, got {}",
                self.vmae.beta
            )));
        }
        if self.vmae.batch == 0 || self.forecaster.batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.vmae.learning_rate > 0.0) || !(self.forecaster.learning_rate > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        self.reinforce_config(None).validate()?;
        if self.augment.corpus_multiplier == 0 {
            return Err(Error::Config("corpus_multiplier must be at least 1".into()));
        }
        if self.augment.gaussian_sigma < 0.0 {
            return Err(Error::Config(format!(
                "gaussian_sigma must be nonnegative, got {}",
                self.augment.gaussian_sigma
            )));
        }
        if self.augment.convolve_kernel.is_empty() || self.augment.convolve_kernel.len() % 2 == 0 {
            return Err(Error::Config(format!(
                "convolve_kernel length must be odd, got {}",
                self.augment.convolve_kernel.len()
            )));
        }
        Ok(())
    }

    pub fn forecaster_options(&self, seed: u64) -> TrainOptions {
        TrainOptions {
            epochs: self.forecaster.epochs,
            patience: self.forecaster.patience,
            batch_size: self.forecaster.batch,
            learning_rate: self.forecaster.learning_rate,
            seed,
        }
    }

    pub fn vmae_arch(&self, channels: usize) -> VmaeArch {
        VmaeArch {
            channels,
            l_window: self.windows.span(),
            d_z: self.vmae.d_z,
            d_u: self.vmae.d_u,
            hidden: self.vmae.hidden,
            mask_rate: self.vmae.mask_rate,
        }
    }

    pub fn vmae_train_config(&self) -> VmaeTrainConfig {
        VmaeTrainConfig {
            beta: self.vmae.beta,
            epochs: self.vmae.epochs,
            patience: self.vmae.patience,
            batch_size: self.vmae.batch,
            learning_rate: self.vmae.learning_rate,
            seed: derive_seed(self.seed, "stage_a"),
        }
    }

    pub fn reinforce_config(&self, timestamp_range: Option<(f64, f64)>) -> ReinforceConfig {
        ReinforceConfig {
            alpha: self.reinforce.alpha,
            eta: self.reinforce.eta,
            steps: self.reinforce.steps,
            batch: self.reinforce.batch,
            deviation_floor: self.reinforce.deviation_floor,
            use_baseline: self.reinforce.use_baseline,
            timestamp_range,
        }
    }
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub arm: String,
    pub mae: f64,
    pub mse: f64,
    pub n_windows: usize,
}

impl MetricRow {
    pub fn from_eval(arm: &str, eval: &EvalReport) -> Self {
        MetricRow {
            arm: arm.to_string(),
            mae: eval.mae,
            mse: eval.mse,
            n_windows: eval.n_windows,
        }
    }

    pub fn to_eval(&self) -> EvalReport {
        EvalReport {
            mae: self.mae,
            mse: self.mse,
            n_windows: self.n_windows,
        }
    }
}

/// Everything a finished (or aborted) run leaves behind: the config
/// snapshot, the stage trail, wall-clock numbers, artifact hashes, and the
/// metric table. Stages only ever append.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub completed_stages: Vec<String>,
    pub stage_seconds: BTreeMap<String, f64>,
    pub artifacts: BTreeMap<String, ArtifactRecord>,
    pub metrics: Vec<MetricRow>,
    pub f_metric: Option<FMetric>,
}

impl RunManifest {
    pub fn new(config: RunConfig) -> Self {
        RunManifest {
            config,
            completed_stages: vec![],
            stage_seconds: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            metrics: vec![],
            f_metric: None,
        }
    }

    pub fn metric_for(&self, arm: &str) -> Option<&MetricRow> {
        self.metrics.iter().find(|m| m.arm == arm)
    }
}

// ---------------------------------------------------------------------------
// F-metric

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub fewshot: f64,
    pub augmented: f64,
    pub standard: f64,
}

/// Fraction of the few-shot-to-standard gap recovered by augmentation,
/// per metric: (1 - augmented/fewshot) / (1 - standard/fewshot).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FMetric {
    pub f_mae: f64,
    pub f_mse: f64,
    pub mae_inputs: MetricTriple,
    pub mse_inputs: MetricTriple,
}

fn f_ratio(triple: MetricTriple, which: &str) -> Result<f64> {
    if triple.fewshot == 0.0 {
        return Err(Error::Numerical(format!(
            "{which}: few-shot metric is zero, ratio undefined"
        )));
    }
    let denominator = 1.0 - triple.standard / triple.fewshot;
    if denominator == 0.0 {
        return Err(Error::Numerical(format!(
            "{which}: standard equals few-shot metric ({}), gap ratio undefined",
            triple.standard
        )));
    }
    Ok((1.0 - triple.augmented / triple.fewshot) / denominator)
}

/// All three reports must come from the identical test split.
pub fn f_metric(
    fewshot: &EvalReport,
    augmented: &EvalReport,
    standard: &EvalReport,
) -> Result<FMetric> {
    let mae_inputs = MetricTriple {
        fewshot: fewshot.mae,
        augmented: augmented.mae,
        standard: standard.mae,
    };
    let mse_inputs = MetricTriple {
        fewshot: fewshot.mse,
        augmented: augmented.mse,
        standard: standard.mse,
    };
    Ok(FMetric {
        f_mae: f_ratio(mae_inputs, "mae")?,
        f_mse: f_ratio(mse_inputs, "mse")?,
        mae_inputs,
        mse_inputs,
    })
}

/// F-metric from two finished runs: the few-shot manifest supplies the
/// original and augmented arms, the standard-mode manifest supplies the
/// reference arm.
pub fn f_metric_from_manifests(fewshot: &RunManifest, standard: &RunManifest) -> Result<FMetric> {
    let need = |m: &RunManifest, arm: &str, who: &str| -> Result<EvalReport> {
        m.metric_for(arm)
            .map(MetricRow::to_eval)
            .ok_or_else(|| Error::Config(format!("{who} manifest has no \"{arm}\" metric row")))
    };
    let few = need(fewshot, "original", "few-shot")?;
    let aug = need(fewshot, "augmented", "few-shot")?;
    let std_arm = need(standard, "original", "standard")?;
    f_metric(&few, &aug, &std_arm)
}

/// Relative improvement of the augmented arm over the raw one: (raw - aug)/raw.
pub fn promotion(raw: f64, augmented: f64) -> f64 {
    (raw - augmented) / raw
}

// ---------------------------------------------------------------------------
// Artifact plumbing

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn hash_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(sha256_hex(&bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

fn to_json<T: Serialize>(value: &T, what: &str) -> Result<Vec<u8>> {
    serde_json::to_vec_pretty(value).map_err(|e| Error::format(what.to_string(), e.to_string()))
}

fn from_json_path<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::format(format!("{what} at {}", path.display()), e.to_string()))
}

/// Writes the bytes and records their hash in the manifest under `key`.
fn write_artifact(manifest: &mut RunManifest, key: &str, path: &Path, bytes: &[u8]) -> Result<()> {
    write_file(path, bytes)?;
    manifest.artifacts.insert(
        key.to_string(),
        ArtifactRecord {
            path: path.display().to_string(),
            sha256: sha256_hex(bytes),
        },
    );
    Ok(())
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Policy parameters plus the architecture needed to interpret them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub format_version: u32,
    pub policy: VmaePolicy,
}

pub fn save_policy(path: impl AsRef<Path>, policy: &VmaePolicy) -> Result<()> {
    let checkpoint = PolicyCheckpoint {
        format_version: CHECKPOINT_VERSION,
        policy: policy.clone(),
    };
    write_file(path.as_ref(), &to_json(&checkpoint, "policy checkpoint")?)
}

pub fn load_policy(path: impl AsRef<Path>) -> Result<VmaePolicy> {
    let checkpoint: PolicyCheckpoint = from_json_path(path.as_ref(), "policy checkpoint")?;
    if checkpoint.format_version != CHECKPOINT_VERSION {
        return Err(Error::format(
            path.as_ref().display().to_string(),
            format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                checkpoint.format_version
            ),
        ));
    }
    Ok(checkpoint.policy)
}

pub fn save_zoo(path: impl AsRef<Path>, zoo: &ModelZoo) -> Result<()> {
    write_file(path.as_ref(), &to_json(zoo, "zoo")?)
}

pub fn load_zoo(path: impl AsRef<Path>) -> Result<ModelZoo> {
    from_json_path(path.as_ref(), "zoo")
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &TimeSeriesDataset) -> Result<()> {
    write_file(path.as_ref(), &to_json(ds, "dataset")?)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<TimeSeriesDataset> {
    from_json_path(path.as_ref(), "dataset")
}

pub fn save_forecaster(path: impl AsRef<Path>, params: &ForecasterParams) -> Result<()> {
    write_file(path.as_ref(), &to_json(params, "forecaster")?)
}

pub fn load_forecaster(path: impl AsRef<Path>) -> Result<ForecasterParams> {
    from_json_path(path.as_ref(), "forecaster")
}

pub fn save_manifest(path: impl AsRef<Path>, manifest: &RunManifest) -> Result<()> {
    write_file(path.as_ref(), &to_json(manifest, "manifest")?)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<RunManifest> {
    from_json_path(path.as_ref(), "manifest")
}

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    format_version: u32,
    shuffle_seed: u64,
    entries: usize,
}

/// Corpus as JSON lines: a header, then one entry per line.
pub fn corpus_to_jsonl(corpus: &Corpus) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    let header = CorpusHeader {
        format_version: CHECKPOINT_VERSION,
        shuffle_seed: corpus.shuffle_seed,
        entries: corpus.entries.len(),
    };
    let emit = |buf: &mut Vec<u8>, line: String| {
        buf.extend_from_slice(line.as_bytes());
        buf.push(b'\n');
    };
    emit(
        &mut buf,
        serde_json::to_string(&header).map_err(|e| Error::format("corpus", e.to_string()))?,
    );
    for entry in &corpus.entries {
        emit(
            &mut buf,
            serde_json::to_string(entry).map_err(|e| Error::format("corpus", e.to_string()))?,
        );
    }
    Ok(buf)
}

pub fn save_corpus(path: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    write_file(path.as_ref(), &corpus_to_jsonl(corpus)?)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = text.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::format(path.display().to_string(), "empty corpus file"))?;
    let header: CorpusHeader = serde_json::from_str(header_line)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::format(
            path.display().to_string(),
            format!("unsupported corpus version {}", header.format_version),
        ));
    }
    let entries = lines
        .map(|line| {
            serde_json::from_str(line)
                .map_err(|e| Error::format(path.display().to_string(), e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    if entries.len() != header.entries {
        return Err(Error::format(
            path.display().to_string(),
            format!(
                "expected {} entries, found {}",
                header.entries,
                entries.len()
            ),
        ));
    }
    Ok(Corpus {
        entries,
        shuffle_seed: header.shuffle_seed,
    })
}

pub fn metrics_to_csv(rows: &[MetricRow]) -> Vec<u8> {
    let mut buf = Vec::new();
    let _ = writeln!(buf, "arm,mae,mse,n_windows");
    for row in rows {
        let _ = writeln!(
            buf,
            "{},{:.17e},{:.17e},{}",
            row.arm, row.mae, row.mse, row.n_windows
        );
    }
    buf
}

// ---------------------------------------------------------------------------
// Stage driver

fn stage<T>(
    manifest: &mut RunManifest,
    name: &'static str,
    f: impl FnOnce() -> Result<T>,
) -> Result<T> {
    let started = Instant::now();
    let value = f().map_err(|e| e.in_stage(name))?;
    manifest
        .stage_seconds
        .insert(name.to_string(), started.elapsed().as_secs_f64());
    manifest.completed_stages.push(name.to_string());
    Ok(value)
}

/// Dataset plus the windows every downstream stage consumes.
pub struct PreparedData {
    pub dataset: TimeSeriesDataset,
    pub train: Vec<Window>,
    pub val: Vec<Window>,
    pub test: Vec<Window>,
    /// Timestamp range of the test split, used for resampling.
    pub test_range: (f64, f64),
}

/// Loads the CSV, builds the dataset with the configured splits, and cuts
/// the windows; rejects configs whose train or test split fits no window.
pub fn prepare_data(config: &RunConfig) -> Result<PreparedData> {
    let raw = load_csv_path(&config.data.path)?;
    let dataset = build_dataset(&raw, config.data.partition(), config.data.split_mode()?)?;
    let (l, h) = (config.windows.lookback, config.windows.horizon);
    let train = dataset.train_windows(l, h)?;
    let val = dataset.val_windows(l, h)?;
    let test = dataset.test_windows(l, h)?;
    if train.is_empty() {
        return Err(Error::Config(format!(
            "train split yields no {l}+{h} windows"
        )));
    }
    if test.is_empty() {
        return Err(Error::Config(format!(
            "test split yields no {l}+{h} windows"
        )));
    }
    let test_range = dataset.timestamp_range(&dataset.splits.test.clone())?;
    Ok(PreparedData {
        dataset,
        train,
        val,
        test,
        test_range,
    })
}

/// Materializes the anchor windows an [`AnchorSet`] points at.
pub fn anchor_windows(train: &[Window], anchors: &AnchorSet) -> Vec<Window> {
    anchors.indices.iter().map(|&i| train[i].clone()).collect()
}

pub fn save_anchors(path: impl AsRef<Path>, anchors: &AnchorSet) -> Result<()> {
    write_file(path.as_ref(), &to_json(anchors, "anchors")?)
}

pub fn load_anchors(path: impl AsRef<Path>) -> Result<AnchorSet> {
    from_json_path(path.as_ref(), "anchors")
}

fn drive(config: &RunConfig, out_dir: &Path, manifest: &mut RunManifest) -> Result<()> {
    let prepared = stage(manifest, "ingest", || prepare_data(config))?;
    write_artifact(
        manifest,
        "dataset",
        &out_dir.join("dataset.json"),
        &to_json(&prepared.dataset, "dataset")?,
    )?;

    let zoo = stage(manifest, "zoo", || {
        build_model_zoo(
            &prepared.train,
            config.zoo.k,
            config.forecaster.backbone.clone(),
            &config.forecaster_options(derive_seed(config.seed, "zoo")),
        )
    })?;
    write_artifact(
        manifest,
        "zoo",
        &out_dir.join("zoo.json"),
        &to_json(&zoo, "zoo")?,
    )?;

    let (records, anchors) = stage(manifest, "rank", || {
        let records = score_training_windows(&zoo, &prepared.train)?;
        let (anchors, _) = rank_and_split(&records, config.zoo.anchor_fraction)?;
        Ok((records, anchors))
    })?;
    let mut rank_csv = Vec::new();
    write_rank_csv(&records, &anchors, &mut rank_csv)?;
    write_artifact(manifest, "rank", &out_dir.join("rank.csv"), &rank_csv)?;
    let anchor_set = anchor_windows(&prepared.train, &anchors);

    let arch = config.vmae_arch(prepared.dataset.channels());
    let stage_a = stage(manifest, "stage_a", || {
        train_vmae(&anchor_set, arch, &config.vmae_train_config())
    })?;
    write_artifact(
        manifest,
        "policy_a",
        &out_dir.join("policy_a.json"),
        &to_json(
            &PolicyCheckpoint {
                format_version: CHECKPOINT_VERSION,
                policy: stage_a.policy.clone(),
            },
            "policy checkpoint",
        )?,
    )?;

    let reinforce_cfg = config.reinforce_config(Some(prepared.test_range));
    let stage_b = stage(manifest, "stage_b", || {
        run_stage_b(
            &stage_a.policy,
            &anchor_set,
            &anchors.indices,
            &zoo,
            &reinforce_cfg,
            derive_seed(config.seed, "stage_b"),
        )
    })?;
    write_artifact(
        manifest,
        "policy_b",
        &out_dir.join("policy_b.json"),
        &to_json(
            &PolicyCheckpoint {
                format_version: CHECKPOINT_VERSION,
                policy: stage_b.policy.clone(),
            },
            "policy checkpoint",
        )?,
    )?;
    let mut trace_csv = Vec::new();
    write_reward_trace(&stage_b.trace, &mut trace_csv)?;
    write_artifact(
        manifest,
        "reward_trace",
        &out_dir.join("reward_trace.csv"),
        &trace_csv,
    )?;

    let corpus = stage(manifest, "augment", || {
        let plan = plan_augmentation(
            prepared.train.len(),
            anchor_set.len(),
            config.zoo.anchor_fraction,
            config.augment.corpus_multiplier * prepared.train.len(),
        )?;
        let generated = generate(
            &stage_b.policy,
            &anchor_set,
            &anchors.indices,
            &plan,
            Some(prepared.test_range),
            derive_seed(config.seed, "augment"),
        )?;
        assemble_corpus(
            &prepared.train,
            generated,
            derive_seed(config.seed, "corpus"),
        )
    })?;
    write_artifact(
        manifest,
        "corpus",
        &out_dir.join("corpus.jsonl"),
        &corpus_to_jsonl(&corpus)?,
    )?;

    let corpus_windows = corpus.windows();
    let (fc_original, fc_augmented) = stage(manifest, "stage_c", || {
        let original = train_forecaster(
            &prepared.train,
            &prepared.val,
            config.forecaster.backbone.clone(),
            &config.forecaster_options(derive_seed(config.seed, "stage_c/original")),
        )?;
        let augmented = train_forecaster(
            &corpus_windows,
            &prepared.val,
            config.forecaster.backbone.clone(),
            &config.forecaster_options(derive_seed(config.seed, "stage_c/augmented")),
        )?;
        Ok((original, augmented))
    })?;
    write_artifact(
        manifest,
        "forecaster_original",
        &out_dir.join("forecaster_original.json"),
        &to_json(&fc_original, "forecaster")?,
    )?;
    write_artifact(
        manifest,
        "forecaster_augmented",
        &out_dir.join("forecaster_augmented.json"),
        &to_json(&fc_augmented, "forecaster")?,
    )?;

    let (eval_original, eval_augmented) = stage(manifest, "evaluate", || {
        Ok((
            evaluate(&fc_original, &prepared.test)?,
            evaluate(&fc_augmented, &prepared.test)?,
        ))
    })?;
    manifest.metrics = vec![
        MetricRow::from_eval("original", &eval_original),
        MetricRow::from_eval("augmented", &eval_augmented),
    ];
    let metrics_csv = metrics_to_csv(&manifest.metrics);
    write_artifact(
        manifest,
        "metrics",
        &out_dir.join("metrics.csv"),
        &metrics_csv,
    )?;
    Ok(())
}

/// Runs the whole pipeline, persisting every artifact under `out_dir`.
/// On failure the error names the stage and the partial manifest is still
/// written.
pub fn run_pipeline(config: &RunConfig, out_dir: impl AsRef<Path>) -> Result<RunManifest> {
    let out_dir = out_dir.as_ref();
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut manifest = RunManifest::new(config.clone());
    let outcome = drive(config, out_dir, &mut manifest);
    let saved = save_manifest(out_dir.join("manifest.json"), &manifest);
    outcome?;
    saved?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Ablations

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    pub name: String,
    pub mae: f64,
    pub mse: f64,
    pub n_windows: usize,
    pub policy_sha256: String,
    pub corpus_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlAblation {
    pub zoo_sha256: String,
    pub arms: Vec<AblationArm>,
}

/// Trains one augmented-corpus forecaster and evaluates it on the test
/// windows. Seeds are shared across arms so only the corpus differs.
fn arm_eval(
    config: &RunConfig,
    corpus_windows: &[Window],
    val: &[Window],
    test: &[Window],
) -> Result<EvalReport> {
    let model = train_forecaster(
        corpus_windows,
        val,
        config.forecaster.backbone.clone(),
        &config.forecaster_options(derive_seed(config.seed, "stage_c/augmented")),
    )?;
    evaluate(&model, test)
}

/// Stage-B on/off comparison: the shared prefix (data, zoo, ranking, Stage A)
/// runs once, then each arm generates its corpus from its own policy with
/// identical seeds. The off arm augments straight from the Stage-A policy, so
/// the two arms differ only in the prior parameters.
pub fn ablation_rl(config: &RunConfig, out_dir: impl AsRef<Path>) -> Result<RlAblation> {
    let out_dir = out_dir.as_ref();
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let prepared = prepare_data(config).map_err(|e| e.in_stage("ingest"))?;
    let zoo = build_model_zoo(
        &prepared.train,
        config.zoo.k,
        config.forecaster.backbone.clone(),
        &config.forecaster_options(derive_seed(config.seed, "zoo")),
    )
    .map_err(|e| e.in_stage("zoo"))?;
    let zoo_bytes = to_json(&zoo, "zoo")?;
    write_file(&out_dir.join("zoo.json"), &zoo_bytes)?;
    let zoo_sha256 = sha256_hex(&zoo_bytes);

    let records = score_training_windows(&zoo, &prepared.train).map_err(|e| e.in_stage("rank"))?;
    let (anchors, _) =
        rank_and_split(&records, config.zoo.anchor_fraction).map_err(|e| e.in_stage("rank"))?;
    let anchor_set = anchor_windows(&prepared.train, &anchors);

    let arch = config.vmae_arch(prepared.dataset.channels());
    let stage_a = train_vmae(&anchor_set, arch, &config.vmae_train_config())
        .map_err(|e| e.in_stage("stage_a"))?;

    let plan = plan_augmentation(
        prepared.train.len(),
        anchor_set.len(),
        config.zoo.anchor_fraction,
        config.augment.corpus_multiplier * prepared.train.len(),
    )
    .map_err(|e| e.in_stage("augment"))?;

    let mut arms = Vec::new();
    for (name, use_rl) in [("rl", true), ("no_rl", false)] {
        let arm_dir = out_dir.join(name);
        std::fs::create_dir_all(&arm_dir)
            .map_err(|e| Error::io(arm_dir.display().to_string(), e))?;
        let policy = if use_rl {
            let result = run_stage_b(
                &stage_a.policy,
                &anchor_set,
                &anchors.indices,
                &zoo,
                &config.reinforce_config(Some(prepared.test_range)),
                derive_seed(config.seed, "stage_b"),
            )
            .map_err(|e| e.in_stage("stage_b"))?;
            let mut trace_csv = Vec::new();
            write_reward_trace(&result.trace, &mut trace_csv)?;
            write_file(&arm_dir.join("reward_trace.csv"), &trace_csv)?;
            result.policy
        } else {
            stage_a.policy.clone()
        };
        let policy_bytes = to_json(
            &PolicyCheckpoint {
                format_version: CHECKPOINT_VERSION,
                policy: policy.clone(),
            },
            "policy checkpoint",
        )?;
        write_file(&arm_dir.join("policy_b.json"), &policy_bytes)?;

        let generated = generate(
            &policy,
            &anchor_set,
            &anchors.indices,
            &plan,
            Some(prepared.test_range),
            derive_seed(config.seed, "augment"),
        )
        .map_err(|e| e.in_stage("augment"))?;
        let corpus = assemble_corpus(
            &prepared.train,
            generated,
            derive_seed(config.seed, "corpus"),
        )
        .map_err(|e| e.in_stage("augment"))?;
        save_corpus(arm_dir.join("corpus.jsonl"), &corpus)?;

        let eval = arm_eval(config, &corpus.windows(), &prepared.val, &prepared.test)
            .map_err(|e| e.in_stage("stage_c"))?;
        let row = MetricRow::from_eval("augmented", &eval);
        write_file(&arm_dir.join("metrics.csv"), &metrics_to_csv(&[row]))?;
        arms.push(AblationArm {
            name: name.to_string(),
            mae: eval.mae,
            mse: eval.mse,
            n_windows: eval.n_windows,
            policy_sha256: sha256_hex(&policy_bytes),
            corpus_len: corpus.len(),
        });
    }
    let report = RlAblation { zoo_sha256, arms };
    write_file(
        &out_dir.join("ablation_rl.json"),
        &to_json(&report, "ablation")?,
    )?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FractionRow {
    pub fraction: f64,
    pub anchor_count: usize,
    pub corpus_len: usize,
    pub mae: f64,
    pub mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorAblation {
    pub zoo_sha256: String,
    pub rows: Vec<FractionRow>,
}

/// Anchor-fraction sweep at a fixed corpus target: the zoo, ranking scores,
/// and all seeds are shared; each fraction re-splits the ranking, retrains
/// the augmentor on its own anchor set, and fills the same 3x corpus.
pub fn ablation_anchor_fraction(
    config: &RunConfig,
    fractions: &[f64],
    out_dir: impl AsRef<Path>,
) -> Result<AnchorAblation> {
    let out_dir = out_dir.as_ref();
    config.validate()?;
    if fractions.is_empty() {
        return Err(Error::Config(
            "fraction sweep needs at least one fraction".into(),
        ));
    }
    for &f in fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config(format!(
                "fractions must be in (0, 1], got {f}"
            )));
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let prepared = prepare_data(config).map_err(|e| e.in_stage("ingest"))?;
    let zoo = build_model_zoo(
        &prepared.train,
        config.zoo.k,
        config.forecaster.backbone.clone(),
        &config.forecaster_options(derive_seed(config.seed, "zoo")),
    )
    .map_err(|e| e.in_stage("zoo"))?;
    let zoo_bytes = to_json(&zoo, "zoo")?;
    write_file(&out_dir.join("zoo.json"), &zoo_bytes)?;
    let zoo_sha256 = sha256_hex(&zoo_bytes);
    let records = score_training_windows(&zoo, &prepared.train).map_err(|e| e.in_stage("rank"))?;

    let arch = config.vmae_arch(prepared.dataset.channels());
    let target_total = config.augment.corpus_multiplier * prepared.train.len();
    let mut rows = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let arm_dir = out_dir.join(format!("fraction_{fraction:.2}"));
        std::fs::create_dir_all(&arm_dir)
            .map_err(|e| Error::io(arm_dir.display().to_string(), e))?;
        let (anchors, _) = rank_and_split(&records, fraction).map_err(|e| e.in_stage("rank"))?;
        let anchor_set = anchor_windows(&prepared.train, &anchors);
        let stage_a = train_vmae(&anchor_set, arch, &config.vmae_train_config())
            .map_err(|e| e.in_stage("stage_a"))?;
        let stage_b = run_stage_b(
            &stage_a.policy,
            &anchor_set,
            &anchors.indices,
            &zoo,
            &config.reinforce_config(Some(prepared.test_range)),
            derive_seed(config.seed, "stage_b"),
        )
        .map_err(|e| e.in_stage("stage_b"))?;
        let plan = plan_augmentation(
            prepared.train.len(),
            anchor_set.len(),
            fraction,
            target_total,
        )
        .map_err(|e| e.in_stage("augment"))?;
        let generated = generate(
            &stage_b.policy,
            &anchor_set,
            &anchors.indices,
            &plan,
            Some(prepared.test_range),
            derive_seed(config.seed, "augment"),
        )
        .map_err(|e| e.in_stage("augment"))?;
        let corpus = assemble_corpus(
            &prepared.train,
            generated,
            derive_seed(config.seed, "corpus"),
        )
        .map_err(|e| e.in_stage("augment"))?;
        save_corpus(arm_dir.join("corpus.jsonl"), &corpus)?;
        let eval = arm_eval(config, &corpus.windows(), &prepared.val, &prepared.test)
            .map_err(|e| e.in_stage("stage_c"))?;
        let row = MetricRow::from_eval("augmented", &eval);
        write_file(&arm_dir.join("metrics.csv"), &metrics_to_csv(&[row]))?;
        rows.push(FractionRow {
            fraction,
            anchor_count: anchor_set.len(),
            corpus_len: corpus.len(),
            mae: eval.mae,
            mse: eval.mse,
        });
    }
    let report = AnchorAblation { zoo_sha256, rows };
    write_file(
        &out_dir.join("ablation_anchor.json"),
        &to_json(&report, "ablation")?,
    )?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Reporting

/// Human-readable run summary: the metric table (one row per arm, MAE/MSE
/// columns), the promotion row when both arms are present, the F-metric when
/// computed, and the artifact hashes.
pub fn render_report(manifest: &RunManifest) -> String {
    let mut out = String::new();
    let push = |out: &mut String, line: String| {
        out.push_str(&line);
        out.push('\n');
    };
    if !manifest.completed_stages.iter().any(|s| s == "evaluate") {
        push(
            &mut out,
            format!(
                "warning: partial manifest (completed stages: {})",
                manifest.completed_stages.join(", ")
            ),
        );
    }
    push(
        &mut out,
        format!(
            "run: mode={} seed={} data={}",
            manifest.config.data.mode, manifest.config.seed, manifest.config.data.path
        ),
    );
    push(
        &mut out,
        format!(
            "{:<12} {:>12} {:>12} {:>10}",
            "arm", "mae", "mse", "windows"
        ),
    );
    for row in &manifest.metrics {
        push(
            &mut out,
            format!(
                "{:<12} {:>12.6} {:>12.6} {:>10}",
                row.arm, row.mae, row.mse, row.n_windows
            ),
        );
    }
    if let (Some(orig), Some(aug)) = (
        manifest.metric_for("original"),
        manifest.metric_for("augmented"),
    ) {
        if orig.mae != 0.0 && orig.mse != 0.0 {
            push(
                &mut out,
                format!(
                    "{:<12} {:>11.2}% {:>11.2}%",
                    "promotion",
                    100.0 * promotion(orig.mae, aug.mae),
                    100.0 * promotion(orig.mse, aug.mse)
                ),
            );
        }
    }
    if let Some(f) = &manifest.f_metric {
        push(
            &mut out,
            format!(
                "f-metric: mae {:.2}% mse {:.2}%",
                100.0 * f.f_mae,
                100.0 * f.f_mse
            ),
        );
    }
    if !manifest.artifacts.is_empty() {
        push(&mut out, "artifacts:".to_string());
        for (key, record) in &manifest.artifacts {
            push(
                &mut out,
                format!("  {:<22} {}  {}", key, record.sha256, record.path),
            );
        }
    }
    out
}
