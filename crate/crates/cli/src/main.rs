//! Command line front end: each pipeline stage as a subcommand plus the
//! one-shot `pipeline` runner, the two ablation sweeps, the group A/B
//! diagnostic, and F-metric arithmetic.
//!
//! Stage subcommands share an output directory and pick up the artifacts
//! earlier stages left there, so `ingest`, `zoo`, ..., `evaluate` run in
//! sequence reproduces a `pipeline` run byte for byte.

use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

use zooaug::dataset::TimeSeriesDataset;
use zooaug::error::{Error, Result};
use zooaug::forecaster::{build_model_zoo, evaluate, train_forecaster, Backbone, EvalReport};
use zooaug::pipeline::{
    self, ablation_anchor_fraction, ablation_rl, anchor_windows, f_metric, f_metric_from_manifests,
    metrics_to_csv, prepare_data, promotion, render_report, run_pipeline, MetricRow, RunConfig,
};
use zooaug::ranking::{
    group_ab_experiment, rank_and_split, score_training_windows, write_rank_csv,
};
use zooaug::reinforce::run_stage_b;
use zooaug::seeding::derive_seed;
use zooaug::vmae::train_vmae;

#[derive(Parser)]
#[command(
    name = "zooaug",
    version,
    about = "Model-zoo-guided augmentation for few-shot time series forecasting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus per-key flag overrides. Flags win over file keys; keys
/// absent from both fall back to the built-in defaults.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Input CSV (timestamp column + one column per channel).
    #[arg(long)]
    data: Option<String>,
    /// Split mode: standard | fewshot.
    #[arg(long)]
    mode: Option<String>,
    /// Train fraction retained in few-shot mode.
    #[arg(long)]
    fewshot_fraction: Option<f64>,
    /// Rows in the train split.
    #[arg(long)]
    train: Option<usize>,
    /// Rows in the validation split.
    #[arg(long)]
    val: Option<usize>,
    /// Rows in the test split.
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    lookback: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    /// Forecaster backbone: linear | mlp:<hidden>.
    #[arg(long)]
    backbone: Option<String>,
    /// Zoo fold count.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    anchor_fraction: Option<f64>,
    #[arg(long)]
    mask_rate: Option<f64>,
    /// KL weight in the autoencoder loss.
    #[arg(long)]
    beta: Option<f64>,
    /// Policy-gradient learning rate.
    #[arg(long)]
    alpha: Option<f64>,
    /// Reward sigmoid temperature.
    #[arg(long)]
    eta: Option<f64>,
    /// Fine-tuning step budget.
    #[arg(long)]
    steps: Option<usize>,
    /// Corpus size as a multiple of the train-window count.
    #[arg(long)]
    multiplier: Option<usize>,
}

impl ConfigArgs {
    fn build(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::from_toml_path(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(data) = &self.data {
            config.data.path = data.clone();
        }
        if let Some(mode) = &self.mode {
            config.data.mode = mode.clone();
        }
        if let Some(f) = self.fewshot_fraction {
            config.data.fewshot_fraction = f;
        }
        if let Some(n) = self.train {
            config.data.train = n;
        }
        if let Some(n) = self.val {
            config.data.val = n;
        }
        if let Some(n) = self.test {
            config.data.test = n;
        }
        if let Some(l) = self.lookback {
            config.windows.lookback = l;
        }
        if let Some(h) = self.horizon {
            config.windows.horizon = h;
        }
        if let Some(text) = &self.backbone {
            config.forecaster.backbone = parse_backbone(text)?;
        }
        if let Some(k) = self.k {
            config.zoo.k = k;
        }
        if let Some(f) = self.anchor_fraction {
            config.zoo.anchor_fraction = f;
        }
        if let Some(m) = self.mask_rate {
            config.vmae.mask_rate = m;
        }
        if let Some(b) = self.beta {
            config.vmae.beta = b;
        }
        if let Some(a) = self.alpha {
            config.reinforce.alpha = a;
        }
        if let Some(e) = self.eta {
            config.reinforce.eta = e;
        }
        if let Some(s) = self.steps {
            config.reinforce.steps = s;
        }
        if let Some(m) = self.multiplier {
            config.augment.corpus_multiplier = m;
        }
        config.validate()?;
        Ok(config)
    }
}

fn parse_backbone(text: &str) -> Result<Backbone> {
    if text == "linear" {
        return Ok(Backbone::Linear);
    }
    if let Some(hidden) = text.strip_prefix("mlp:") {
        let hidden = hidden
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("bad mlp hidden width \"{hidden}\"")))?;
        return Ok(Backbone::Mlp { hidden });
    }
    Err(Error::Config(format!(
        "backbone must be \"linear\" or \"mlp:<hidden>\", got \"{text}\""
    )))
}

#[derive(Subcommand)]
enum Command {
    /// Load the CSV, apply the splits, and persist the dataset.
    Ingest {
        #[command(flatten)]
        config: ConfigArgs,
        /// Artifact directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the k-fold forecasting zoo on the train windows.
    Zoo {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score every train window by zoo disagreement and pick the anchors.
    Rank {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the masked autoencoder on the anchor windows.
    StageA {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune the autoencoder prior with policy gradients.
    StageB {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the augmented corpus from the fine-tuned policy.
    Augment {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrain forecasters on the original and augmented corpora.
    StageC {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate both forecasters on the test windows.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage end to end and print the report.
    Pipeline {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Run once per seed, each into <out>/seed_<s>/.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Compare fine-tuned and pretrain-only augmentation arms.
    AblateRl {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep the anchor fraction at a fixed corpus target.
    AblateAnchor {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 0.3, 0.5, 0.7, 1.0])]
        fractions: Vec<f64>,
    },
    /// Train on high- vs low-disagreement window halves and compare.
    GroupAb {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gap-recovery ratio from two manifests or six raw numbers.
    FMetric {
        /// Few-shot run manifest (provides original + augmented arms).
        #[arg(long)]
        fewshot: Option<PathBuf>,
        /// Standard-mode run manifest (provides the reference arm).
        #[arg(long)]
        standard: Option<PathBuf>,
        #[arg(long)]
        few_mae: Option<f64>,
        #[arg(long)]
        aug_mae: Option<f64>,
        #[arg(long)]
        std_mae: Option<f64>,
        #[arg(long)]
        few_mse: Option<f64>,
        #[arg(long)]
        aug_mse: Option<f64>,
        #[arg(long)]
        std_mse: Option<f64>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli.command) {
        if let Some(stage) = err.stage() {
            eprintln!("failed in stage: {stage}");
        }
        eprintln!("error: {err}");
        std::process::exit(1);
    }
}

fn load_dataset(out: &Path) -> Result<TimeSeriesDataset> {
    pipeline::load_dataset(out.join("dataset.json"))
}

fn print_metrics(rows: &[MetricRow]) {
    println!(
        "{:<12} {:>12} {:>12} {:>10}",
        "arm", "mae", "mse", "windows"
    );
    for row in rows {
        println!(
            "{:<12} {:>12.6} {:>12.6} {:>10}",
            row.arm, row.mae, row.mse, row.n_windows
        );
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Ingest { config, out } => {
            let config = config.build()?;
            let prepared = prepare_data(&config).map_err(|e| e.in_stage("ingest"))?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;
            pipeline::save_dataset(out.join("dataset.json"), &prepared.dataset)?;
            println!(
                "ingested {} rows x {} channels; windows: train {}, val {}, test {}",
                prepared.dataset.rows(),
                prepared.dataset.channels(),
                prepared.train.len(),
                prepared.val.len(),
                prepared.test.len()
            );
        }
        Command::Zoo { config, out } => {
            let config = config.build()?;
            let ds = load_dataset(&out)?;
            let train = ds.train_windows(config.windows.lookback, config.windows.horizon)?;
            let zoo = build_model_zoo(
                &train,
                config.zoo.k,
                config.forecaster.backbone.clone(),
                &config.forecaster_options(derive_seed(config.seed, "zoo")),
            )
            .map_err(|e| e.in_stage("zoo"))?;
            pipeline::save_zoo(out.join("zoo.json"), &zoo)?;
            println!("trained {}-member zoo on {} windows", zoo.k, train.len());
        }
        Command::Rank { config, out } => {
            let config = config.build()?;
            let ds = load_dataset(&out)?;
            let train = ds.train_windows(config.windows.lookback, config.windows.horizon)?;
            let zoo = pipeline::load_zoo(out.join("zoo.json"))?;
            let records = score_training_windows(&zoo, &train).map_err(|e| e.in_stage("rank"))?;
            let (anchors, _) = rank_and_split(&records, config.zoo.anchor_fraction)
                .map_err(|e| e.in_stage("rank"))?;
            let mut csv = Vec::new();
            write_rank_csv(&records, &anchors, &mut csv)?;
            std::fs::write(out.join("rank.csv"), &csv)
                .map_err(|e| Error::io(out.join("rank.csv").display().to_string(), e))?;
            pipeline::save_anchors(out.join("anchors.json"), &anchors)?;
            println!(
                "ranked {} windows, kept {} anchors",
                records.len(),
                anchors.indices.len()
            );
        }
        Command::StageA { config, out } => {
            let config = config.build()?;
            let ds = load_dataset(&out)?;
            let train = ds.train_windows(config.windows.lookback, config.windows.horizon)?;
            let anchors = pipeline::load_anchors(out.join("anchors.json"))?;
            let anchor_set = anchor_windows(&train, &anchors);
            let training = train_vmae(
                &anchor_set,
                config.vmae_arch(ds.channels()),
                &config.vmae_train_config(),
            )
            .map_err(|e| e.in_stage("stage_a"))?;
            pipeline::save_policy(out.join("policy_a.json"), &training.policy)?;
            println!(
                "pretrained autoencoder for {} epochs; final holdout recon {:.6}",
                training.epoch_loss.len(),
                training.holdout_recon.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::StageB { config, out } => {
            let config = config.build()?;
            let ds = load_dataset(&out)?;
            let train = ds.train_windows(config.windows.lookback, config.windows.horizon)?;
            let anchors = pipeline::load_anchors(out.join("anchors.json"))?;
            let anchor_set = anchor_windows(&train, &anchors);
            let zoo = pipeline::load_zoo(out.join("zoo.json"))?;
            let policy_a = pipeline::load_policy(out.join("policy_a.json"))?;
            let test_range = ds.timestamp_range(&ds.splits.test.clone())?;
            let result = run_stage_b(
                &policy_a,
                &anchor_set,
                &anchors.indices,
                &zoo,
                &config.reinforce_config(Some(test_range)),
                derive_seed(config.seed, "stage_b"),
            )
            .map_err(|e| e.in_stage("stage_b"))?;
            pipeline::save_policy(out.join("policy_b.json"), &result.policy)?;
            let mut csv = Vec::new();
            zooaug::reinforce::write_reward_trace(&result.trace, &mut csv)?;
            std::fs::write(out.join("reward_trace.csv"), &csv)
                .map_err(|e| Error::io(out.join("reward_trace.csv").display().to_string(), e))?;
            match (result.trace.first(), result.trace.last()) {
                (Some(first), Some(last)) => println!(
                    "fine-tuned prior for {} steps; mean reward {:.6} -> {:.6}",
                    result.trace.len(),
                    first.mean_reward,
                    last.mean_reward
                ),
                _ => println!("fine-tuning ran 0 steps"),
            }
        }
        Command::Augment { config, out } => {
            let config = config.build()?;
            let ds = load_dataset(&out)?;
            let train = ds.train_windows(config.windows.lookback, config.windows.horizon)?;
            let anchors = pipeline::load_anchors(out.join("anchors.json"))?;
            let anchor_set = anchor_windows(&train, &anchors);
            let policy = pipeline::load_policy(out.join("policy_b.json"))?;
            let test_range = ds.timestamp_range(&ds.splits.test.clone())?;
            let plan = zooaug::augment::plan_augmentation(
                train.len(),
                anchor_set.len(),
                anchors.fraction,
                config.augment.corpus_multiplier * train.len(),
            )
            .map_err(|e| e.in_stage("augment"))?;
            let generated = zooaug::augment::generate(
                &policy,
                &anchor_set,
                &anchors.indices,
                &plan,
                Some(test_range),
                derive_seed(config.seed, "augment"),
            )
            .map_err(|e| e.in_stage("augment"))?;
            let corpus = zooaug::augment::assemble_corpus(
                &train,
                generated,
                derive_seed(config.seed, "corpus"),
            )
            .map_err(|e| e.in_stage("augment"))?;
            pipeline::save_corpus(out.join("corpus.jsonl"), &corpus)?;
            println!(
                "assembled corpus of {} windows ({} original + {} generated)",
                corpus.len(),
                plan.original_count,
                plan.generated_count
            );
        }
        Command::StageC { config, out } => {
            let config = config.build()?;
            let ds = load_dataset(&out)?;
            let train = ds.train_windows(config.windows.lookback, config.windows.horizon)?;
            let val = ds.val_windows(config.windows.lookback, config.windows.horizon)?;
            let corpus = pipeline::load_corpus(out.join("corpus.jsonl"))?;
            let original = train_forecaster(
                &train,
                &val,
                config.forecaster.backbone.clone(),
                &config.forecaster_options(derive_seed(config.seed, "stage_c/original")),
            )
            .map_err(|e| e.in_stage("stage_c"))?;
            let augmented = train_forecaster(
                &corpus.windows(),
                &val,
                config.forecaster.backbone.clone(),
                &config.forecaster_options(derive_seed(config.seed, "stage_c/augmented")),
            )
            .map_err(|e| e.in_stage("stage_c"))?;
            pipeline::save_forecaster(out.join("forecaster_original.json"), &original)?;
            pipeline::save_forecaster(out.join("forecaster_augmented.json"), &augmented)?;
            println!(
                "retrained forecasters: original on {} windows, augmented on {}",
                train.len(),
                corpus.len()
            );
        }
        Command::Evaluate { config, out } => {
            let config = config.build()?;
            let ds = load_dataset(&out)?;
            let test = ds.test_windows(config.windows.lookback, config.windows.horizon)?;
            let original = pipeline::load_forecaster(out.join("forecaster_original.json"))?;
            let augmented = pipeline::load_forecaster(out.join("forecaster_augmented.json"))?;
            let eval_orig = evaluate(&original, &test).map_err(|e| e.in_stage("evaluate"))?;
            let eval_aug = evaluate(&augmented, &test).map_err(|e| e.in_stage("evaluate"))?;
            let rows = vec![
                MetricRow::from_eval("original", &eval_orig),
                MetricRow::from_eval("augmented", &eval_aug),
            ];
            std::fs::write(out.join("metrics.csv"), metrics_to_csv(&rows))
                .map_err(|e| Error::io(out.join("metrics.csv").display().to_string(), e))?;
            print_metrics(&rows);
            if eval_orig.mae != 0.0 && eval_orig.mse != 0.0 {
                println!(
                    "{:<12} {:>11.2}% {:>11.2}%",
                    "promotion",
                    100.0 * promotion(eval_orig.mae, eval_aug.mae),
                    100.0 * promotion(eval_orig.mse, eval_aug.mse)
                );
            }
        }
        Command::Pipeline { config, out, seeds } => {
            let base = config.build()?;
            if seeds.is_empty() {
                let manifest = run_pipeline(&base, &out)?;
                print!("{}", render_report(&manifest));
            } else {
                for seed in seeds {
                    let mut config = base.clone();
                    config.seed = seed;
                    let manifest = run_pipeline(&config, out.join(format!("seed_{seed}")))?;
                    println!("--- seed {seed} ---");
                    print!("{}", render_report(&manifest));
                }
            }
        }
        Command::AblateRl { config, out } => {
            let config = config.build()?;
            let report = ablation_rl(&config, &out)?;
            println!(
                "{:<8} {:>12} {:>12} {:>8} {:>10}",
                "arm", "mae", "mse", "corpus", "policy"
            );
            for arm in &report.arms {
                println!(
                    "{:<8} {:>12.6} {:>12.6} {:>8} {:>10}",
                    arm.name,
                    arm.mae,
                    arm.mse,
                    arm.corpus_len,
                    &arm.policy_sha256[..10]
                );
            }
        }
        Command::AblateAnchor {
            config,
            out,
            fractions,
        } => {
            let config = config.build()?;
            let report = ablation_anchor_fraction(&config, &fractions, &out)?;
            println!(
                "{:<10} {:>8} {:>8} {:>12} {:>12}",
                "fraction", "anchors", "corpus", "mae", "mse"
            );
            for row in &report.rows {
                println!(
                    "{:<10.2} {:>8} {:>8} {:>12.6} {:>12.6}",
                    row.fraction, row.anchor_count, row.corpus_len, row.mae, row.mse
                );
            }
        }
        Command::GroupAb { config, out } => {
            let config = config.build()?;
            let prepared = prepare_data(&config).map_err(|e| e.in_stage("ingest"))?;
            let zoo = build_model_zoo(
                &prepared.train,
                config.zoo.k,
                config.forecaster.backbone.clone(),
                &config.forecaster_options(derive_seed(config.seed, "zoo")),
            )
            .map_err(|e| e.in_stage("zoo"))?;
            let (group_a, group_b) = group_ab_experiment(
                &prepared.dataset,
                &zoo,
                config.forecaster.backbone.clone(),
                &config.forecaster_options(config.seed),
            )
            .map_err(|e| e.in_stage("rank"))?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;
            let rows = vec![
                MetricRow::from_eval("group_a", &group_a),
                MetricRow::from_eval("group_b", &group_b),
            ];
            std::fs::write(out.join("group_ab.csv"), metrics_to_csv(&rows))
                .map_err(|e| Error::io(out.join("group_ab.csv").display().to_string(), e))?;
            print_metrics(&rows);
        }
        Command::FMetric {
            fewshot,
            standard,
            few_mae,
            aug_mae,
            std_mae,
            few_mse,
            aug_mse,
            std_mse,
        } => {
            let f = match (fewshot, standard) {
                (Some(few_path), Some(std_path)) => {
                    let few = pipeline::load_manifest(&few_path)?;
                    let std_run = pipeline::load_manifest(&std_path)?;
                    f_metric_from_manifests(&few, &std_run)?
                }
                (None, None) => {
                    let need = |v: Option<f64>, name: &str| {
                        v.ok_or_else(|| Error::Config(format!("missing --{name}")))
                    };
                    let few = EvalReport {
                        mae: need(few_mae, "few-mae")?,
                        mse: need(few_mse, "few-mse")?,
                        n_windows: 0,
                    };
                    let aug = EvalReport {
                        mae: need(aug_mae, "aug-mae")?,
                        mse: need(aug_mse, "aug-mse")?,
                        n_windows: 0,
                    };
                    let std_arm = EvalReport {
                        mae: need(std_mae, "std-mae")?,
                        mse: need(std_mse, "std-mse")?,
                        n_windows: 0,
                    };
                    f_metric(&few, &aug, &std_arm)?
                }
                _ => {
                    return Err(Error::Config(
                        "pass both --fewshot and --standard manifests, or all six raw values"
                            .into(),
                    ));
                }
            };
            println!(
                "f_mae {:.1}%  f_mse {:.1}%",
                100.0 * f.f_mae,
                100.0 * f.f_mse
            );
        }
    }
    Ok(())
}
