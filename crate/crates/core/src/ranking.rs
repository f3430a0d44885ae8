//! Per-window model-zoo variance, ranking, and the anchor / complement split.
//!
//! For a training window, the scored members are the `k - 1` zoo members
//! whose training folds contained it (every member except the one holding it
//! out). A generated window belongs to no fold and is scored against members
//! `0..k-1` by fixed convention. Each member contributes the squared 2-norm
//! between the window's horizon and the member's forecast from the window's
//! lookback; the variance of those error values is the ranking signal.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::{TimeSeriesDataset, Window};
use crate::error::{Error, Result};
use crate::forecaster::{
    evaluate, predict, train_forecaster, Backbone, EvalReport, ModelZoo, TrainOptions,
};
use crate::seeding;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceRecord {
    pub window_index: usize,
    /// Squared horizon-prediction error of each scored member, in member
    /// order.
    pub errors: Vec<f64>,
    pub mean_error: f64,
    pub variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    /// Ascending window indices of the top-variance fraction.
    pub indices: Vec<usize>,
    pub fraction: f64,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Mean and population variance (mean of squared deviations) of a set of
/// error values.
pub fn variance_from_errors(errors: &[f64]) -> Result<(f64, f64)> {
    if errors.is_empty() {
        return Err(Error::Numerical("variance of an empty error set".into()));
    }
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let variance = errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
    Ok((mean, variance))
}

/// Scores `window` against the zoo. `train_index` is the window's position in
/// the list the zoo was built from; `None` marks a generated window, which is
/// scored against members `0..k-1` and indexed by its anchor's origin.
pub fn model_zoo_variance(
    zoo: &ModelZoo,
    window: &Window,
    train_index: Option<usize>,
) -> Result<VarianceRecord> {
    if window.lookback_len() != zoo.lookback || window.horizon_len() != zoo.horizon {
        return Err(Error::dimension(
            "model_zoo_variance",
            format!("{}+{} window", zoo.lookback, zoo.horizon),
            format!("{}+{}", window.lookback_len(), window.horizon_len()),
        ));
    }
    let members: Vec<usize> = match train_index {
        Some(i) => {
            let fold = *zoo.fold_of_window.get(i).ok_or_else(|| {
                Error::Config(format!(
                    "window index {i} outside the zoo's fold map of {}",
                    zoo.fold_of_window.len()
                ))
            })?;
            zoo.members_trained_on(fold)
        }
        None => (0..zoo.k - 1).collect(),
    };
    let mut errors = Vec::with_capacity(members.len());
    for m in members {
        let forecast = predict(&zoo.members[m], &window.lookback)?;
        errors.push(forecast.sum_squared_diff(&window.horizon)?);
    }
    let (mean_error, variance) = variance_from_errors(&errors)?;
    Ok(VarianceRecord {
        window_index: train_index.unwrap_or(window.origin),
        errors,
        mean_error,
        variance,
    })
}

/// Scores every training window the zoo was built from.
pub fn score_training_windows(zoo: &ModelZoo, windows: &[Window]) -> Result<Vec<VarianceRecord>> {
    if windows.len() != zoo.fold_of_window.len() {
        return Err(Error::dimension(
            "score_training_windows",
            format!("{} windows (zoo fold map)", zoo.fold_of_window.len()),
            windows.len().to_string(),
        ));
    }
    windows
        .iter()
        .enumerate()
        .map(|(i, w)| model_zoo_variance(zoo, w, Some(i)))
        .collect()
}

/// Splits records into the top-`fraction` anchors (by variance, ties broken
/// toward lower window index) and the complement. Both sides come back in
/// ascending index order.
pub fn rank_and_split(
    records: &[VarianceRecord],
    fraction: f64,
) -> Result<(AnchorSet, Vec<usize>)> {
    if records.is_empty() {
        return Err(Error::Config("rank_and_split on no records".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "anchor fraction must be in (0, 1], got {fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        records[b]
            .variance
            .partial_cmp(&records[a].variance)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(records[a].window_index.cmp(&records[b].window_index))
    });
    let count = (fraction * records.len() as f64).round() as usize;
    let count = count.min(records.len());
    let mut anchors: Vec<usize> = order[..count]
        .iter()
        .map(|&i| records[i].window_index)
        .collect();
    let mut complement: Vec<usize> = order[count..]
        .iter()
        .map(|&i| records[i].window_index)
        .collect();
    anchors.sort_unstable();
    complement.sort_unstable();
    Ok((
        AnchorSet {
            indices: anchors,
            fraction,
        },
        complement,
    ))
}

/// Writes the ranking as CSV, one row per window in descending variance
/// order, with an `anchor` flag column.
pub fn write_rank_csv(
    records: &[VarianceRecord],
    anchors: &AnchorSet,
    mut out: impl Write,
) -> Result<()> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        records[b]
            .variance
            .partial_cmp(&records[a].variance)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(records[a].window_index.cmp(&records[b].window_index))
    });
    let write = |out: &mut dyn Write| -> std::io::Result<()> {
        writeln!(out, "window_index,mean_error,variance,anchor")?;
        for &i in &order {
            let r = &records[i];
            let is_anchor = anchors.indices.binary_search(&r.window_index).is_ok();
            writeln!(
                out,
                "{},{:.17e},{:.17e},{}",
                r.window_index,
                r.mean_error,
                r.variance,
                u8::from(is_anchor)
            )?;
        }
        Ok(())
    };
    write(&mut out).map_err(|e| Error::io("rank csv", e))
}

/// Trains one forecaster on the top-variance half of the training windows
/// (Group A) and one on the bottom half (Group B), both early-stopped on the
/// validation split, and evaluates both on the test split.
pub fn group_ab_experiment(
    ds: &TimeSeriesDataset,
    zoo: &ModelZoo,
    backbone: Backbone,
    options: &TrainOptions,
) -> Result<(EvalReport, EvalReport)> {
    let train = ds.train_windows(zoo.lookback, zoo.horizon)?;
    let records = score_training_windows(zoo, &train)?;
    let (anchors, complement) = rank_and_split(&records, 0.5)?;
    let group_a: Vec<Window> = anchors.indices.iter().map(|&i| train[i].clone()).collect();
    let group_b: Vec<Window> = complement.iter().map(|&i| train[i].clone()).collect();
    let val = ds.val_windows(zoo.lookback, zoo.horizon)?;
    let test = ds.test_windows(zoo.lookback, zoo.horizon)?;
    let arm_options = TrainOptions {
        seed: seeding::derive_seed(options.seed, "group_ab"),
        ..*options
    };
    let model_a = train_forecaster(&group_a, &val, backbone, &arm_options)?;
    let model_b = train_forecaster(&group_b, &val, backbone, &arm_options)?;
    Ok((evaluate(&model_a, &test)?, evaluate(&model_b, &test)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_dataset, load_csv, PartitionSpec, SplitMode};
    use crate::forecaster::build_model_zoo;
    use approx::assert_abs_diff_eq;

    fn record(window_index: usize, variance: f64) -> VarianceRecord {
        VarianceRecord {
            window_index,
            errors: vec![],
            mean_error: 0.0,
            variance,
        }
    }

    #[test]
    fn variance_of_equal_errors_is_zero() {
        let (mean, var) = variance_from_errors(&[0.7, 0.7, 0.7]).unwrap();
        assert_abs_diff_eq!(mean, 0.7, epsilon = 1e-15);
        // The mean of three 0.7s is off by an ulp, so allow a ~1e-32 residue.
        assert_abs_diff_eq!(var, 0.0, epsilon = 1e-30);
        let (_, var) = variance_from_errors(&[0.5, 0.5, 0.5, 0.5]).unwrap();
        assert_eq!(var, 0.0);
    }

    #[test]
    fn variance_matches_hand_computation() {
        // Mean 0.2; deviations squared (0.01, 0, 0.01); mean of those 0.02/3.
        let (mean, var) = variance_from_errors(&[0.1, 0.2, 0.3]).unwrap();
        assert_abs_diff_eq!(mean, 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(var, 0.02 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn variance_scales_quadratically() {
        let errors = [0.3, 0.9, 0.4, 1.2];
        let (_, var) = variance_from_errors(&errors).unwrap();
        let scaled: Vec<f64> = errors.iter().map(|e| e * 5.0).collect();
        let (_, var_scaled) = variance_from_errors(&scaled).unwrap();
        assert_abs_diff_eq!(var_scaled, var * 25.0, epsilon = 1e-12);
    }

    #[test]
    fn rank_takes_the_top_fraction() {
        let records: Vec<VarianceRecord> = (0..10).map(|i| record(i, (9 - i) as f64)).collect();
        let (anchors, complement) = rank_and_split(&records, 0.3).unwrap();
        assert_eq!(anchors.indices, vec![0, 1, 2]);
        assert_eq!(complement, vec![3, 4, 5, 6, 7, 8, 9]);
    }

    #[test]
    fn ties_break_toward_lower_index() {
        let records: Vec<VarianceRecord> = (0..4).map(|i| record(i, 1.0)).collect();
        let (anchors, complement) = rank_and_split(&records, 0.5).unwrap();
        assert_eq!(anchors.indices, vec![0, 1]);
        assert_eq!(complement, vec![2, 3]);
    }

    #[test]
    fn split_is_a_partition() {
        let records: Vec<VarianceRecord> =
            (0..7).map(|i| record(i, ((i * 13) % 5) as f64)).collect();
        let (anchors, complement) = rank_and_split(&records, 0.5).unwrap();
        let mut all: Vec<usize> = anchors.indices.iter().chain(&complement).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..7).collect::<Vec<_>>());
        assert_eq!(anchors.len(), 4); // round(0.5 * 7)
    }

    #[test]
    fn bad_fraction_is_rejected() {
        let records = vec![record(0, 1.0)];
        assert!(rank_and_split(&records, 0.0).is_err());
        assert!(rank_and_split(&records, 1.5).is_err());
    }

    fn zoo_fixture() -> (crate::dataset::TimeSeriesDataset, ModelZoo, Vec<Window>) {
        let mut csv = String::from("t,a\n");
        for i in 0..120 {
            let x = i as f64 * 0.3;
            csv.push_str(&format!("{i},{}\n", x.sin() + 0.1 * (x * 3.7).cos()));
        }
        let raw = load_csv(csv.as_bytes()).unwrap();
        let ds = build_dataset(
            &raw,
            PartitionSpec {
                train: 80,
                val: 20,
                test: 20,
            },
            SplitMode::Standard,
        )
        .unwrap();
        let train = ds.train_windows(8, 4).unwrap();
        let options = TrainOptions {
            epochs: 2,
            seed: 3,
            ..TrainOptions::default()
        };
        let zoo = build_model_zoo(&train, 4, Backbone::Linear, &options).unwrap();
        (ds, zoo, train)
    }

    // Independent oracle: recompute the variance by looping over members by
    // hand and applying the textbook mean/variance formulas.
    #[test]
    fn zoo_variance_matches_brute_force() {
        let (_, zoo, train) = zoo_fixture();
        for (i, w) in train.iter().enumerate() {
            let rec = model_zoo_variance(&zoo, w, Some(i)).unwrap();
            let fold = zoo.fold_of_window[i];
            let mut errors = Vec::new();
            for m in 0..zoo.k {
                if m == fold {
                    continue;
                }
                let pred = predict(&zoo.members[m], &w.lookback).unwrap();
                let mut e = 0.0;
                for r in 0..pred.rows() {
                    for c in 0..pred.cols() {
                        let d = pred.get(r, c) - w.horizon.get(r, c);
                        e += d * d;
                    }
                }
                errors.push(e);
            }
            let mean = errors.iter().sum::<f64>() / errors.len() as f64;
            let var =
                errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / errors.len() as f64;
            assert_eq!(rec.errors.len(), zoo.k - 1);
            assert_abs_diff_eq!(rec.mean_error, mean, epsilon = 1e-12);
            assert_abs_diff_eq!(rec.variance, var, epsilon = 1e-12);
            assert!(rec.variance >= 0.0);
        }
    }

    #[test]
    fn generated_windows_use_the_first_members() {
        let (_, zoo, train) = zoo_fixture();
        let w = &train[5];
        let rec = model_zoo_variance(&zoo, w, None).unwrap();
        assert_eq!(rec.errors.len(), zoo.k - 1);
        assert_eq!(rec.window_index, w.origin);
        // Against members 0..k-1 explicitly.
        let mut errors = Vec::new();
        for m in 0..zoo.k - 1 {
            let pred = predict(&zoo.members[m], &w.lookback).unwrap();
            errors.push(pred.sum_squared_diff(&w.horizon).unwrap());
        }
        assert_eq!(rec.errors, errors);
    }

    #[test]
    fn out_of_range_train_index_errors() {
        let (_, zoo, train) = zoo_fixture();
        assert!(model_zoo_variance(&zoo, &train[0], Some(10_000)).is_err());
    }

    #[test]
    fn rank_csv_has_one_row_per_window() {
        let (_, zoo, train) = zoo_fixture();
        let records = score_training_windows(&zoo, &train).unwrap();
        let (anchors, _) = rank_and_split(&records, 0.5).unwrap();
        let mut buf = Vec::new();
        write_rank_csv(&records, &anchors, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), records.len() + 1);
        assert!(text.starts_with("window_index,mean_error,variance,anchor"));
        // Descending variance order.
        let variances: Vec<f64> = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
            .collect();
        assert!(variances.windows(2).all(|p| p[0] >= p[1]));
    }

    // On a constant series every window is identical, so Group A and Group B
    // hold bit-identical training data and the experiment must come out even.
    #[test]
    fn group_ab_is_symmetric_on_duplicate_data() {
        let mut csv = String::from("t,a\n");
        for i in 0..120 {
            csv.push_str(&format!("{i},1.0\n"));
        }
        let raw = load_csv(csv.as_bytes()).unwrap();
        let ds = build_dataset(
            &raw,
            PartitionSpec {
                train: 80,
                val: 20,
                test: 20,
            },
            SplitMode::Standard,
        )
        .unwrap();
        let train = ds.train_windows(8, 4).unwrap();
        let options = TrainOptions {
            epochs: 2,
            seed: 11,
            ..TrainOptions::default()
        };
        let zoo = build_model_zoo(&train, 4, Backbone::Linear, &options).unwrap();
        let (a, b) = group_ab_experiment(&ds, &zoo, Backbone::Linear, &options).unwrap();
        assert_eq!(a.mae, b.mae);
        assert_eq!(a.mse, b.mse);
    }
}
