//! Multivariate time series loading, splitting, normalization and windowing.
//!
//! A CSV is ingested into a [`RawSeries`] (timestamp column plus numeric
//! channels), then [`build_dataset`] carves contiguous train/val/test ranges,
//! fits per-channel normalization on the train rows only, and stores the
//! normalized values. Few-shot mode shrinks the train range to its earliest
//! fraction while val and test keep their absolute positions, so few-shot and
//! standard runs are evaluated on identical rows.
//!
//! Positional timestamps are the normalized dataset position `i / (T - 1)`;
//! they travel with every window and are what the augmentor shifts when it
//! relocates a window in time.

use std::io::Read;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor2;

/// Floor applied to per-channel standard deviations so constant channels
/// normalize to zero instead of dividing by zero.
pub const STD_FLOOR: f64 = 1e-8;

/// Parsed CSV before any splitting or scaling. `values` is `[T x C]` raw.
#[derive(Clone, Debug)]
pub struct RawSeries {
    pub timestamps: Vec<String>,
    pub values: Tensor2,
    pub channel_names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// Contiguous partition lengths, in row counts, applied from the start of the
/// series: rows `0..train` train, the next `val` rows validate, the next
/// `test` rows test. Trailing rows beyond the partition are ignored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum SplitMode {
    /// Use the partition as given.
    Standard,
    /// Keep only the earliest `fraction` of the train rows (rounded, at least
    /// enough rows for one window is the caller's concern). Val and test are
    /// untouched.
    FewShot { fraction: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Per-channel mean and population standard deviation of the given rows.
    pub fn fit(values: &Tensor2, rows: Range<usize>) -> Result<Self> {
        if rows.is_empty() || rows.end > values.rows() {
            return Err(Error::Config(format!(
                "normalization rows {}..{} invalid for {} rows",
                rows.start,
                rows.end,
                values.rows()
            )));
        }
        let c = values.cols();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; c];
        for r in rows.clone() {
            for (m, &v) in mean.iter_mut().zip(values.row(r)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; c];
        for r in rows {
            for ((s, &v), &m) in var.iter_mut().zip(values.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| (s / n).sqrt().max(STD_FLOOR))
            .collect();
        Ok(Normalization { mean, std })
    }

    pub fn apply(&self, values: &Tensor2) -> Result<Tensor2> {
        self.check_channels(values)?;
        let mut out = values.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            for ((v, &m), &s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }

    pub fn invert(&self, values: &Tensor2) -> Result<Tensor2> {
        self.check_channels(values)?;
        let mut out = values.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            for ((v, &m), &s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * s + m;
            }
        }
        Ok(out)
    }

    fn check_channels(&self, values: &Tensor2) -> Result<()> {
        if values.cols() != self.mean.len() {
            return Err(Error::dimension(
                "Normalization",
                format!("{} channels", self.mean.len()),
                values.cols().to_string(),
            ));
        }
        Ok(())
    }
}

/// A series ready for training: normalized values, positional timestamps and
/// the split ranges used to carve windows.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TimeSeriesDataset {
    pub values: Tensor2,
    pub timestamps: Vec<f64>,
    pub channel_names: Vec<String>,
    pub splits: Splits,
    pub normalization: Normalization,
}

/// One training example: `lookback` rows feed the forecaster, `horizon` rows
/// are the target. `timestamps` covers both parts. `origin` is the absolute
/// dataset row the lookback starts at; windows cut from generated data keep
/// the origin of their anchor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub lookback: Tensor2,
    pub horizon: Tensor2,
    pub timestamps: Vec<f64>,
    pub origin: usize,
}

impl Window {
    pub fn new(
        lookback: Tensor2,
        horizon: Tensor2,
        timestamps: Vec<f64>,
        origin: usize,
    ) -> Result<Self> {
        if lookback.cols() != horizon.cols() {
            return Err(Error::dimension(
                "Window::new",
                format!("{} channels", lookback.cols()),
                horizon.cols().to_string(),
            ));
        }
        if timestamps.len() != lookback.rows() + horizon.rows() {
            return Err(Error::dimension(
                "Window::new",
                format!("{} timestamps", lookback.rows() + horizon.rows()),
                timestamps.len().to_string(),
            ));
        }
        Ok(Window {
            lookback,
            horizon,
            timestamps,
            origin,
        })
    }

    pub fn lookback_len(&self) -> usize {
        self.lookback.rows()
    }

    pub fn horizon_len(&self) -> usize {
        self.horizon.rows()
    }

    pub fn channels(&self) -> usize {
        self.lookback.cols()
    }

    /// Lookback and horizon stacked into one `[L x C]` block.
    pub fn full_values(&self) -> Tensor2 {
        Tensor2::vstack(&[&self.lookback, &self.horizon]).expect("channel counts match")
    }

    /// Splits an `[L x C]` block back into a window with the given timestamps.
    pub fn from_full_values(
        values: &Tensor2,
        lookback_len: usize,
        timestamps: Vec<f64>,
        origin: usize,
    ) -> Result<Self> {
        if lookback_len >= values.rows() {
            return Err(Error::dimension(
                "Window::from_full_values",
                format!("lookback shorter than {} rows", values.rows()),
                lookback_len.to_string(),
            ));
        }
        let lookback = values.slice_rows(0..lookback_len)?;
        let horizon = values.slice_rows(lookback_len..values.rows())?;
        Window::new(lookback, horizon, timestamps, origin)
    }
}

/// Reads a CSV whose first column is a timestamp (any string) and whose
/// remaining columns are numeric channels. Timestamps must be non-decreasing;
/// adjacent values are compared numerically when both parse as floats and
/// lexicographically otherwise.
pub fn load_csv(reader: impl Read) -> Result<RawSeries> {
    let mut csv_reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let headers = csv_reader
        .headers()
        .map_err(|e| Error::format("csv header", e.to_string()))?
        .clone();
    if headers.len() < 2 {
        return Err(Error::format(
            "csv header",
            "need a timestamp column and at least one channel",
        ));
    }
    let channel_names: Vec<String> = headers.iter().skip(1).map(str::to_owned).collect();
    let mut timestamps: Vec<String> = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in csv_reader.records().enumerate() {
        let line = i + 2; // header is line 1
        let record =
            record.map_err(|e| Error::format(format!("csv line {line}"), e.to_string()))?;
        if record.len() != headers.len() {
            return Err(Error::format(
                format!("csv line {line}"),
                format!("expected {} fields, got {}", headers.len(), record.len()),
            ));
        }
        let ts: String = record.get(0).unwrap_or_default().to_string();
        if let Some(prev) = timestamps.last() {
            if !timestamps_non_decreasing(prev, &ts) {
                return Err(Error::format(
                    format!("csv line {line}"),
                    format!("timestamp {ts:?} decreases from {prev:?}"),
                ));
            }
        }
        timestamps.push(ts);
        let mut row = Vec::with_capacity(channel_names.len());
        for (j, field) in record.iter().skip(1).enumerate() {
            let value: f64 = field.trim().parse().map_err(|_| {
                Error::format(
                    format!("csv line {line}, column {}", channel_names[j]),
                    format!("not a number: {field:?}"),
                )
            })?;
            row.push(value);
        }
        rows.push(row);
    }
    if rows.len() < 2 {
        return Err(Error::format("csv body", "need at least two data rows"));
    }
    Ok(RawSeries {
        timestamps,
        values: Tensor2::from_rows(&rows)?,
        channel_names,
    })
}

pub fn load_csv_path(path: impl AsRef<Path>) -> Result<RawSeries> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    load_csv(std::io::BufReader::new(file))
}

fn timestamps_non_decreasing(prev: &str, next: &str) -> bool {
    match (prev.trim().parse::<f64>(), next.trim().parse::<f64>()) {
        (Ok(a), Ok(b)) => a <= b,
        _ => prev <= next,
    }
}

/// Resolves the split ranges for a partition, applying few-shot shrinking.
pub fn make_splits(total_rows: usize, partition: PartitionSpec, mode: SplitMode) -> Result<Splits> {
    let needed = partition.train + partition.val + partition.test;
    if partition.train == 0 {
        return Err(Error::Config("partition has an empty train range".into()));
    }
    if needed > total_rows {
        return Err(Error::Config(format!(
            "partition needs {needed} rows but the series has {total_rows}"
        )));
    }
    let val_start = partition.train;
    let test_start = partition.train + partition.val;
    let train_len = match mode {
        SplitMode::Standard => partition.train,
        SplitMode::FewShot { fraction } => {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(Error::Config(format!(
                    "few-shot fraction must be in (0, 1], got {fraction}"
                )));
            }
            let len = (fraction * partition.train as f64).round() as usize;
            len.max(1)
        }
    };
    Ok(Splits {
        train: 0..train_len,
        val: val_start..val_start + partition.val,
        test: test_start..test_start + partition.test,
    })
}

/// Splits, normalizes (statistics from the train rows only) and packages a
/// raw series.
pub fn build_dataset(
    raw: &RawSeries,
    partition: PartitionSpec,
    mode: SplitMode,
) -> Result<TimeSeriesDataset> {
    let total = raw.values.rows();
    let splits = make_splits(total, partition, mode)?;
    let normalization = Normalization::fit(&raw.values, splits.train.clone())?;
    let values = normalization.apply(&raw.values)?;
    let denom = (total - 1) as f64;
    let timestamps = (0..total).map(|i| i as f64 / denom).collect();
    Ok(TimeSeriesDataset {
        values,
        timestamps,
        channel_names: raw.channel_names.clone(),
        splits,
        normalization,
    })
}

impl TimeSeriesDataset {
    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    /// All stride-1 windows fully inside `range`. Empty when the range is
    /// shorter than `lookback + horizon`.
    pub fn windows(
        &self,
        range: Range<usize>,
        lookback: usize,
        horizon: usize,
    ) -> Result<Vec<Window>> {
        if lookback == 0 || horizon == 0 {
            return Err(Error::Config("window lengths must be positive".into()));
        }
        if range.end > self.rows() || range.start > range.end {
            return Err(Error::Config(format!(
                "window range {}..{} invalid for {} rows",
                range.start,
                range.end,
                self.rows()
            )));
        }
        let span = lookback + horizon;
        let mut out = Vec::new();
        if range.len() < span {
            return Ok(out);
        }
        for start in range.start..=range.end - span {
            let lb = self.values.slice_rows(start..start + lookback)?;
            let hz = self.values.slice_rows(start + lookback..start + span)?;
            let ts = self.timestamps[start..start + span].to_vec();
            out.push(Window::new(lb, hz, ts, start)?);
        }
        Ok(out)
    }

    pub fn train_windows(&self, lookback: usize, horizon: usize) -> Result<Vec<Window>> {
        self.windows(self.splits.train.clone(), lookback, horizon)
    }

    pub fn val_windows(&self, lookback: usize, horizon: usize) -> Result<Vec<Window>> {
        self.windows(self.splits.val.clone(), lookback, horizon)
    }

    pub fn test_windows(&self, lookback: usize, horizon: usize) -> Result<Vec<Window>> {
        self.windows(self.splits.test.clone(), lookback, horizon)
    }

    /// Positional timestamp range covered by a split, as (first, last).
    pub fn timestamp_range(&self, range: &Range<usize>) -> Result<(f64, f64)> {
        if range.is_empty() || range.end > self.rows() {
            return Err(Error::Config(format!(
                "timestamp range {}..{} invalid for {} rows",
                range.start,
                range.end,
                self.rows()
            )));
        }
        Ok((self.timestamps[range.start], self.timestamps[range.end - 1]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn sample_csv() -> String {
        let mut s = String::from("date,a,b\n");
        for i in 0..20 {
            s.push_str(&format!(
                "2020-01-{:02},{},{}\n",
                i + 1,
                i as f64,
                i as f64 * 2.0 + 1.0
            ));
        }
        s
    }

    #[test]
    fn csv_round_trip_shapes() {
        let raw = load_csv(sample_csv().as_bytes()).unwrap();
        assert_eq!(raw.values.rows(), 20);
        assert_eq!(raw.values.cols(), 2);
        assert_eq!(raw.channel_names, vec!["a", "b"]);
        assert_eq!(raw.timestamps[0], "2020-01-01");
    }

    #[test]
    fn csv_rejects_decreasing_timestamps() {
        let csv = "date,a\n2020-01-02,1\n2020-01-01,2\n";
        let err = load_csv(csv.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("decreases"));
    }

    #[test]
    fn csv_numeric_timestamps_compare_numerically() {
        // Lexicographically "10" < "9" but numerically it is fine.
        let csv = "t,a\n9,1\n10,2\n11,3\n";
        assert!(load_csv(csv.as_bytes()).is_ok());
    }

    #[test]
    fn csv_rejects_non_numeric_channel() {
        let csv = "date,a\n2020-01-01,1\n2020-01-02,oops\n";
        let err = load_csv(csv.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("not a number"));
    }

    #[test]
    fn few_shot_keeps_val_and_test_positions() {
        let part = PartitionSpec {
            train: 10,
            val: 5,
            test: 5,
        };
        let standard = make_splits(20, part, SplitMode::Standard).unwrap();
        let few = make_splits(20, part, SplitMode::FewShot { fraction: 0.5 }).unwrap();
        assert_eq!(standard.train, 0..10);
        assert_eq!(few.train, 0..5);
        assert_eq!(few.val, standard.val);
        assert_eq!(few.test, standard.test);
        assert_eq!(few.val, 10..15);
        assert_eq!(few.test, 15..20);
    }

    #[test]
    fn normalization_fits_train_rows_only() {
        let raw = load_csv(sample_csv().as_bytes()).unwrap();
        let part = PartitionSpec {
            train: 10,
            val: 5,
            test: 5,
        };
        let ds = build_dataset(&raw, part, SplitMode::Standard).unwrap();
        // Channel a over rows 0..10 is 0..=9: mean 4.5, population std of
        // 0..=9 is sqrt(8.25).
        assert_abs_diff_eq!(ds.normalization.mean[0], 4.5, epsilon = 1e-12);
        assert_abs_diff_eq!(ds.normalization.std[0], 8.25f64.sqrt(), epsilon = 1e-12);
        // Train rows of the normalized channel have mean ~0.
        let mean: f64 = (0..10).map(|r| ds.values.get(r, 0)).sum::<f64>() / 10.0;
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-12);
        // Round trip.
        let back = ds.normalization.invert(&ds.values).unwrap();
        assert_abs_diff_eq!(back.get(13, 0), 13.0, epsilon = 1e-9);
    }

    #[test]
    fn constant_channel_gets_std_floor() {
        let csv = "t,a\n1,5\n2,5\n3,5\n4,5\n";
        let raw = load_csv(csv.as_bytes()).unwrap();
        let part = PartitionSpec {
            train: 2,
            val: 1,
            test: 1,
        };
        let ds = build_dataset(&raw, part, SplitMode::Standard).unwrap();
        assert_eq!(ds.normalization.std[0], STD_FLOOR);
        assert_eq!(ds.values.get(0, 0), 0.0);
    }

    #[test]
    fn windows_are_stride_one_and_stay_inside_the_range() {
        let raw = load_csv(sample_csv().as_bytes()).unwrap();
        let part = PartitionSpec {
            train: 10,
            val: 5,
            test: 5,
        };
        let ds = build_dataset(&raw, part, SplitMode::Standard).unwrap();
        let windows = ds.train_windows(3, 2).unwrap();
        // 10 rows, span 5 -> 6 windows starting at rows 0..=5.
        assert_eq!(windows.len(), 6);
        assert_eq!(windows[0].origin, 0);
        assert_eq!(windows[5].origin, 5);
        assert_eq!(windows[0].lookback.rows(), 3);
        assert_eq!(windows[0].horizon.rows(), 2);
        assert_eq!(windows[0].timestamps.len(), 5);
        // Positional timestamps are i / (T - 1).
        assert_abs_diff_eq!(windows[1].timestamps[0], 1.0 / 19.0, epsilon = 1e-12);
        // Too-short range yields no windows.
        assert!(ds.windows(0..4, 3, 2).unwrap().is_empty());
    }

    #[test]
    fn full_values_round_trip() {
        let raw = load_csv(sample_csv().as_bytes()).unwrap();
        let part = PartitionSpec {
            train: 10,
            val: 5,
            test: 5,
        };
        let ds = build_dataset(&raw, part, SplitMode::Standard).unwrap();
        let w = &ds.train_windows(3, 2).unwrap()[2];
        let full = w.full_values();
        assert_eq!(full.rows(), 5);
        let back = Window::from_full_values(&full, 3, w.timestamps.clone(), w.origin).unwrap();
        assert_eq!(&back, w);
    }
}
