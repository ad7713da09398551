use std::ops::Range;

use log::warn;
use serde::{Deserialize, Serialize};

use super::{RawSeries, MIN_SERIES_LEN, PREDICTORS, WINDOW};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::Task;

/// Per-channel min-max statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormStats {
    /// Statistics over rows `rows` of `series`.
    pub fn from_rows(series: &RawSeries, rows: Range<usize>) -> Self {
        let c = series.channels;
        let mut min = vec![f64::INFINITY; c];
        let mut max = vec![f64::NEG_INFINITY; c];
        for t in rows {
            for (ch, &v) in series.row(t).iter().enumerate() {
                min[ch] = min[ch].min(v);
                max[ch] = max[ch].max(v);
            }
        }
        Self { min, max }
    }

    pub fn is_degenerate(&self, channel: usize) -> bool {
        self.min[channel] == self.max[channel]
    }

    /// Map into `[0, 1]`. Values outside the fitted range are clipped;
    /// degenerate channels map to 0.5.
    pub fn normalize(&self, channel: usize, v: f64) -> f64 {
        let (lo, hi) = (self.min[channel], self.max[channel]);
        if lo == hi {
            0.5
        } else {
            ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
        }
    }

    pub fn denormalize(&self, channel: usize, v: f64) -> f64 {
        let (lo, hi) = (self.min[channel], self.max[channel]);
        if lo == hi {
            lo
        } else {
            lo + v * (hi - lo)
        }
    }
}

/// Normalized windows of 23 predictor steps with the value (regression) or
/// label (classification) of the following step as target.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowedDataset {
    pub task: Task,
    /// `[n, 23, channels]`
    pub x: Tensor,
    /// `[n, 1]`
    pub y: Tensor,
    pub stats: NormStats,
    /// Series row of each window's first step.
    pub starts: Vec<usize>,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.x.shape()[2]
    }

    /// Rows `index` as `(x, y)`.
    pub fn batch(&self, index: &[usize]) -> (Tensor, Tensor) {
        (self.x.select_rows(index), self.y.select_rows(index))
    }

    /// The first `n` windows.
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            task: self.task,
            x: self.x.rows(0, n),
            y: self.y.rows(0, n),
            stats: self.stats.clone(),
            starts: self.starts[..n].to_vec(),
        }
    }
}

fn check_task(series: &RawSeries, task: Task) -> Result<()> {
    match task {
        Task::Classification if series.labels.is_none() => {
            Err(Error::Data(format!("{}: classification needs a label column", series.name)))
        }
        Task::Regression if series.channels != 1 => Err(Error::Data(format!(
            "{}: regression needs a univariate series, got {} channels",
            series.name, series.channels
        ))),
        _ => Ok(()),
    }
}

/// Stride-1 windows lying entirely inside `rows`.
fn windows_in(series: &RawSeries, stats: &NormStats, rows: Range<usize>, task: Task) -> Result<WindowedDataset> {
    let c = series.channels;
    let starts: Vec<usize> =
        if rows.end - rows.start >= WINDOW { (rows.start..=rows.end - WINDOW).collect() } else { Vec::new() };
    let mut x = Vec::with_capacity(starts.len() * PREDICTORS * c);
    let mut y = Vec::with_capacity(starts.len());
    for &s in &starts {
        for t in s..s + PREDICTORS {
            x.extend(series.row(t).iter().enumerate().map(|(ch, &v)| stats.normalize(ch, v)));
        }
        let target = s + PREDICTORS;
        y.push(match task {
            Task::Regression => stats.normalize(0, series.row(target)[0]),
            Task::Classification => series.labels.as_ref().expect("checked")[target],
        });
    }
    Ok(WindowedDataset {
        task,
        x: Tensor::new(vec![starts.len(), PREDICTORS, c], x)?,
        y: Tensor::new(vec![starts.len(), 1], y)?,
        stats: stats.clone(),
        starts,
    })
}

fn warn_degenerate(series: &RawSeries, stats: &NormStats) {
    for ch in 0..series.channels {
        if stats.is_degenerate(ch) {
            warn!("{}: channel {ch} is constant on the training range, mapped to 0.5", series.name);
        }
    }
}

/// Every stride-1 window of the whole series, normalized with statistics of
/// the whole series. Yields `len - 24 + 1` windows.
pub fn sliding_windows(series: &RawSeries, task: Task) -> Result<WindowedDataset> {
    check_task(series, task)?;
    if series.len() < WINDOW {
        return Err(Error::Data(format!("{}: fewer than {WINDOW} rows", series.name)));
    }
    let stats = NormStats::from_rows(series, 0..series.len());
    warn_degenerate(series, &stats);
    windows_in(series, &stats, 0..series.len(), task)
}

/// Chronological split at `floor(len * split_fraction)`. Statistics come from
/// the training rows only. Training windows lie entirely before the split
/// and test windows start at or after it, so windows straddling the
/// boundary are dropped.
pub fn make_windows(series: &RawSeries, split_fraction: f64, task: Task) -> Result<(WindowedDataset, WindowedDataset)> {
    check_task(series, task)?;
    if !(split_fraction > 0.0 && split_fraction < 1.0) {
        return Err(Error::Data(format!("split fraction must lie in (0, 1), got {split_fraction}")));
    }
    let len = series.len();
    if len < MIN_SERIES_LEN {
        return Err(Error::Data(format!("{}: need at least {MIN_SERIES_LEN} rows, got {len}", series.name)));
    }
    let split = (len as f64 * split_fraction).floor() as usize;
    if split < WINDOW || len - split < WINDOW {
        return Err(Error::Data(format!(
            "{}: split at row {split} of {len} leaves a side shorter than {WINDOW} rows",
            series.name
        )));
    }
    let stats = NormStats::from_rows(series, 0..split);
    warn_degenerate(series, &stats);
    let train = windows_in(series, &stats, 0..split, task)?;
    let test = windows_in(series, &stats, split..len, task)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn series(values: Vec<f64>) -> RawSeries {
        RawSeries { name: "s".into(), channels: 1, values, labels: None, rejected: 0 }
    }

    #[test]
    fn window_count() {
        let s = series((0..100).map(f64::from).collect());
        let d = sliding_windows(&s, Task::Regression).unwrap();
        assert_eq!(d.len(), 77);
        assert_eq!(d.x.shape(), &[77, 23, 1]);
        // last window: rows 76..99, target row 99
        assert_eq!(d.y.data()[76], 1.0);
        assert!((d.x.data()[23] - 1.0 / 99.0).abs() < 1e-15);
    }

    #[test]
    fn midpoint_normalizes_to_half() {
        let stats = NormStats { min: vec![10.0], max: vec![30.0] };
        assert_eq!(stats.normalize(0, 20.0), 0.5);
        assert_eq!(stats.denormalize(0, 0.5), 20.0);
    }

    #[test]
    fn chronological_split() {
        let s = series((0..1000).map(|t| (t as f64 * 0.1).sin()).collect());
        let (train, test) = make_windows(&s, 0.8, Task::Regression).unwrap();
        // 1-based: train windows end by step 800, test windows start at 801
        assert_eq!(*train.starts.last().unwrap() + WINDOW, 800);
        assert_eq!(test.starts[0] + 1, 801);
        assert_eq!(train.len(), 800 - 24 + 1);
        assert_eq!(test.len(), 200 - 24 + 1);
        assert_eq!(train.stats, test.stats);
        assert_eq!(train.stats, NormStats::from_rows(&s, 0..800));
    }

    #[test]
    fn test_values_outside_train_range_are_clipped() {
        let s = series((0..100).map(f64::from).collect());
        let (train, test) = make_windows(&s, 0.5, Task::Regression).unwrap();
        assert!(train.x.data().iter().chain(train.y.data()).all(|v| (0.0..=1.0).contains(v)));
        assert!(test.x.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn degenerate_channel_maps_to_half() {
        let s = series(vec![3.0; 60]);
        let (train, _) = make_windows(&s, 0.5, Task::Regression).unwrap();
        assert!(train.x.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn classification_targets_are_raw_labels() {
        let labels: Vec<f64> = (0..60).map(|t| ((t / 10) % 2) as f64).collect();
        let s = RawSeries {
            name: "c".into(),
            channels: 2,
            values: (0..120).map(f64::from).collect(),
            labels: Some(labels.clone()),
            rejected: 0,
        };
        let (train, test) = make_windows(&s, 0.5, Task::Classification).unwrap();
        assert_eq!(train.y.data()[0], labels[23]);
        assert_eq!(test.y.data()[0], labels[30 + 23]);
        assert_eq!(train.channels(), 2);
        assert!(make_windows(&s, 0.5, Task::Regression).is_err());
    }

    #[test]
    fn rejects_bad_split_and_short_series() {
        let s = series((0..47).map(f64::from).collect());
        assert!(make_windows(&s, 0.5, Task::Regression).is_err());
        let s = series((0..100).map(f64::from).collect());
        assert!(make_windows(&s, 0.0, Task::Regression).is_err());
        assert!(make_windows(&s, 1.0, Task::Regression).is_err());
        assert!(make_windows(&s, 0.1, Task::Regression).is_err());
        assert!(make_windows(&s, 0.5, Task::Classification).is_err());
    }

    proptest! {
        #[test]
        fn window_count_matches_length(len in 24usize..300) {
            let s = series((0..len).map(|t| (t as f64).cos()).collect());
            prop_assert_eq!(sliding_windows(&s, Task::Regression).unwrap().len(), len - 24 + 1);
        }

        #[test]
        fn denormalize_inverts_normalize(lo in -50.0f64..50.0, width in 1e-3f64..50.0, frac in 0.0f64..=1.0) {
            let stats = NormStats { min: vec![lo], max: vec![lo + width] };
            let v = lo + frac * width;
            let back = stats.denormalize(0, stats.normalize(0, v));
            prop_assert!((back - v).abs() <= 1e-12);
        }
    }
}
