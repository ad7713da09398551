//! Series ingestion, normalization and sliding-window datasets.

pub mod cache;
mod csv;
mod synth;
mod window;

pub use self::csv::{load_csv, read_csv, CsvSchema, EYE_STATE_CHANNELS, EYE_STATE_LABEL};
pub use synth::{synth_series, SynthKind};
pub use window::{make_windows, sliding_windows, NormStats, WindowedDataset};

/// Predictor steps per window.
pub const PREDICTORS: usize = 23;
/// Predictor steps plus the target step.
pub const WINDOW: usize = PREDICTORS + 1;
/// Shortest series [`make_windows`] accepts.
pub const MIN_SERIES_LEN: usize = 2 * WINDOW;

/// An ordered multichannel series, row-major `len x channels`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    pub name: String,
    pub channels: usize,
    pub values: Vec<f64>,
    /// One binary label per row for classification data.
    pub labels: Option<Vec<f64>>,
    /// Rows dropped during ingestion.
    pub rejected: usize,
}

impl RawSeries {
    pub fn len(&self) -> usize {
        if self.channels == 0 {
            0
        } else {
            self.values.len() / self.channels
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.channels..(t + 1) * self.channels]
    }
}
