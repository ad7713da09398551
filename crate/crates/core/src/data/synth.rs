use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{RawSeries, MIN_SERIES_LEN};
use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Steps per cycle of the periodic component.
pub const PERIOD: f64 = 24.0;
/// Steps between label flips of the square wave.
pub const SQUARE_HALF_PERIOD: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    /// `0.5 + 0.5 sin(2 pi t / 24)`
    Sine,
    /// Linear ramp from 0.2 to 0.8 plus a small daily cycle.
    Trend,
    /// Binary labels flipping every 50 steps; the value sits above or below
    /// 0.5 with the label, plus a daily cycle.
    Square,
}

impl SynthKind {
    pub fn name(self) -> &'static str {
        match self {
            SynthKind::Sine => "sine",
            SynthKind::Trend => "trend",
            SynthKind::Square => "square",
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sine" => Ok(SynthKind::Sine),
            "trend" => Ok(SynthKind::Trend),
            "square" => Ok(SynthKind::Square),
            _ => Err(Error::Data(format!("unknown synthetic series {s:?}"))),
        }
    }
}

/// Deterministic univariate test series. Square waves carry labels.
pub fn synth_series(kind: SynthKind, length: usize, noise_sd: f64, seed: u64) -> Result<RawSeries> {
    if length < MIN_SERIES_LEN {
        return Err(Error::Data(format!("synthetic series needs at least {MIN_SERIES_LEN} steps, got {length}")));
    }
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(Error::Data(format!("noise sd must be finite and non-negative, got {noise_sd}")));
    }
    let noise = Normal::new(0.0, noise_sd).map_err(|e| Error::Data(format!("noise sd {noise_sd}: {e}")))?;
    let mut rng = stream_rng(seed, 0);
    let mut values = Vec::with_capacity(length);
    let mut labels = Vec::with_capacity(length);
    for t in 0..length {
        let cycle = (2.0 * PI * t as f64 / PERIOD).sin();
        let clean = match kind {
            SynthKind::Sine => 0.5 + 0.5 * cycle,
            SynthKind::Trend => 0.2 + 0.6 * t as f64 / (length - 1) as f64 + 0.1 * cycle,
            SynthKind::Square => {
                let label = ((t / SQUARE_HALF_PERIOD) % 2) as f64;
                labels.push(label);
                0.5 + 0.15 * (2.0 * label - 1.0) + 0.25 * cycle
            }
        };
        let v = if noise_sd > 0.0 { clean + noise.sample(&mut rng) } else { clean };
        values.push(v);
    }
    Ok(RawSeries {
        name: kind.name().to_string(),
        channels: 1,
        values,
        labels: (kind == SynthKind::Square).then_some(labels),
        rejected: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_sine_is_closed_form() {
        let s = synth_series(SynthKind::Sine, 100, 0.0, 1).unwrap();
        for (t, &v) in s.values.iter().enumerate() {
            assert_eq!(v, 0.5 + 0.5 * (2.0 * PI * t as f64 / 24.0).sin());
        }
        assert!(s.labels.is_none());
    }

    #[test]
    fn seeded() {
        let a = synth_series(SynthKind::Trend, 200, 0.05, 3).unwrap();
        assert_eq!(a, synth_series(SynthKind::Trend, 200, 0.05, 3).unwrap());
        assert_ne!(a, synth_series(SynthKind::Trend, 200, 0.05, 4).unwrap());
    }

    #[test]
    fn square_labels_flip_every_fifty_steps() {
        let s = synth_series(SynthKind::Square, 200, 0.02, 0).unwrap();
        let labels = s.labels.unwrap();
        assert!(labels[..50].iter().all(|&l| l == 0.0));
        assert!(labels[50..100].iter().all(|&l| l == 1.0));
        assert!(labels[100..150].iter().all(|&l| l == 0.0));
    }

    #[test]
    fn rejects_short_or_bad_noise() {
        assert!(synth_series(SynthKind::Sine, 47, 0.0, 0).is_err());
        assert!(synth_series(SynthKind::Sine, 48, -1.0, 0).is_err());
    }
}
