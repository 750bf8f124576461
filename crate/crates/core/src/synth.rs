//! Synthetic series in the same CSV layout as the real datasets.

use chrono::{NaiveDate, NaiveDateTime, TimeDelta};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::TimeSeriesFrame;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    Sine,
    /// Blocks of `block` steps alternating between a sine and a raised
    /// sawtooth, starting with the sine.
    TwoRegime,
    Constant,
    Linear,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sine" => Ok(Self::Sine),
            "two-regime" => Ok(Self::TwoRegime),
            "constant" => Ok(Self::Constant),
            "linear" => Ok(Self::Linear),
            other => Err(Error::Config(format!(
                "unknown synthetic kind {other:?} (sine, two-regime, constant, linear)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub length: usize,
    pub channels: usize,
    pub noise: f64,
    pub seed: u64,
    pub period: usize,
    pub amplitude: f64,
    /// Regime length for two-regime series.
    pub block: usize,
    /// Constant value, or the intercept of a linear series.
    pub level: f64,
    /// Per-step increase of a linear series.
    pub slope: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            kind: SynthKind::Sine,
            length: 2000,
            channels: 1,
            noise: 0.0,
            seed: 0,
            period: 24,
            amplitude: 1.0,
            block: 96,
            level: 1.0,
            slope: 0.01,
        }
    }
}

/// First timestamp of every synthetic series.
pub fn epoch() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2020, 1, 1)
        .expect("valid date")
        .and_hms_opt(0, 0, 0)
        .expect("valid time")
}

/// Which regime a two-regime series is in at step `t`: 0 sine, 1 sawtooth.
pub fn regime(t: usize, block: usize) -> usize {
    (t / block) % 2
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.length < 2 {
            return bad(format!("length must be at least 2, got {}", self.length));
        }
        if self.channels == 0 {
            return bad("channels must be at least 1".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be a non-negative std, got {}", self.noise));
        }
        if self.period == 0 || self.block == 0 {
            return bad("period and block must be positive".into());
        }
        Ok(())
    }

    /// Noise-free value of channel `v` at step `t`. Channels are phase
    /// shifted copies of each other.
    pub fn clean_value(&self, t: usize, v: usize) -> f64 {
        let shift = v * self.period / self.channels;
        let phase = ((t + shift) % self.period) as f64 / self.period as f64;
        let a = self.amplitude;
        match self.kind {
            SynthKind::Sine => a * (std::f64::consts::TAU * phase).sin(),
            SynthKind::TwoRegime => match regime(t, self.block) {
                0 => a * (std::f64::consts::TAU * phase).sin(),
                _ => a + a * (2.0 * phase - 1.0),
            },
            SynthKind::Constant => self.level,
            SynthKind::Linear => self.level + self.slope * t as f64 + v as f64,
        }
    }

    pub fn generate(&self) -> Result<TimeSeriesFrame> {
        self.validate()?;
        let noise = Normal::new(0.0, self.noise).map_err(|e| Error::Config(e.to_string()))?;
        let mut channels = Vec::with_capacity(self.channels);
        for v in 0..self.channels {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(v as u64);
            channels.push(
                (0..self.length)
                    .map(|t| {
                        let x = self.clean_value(t, v);
                        if self.noise > 0.0 {
                            x + noise.sample(&mut rng)
                        } else {
                            x
                        }
                    })
                    .collect(),
            );
        }
        let names = (0..self.channels).map(|v| format!("x{v}")).collect();
        TimeSeriesFrame::from_channels(epoch(), TimeDelta::hours(1), names, channels)
    }
}
