//! Rolling multi-horizon forecasting, error metrics and baselines.

use chrono::{NaiveDateTime, TimeDelta};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{sample_windows, Split, TimeSeriesFrame};
use crate::dataset::{encode_segments, Dataset, Layout};
use crate::error::{Error, Result};
use crate::model::{forward, Model};
use crate::textenc::TextEmbedder;

pub const HORIZONS: [usize; 4] = [96, 192, 336, 720];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

pub fn metrics(pred: &[f64], truth: &[f64]) -> Result<Metrics> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} truth values",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Shape("metrics of an empty forecast".into()));
    }
    let n = pred.len() as f64;
    let (se, ae) = pred
        .iter()
        .zip(truth)
        .fold((0.0, 0.0), |(se, ae), (p, t)| (se + (p - t) * (p - t), ae + (p - t).abs()));
    Ok(Metrics {
        mse: se / n,
        mae: ae / n,
    })
}

/// Everything the rolling forecaster needs besides the model.
pub struct Forecaster<'a> {
    pub model: &'a Model,
    pub embedder: &'a dyn TextEmbedder,
    pub freq: TimeDelta,
    pub decimals: usize,
}

impl Forecaster<'_> {
    /// Forecasts `horizon` steps after `context`, whose first value is at
    /// `start`. Each step predicts one segment from the last N segments and
    /// appends it to the window; the final step is truncated.
    pub fn rolling(&self, context: &[f64], start: NaiveDateTime, horizon: i64) -> Result<Vec<f64>> {
        if horizon <= 0 {
            return Err(Error::InvalidHorizon(horizon));
        }
        let s = self.model.config.segment_len;
        let layout = Layout::new(context.len(), s)?;
        let mut window = context[layout.skip()..].to_vec();
        let mut window_start = start + self.freq * layout.skip() as i32;
        let horizon = horizon as usize;
        let mut out = Vec::with_capacity(horizon.div_ceil(s) * s);
        for _ in 0..horizon.div_ceil(s) {
            let input = encode_segments(&window, window_start, self.freq, s, self.decimals, self.embedder)?;
            let trace = forward(self.model, &input)?;
            let next = trace.pred.row(trace.pred.rows - 1);
            out.extend_from_slice(next);
            window.drain(..s);
            window.extend_from_slice(next);
            window_start += self.freq * s as i32;
        }
        out.truncate(horizon);
        Ok(out)
    }
}

/// Number of autoregressive steps needed for `horizon`.
pub fn roll_steps(horizon: usize, segment_len: usize) -> usize {
    horizon.div_ceil(segment_len)
}

/// Repeats the last observed value.
pub fn persistence_baseline(context: &[f64], horizon: usize) -> Vec<f64> {
    context.last().map_or_else(Vec::new, |&x| vec![x; horizon])
}

/// Least-squares map from a flattened context (plus intercept) to the next
/// `horizon` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearBaseline {
    pub context_len: usize,
    pub horizon: usize,
    /// (context_len + 1) × horizon, intercept in the last row.
    pub weights: Vec<f64>,
}

const PINV_RCOND: f64 = 1e-12;

impl LinearBaseline {
    /// Fits on every window of `rows`, all channels pooled.
    pub fn fit(
        frame: &TimeSeriesFrame,
        rows: std::ops::Range<usize>,
        context_len: usize,
        horizon: usize,
        stride: usize,
    ) -> Result<Self> {
        let windows: Vec<_> = sample_windows(frame, rows, context_len, horizon, stride)?.collect();
        let p = context_len + 1;
        let x = DMatrix::from_fn(windows.len(), p, |r, c| {
            windows[r].context.get(c).copied().unwrap_or(1.0)
        });
        let y = DMatrix::from_fn(windows.len(), horizon, |r, c| windows[r].target[c]);
        let gram = x.transpose() * &x;
        let rhs = x.transpose() * y;
        let tol = PINV_RCOND * gram.amax().max(1.0);
        let w = gram
            .svd(true, true)
            .solve(&rhs, tol)
            .map_err(|e| Error::Shape(format!("least squares failed: {e}")))?;
        Ok(Self {
            context_len,
            horizon,
            weights: (0..p).flat_map(|r| (0..horizon).map(move |c| (r, c))).map(|(r, c)| w[(r, c)]).collect(),
        })
    }

    pub fn predict(&self, context: &[f64]) -> Result<Vec<f64>> {
        if context.len() != self.context_len {
            return Err(Error::Shape(format!(
                "linear baseline expects {} context values, got {}",
                self.context_len,
                context.len()
            )));
        }
        let h = self.horizon;
        let mut out = self.weights[self.context_len * h..].to_vec();
        for (i, x) in context.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(&self.weights[i * h..(i + 1) * h]) {
                *o += x * w;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub horizon: usize,
    pub mse: f64,
    pub mae: f64,
    pub windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastReport {
    pub dataset: String,
    pub method: String,
    pub horizons: Vec<HorizonMetrics>,
    pub avg_mse: f64,
    pub avg_mae: f64,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
}

impl ForecastReport {
    pub fn new(
        dataset: impl Into<String>,
        method: impl Into<String>,
        horizons: Vec<HorizonMetrics>,
        config: serde_json::Value,
        seeds: Vec<u64>,
    ) -> Self {
        let n = horizons.len().max(1) as f64;
        let avg_mse = horizons.iter().map(|h| h.mse).sum::<f64>() / n;
        let avg_mae = horizons.iter().map(|h| h.mae).sum::<f64>() / n;
        Self {
            dataset: dataset.into(),
            method: method.into(),
            horizons,
            avg_mse,
            avg_mae,
            config,
            seeds,
        }
    }

    /// Fixed-width text table with one row per horizon and an average row.
    pub fn table(&self) -> String {
        let mut out = format!("{} / {}\n", self.dataset, self.method);
        out += &format!("{:>8} {:>10} {:>10}\n", "Horizon", "MSE", "MAE");
        for h in &self.horizons {
            out += &format!("{:>8} {:>10.4} {:>10.4}\n", h.horizon, h.mse, h.mae);
        }
        out += &format!("{:>8} {:>10.4} {:>10.4}\n", "Avg", self.avg_mse, self.avg_mae);
        out
    }
}

/// One test window as seen by a forecasting method.
pub struct WindowView<'a> {
    pub channel: usize,
    pub offset: usize,
    pub start: NaiveDateTime,
    pub context: &'a [f64],
}

/// Scores `forecast` on every test window for each horizon. A window start
/// is forecast once, at the longest horizon that fits, and shorter horizons
/// reuse its prefix.
pub fn evaluate_horizons<F>(
    dataset: &Dataset,
    context_len: usize,
    horizons: &[usize],
    stride: usize,
    forecast: F,
) -> Result<Vec<HorizonMetrics>>
where
    F: Fn(&WindowView, usize) -> Result<Vec<f64>> + Sync,
{
    if horizons.is_empty() {
        return Err(Error::Config("no evaluation horizons".into()));
    }
    if let Some(&h) = horizons.iter().find(|&&h| h == 0) {
        return Err(Error::InvalidHorizon(h as i64));
    }
    let frame = &dataset.normalized;
    let range = dataset.window_range(Split::Test);
    let shortest = *horizons.iter().min().expect("non-empty");
    let windows: Vec<_> = sample_windows(frame, range.clone(), context_len, shortest, stride)?.collect();
    for &h in horizons {
        if range.len() < context_len + h {
            return Err(Error::SplitTooShort(format!(
                "test split holds {} rows, horizon {h} needs {}",
                range.len() - context_len,
                h
            )));
        }
    }

    // per window: (squared, absolute) error sums for each horizon that fits
    let sums: Vec<Vec<Option<(f64, f64)>>> = windows
        .par_iter()
        .map(|w| {
            let column = frame.channel(w.channel);
            let avail = range.end - (w.offset + context_len);
            let longest = horizons.iter().copied().filter(|&h| h <= avail).max().unwrap_or(0);
            let view = WindowView {
                channel: w.channel,
                offset: w.offset,
                start: w.start,
                context: &w.context,
            };
            let pred = forecast(&view, longest)?;
            if pred.len() != longest {
                return Err(Error::Shape(format!(
                    "forecaster returned {} values for horizon {longest}",
                    pred.len()
                )));
            }
            let truth = &column[w.offset + context_len..w.offset + context_len + longest];
            Ok(horizons
                .iter()
                .map(|&h| {
                    (h <= longest).then(|| {
                        pred[..h].iter().zip(&truth[..h]).fold((0.0, 0.0), |(se, ae), (p, t)| {
                            (se + (p - t) * (p - t), ae + (p - t).abs())
                        })
                    })
                })
                .collect())
        })
        .collect::<Result<_>>()?;

    Ok(horizons
        .iter()
        .enumerate()
        .map(|(i, &h)| {
            let (mut se, mut ae, mut n) = (0.0, 0.0, 0usize);
            for s in sums.iter().filter_map(|w| w[i]) {
                se += s.0;
                ae += s.1;
                n += 1;
            }
            let values = (n * h) as f64;
            HorizonMetrics {
                horizon: h,
                mse: se / values,
                mae: ae / values,
                windows: n,
            }
        })
        .collect())
}

/// Relative MSE reduction in percent.
pub fn promotion(original: f64, improved: f64) -> f64 {
    (original - improved) / original * 100.0
}

/// Rounds half away from zero to one decimal, as printed in reports.
pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

pub fn format_promotion(pct: f64) -> String {
    format!("{:+.1}%", round1(pct))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        assert_eq!(metrics(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), Metrics { mse: 0.0, mae: 0.0 });
        assert_eq!(metrics(&[2.0, 3.0], &[1.0, 2.0]).unwrap(), Metrics { mse: 1.0, mae: 1.0 });
        assert_eq!(metrics(&[0.0, 2.0], &[1.0, 0.0]).unwrap(), Metrics { mse: 2.5, mae: 1.5 });
        assert!(matches!(metrics(&[0.0], &[1.0, 0.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn persistence_repeats_last() {
        assert_eq!(persistence_baseline(&[1.0, 2.0, 5.0], 3), vec![5.0; 3]);
    }

    #[test]
    fn roll_counts() {
        assert_eq!(roll_steps(96, 96), 1);
        assert_eq!(roll_steps(720, 96), 8);
        assert_eq!(roll_steps(1, 96), 1);
    }

    #[test]
    fn promotion_arithmetic() {
        assert_eq!(promotion(0.3, 0.3), 0.0);
        assert_eq!(format_promotion(promotion(0.178, 0.159)), "+10.7%");
        assert_eq!(format_promotion(promotion(0.281, 0.259)), "+7.8%");
        assert_eq!(format_promotion(promotion(0.2, 0.25)), "-25.0%");
    }

    #[test]
    fn report_average_is_mean_of_horizons() {
        let hs = vec![
            HorizonMetrics { horizon: 96, mse: 0.1, mae: 0.2, windows: 1 },
            HorizonMetrics { horizon: 192, mse: 0.3, mae: 0.5, windows: 1 },
        ];
        let r = ForecastReport::new("d", "m", hs, serde_json::Value::Null, vec![1]);
        assert!((r.avg_mse - 0.2).abs() < 1e-12);
        assert!((r.avg_mae - 0.35).abs() < 1e-12);
        assert!(r.table().contains("Avg"));
    }
}
