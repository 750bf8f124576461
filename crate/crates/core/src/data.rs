//! Series loading, chronological splits, z-score normalization and
//! channel-independent windowing.
//!
//! Frames use the public ETT CSV layout: a `date` column formatted
//! `YYYY-MM-DD HH:MM:SS` followed by one numeric column per channel.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use chrono::{NaiveDateTime, TimeDelta};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DATE_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

/// A uniformly sampled multivariate series, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesFrame {
    timestamps: Vec<NaiveDateTime>,
    channels: Vec<Vec<f64>>,
    names: Vec<String>,
    freq: TimeDelta,
}

impl TimeSeriesFrame {
    /// Builds a frame from a start instant, a sampling step and per-channel values.
    pub fn from_channels(
        start: NaiveDateTime,
        freq: TimeDelta,
        names: Vec<String>,
        channels: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if channels.is_empty() || names.len() != channels.len() {
            return Err(Error::Shape(format!(
                "{} names for {} channels",
                names.len(),
                channels.len()
            )));
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::Shape("channels differ in length".into()));
        }
        if len < 2 {
            return Err(Error::TooShort(format!("{len} rows, need at least 2")));
        }
        if freq <= TimeDelta::zero() {
            return Err(Error::MalformedSeries("non-positive sampling step".into()));
        }
        for (v, column) in channels.iter().enumerate() {
            if let Some(t) = column.iter().position(|x| !x.is_finite()) {
                return Err(Error::Parse {
                    row: t + 1,
                    column: v + 1,
                    message: "non-finite value".into(),
                });
            }
        }
        let timestamps = (0..len).map(|t| start + freq * t as i32).collect();
        Ok(Self {
            timestamps,
            channels,
            names,
            freq,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn freq(&self) -> TimeDelta {
        self.freq
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn timestamps(&self) -> &[NaiveDateTime] {
        &self.timestamps
    }

    pub fn timestamp(&self, t: usize) -> NaiveDateTime {
        self.timestamps[t]
    }

    pub fn channel(&self, v: usize) -> &[f64] {
        &self.channels[v]
    }

    pub fn value(&self, t: usize, v: usize) -> f64 {
        self.channels[v][t]
    }

    /// Returns a copy with the channel columns reordered by `order`.
    pub fn permute_channels(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.n_channels() {
            return Err(Error::Shape("permutation length".into()));
        }
        Ok(Self {
            timestamps: self.timestamps.clone(),
            channels: order.iter().map(|&v| self.channels[v].clone()).collect(),
            names: order.iter().map(|&v| self.names[v].clone()).collect(),
            freq: self.freq,
        })
    }

    fn map_channels(&self, f: impl Fn(usize, f64) -> f64) -> Self {
        Self {
            timestamps: self.timestamps.clone(),
            channels: self
                .channels
                .iter()
                .enumerate()
                .map(|(v, c)| c.iter().map(|&x| f(v, x)).collect())
                .collect(),
            names: self.names.clone(),
            freq: self.freq,
        }
    }

    /// Writes the frame in ETT CSV layout. Values use shortest round-trip formatting.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        self.write_csv_to(&mut out).map_err(|e| Error::io(path, e))?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_csv_to(&self, out: &mut impl Write) -> std::io::Result<()> {
        write!(out, "date")?;
        for name in &self.names {
            write!(out, ",{name}")?;
        }
        writeln!(out)?;
        for (t, ts) in self.timestamps.iter().enumerate() {
            write!(out, "{}", ts.format(DATE_FORMAT))?;
            for column in &self.channels {
                write!(out, ",{}", column[t])?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

fn parse_timestamp(raw: &str, row: usize) -> Result<NaiveDateTime> {
    let raw = raw.trim();
    NaiveDateTime::parse_from_str(raw, DATE_FORMAT)
        .or_else(|_| NaiveDateTime::parse_from_str(raw, "%Y-%m-%d %H:%M"))
        .map_err(|e| Error::Parse {
            row,
            column: 0,
            message: format!("bad timestamp {raw:?}: {e}"),
        })
}

/// Loads an ETT-layout CSV. Missing cells are rejected, never imputed.
pub fn load_csv(path: impl AsRef<Path>) -> Result<TimeSeriesFrame> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file)
}

pub fn read_csv(reader: impl std::io::Read) -> Result<TimeSeriesFrame> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            row: 0,
            column: 0,
            message: e.to_string(),
        })?
        .clone();
    if headers.len() < 2 {
        return Err(Error::Parse {
            row: 0,
            column: headers.len(),
            message: "need a date column and at least one value column".into(),
        });
    }
    let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut timestamps = Vec::new();
    let mut channels = vec![Vec::new(); names.len()];
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            column: 0,
            message: e.to_string(),
        })?;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                row,
                column: record.len(),
                message: format!("expected {} cells, found {}", headers.len(), record.len()),
            });
        }
        timestamps.push(parse_timestamp(&record[0], row)?);
        for (v, cell) in record.iter().skip(1).enumerate() {
            let value: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                column: v + 1,
                message: format!("non-numeric cell {cell:?}"),
            })?;
            if !value.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: v + 1,
                    message: format!("non-finite cell {cell:?}"),
                });
            }
            channels[v].push(value);
        }
    }
    if timestamps.len() < 2 {
        return Err(Error::TooShort(format!(
            "{} data rows, need at least 2",
            timestamps.len()
        )));
    }
    let freq = timestamps[1] - timestamps[0];
    if freq <= TimeDelta::zero() {
        return Err(Error::MalformedSeries(
            "timestamps must be strictly increasing".into(),
        ));
    }
    for (t, pair) in timestamps.windows(2).enumerate() {
        if pair[1] - pair[0] != freq {
            return Err(Error::MalformedSeries(format!(
                "step between rows {} and {} is {}s, expected {}s",
                t + 1,
                t + 2,
                (pair[1] - pair[0]).num_seconds(),
                freq.num_seconds()
            )));
        }
    }
    Ok(TimeSeriesFrame {
        timestamps,
        channels,
        names,
        freq,
    })
}

/// Configured (train, validation, test) lengths, counted in target rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn new(train: usize, val: usize, test: usize) -> Self {
        Self { train, val, test }
    }

    /// 70/10/20 chronological split of `len` rows, used when no counts are configured.
    pub fn proportional(len: usize) -> Self {
        let train = len * 7 / 10;
        let val = len / 10;
        Self {
            train,
            val,
            test: len - train - val,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// Row ranges of the three splits plus usable window counts per channel
/// (stride 1). Validation and test contexts may reach back into the
/// preceding split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
    pub context_len: usize,
    pub horizon: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub test_samples: usize,
}

impl Splits {
    /// The rows windows for `split` may draw on, including borrowed context.
    pub fn window_range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Val => self.val.start.saturating_sub(self.context_len)..self.val.end,
            Split::Test => self.test.start.saturating_sub(self.context_len)..self.test.end,
        }
    }

    pub fn range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Val => self.val.clone(),
            Split::Test => self.test.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

pub fn make_splits(
    frame: &TimeSeriesFrame,
    counts: SplitCounts,
    context_len: usize,
    horizon: usize,
) -> Result<Splits> {
    if context_len == 0 || horizon == 0 {
        return Err(Error::Config(
            "context length and horizon must be positive".into(),
        ));
    }
    if counts.total() > frame.len() {
        return Err(Error::TooShort(format!(
            "split counts total {} rows, frame has {}",
            counts.total(),
            frame.len()
        )));
    }
    if counts.train < context_len + horizon {
        return Err(Error::SplitTooShort(format!(
            "train split has {} rows, needs at least {}",
            counts.train,
            context_len + horizon
        )));
    }
    for (name, len) in [("validation", counts.val), ("test", counts.test)] {
        if len < horizon {
            return Err(Error::SplitTooShort(format!(
                "{name} split has {len} rows, needs at least {horizon}"
            )));
        }
    }
    let val_start = counts.train;
    let test_start = val_start + counts.val;
    let end = test_start + counts.test;
    Ok(Splits {
        train: 0..val_start,
        val: val_start..test_start,
        test: test_start..end,
        context_len,
        horizon,
        train_samples: counts.train - context_len - horizon + 1,
        val_samples: counts.val - horizon + 1,
        test_samples: counts.test - horizon + 1,
    })
}

/// Per-channel z-score statistics (population standard deviation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Computes statistics over `rows`; rejects channels with zero spread.
    pub fn from_rows(frame: &TimeSeriesFrame, rows: Range<usize>) -> Result<Self> {
        if rows.is_empty() || rows.end > frame.len() {
            return Err(Error::Shape(format!(
                "statistics range {rows:?} invalid for {} rows",
                frame.len()
            )));
        }
        let n = rows.len() as f64;
        let mut mean = Vec::with_capacity(frame.n_channels());
        let mut std = Vec::with_capacity(frame.n_channels());
        for v in 0..frame.n_channels() {
            let column = &frame.channel(v)[rows.clone()];
            let m = column.iter().sum::<f64>() / n;
            let var = column.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            let s = var.sqrt();
            if !(s > 1e-12 * m.abs().max(1.0)) {
                return Err(Error::DegenerateChannel {
                    channel: v,
                    name: frame.names()[v].clone(),
                });
            }
            mean.push(m);
            std.push(s);
        }
        Ok(Self { mean, std })
    }

    fn check(&self, frame: &TimeSeriesFrame) -> Result<()> {
        if self.mean.len() != frame.n_channels() || self.std.len() != frame.n_channels() {
            return Err(Error::Shape(format!(
                "statistics for {} channels, frame has {}",
                self.mean.len(),
                frame.n_channels()
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, frame: &TimeSeriesFrame) -> Result<TimeSeriesFrame> {
        self.check(frame)?;
        Ok(frame.map_channels(|v, x| (x - self.mean[v]) / self.std[v]))
    }

    pub fn denormalize(&self, frame: &TimeSeriesFrame) -> Result<TimeSeriesFrame> {
        self.check(frame)?;
        Ok(frame.map_channels(|v, x| x * self.std[v] + self.mean[v]))
    }

    pub fn denormalize_value(&self, channel: usize, x: f64) -> f64 {
        x * self.std[channel] + self.mean[channel]
    }
}

/// One univariate training or evaluation window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub channel: usize,
    /// Row index of the first context step.
    pub offset: usize,
    pub start: NaiveDateTime,
    pub context: Vec<f64>,
    pub target: Vec<f64>,
}

/// Number of windows per channel in a range of `len` rows.
pub fn window_count(len: usize, context_len: usize, horizon: usize, stride: usize) -> usize {
    let span = context_len + horizon;
    if stride == 0 || len < span {
        0
    } else {
        (len - span) / stride + 1
    }
}

/// Iterator over windows, channel-major then time-major.
pub struct Windows<'a> {
    frame: &'a TimeSeriesFrame,
    range: Range<usize>,
    context_len: usize,
    horizon: usize,
    stride: usize,
    per_channel: usize,
    next: usize,
}

impl Iterator for Windows<'_> {
    type Item = WindowSample;

    fn next(&mut self) -> Option<WindowSample> {
        if self.per_channel == 0 || self.next >= self.per_channel * self.frame.n_channels() {
            return None;
        }
        let channel = self.next / self.per_channel;
        let offset = self.range.start + (self.next % self.per_channel) * self.stride;
        self.next += 1;
        let column = self.frame.channel(channel);
        let split = offset + self.context_len;
        Some(WindowSample {
            channel,
            offset,
            start: self.frame.timestamp(offset),
            context: column[offset..split].to_vec(),
            target: column[split..split + self.horizon].to_vec(),
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.per_channel * self.frame.n_channels() - self.next;
        (left, Some(left))
    }
}

impl ExactSizeIterator for Windows<'_> {}

pub fn sample_windows(
    frame: &TimeSeriesFrame,
    range: Range<usize>,
    context_len: usize,
    horizon: usize,
    stride: usize,
) -> Result<Windows<'_>> {
    if range.end > frame.len() || range.start > range.end {
        return Err(Error::Shape(format!(
            "range {range:?} outside frame of {} rows",
            frame.len()
        )));
    }
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    if range.len() < context_len + horizon {
        return Err(Error::SplitTooShort(format!(
            "{} rows cannot hold a window of {}",
            range.len(),
            context_len + horizon
        )));
    }
    Ok(Windows {
        frame,
        per_channel: window_count(range.len(), context_len, horizon, stride),
        range,
        context_len,
        horizon,
        stride,
        next: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn start() -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2016, 7, 1)
            .unwrap()
            .and_hms_opt(0, 0, 0)
            .unwrap()
    }

    fn frame(channels: Vec<Vec<f64>>) -> TimeSeriesFrame {
        let names = (0..channels.len()).map(|v| format!("c{v}")).collect();
        TimeSeriesFrame::from_channels(start(), TimeDelta::hours(1), names, channels).unwrap()
    }

    #[test]
    fn loads_minimal_csv() {
        let csv = "date,OT\n2016-07-01 00:00:00,1.5\n2016-07-01 01:00:00,2\n\
                   2016-07-01 02:00:00,3\n2016-07-01 03:00:00,-4e-1\n";
        let f = read_csv(csv.as_bytes()).unwrap();
        assert_eq!(f.len(), 4);
        assert_eq!(f.n_channels(), 1);
        assert_eq!(f.freq(), TimeDelta::hours(1));
        assert_eq!(f.value(3, 0), -0.4);
    }

    #[test]
    fn rejects_gap() {
        let csv = "date,OT\n2016-07-01 00:00:00,1\n2016-07-01 01:00:00,2\n2016-07-01 03:00:00,3\n";
        assert!(matches!(read_csv(csv.as_bytes()), Err(Error::MalformedSeries(_))));
    }

    #[test]
    fn rejects_non_numeric_with_position() {
        let csv = "date,a,b\n2016-07-01 00:00:00,1,2\n2016-07-01 01:00:00,2,x\n";
        match read_csv(csv.as_bytes()) {
            Err(Error::Parse { row, column, .. }) => assert_eq!((row, column), (2, 2)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_missing_cell() {
        let csv = "date,a\n2016-07-01 00:00:00,1\n2016-07-01 01:00:00,\n";
        assert!(matches!(read_csv(csv.as_bytes()), Err(Error::Parse { row: 2, .. })));
    }

    #[test]
    fn rejects_single_row() {
        let csv = "date,a\n2016-07-01 00:00:00,1\n";
        assert!(matches!(read_csv(csv.as_bytes()), Err(Error::TooShort(_))));
    }

    #[test]
    fn split_too_short() {
        let f = frame(vec![(0..14).map(f64::from).collect()]);
        let err = make_splits(&f, SplitCounts::new(10, 2, 2), 8, 4).unwrap_err();
        assert!(matches!(err, Error::SplitTooShort(_)));
    }

    #[test]
    fn z_score_example() {
        let f = frame(vec![vec![2.0, 4.0, 6.0]]);
        let stats = NormStats::from_rows(&f, 0..3).unwrap();
        assert_eq!(stats.mean[0], 4.0);
        assert!((stats.std[0] - 1.632_993_161_855_452).abs() < 1e-12);
        let n = stats.normalize(&f).unwrap();
        let expect = [-1.224_744_871_391_589, 0.0, 1.224_744_871_391_589];
        for (a, b) in n.channel(0).iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_channel_rejected() {
        let f = frame(vec![vec![1.0, 2.0, 3.0], vec![0.3; 3]]);
        assert!(matches!(
            NormStats::from_rows(&f, 0..3),
            Err(Error::DegenerateChannel { channel: 1, .. })
        ));
    }

    #[test]
    fn stats_channel_mismatch() {
        let f = frame(vec![vec![1.0, 2.0, 3.0]]);
        let stats = NormStats {
            mean: vec![0.0, 0.0],
            std: vec![1.0, 1.0],
        };
        assert!(matches!(stats.normalize(&f), Err(Error::Shape(_))));
    }

    #[test]
    fn window_counts_examples() {
        let one = frame(vec![(0..12).map(f64::from).collect()]);
        assert_eq!(sample_windows(&one, 0..12, 8, 4, 1).unwrap().count(), 1);

        let two = frame(vec![(0..14).map(f64::from).collect(); 2]);
        assert_eq!(sample_windows(&two, 0..14, 8, 4, 1).unwrap().count(), 6);

        let long = frame(vec![(0..20).map(f64::from).collect()]);
        let w: Vec<_> = sample_windows(&long, 0..20, 8, 4, 4).unwrap().collect();
        assert_eq!(w.len(), 3);
        assert_eq!(w[2].offset, 8);
        assert_eq!(w[2].target, vec![16.0, 17.0, 18.0, 19.0]);
    }

    #[test]
    fn target_follows_context() {
        let f = frame(vec![(0..30).map(f64::from).collect()]);
        for w in sample_windows(&f, 5..30, 6, 3, 2).unwrap() {
            assert_eq!(w.target[0], w.context[5] + 1.0);
            assert_eq!(w.start, f.timestamp(w.offset));
        }
    }
}
