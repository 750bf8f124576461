//! From a loaded frame to model-ready examples: normalization, splits,
//! segment layout, prompts and their embeddings.

use std::collections::BTreeSet;
use std::ops::Range;

use chrono::{NaiveDateTime, TimeDelta};
use rayon::prelude::*;

use crate::data::{make_splits, sample_windows, NormStats, Split, SplitCounts, Splits, TimeSeriesFrame};
use crate::descriptors::prompt_for;
use crate::error::{Error, Result};
use crate::model::SeqInput;
use crate::tensor::Mat;
use crate::textenc::TextEmbedder;
use crate::train::Example;

/// How a context of `context_len` steps is cut into segments.
///
/// The model reads the most recent `n_segments · segment_len` steps; the
/// oldest `skip()` steps of the context are unused.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub context_len: usize,
    pub segment_len: usize,
    pub n_segments: usize,
}

impl Layout {
    pub fn new(context_len: usize, segment_len: usize) -> Result<Self> {
        if segment_len < 2 {
            return Err(Error::Config("segment_len must be at least 2".into()));
        }
        if segment_len > context_len {
            return Err(Error::SegmentTooLong {
                segment_len,
                context_len,
            });
        }
        Ok(Self {
            context_len,
            segment_len,
            n_segments: context_len / segment_len,
        })
    }

    pub fn used(&self) -> usize {
        self.n_segments * self.segment_len
    }

    pub fn skip(&self) -> usize {
        self.context_len - self.used()
    }
}

/// Prompts for consecutive segments of `values` (a multiple of `segment_len`).
pub fn segment_prompts(
    values: &[f64],
    start: NaiveDateTime,
    freq: TimeDelta,
    segment_len: usize,
    decimals: usize,
) -> Vec<String> {
    values
        .chunks_exact(segment_len)
        .enumerate()
        .map(|(i, seg)| prompt_for(seg, start + freq * (i * segment_len) as i32, freq, decimals))
        .collect()
}

/// Model input for segment-aligned `values` starting at `start`.
pub fn encode_segments(
    values: &[f64],
    start: NaiveDateTime,
    freq: TimeDelta,
    segment_len: usize,
    decimals: usize,
    embedder: &dyn TextEmbedder,
) -> Result<SeqInput> {
    if values.is_empty() || !values.len().is_multiple_of(segment_len) {
        return Err(Error::Shape(format!(
            "{} values do not tile into segments of {segment_len}",
            values.len()
        )));
    }
    let n = values.len() / segment_len;
    let mut text = Vec::with_capacity(n * embedder.dim());
    for prompt in segment_prompts(values, start, freq, segment_len, decimals) {
        text.extend(embedder.embed(&prompt)?);
    }
    Ok(SeqInput {
        segments: Mat::from_vec(n, segment_len, values.to_vec()),
        text: Mat::from_vec(n, embedder.dim(), text),
    })
}

/// Every distinct prompt the examples of `range` will ask for.
pub fn collect_prompts(
    frame: &TimeSeriesFrame,
    range: Range<usize>,
    layout: Layout,
    stride: usize,
    decimals: usize,
) -> Result<BTreeSet<String>> {
    let s = layout.segment_len;
    let mut out = BTreeSet::new();
    for w in sample_windows(frame, range, layout.context_len, s, stride)? {
        let start = frame.timestamp(w.offset + layout.skip());
        out.extend(segment_prompts(&w.context[layout.skip()..], start, frame.freq(), s, decimals));
    }
    Ok(out)
}

/// Teacher-forced examples: each window supplies N input segments and the N
/// segments that follow them, the last of which lies just past the context.
pub fn build_examples(
    frame: &TimeSeriesFrame,
    range: Range<usize>,
    layout: Layout,
    stride: usize,
    decimals: usize,
    embedder: &dyn TextEmbedder,
) -> Result<Vec<Example>> {
    let s = layout.segment_len;
    let windows: Vec<_> = sample_windows(frame, range, layout.context_len, s, stride)?.collect();
    windows
        .par_iter()
        .map(|w| {
            let aligned = &w.context[layout.skip()..];
            let start = frame.timestamp(w.offset + layout.skip());
            let input = encode_segments(aligned, start, frame.freq(), s, decimals, embedder)?;
            let mut next = aligned[s..].to_vec();
            next.extend_from_slice(&w.target);
            Ok(Example {
                channel: w.channel,
                offset: w.offset + layout.skip(),
                input,
                targets: Mat::from_vec(layout.n_segments, s, next),
            })
        })
        .collect()
}

/// A frame together with its splits and train-split normalization.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub raw: TimeSeriesFrame,
    pub normalized: TimeSeriesFrame,
    pub stats: NormStats,
    pub splits: Splits,
}

impl Dataset {
    /// Splits with `counts` (70/10/20 of the frame when `None`) and
    /// normalizes with train statistics.
    pub fn prepare(
        name: impl Into<String>,
        frame: TimeSeriesFrame,
        counts: Option<SplitCounts>,
        context_len: usize,
        horizon: usize,
    ) -> Result<Self> {
        let counts = counts.unwrap_or_else(|| SplitCounts::proportional(frame.len()));
        let splits = make_splits(&frame, counts, context_len, horizon)?;
        let stats = NormStats::from_rows(&frame, splits.train.clone())?;
        let normalized = stats.normalize(&frame)?;
        Ok(Self {
            name: name.into(),
            raw: frame,
            normalized,
            stats,
            splits,
        })
    }

    /// Rows a split's windows may read, contexts included.
    pub fn window_range(&self, split: Split) -> Range<usize> {
        self.splits.window_range(split)
    }
}
