//! Segment partitioning and the per-segment text prompts (timestamp phrase
//! followed by the statistical summary).

use chrono::{NaiveDateTime, TimeDelta};
use serde::Serialize;

use crate::error::{Error, Result};

pub const DEFAULT_DECIMALS: usize = 4;
const PROMPT_TIME_FORMAT: &str = "%d-%b-%Y %H:%M";

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    /// 1-based position within the context.
    pub index: usize,
    pub start: NaiveDateTime,
    pub end: NaiveDateTime,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StatDescriptor {
    pub mean: f64,
    pub std: f64,
    pub change: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptRecord {
    pub segment_index: usize,
    pub timestamp_text: String,
    pub stat_text: String,
    pub prompt: String,
}

/// Splits `context` into `floor(len / segment_len)` consecutive segments.
/// A trailing remainder shorter than one segment is dropped.
pub fn segment_series(
    context: &[f64],
    start: NaiveDateTime,
    freq: TimeDelta,
    segment_len: usize,
) -> Result<Vec<Segment>> {
    if segment_len < 2 {
        return Err(Error::Config(format!(
            "segment length must be at least 2, got {segment_len}"
        )));
    }
    if segment_len > context.len() {
        return Err(Error::SegmentTooLong {
            segment_len,
            context_len: context.len(),
        });
    }
    Ok(context
        .chunks_exact(segment_len)
        .enumerate()
        .map(|(i, values)| {
            let first = start + freq * (i * segment_len) as i32;
            Segment {
                index: i + 1,
                start: first,
                end: first + freq * (segment_len - 1) as i32,
                values: values.to_vec(),
            }
        })
        .collect())
}

/// Mean, population standard deviation and net change (last minus first).
pub fn stat_descriptor(values: &[f64]) -> StatDescriptor {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let change = match (values.first(), values.last()) {
        (Some(first), Some(last)) => last - first,
        _ => 0.0,
    };
    StatDescriptor {
        mean,
        std: var.sqrt(),
        change,
    }
}

pub fn render_timestamp_descriptor(start: NaiveDateTime, end: NaiveDateTime) -> String {
    format!(
        "The time range of this sequence is from {} to {}",
        start.format(PROMPT_TIME_FORMAT),
        end.format(PROMPT_TIME_FORMAT)
    )
}

fn fixed(x: f64, decimals: usize) -> String {
    let s = format!("{x:.decimals$}");
    // "-0.0000" and "0.0000" describe the same value; keep one spelling.
    match s.strip_prefix('-') {
        Some(rest) if rest.bytes().all(|b| b == b'0' || b == b'.') => rest.to_string(),
        _ => s,
    }
}

pub fn render_stat_text(stats: &StatDescriptor, decimals: usize) -> String {
    format!(
        "Mean is {}, standard deviation is {}, change is {}.",
        fixed(stats.mean, decimals),
        fixed(stats.std, decimals),
        fixed(stats.change, decimals)
    )
}

pub fn render_prompt(
    segment_index: usize,
    timestamp_text: String,
    stats: &StatDescriptor,
    decimals: usize,
) -> PromptRecord {
    let stat_text = render_stat_text(stats, decimals);
    let prompt = format!("{timestamp_text} {stat_text}");
    PromptRecord {
        segment_index,
        timestamp_text,
        stat_text,
        prompt,
    }
}

/// Renders the full prompt for one segment.
pub fn describe(segment: &Segment, decimals: usize) -> (StatDescriptor, PromptRecord) {
    let stats = stat_descriptor(&segment.values);
    let record = render_prompt(
        segment.index,
        render_timestamp_descriptor(segment.start, segment.end),
        &stats,
        decimals,
    );
    (stats, record)
}

/// Prompt text for a raw slice of values starting at `start`.
pub fn prompt_for(values: &[f64], start: NaiveDateTime, freq: TimeDelta, decimals: usize) -> String {
    let end = start + freq * (values.len() as i32 - 1);
    let stats = stat_descriptor(values);
    format!(
        "{} {}",
        render_timestamp_descriptor(start, end),
        render_stat_text(&stats, decimals)
    )
}

/// One line of the `dump-prompts` output.
#[derive(Debug, Clone, Serialize)]
pub struct PromptDump {
    pub index: usize,
    pub start: String,
    pub end: String,
    pub mean: f64,
    pub std: f64,
    pub change: f64,
    pub prompt: String,
}

pub fn dump_prompts(
    context: &[f64],
    start: NaiveDateTime,
    freq: TimeDelta,
    segment_len: usize,
    decimals: usize,
) -> Result<Vec<PromptDump>> {
    Ok(segment_series(context, start, freq, segment_len)?
        .iter()
        .map(|seg| {
            let (stats, record) = describe(seg, decimals);
            PromptDump {
                index: seg.index,
                start: seg.start.format(crate::data::DATE_FORMAT).to_string(),
                end: seg.end.format(crate::data::DATE_FORMAT).to_string(),
                mean: stats.mean,
                std: stats.std,
                change: stats.change,
                prompt: record.prompt,
            }
        })
        .collect())
}
