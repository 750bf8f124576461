//! End-to-end runs and the comparison harnesses built on them: component
//! ablation, MoE promotion across model widths and one-axis sweeps.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{Split, TimeSeriesFrame};
use crate::dataset::{build_examples, collect_prompts, Dataset, Layout};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_horizons, persistence_baseline, promotion, round1, ForecastReport, Forecaster,
    LinearBaseline,
};
use crate::model::{Checkpoint, FusionMode, Model};
use crate::textenc::{import_external, precompute_cache, CachedEncoder, EmbeddingCache, HashEncoder};
use crate::train::{train, Example, RunRecord, TrainOutcome};

/// A dataset with its embedding cache and training/validation examples for
/// one segment layout and hidden width.
pub struct Prepared {
    pub dataset: Dataset,
    pub layout: Layout,
    pub cache: EmbeddingCache,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    hidden_dim: usize,
    text_seed: u64,
}

impl Prepared {
    pub fn new(name: &str, frame: TimeSeriesFrame, cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let dataset = Dataset::prepare(name, frame, cfg.split_counts, cfg.context_len, cfg.base_horizon)?;
        Self::from_dataset(dataset, cfg)
    }

    pub fn from_dataset(dataset: Dataset, cfg: &RunConfig) -> Result<Self> {
        let layout = cfg.layout()?;
        let frame = &dataset.normalized;
        let train_rows = dataset.window_range(Split::Train);
        let val_rows = dataset.window_range(Split::Val);
        let cache = match &cfg.embeddings {
            Some(path) => import_external(path, cfg.hidden_dim)?,
            None => {
                let mut prompts = collect_prompts(frame, train_rows.clone(), layout, cfg.stride, cfg.prompt_decimals)?;
                prompts.extend(collect_prompts(frame, val_rows.clone(), layout, 1, cfg.prompt_decimals)?);
                precompute_cache(prompts.iter().map(String::as_str), cfg.hidden_dim, cfg.text_seed)?
            }
        };
        let encoder = CachedEncoder {
            cache: &cache,
            fallback: None,
        };
        let train = build_examples(frame, train_rows, layout, cfg.stride, cfg.prompt_decimals, &encoder)?;
        let val = build_examples(frame, val_rows, layout, 1, cfg.prompt_decimals, &encoder)?;
        Ok(Self {
            dataset,
            layout,
            cache,
            train,
            val,
            hidden_dim: cfg.hidden_dim,
            text_seed: cfg.text_seed,
        })
    }

    /// Whether `cfg` can reuse these examples.
    pub fn matches(&self, cfg: &RunConfig) -> bool {
        self.layout.context_len == cfg.context_len
            && self.layout.segment_len == cfg.segment_len
            && self.hidden_dim == cfg.hidden_dim
            && self.text_seed == cfg.text_seed
    }

    /// Embedder for forecasting: cache hits first, the built-in encoder for
    /// rolled-out segments unless the cache came from an external model.
    pub fn embedder(&self) -> CachedEncoder<'_> {
        let fallback = match self.cache.source() {
            crate::textenc::CacheSource::Builtin => Some(HashEncoder::new(self.hidden_dim, self.text_seed)),
            crate::textenc::CacheSource::External => None,
        };
        CachedEncoder {
            cache: &self.cache,
            fallback,
        }
    }

    pub fn forecaster<'a>(&'a self, model: &'a Model, embedder: &'a CachedEncoder<'a>, cfg: &RunConfig) -> Forecaster<'a> {
        Forecaster {
            model,
            embedder,
            freq: self.dataset.normalized.freq(),
            decimals: cfg.prompt_decimals,
        }
    }
}

pub struct RunOutcome {
    pub model: Model,
    pub training: TrainOutcome,
    pub record: RunRecord,
    pub report: ForecastReport,
}

impl RunOutcome {
    pub fn checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        Checkpoint::from_model(&self.model, cfg.seed, Some(cfg.to_json()))
    }
}

/// Test-split report of `model` over `cfg.horizons`.
pub fn evaluate_model(prepared: &Prepared, model: &Model, cfg: &RunConfig) -> Result<ForecastReport> {
    let embedder = prepared.embedder();
    let forecaster = prepared.forecaster(model, &embedder, cfg);
    let horizons = evaluate_horizons(&prepared.dataset, cfg.context_len, &cfg.horizons, cfg.eval_stride, |w, h| {
        forecaster.rolling(w.context, w.start, h as i64)
    })?;
    Ok(ForecastReport::new(
        prepared.dataset.name.clone(),
        "model",
        horizons,
        cfg.to_json(),
        vec![cfg.seed],
    ))
}

pub fn evaluate_persistence(prepared: &Prepared, cfg: &RunConfig) -> Result<ForecastReport> {
    let horizons = evaluate_horizons(&prepared.dataset, cfg.context_len, &cfg.horizons, cfg.eval_stride, |w, h| {
        Ok(persistence_baseline(w.context, h))
    })?;
    Ok(ForecastReport::new(
        prepared.dataset.name.clone(),
        "persistence",
        horizons,
        cfg.to_json(),
        vec![],
    ))
}

/// A linear baseline per horizon, fit on the training split.
pub fn evaluate_linear(prepared: &Prepared, cfg: &RunConfig) -> Result<ForecastReport> {
    let frame = &prepared.dataset.normalized;
    let longest = *cfg.horizons.iter().max().ok_or_else(|| Error::Config("no horizons".into()))?;
    let fit = LinearBaseline::fit(frame, prepared.dataset.window_range(Split::Train), cfg.context_len, longest, cfg.stride)?;
    let horizons = evaluate_horizons(&prepared.dataset, cfg.context_len, &cfg.horizons, cfg.eval_stride, |w, h| {
        let mut p = fit.predict(w.context)?;
        p.truncate(h);
        Ok(p)
    })?;
    Ok(ForecastReport::new(
        prepared.dataset.name.clone(),
        "linear",
        horizons,
        cfg.to_json(),
        vec![],
    ))
}

/// Trains a fresh model under `cfg` and evaluates it on the test split.
pub fn run(prepared: &Prepared, cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    if !prepared.matches(cfg) {
        return Err(Error::Config(
            "prepared examples were built for a different layout or width".into(),
        ));
    }
    let model = Model::new(cfg.model_config(), cfg.seed)?;
    let training = train(model, &prepared.train, &prepared.val, &cfg.train_config())?;
    let report = evaluate_model(prepared, &training.model, cfg)?;
    let record = training.record(cfg.to_json(), cfg.seed);
    Ok(RunOutcome {
        model: training.model.clone(),
        training,
        record,
        report,
    })
}

pub fn run_experiment(name: &str, frame: TimeSeriesFrame, cfg: &RunConfig) -> Result<RunOutcome> {
    let prepared = Prepared::new(name, frame, cfg)?;
    run(&prepared, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Original,
    WithoutContext,
    WithoutFusion,
    WithoutMoe,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Original,
        Variant::WithoutContext,
        Variant::WithoutFusion,
        Variant::WithoutMoe,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Original => "Original",
            Variant::WithoutContext => "w/o Context",
            Variant::WithoutFusion => "w/o Fusion",
            Variant::WithoutMoe => "w/o MoE",
        }
    }

    /// The configuration this row trains with.
    pub fn apply(self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        match self {
            Variant::Original => {}
            Variant::WithoutContext => c.text_context = false,
            Variant::WithoutFusion => c.fusion = FusionMode::SeriesOnly,
            Variant::WithoutMoe => c.experts = 1,
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub val_mse: f64,
    pub test_mse: f64,
    pub test_mae: f64,
}

/// Mean and population std over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
}

impl Spread {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        let n = v.len().max(1) as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub context: bool,
    pub fusion: bool,
    pub moe: bool,
    pub runs: Vec<SeedResult>,
    pub val_mse: Spread,
    pub test_mse: Spread,
    pub test_mae: Spread,
    /// Whether the row's checkpoints carry gate parameters.
    pub gate_params: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub dataset: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v.label())
    }

    /// Seeds in which the Original row's validation MSE is at most every
    /// ablated row's.
    pub fn original_wins(&self) -> usize {
        let Some(orig) = self.row(Variant::Original) else {
            return 0;
        };
        (0..self.seeds.len())
            .filter(|&i| {
                self.rows
                    .iter()
                    .filter(|r| r.variant != orig.variant)
                    .all(|r| orig.runs[i].val_mse <= r.runs[i].val_mse)
            })
            .count()
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<12} {:>7} {:>7} {:>5} {:>16} {:>16}\n",
            "Variant", "Context", "Fusion", "MoE", "MSE", "MAE"
        );
        let mark = |b: bool| if b { "yes" } else { "no" };
        for r in &self.rows {
            out += &format!(
                "{:<12} {:>7} {:>7} {:>5} {:>7.4} ± {:<6.4} {:>7.4} ± {:<6.4}\n",
                r.variant,
                mark(r.context),
                mark(r.fusion),
                mark(r.moe),
                r.test_mse.mean,
                r.test_mse.std,
                r.test_mae.mean,
                r.test_mae.std
            );
        }
        out
    }
}

/// Trains every ablation variant for every seed on the same examples.
pub fn ablation_run(prepared: &Prepared, base: &RunConfig, seeds: &[u64]) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for v in Variant::ALL {
        let mut runs = Vec::new();
        let mut gate_params = false;
        for &seed in seeds {
            let cfg = RunConfig { seed, ..v.apply(base) };
            let out = run(prepared, &cfg)?;
            gate_params |= out.checkpoint(&cfg).has_block("gate_W");
            runs.push(SeedResult {
                seed,
                val_mse: out.training.best_val_mse,
                test_mse: out.report.avg_mse,
                test_mae: out.report.avg_mae,
            });
        }
        let cfg = v.apply(base);
        rows.push(AblationRow {
            variant: v.label().into(),
            context: cfg.text_context,
            fusion: cfg.fusion == FusionMode::Adaptive,
            moe: cfg.experts > 1,
            val_mse: Spread::of(runs.iter().map(|r| r.val_mse)),
            test_mse: Spread::of(runs.iter().map(|r| r.test_mse)),
            test_mae: Spread::of(runs.iter().map(|r| r.test_mae)),
            runs,
            gate_params,
        });
    }
    Ok(AblationReport {
        dataset: prepared.dataset.name.clone(),
        config: base.to_json(),
        seeds: seeds.to_vec(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromotionCell {
    pub runs: Vec<SeedResult>,
    pub val_mse: f64,
    pub mse: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromotionRow {
    pub hidden_dim: usize,
    pub experts: usize,
    pub original: PromotionCell,
    pub moe: PromotionCell,
    /// Relative test MSE reduction in percent, rounded to one decimal.
    pub promotion_mse: f64,
    pub promotion_mae: f64,
}

impl PromotionRow {
    pub fn from_cells(hidden_dim: usize, experts: usize, original: PromotionCell, moe: PromotionCell) -> Self {
        Self {
            hidden_dim,
            experts,
            promotion_mse: round1(promotion(original.mse, moe.mse)),
            promotion_mae: round1(promotion(original.mae, moe.mae)),
            original,
            moe,
        }
    }

    /// Seeds in which the MoE model's validation MSE is at most the
    /// single-expert model's.
    pub fn moe_wins(&self) -> usize {
        self.original
            .runs
            .iter()
            .zip(&self.moe.runs)
            .filter(|(o, m)| m.val_mse <= o.val_mse)
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromotionReport {
    pub dataset: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub rows: Vec<PromotionRow>,
}

impl PromotionReport {
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:>6} {:<10} {:>8} {:>8}\n",
            "Width", "Method", "MSE", "MAE"
        );
        for r in &self.rows {
            out += &format!("{:>6} {:<10} {:>8.4} {:>8.4}\n", r.hidden_dim, "Original", r.original.mse, r.original.mae);
            out += &format!("{:>6} {:<10} {:>8.4} {:>8.4}\n", "", format!("+MoE(K={})", r.experts), r.moe.mse, r.moe.mae);
            out += &format!(
                "{:>6} {:<10} {:>8} {:>8}\n",
                "",
                "Promotion",
                format!("{:+.1}%", r.promotion_mse),
                format!("{:+.1}%", r.promotion_mae)
            );
        }
        out
    }
}

fn cell(runs: Vec<SeedResult>) -> PromotionCell {
    PromotionCell {
        val_mse: Spread::of(runs.iter().map(|r| r.val_mse)).mean,
        mse: Spread::of(runs.iter().map(|r| r.test_mse)).mean,
        mae: Spread::of(runs.iter().map(|r| r.test_mae)).mean,
        runs,
    }
}

/// Single expert against `base.experts` experts (4 if the base config has
/// one) for each hidden width.
pub fn promotion_run(
    name: &str,
    frame: &TimeSeriesFrame,
    base: &RunConfig,
    widths: &[usize],
    seeds: &[u64],
) -> Result<PromotionReport> {
    if widths.is_empty() || seeds.is_empty() {
        return Err(Error::Config("promotion needs at least one width and one seed".into()));
    }
    let experts = if base.experts > 1 { base.experts } else { 4 };
    let mut rows = Vec::new();
    for &width in widths {
        let sized = RunConfig {
            hidden_dim: width,
            ..base.clone()
        };
        sized.validate()?;
        let prepared = Prepared::new(name, frame.clone(), &sized)?;
        let mut cells = Vec::new();
        for k in [1, experts] {
            let mut runs = Vec::new();
            for &seed in seeds {
                let cfg = RunConfig {
                    experts: k,
                    seed,
                    ..sized.clone()
                };
                let out = run(&prepared, &cfg)?;
                runs.push(SeedResult {
                    seed,
                    val_mse: out.training.best_val_mse,
                    test_mse: out.report.avg_mse,
                    test_mae: out.report.avg_mae,
                });
            }
            cells.push(cell(runs));
        }
        let moe = cells.pop().expect("two cells");
        let original = cells.pop().expect("two cells");
        rows.push(PromotionRow::from_cells(width, experts, original, moe));
    }
    Ok(PromotionReport {
        dataset: name.into(),
        config: base.to_json(),
        seeds: seeds.to_vec(),
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    HiddenDim,
    InputLen,
    SegmentLen,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hidden_dim" => Ok(Self::HiddenDim),
            "input_len" => Ok(Self::InputLen),
            "segment_len" => Ok(Self::SegmentLen),
            other => Err(Error::Config(format!(
                "sweep axis must be hidden_dim, input_len or segment_len, got {other:?}"
            ))),
        }
    }
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::HiddenDim => "hidden_dim",
            Self::InputLen => "input_len",
            Self::SegmentLen => "segment_len",
        }
    }

    pub fn apply(self, cfg: &RunConfig, value: usize) -> RunConfig {
        let mut c = cfg.clone();
        match self {
            Self::HiddenDim => c.hidden_dim = value,
            Self::InputLen => c.context_len = value,
            Self::SegmentLen => c.segment_len = value,
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: usize,
    pub val_mse: f64,
    pub mse: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub dataset: String,
    pub axis: SweepAxis,
    pub config: serde_json::Value,
    pub points: Vec<SweepPoint>,
    /// Axis value with the lowest average test MSE.
    pub argmin: usize,
}

impl SweepReport {
    /// `x,mse,mae` rows for plotting.
    pub fn plot_csv(&self) -> String {
        let mut out = String::from("x,mse,mae\n");
        for p in &self.points {
            out += &format!("{},{},{}\n", p.value, p.mse, p.mae);
        }
        out
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:>12} {:>10} {:>10}\n", self.axis.name(), "MSE", "MAE");
        for p in &self.points {
            let star = if p.value == self.argmin { " *" } else { "" };
            out += &format!("{:>12} {:>10.4} {:>10.4}{star}\n", p.value, p.mse, p.mae);
        }
        out
    }
}

/// One full train and evaluation per axis value, everything else fixed.
pub fn sweep_run(
    name: &str,
    frame: &TimeSeriesFrame,
    base: &RunConfig,
    axis: SweepAxis,
    values: &[usize],
) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let mut points = Vec::new();
    for &value in values {
        let cfg = axis.apply(base, value);
        let out = run_experiment(name, frame.clone(), &cfg)?;
        points.push(SweepPoint {
            value,
            val_mse: out.training.best_val_mse,
            mse: out.report.avg_mse,
            mae: out.report.avg_mae,
        });
    }
    let argmin = points
        .iter()
        .min_by(|a, b| a.mse.total_cmp(&b.mse))
        .map(|p| p.value)
        .expect("non-empty");
    Ok(SweepReport {
        dataset: name.into(),
        axis,
        config: base.to_json(),
        points,
        argmin,
    })
}

/// `(t, truth, prediction)` on the original scale for the first test window
/// of `channel`.
pub fn showcase(
    prepared: &Prepared,
    model: &Model,
    cfg: &RunConfig,
    channel: usize,
    horizon: usize,
) -> Result<Vec<(String, f64, f64)>> {
    let ds = &prepared.dataset;
    if channel >= ds.normalized.n_channels() {
        return Err(Error::Config(format!("channel {channel} out of range")));
    }
    let test = ds.splits.test.clone();
    if test.len() < horizon || test.start < cfg.context_len {
        return Err(Error::SplitTooShort(format!("test split cannot hold a {horizon}-step window")));
    }
    let start_row = test.start - cfg.context_len;
    let column = ds.normalized.channel(channel);
    let embedder = prepared.embedder();
    let pred = prepared.forecaster(model, &embedder, cfg).rolling(
        &column[start_row..test.start],
        ds.normalized.timestamp(start_row),
        horizon as i64,
    )?;
    Ok((0..horizon)
        .map(|i| {
            let t = test.start + i;
            (
                ds.normalized.timestamp(t).format(crate::data::DATE_FORMAT).to_string(),
                ds.raw.value(t, channel),
                ds.stats.denormalize_value(channel, pred[i]),
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_toggle_one_component() {
        let base = RunConfig::default();
        assert_eq!(Variant::Original.apply(&base), base);
        assert!(!Variant::WithoutContext.apply(&base).text_context);
        assert_eq!(Variant::WithoutFusion.apply(&base).fusion, FusionMode::SeriesOnly);
        assert_eq!(Variant::WithoutMoe.apply(&base).experts, 1);
    }

    #[test]
    fn spread_is_population() {
        let s = Spread::of([1.0, 3.0]);
        assert_eq!((s.mean, s.std), (2.0, 1.0));
    }

    #[test]
    fn identical_cells_promote_zero() {
        let c = PromotionCell {
            runs: vec![],
            val_mse: 0.3,
            mse: 0.3,
            mae: 0.4,
        };
        let r = PromotionRow::from_cells(64, 4, c.clone(), c);
        assert_eq!(r.promotion_mse, 0.0);
    }
}
