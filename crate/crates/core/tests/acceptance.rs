//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use chrono::{NaiveDate, TimeDelta};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segmoe::data::{make_splits, window_count, NormStats, SplitCounts, TimeSeriesFrame};
use segmoe::descriptors::segment_series;
use segmoe::eval::{format_promotion, roll_steps, Forecaster};
use segmoe::experiment::{ablation_run, evaluate_persistence, promotion_run, run, PromotionCell, PromotionRow, Prepared, Variant};
use segmoe::model::gradcheck::run_standard;
use segmoe::model::{backbone_forward, forward, fuse, moe_forward, Checkpoint, Model, ModelConfig, SeqInput};
use segmoe::synth::{SynthKind, SynthSpec};
use segmoe::tensor::{sigmoid, softmax_in_place, Mat};
use segmoe::textenc::{precompute_cache, CacheSource, CachedEncoder, EmbeddingCache, HashEncoder, TextEmbedder};
use segmoe::RunConfig;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect())
}

fn random_input(rng: &mut ChaCha8Rng, n: usize, s: usize, d: usize) -> SeqInput {
    SeqInput {
        segments: random_mat(rng, n, s, 2.0),
        text: random_mat(rng, n, d, 0.5),
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn bitwise_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn base_config(pairs: &[&str]) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_overrides(pairs).expect("valid overrides");
    cfg
}

fn two_regime() -> TimeSeriesFrame {
    SynthSpec {
        kind: SynthKind::TwoRegime,
        length: 3000,
        noise: 0.05,
        seed: 11,
        ..SynthSpec::default()
    }
    .generate()
    .unwrap()
}

const REGIME_CONFIG: &[&str] = &[
    "context_len=168",
    "segment_len=24",
    "hidden_dim=32",
    "horizons=96",
    "base_horizon=96",
    "eval_stride=24",
    "lr=0.01",
    "max_steps=600",
    "epochs=30",
];

fn gradient_fidelity() -> Outcome {
    let t = Instant::now();
    let report = run_standard(7).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    let detail = format!(
        "max rel {:.2e}, theta closed form {:.2e}, fusion closed form {:.2e}, {:.1}s",
        report.max_rel_error(),
        report.theta_closed_form_error,
        report.fuse_closed_form_error,
        elapsed.as_secs_f64()
    );
    ensure(report.passes(1e-4, 1e-10) && elapsed <= Duration::from_secs(60), detail)
}

fn literal_penalty(logits: &[f64], lambda: f64) -> f64 {
    let mut g = logits.to_vec();
    softmax_in_place(&mut g);
    lambda * g.iter().map(|x| x.abs()).sum::<f64>()
}

fn gate_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_row, mut worst_l1, mut worst_fd) = (0.0f64, 0.0f64, 0.0f64);
    for pass in 0..1000u64 {
        let k = rng.gen_range(2..=6);
        let n = rng.gen_range(1..=6);
        let cfg = ModelConfig { segment_len: 4, hidden_dim: 8, experts: k, layers: 1, heads: 2, ..ModelConfig::default() };
        let model = Model::new(cfg, pass).unwrap();
        let trace = forward(&model, &random_input(&mut rng, n, 4, 8)).unwrap();
        let g = &trace.gate.g;
        for r in 0..g.rows {
            worst_row = worst_row.max((g.row(r).iter().sum::<f64>() - 1.0).abs());
        }
        worst_l1 = worst_l1.max((g.data.iter().map(|x| x.abs()).sum::<f64>() - g.rows as f64).abs());
        let logits = trace.gate.logits.row(0).to_vec();
        let h = 1e-5;
        for j in 0..k {
            let (mut up, mut down) = (logits.clone(), logits.clone());
            up[j] += h;
            down[j] -= h;
            let fd = (literal_penalty(&up, 0.5) - literal_penalty(&down, 0.5)) / (2.0 * h);
            worst_fd = worst_fd.max(fd.abs());
        }
    }
    ensure(
        worst_row <= 1e-9 && worst_l1 <= 1e-9 && worst_fd <= 1e-9,
        format!("row sum {worst_row:.1e}, L1 {worst_l1:.1e}, penalty gradient {worst_fd:.1e}"),
    )
}

fn structural_equivalences() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let base = ModelConfig { segment_len: 4, hidden_dim: 8, layers: 1, heads: 2, ..ModelConfig::default() };

    let single = Model::new(ModelConfig { experts: 1, ..base.clone() }, 1).unwrap();
    let trace = forward(&single, &random_input(&mut rng, 5, 4, 8)).unwrap();
    let mut linear = trace.e_hat.matmul(&single.params.experts[0]).matmul(&single.params.out_w);
    linear.add_row(&single.params.out_b);
    let k1 = max_abs_diff(&trace.pred.data, &linear.data);

    let mut same = Model::new(ModelConfig { experts: 3, ..base.clone() }, 2).unwrap();
    let w = same.params.experts[0].clone();
    same.params.experts.iter_mut().for_each(|e| *e = w.clone());
    let e_hat = random_mat(&mut rng, 5, 8, 1.0);
    let (reference, _, _) = moe_forward(&e_hat, &same.params);
    let mut identical = 0.0f64;
    for _ in 0..20 {
        let gate = same.params.gate.as_mut().unwrap();
        gate.w = random_mat(&mut rng, 8, 3, 5.0);
        gate.b = random_mat(&mut rng, 1, 3, 5.0);
        let (out, _, _) = moe_forward(&e_hat, &same.params);
        identical = identical.max(max_abs_diff(&reference.data, &out.data));
    }

    let flat = Model::new(ModelConfig { layers: 0, ..base.clone() }, 3).unwrap();
    let e = random_mat(&mut rng, 5, 8, 1.0);
    let (_, passed) = backbone_forward(&e, &flat.params, 2);
    let identity = bitwise_eq(&passed.data, &e.data);

    let deep = Model::new(ModelConfig { layers: 2, ..base }, 4).unwrap();
    let input = random_input(&mut rng, 6, 4, 8);
    let before = forward(&deep, &input).unwrap();
    let mut causal = true;
    for j in 0..6 {
        let mut changed = input.clone();
        changed.segments.row_mut(j).iter_mut().for_each(|x| *x += 3.0);
        changed.text.row_mut(j).iter_mut().for_each(|x| *x -= 0.7);
        let after = forward(&deep, &changed).unwrap();
        for p in 0..j {
            causal &= bitwise_eq(before.pred.row(p), after.pred.row(p));
        }
        causal &= !bitwise_eq(before.pred.row(j), after.pred.row(j));
    }

    ensure(
        k1 <= 1e-12 && identical <= 1e-12 && identity && causal,
        format!("K=1 vs linear {k1:.1e}, identical experts {identical:.1e}, L=0 identity {identity}, causal {causal}"),
    )
}

fn fusion_limits() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut hi, mut lo) = (0.0f64, 0.0f64);
    let mut midpoint = true;
    let mut convex = true;
    for _ in 0..1000 {
        let se = random_mat(&mut rng, 3, 8, 4.0);
        let te = random_mat(&mut rng, 3, 8, 4.0);
        let spread = max_abs_diff(&se.data, &te.data);
        hi = hi.max(max_abs_diff(&fuse(&se, &te, sigmoid(20.0)).data, &se.data) / spread);
        lo = lo.max(max_abs_diff(&fuse(&se, &te, sigmoid(-20.0)).data, &te.data) / spread);
        let mid = fuse(&se, &te, sigmoid(0.0));
        let exact: Vec<f64> = se.data.iter().zip(&te.data).map(|(a, b)| (a + b) / 2.0).collect();
        midpoint &= bitwise_eq(&mid.data, &exact);
        let e = fuse(&se, &te, sigmoid(rng.gen_range(-30.0..30.0)));
        for ((x, a), b) in e.data.iter().zip(&se.data).zip(&te.data) {
            convex &= *x >= a.min(*b) && *x <= a.max(*b);
        }
    }
    ensure(
        hi <= 1e-6 && lo <= 1e-6 && midpoint && convex,
        format!("theta=+20 {hi:.1e}, theta=-20 {lo:.1e} (relative), midpoint exact {midpoint}, convex {convex}"),
    )
}

fn roundtrips() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t0 = NaiveDate::from_ymd_opt(2022, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
    let channels: Vec<Vec<f64>> = (0..3).map(|_| (0..100).map(|_| rng.gen_range(-40.0..40.0)).collect()).collect();
    let frame = TimeSeriesFrame::from_channels(t0, TimeDelta::hours(1), vec!["a".into(), "b".into(), "c".into()], channels).unwrap();
    let stats = NormStats::from_rows(&frame, 0..100).unwrap();
    let back = stats.denormalize(&stats.normalize(&frame).unwrap()).unwrap();
    let norm = (0..3).fold(0.0f64, |m, v| m.max(max_abs_diff(frame.channel(v), back.channel(v))));

    let series = frame.channel(0);
    let segs = segment_series(series, t0, TimeDelta::hours(1), 10).unwrap();
    let joined: Vec<f64> = segs.iter().flat_map(|s| s.values.iter().copied()).collect();
    let segmentation = bitwise_eq(&joined, series);

    let model = Model::new(ModelConfig { segment_len: 8, hidden_dim: 16, ..ModelConfig::default() }, 6).unwrap();
    let ckpt = Checkpoint::from_model(&model, 6, None);
    let path = dir.path().join("ckpt.json");
    ckpt.save(&path).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(&path).and_then(|c| c.to_model()).map_err(|e| e.to_string())?;
    let mut checkpoint = loaded.config == model.config;
    let (mut a, mut b) = (Vec::new(), Vec::new());
    model.params.visit(|_, m| a.extend_from_slice(&m.data));
    loaded.params.visit(|_, m| b.extend_from_slice(&m.data));
    checkpoint &= bitwise_eq(&a, &b);

    let prompts: Vec<String> = segs.iter().map(|s| segmoe::descriptors::describe(s, 4).1.prompt).collect();
    let cache = precompute_cache(prompts.iter().map(String::as_str), 16, 0).map_err(|e| e.to_string())?;
    let cache_path = dir.path().join("cache.emb");
    cache.save(&cache_path).map_err(|e| e.to_string())?;
    let reloaded = EmbeddingCache::load(&cache_path, CacheSource::Builtin).map_err(|e| e.to_string())?;
    let embeddings = prompts
        .iter()
        .all(|p| bitwise_eq(&cache.lookup(p).unwrap().values, &reloaded.lookup(p).unwrap().values));

    ensure(
        norm <= 1e-9 && segmentation && checkpoint && embeddings,
        format!("normalization {norm:.1e}, segmentation {segmentation}, checkpoint {checkpoint}, cache {embeddings}"),
    )
}

fn data_protocol() -> Outcome {
    let frame = SynthSpec { length: 17420, channels: 7, ..SynthSpec::default() }.generate().unwrap();
    let splits = make_splits(&frame, SplitCounts::new(8545, 2881, 2881), 672, 96).map_err(|e| e.to_string())?;
    let bounds = (splits.train.end, splits.val.end, splits.test.end);
    let mut mismatches = 0;
    for len in 0..=50usize {
        for c in 1..=16usize {
            for f in 1..=8usize {
                for stride in 1..=8usize {
                    let brute = (0..len).step_by(stride).filter(|s| s + c + f <= len).count();
                    mismatches += usize::from(window_count(len, c, f, stride) != brute);
                }
            }
        }
    }
    ensure(
        bounds == (8545, 11426, 14307) && splits.train.start == 0 && mismatches == 0,
        format!("boundaries {bounds:?}, window-count mismatches {mismatches}"),
    )
}

fn end_to_end_learning() -> Outcome {
    let t = Instant::now();
    let frame = SynthSpec { length: 2000, period: 24, ..SynthSpec::default() }.generate().unwrap();
    let cfg = base_config(&[
        "context_len=168",
        "segment_len=24",
        "hidden_dim=64",
        "layers=2",
        "heads=2",
        "horizons=96",
        "base_horizon=96",
        "eval_stride=24",
        "max_steps=200",
        "epochs=20",
        "lr=0.001",
    ]);
    let prepared = Prepared::new("sine", frame, &cfg).map_err(|e| e.to_string())?;
    let out = run(&prepared, &cfg).map_err(|e| e.to_string())?;
    let base = evaluate_persistence(&prepared, &cfg).map_err(|e| e.to_string())?;
    let gain = 1.0 - out.report.avg_mse / base.avg_mse;
    let elapsed = t.elapsed();
    ensure(
        gain >= 0.2 && out.training.steps <= 200 && elapsed <= Duration::from_secs(300),
        format!(
            "model {:.5} vs persistence {:.5} ({:.1}% better), {} steps, {:.0}s",
            out.report.avg_mse,
            base.avg_mse,
            gain * 100.0,
            out.training.steps,
            elapsed.as_secs_f64()
        ),
    )
}

fn moe_promotion() -> Outcome {
    let cfg = base_config(REGIME_CONFIG);
    let report = promotion_run("two-regime", &two_regime(), &cfg, &[32], &[1, 2, 3]).map_err(|e| e.to_string())?;
    let wins = report.rows[0].moe_wins();
    let quoted = |mse: f64| PromotionCell { runs: Vec::new(), val_mse: mse, mse, mae: mse };
    let row = PromotionRow::from_cells(0, 4, quoted(0.269), quoted(0.239));
    let text = format_promotion(row.promotion_mse);
    ensure(
        wins >= 2 && text == "+11.1%",
        format!("K=4 beats K=1 in {wins}/3 seeds, 0.269->0.239 gives {text} (expected +11.1%)"),
    )
}

fn ablation_harness() -> Outcome {
    let cfg = base_config(REGIME_CONFIG);
    let prepared = Prepared::new("two-regime", two_regime(), &cfg).map_err(|e| e.to_string())?;
    let report = ablation_run(&prepared, &cfg, &[1, 2, 3]).map_err(|e| e.to_string())?;
    let labels: Vec<&str> = report.rows.iter().map(|r| r.variant.as_str()).collect();
    let expected: Vec<&str> = Variant::ALL.iter().map(|v| v.label()).collect();
    let wins = report.original_wins();
    let no_moe = Variant::WithoutMoe.apply(&cfg);
    let model = Model::new(no_moe.model_config(), 1).map_err(|e| e.to_string())?;
    let ckpt = Checkpoint::from_model(&model, 1, None);
    let gateless = report.row(Variant::WithoutMoe).is_some_and(|r| !r.gate_params)
        && !ckpt.has_block("gate_W")
        && !ckpt.has_block("gate_b");
    ensure(
        labels == expected && wins >= 2 && gateless,
        format!("{} rows, Original best in {wins}/3 seeds, w/o MoE gateless {gateless}", report.rows.len()),
    )
}

struct Counting<'a> {
    inner: &'a CachedEncoder<'a>,
    calls: AtomicUsize,
}

impl TextEmbedder for Counting<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed(&self, prompt: &str) -> segmoe::Result<Vec<f64>> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.embed(prompt)
    }
}

fn rolling_consistency() -> Outcome {
    let cfg = ModelConfig { segment_len: 96, hidden_dim: 16, experts: 4, layers: 1, heads: 2, ..ModelConfig::default() };
    let model = Model::new(cfg, 10).unwrap();
    let cache = EmbeddingCache::empty(16, CacheSource::Builtin);
    let enc = CachedEncoder { cache: &cache, fallback: Some(HashEncoder::new(16, 0)) };
    let counting = Counting { inner: &enc, calls: AtomicUsize::new(0) };
    let f = Forecaster { model: &model, embedder: &counting, freq: TimeDelta::hours(1), decimals: 4 };
    let t0 = NaiveDate::from_ymd_opt(2016, 7, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut prefix_ok = 0;
    let mut lengths_ok = true;
    let mut rolls = Vec::new();
    for i in 0..100 {
        let ctx: Vec<f64> = (0..672).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let start = t0 + TimeDelta::hours(i * 37);
        counting.calls.store(0, Ordering::Relaxed);
        let long = f.rolling(&ctx, start, 720).map_err(|e| e.to_string())?;
        rolls.push(counting.calls.load(Ordering::Relaxed) / 7);
        let short = f.rolling(&ctx, start, 96).map_err(|e| e.to_string())?;
        lengths_ok &= long.len() == 720 && short.len() == 96;
        prefix_ok += usize::from(bitwise_eq(&long[..96], &short));
    }
    let eight = roll_steps(720, 96) == 8 && rolls.iter().all(|&r| r == 8);
    ensure(
        prefix_ok == 100 && lengths_ok && eight,
        format!("prefix equal {prefix_ok}/100, 720 values {lengths_ok}, 8 rolls {eight}"),
    )
}

fn determinism() -> Outcome {
    let frame = SynthSpec { kind: SynthKind::TwoRegime, length: 1200, noise: 0.1, seed: 3, ..SynthSpec::default() }
        .generate()
        .unwrap();
    let cfg = base_config(&[
        "context_len=96",
        "segment_len=24",
        "hidden_dim=16",
        "horizons=48",
        "base_horizon=48",
        "eval_stride=24",
        "stride=2",
        "max_steps=60",
        "epochs=3",
        "seed=9",
    ]);
    let once = || -> segmoe::Result<(String, String)> {
        let prepared = Prepared::new("det", frame.clone(), &cfg)?;
        let out = run(&prepared, &cfg)?;
        Ok((out.checkpoint(&cfg).to_json()?, serde_json::to_string(&out.training.history)?))
    };
    let (a, b) = (once().map_err(|e| e.to_string())?, once().map_err(|e| e.to_string())?);
    ensure(
        a.0 == b.0 && a.1 == b.1,
        format!("checkpoints identical {}, loss curves identical {}", a.0 == b.0, a.1 == b.1),
    )
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("gradient fidelity", gradient_fidelity),
        ("gate invariants", gate_invariants),
        ("structural equivalences", structural_equivalences),
        ("fusion limits", fusion_limits),
        ("roundtrips", roundtrips),
        ("data protocol", data_protocol),
        ("end-to-end learning", end_to_end_learning),
        ("MoE promotion shape", moe_promotion),
        ("ablation harness", ablation_harness),
        ("rolling consistency", rolling_consistency),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let (status, detail) = match check() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {:>2} {name}: {status} ({detail})", i + 1);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
