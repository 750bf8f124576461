//! Component ablation on the two-regime synthetic series.
//!
//! Optional first argument: space-separated `key=value` overrides.

use segmoe::experiment::{ablation_run, Prepared};
use segmoe::synth::{SynthKind, SynthSpec};
use segmoe::RunConfig;

fn main() -> segmoe::Result<()> {
    let frame = SynthSpec {
        kind: SynthKind::TwoRegime,
        length: 3000,
        noise: 0.05,
        seed: 11,
        ..SynthSpec::default()
    }
    .generate()?;
    let mut cfg = RunConfig::default();
    cfg.apply_overrides(&[
        "context_len=168",
        "segment_len=24",
        "hidden_dim=32",
        "horizons=96",
        "base_horizon=96",
        "eval_stride=24",
        "lr=0.01",
        "max_steps=600",
        "epochs=30",
    ])?;
    if let Some(args) = std::env::args().nth(1) {
        cfg.apply_overrides(&args.split_whitespace().collect::<Vec<_>>())?;
    }
    let prepared = Prepared::new("two-regime", frame, &cfg)?;
    let report = ablation_run(&prepared, &cfg, &[1, 2, 3])?;
    print!("{}", report.table());
    for r in &report.rows {
        let vals: Vec<String> = r.runs.iter().map(|s| format!("{:.5}", s.val_mse)).collect();
        println!("{:<12} val {}", r.variant, vals.join(" "));
    }
    println!("Original best in {} of {} seeds", report.original_wins(), report.seeds.len());
    Ok(())
}
