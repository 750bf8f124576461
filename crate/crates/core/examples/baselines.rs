//! Rolling multi-horizon evaluation of a trained model next to the
//! persistence and linear baselines.

use segmoe::experiment::{evaluate_linear, evaluate_persistence, run, Prepared};
use segmoe::synth::{SynthKind, SynthSpec};
use segmoe::RunConfig;

fn main() -> segmoe::Result<()> {
    let frame = SynthSpec {
        kind: SynthKind::TwoRegime,
        length: 3000,
        channels: 2,
        noise: 0.05,
        seed: 5,
        ..SynthSpec::default()
    }
    .generate()?;
    let mut cfg = RunConfig::default();
    cfg.apply_overrides(&[
        "context_len=192",
        "segment_len=48",
        "hidden_dim=32",
        "horizons=96,192,336",
        "base_horizon=96",
        "eval_stride=48",
        "stride=4",
        "lr=0.01",
        "max_steps=200",
        "epochs=10",
    ])?;
    let prepared = Prepared::new("two-regime", frame, &cfg)?;
    let out = run(&prepared, &cfg)?;
    for report in [out.report, evaluate_persistence(&prepared, &cfg)?, evaluate_linear(&prepared, &cfg)?] {
        print!("{}", report.table());
    }
    Ok(())
}
