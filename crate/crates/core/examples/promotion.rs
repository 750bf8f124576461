//! Single expert against a four-expert mixture at two hidden widths.

use segmoe::experiment::promotion_run;
use segmoe::synth::{SynthKind, SynthSpec};
use segmoe::RunConfig;

fn main() -> segmoe::Result<()> {
    let frame = SynthSpec {
        kind: SynthKind::TwoRegime,
        length: 2000,
        noise: 0.05,
        seed: 11,
        ..SynthSpec::default()
    }
    .generate()?;
    let mut cfg = RunConfig::default();
    cfg.apply_overrides(&[
        "context_len=168",
        "segment_len=24",
        "horizons=96",
        "base_horizon=96",
        "eval_stride=24",
        "lr=0.01",
        "max_steps=150",
        "epochs=10",
    ])?;
    let report = promotion_run("two-regime", &frame, &cfg, &[16, 32], &[1])?;
    print!("{}", report.table());
    Ok(())
}
