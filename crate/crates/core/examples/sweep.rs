//! Segment-length sweep. Writes the plot data next to the table.

use segmoe::experiment::{sweep_run, SweepAxis};
use segmoe::synth::SynthSpec;
use segmoe::RunConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let frame = SynthSpec {
        length: 1500,
        noise: 0.1,
        seed: 2,
        ..SynthSpec::default()
    }
    .generate()?;
    let mut cfg = RunConfig::default();
    cfg.apply_overrides(&[
        "context_len=96",
        "hidden_dim=16",
        "horizons=48",
        "base_horizon=48",
        "eval_stride=24",
        "max_steps=100",
        "epochs=5",
        "lr=0.01",
    ])?;
    let report = sweep_run("sine", &frame, &cfg, SweepAxis::SegmentLen, &[12, 24, 48])?;
    print!("{}", report.table());
    let path = std::env::temp_dir().join("segmoe-sweep-segment_len.csv");
    std::fs::write(&path, report.plot_csv())?;
    println!("plot data in {}", path.display());
    Ok(())
}
