//! Train a small model on a noiseless sine and compare it with persistence.

use std::time::Instant;

use segmoe::experiment::{evaluate_persistence, run, Prepared};
use segmoe::synth::SynthSpec;
use segmoe::RunConfig;

fn main() -> segmoe::Result<()> {
    let frame = SynthSpec {
        length: 2000,
        period: 24,
        ..SynthSpec::default()
    }
    .generate()?;
    let mut cfg = RunConfig::default();
    cfg.apply_overrides(&[
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
    ])?;
    if let Some(args) = std::env::args().nth(1) {
        cfg.apply_overrides(&args.split_whitespace().collect::<Vec<_>>())?;
    }
    let t = Instant::now();
    let prepared = Prepared::new("sine", frame, &cfg)?;
    let out = run(&prepared, &cfg)?;
    let base = evaluate_persistence(&prepared, &cfg)?;
    for e in &out.training.history {
        println!(
            "epoch {:>2} steps {:>3} train {:.5} val {:.5} alpha {:.3}",
            e.epoch, e.steps, e.train_loss, e.val_mse, e.alpha
        );
    }
    println!("model       96-step MSE {:.5}", out.report.avg_mse);
    println!("persistence 96-step MSE {:.5}", base.avg_mse);
    println!(
        "improvement {:.1}%  ({:.1}s)",
        100.0 * (1.0 - out.report.avg_mse / base.avg_mse),
        t.elapsed().as_secs_f64()
    );
    Ok(())
}
