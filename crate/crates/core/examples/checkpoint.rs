//! Train briefly, save a checkpoint, reload it and check the reloaded model
//! forecasts exactly like the original.

use segmoe::experiment::{evaluate_model, run, Prepared};
use segmoe::synth::{SynthKind, SynthSpec};
use segmoe::{Checkpoint, RunConfig};

fn main() -> segmoe::Result<()> {
    let frame = SynthSpec {
        kind: SynthKind::TwoRegime,
        length: 1200,
        noise: 0.05,
        ..SynthSpec::default()
    }
    .generate()?;
    let mut cfg = RunConfig::default();
    cfg.apply_overrides(&[
        "context_len=96",
        "segment_len=24",
        "hidden_dim=16",
        "horizons=48",
        "base_horizon=48",
        "eval_stride=24",
        "max_steps=80",
        "epochs=4",
    ])?;
    let prepared = Prepared::new("two-regime", frame, &cfg)?;
    let out = run(&prepared, &cfg)?;
    println!("best epoch {} val {:.5}", out.training.best_epoch, out.training.best_val_mse);

    let path = std::env::temp_dir().join("segmoe-example-checkpoint.json");
    out.checkpoint(&cfg).save(&path)?;
    let restored = Checkpoint::load(&path)?.to_model()?;
    let again = evaluate_model(&prepared, &restored, &cfg)?;
    println!("test MSE {:.6} before save, {:.6} after load", out.report.avg_mse, again.avg_mse);
    assert_eq!(out.report.avg_mse.to_bits(), again.avg_mse.to_bits());
    Ok(())
}
