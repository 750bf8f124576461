//! Grid search over learning rate and sparsity weight on validation MSE.

use segmoe::experiment::{run, Prepared};
use segmoe::synth::{SynthKind, SynthSpec};
use segmoe::train::{select_hyperparams, LAMBDA_GRID, LR_GRID};
use segmoe::RunConfig;

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
        "max_steps=60",
        "epochs=3",
        "sparsity_mode=entropy",
    ])?;
    let prepared = Prepared::new("two-regime", frame, &cfg)?;
    let selection = select_hyperparams(&LR_GRID, &LAMBDA_GRID, |lr, lambda| {
        let trial = RunConfig { lr, lambda, ..cfg.clone() };
        Ok(run(&prepared, &trial)?.training.best_val_mse)
    })?;
    for t in &selection.trials {
        println!("lr {:<7} lambda {:<5} val {:.5}", t.lr, t.lambda, t.val_mse);
    }
    println!("selected lr {} lambda {}", selection.lr, selection.lambda);
    Ok(())
}
