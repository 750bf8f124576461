//! Generate a two-regime series, write it as CSV, load it back and look at
//! the chronological splits.

use segmoe::data::{make_splits, sample_windows, SplitCounts};
use segmoe::load_csv;
use segmoe::synth::{SynthKind, SynthSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let frame = SynthSpec {
        kind: SynthKind::TwoRegime,
        length: 1500,
        channels: 3,
        noise: 0.05,
        seed: 1,
        ..SynthSpec::default()
    }
    .generate()?;
    let dir = std::env::temp_dir().join("segmoe-synth-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("two_regime.csv");
    frame.write_csv(&path)?;

    let loaded = load_csv(&path)?;
    println!("{} rows x {} channels from {}", loaded.len(), loaded.n_channels(), path.display());
    println!("channels: {}", loaded.names().join(", "));

    let splits = make_splits(&loaded, SplitCounts::proportional(loaded.len()), 192, 96)?;
    println!("train {:?}  val {:?}  test {:?}", splits.train, splits.val, splits.test);
    println!(
        "windows per channel: train {} val {} test {}",
        splits.train_samples, splits.val_samples, splits.test_samples
    );

    let first = sample_windows(&loaded, splits.train.clone(), 192, 96, 48)?.next().unwrap();
    println!(
        "first window: channel {} starts {} context {} target {}",
        first.channel,
        first.start,
        first.context.len(),
        first.target.len()
    );
    Ok(())
}
