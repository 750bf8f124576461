//! Segment a context window and print the statistical prompt of every segment.

use segmoe::descriptors::dump_prompts;
use segmoe::synth::{SynthKind, SynthSpec};

fn main() -> segmoe::Result<()> {
    let frame = SynthSpec {
        kind: SynthKind::TwoRegime,
        length: 400,
        ..SynthSpec::default()
    }
    .generate()?;
    let context = &frame.channel(0)[..384];
    for line in dump_prompts(context, frame.timestamp(0), frame.freq(), 96, 4)? {
        println!("[{}] {}", line.index, line.prompt);
    }
    Ok(())
}
