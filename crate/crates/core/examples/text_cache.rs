//! Precompute prompt embeddings once, save the cache, and read it back the
//! way an externally produced embedding file would be imported.

use segmoe::descriptors::dump_prompts;
use segmoe::synth::SynthSpec;
use segmoe::textenc::{import_external, precompute_cache, prompt_key, CachedEncoder, HashEncoder, TextEmbedder};

fn main() -> segmoe::Result<()> {
    let frame = SynthSpec::default().generate()?;
    let prompts: Vec<String> = dump_prompts(&frame.channel(0)[..480], frame.timestamp(0), frame.freq(), 24, 4)?
        .into_iter()
        .map(|d| d.prompt)
        .collect();

    let cache = precompute_cache(prompts.iter().map(String::as_str), 32, 0)?;
    println!("{} prompts, {} distinct cached", prompts.len(), cache.len());

    let path = std::env::temp_dir().join("segmoe-example.emb");
    cache.save(&path)?;
    let external = import_external(&path, 32)?;
    let first = external.lookup(&prompts[0])?;
    println!("key {:016x} == {:016x}", first.key, prompt_key(&prompts[0]));
    println!("first values {:?}", &first.values[..4]);

    let unseen = "The time range of this sequence is from 01-Jan-2030 00:00 to 01-Jan-2030 23:00";
    let strict = CachedEncoder { cache: &external, fallback: None };
    println!("external miss: {}", strict.embed(unseen).unwrap_err());
    let lenient = CachedEncoder { cache: &cache, fallback: Some(HashEncoder::new(32, 0)) };
    println!("builtin fallback norm {:.4}", lenient.embed(unseen)?.iter().map(|x| x * x).sum::<f64>().sqrt());
    Ok(())
}
