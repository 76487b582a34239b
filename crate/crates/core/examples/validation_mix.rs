//! Draws a 550-sample validation mix: 100 samples from each of five
//! benchmarks plus 50 chain-of-thought samples.

use std::collections::BTreeMap;

use csvscale::data::assemble_validation_mix;
use csvscale::synth::{generate_family, SyntheticFamilySpec};

fn main() -> csvscale::Result<()> {
    let names = ["mmlu", "bbh", "gsm8k", "hellaswag", "cmmlu", "bbh_cot"];
    let mut sources = Vec::new();
    for name in names {
        let family = generate_family(&SyntheticFamilySpec {
            num_models: 1,
            num_samples: 150,
            tokens_per_sample: 8,
            feature_dim: 4,
            source_tags: vec![name.to_string()],
            series: vec![csvscale::synth::SeriesShift {
                name: "only".into(),
                multipliers: BTreeMap::new(),
            }],
            ..Default::default()
        })?;
        sources.push((name, family.corpus));
    }
    let refs: Vec<(&str, &csvscale::data::Corpus)> = sources.iter().map(|(n, c)| (*n, c)).collect();
    let mut counts: BTreeMap<String, usize> = names[..5].iter().map(|n| (n.to_string(), 100)).collect();
    counts.insert("bbh_cot".into(), 50);

    let mix = assemble_validation_mix(&refs, &counts, 42)?;
    let mut per_tag: BTreeMap<&str, usize> = BTreeMap::new();
    for s in mix.samples() {
        *per_tag.entry(s.source_tag.as_str()).or_default() += 1;
    }
    println!("{} samples, {} characters", mix.len(), mix.n_chars());
    for (tag, n) in per_tag {
        println!("  {tag:<10} {n}");
    }
    println!("first five: {:?}", mix.samples().iter().take(5).map(|s| &s.sample_id).collect::<Vec<_>>());
    Ok(())
}
