//! Scores a painting process frame by frame through the KV cache and checks
//! each step against a full forward pass over the same prefix.

use anyhow::Result;
use ppjudge::data::synth::{synth_generate, SynthProfile};
use ppjudge::model::{PPJudge, PPJudgeConfig, ReferenceInput};

fn main() -> Result<()> {
    let cfg = PPJudgeConfig::desk();
    let (model, store) = PPJudge::init(&cfg, 3)?;
    let sample = synth_generate(&SynthProfile::clean(3, 1, 8))?;
    let frames: Vec<_> = sample.frames.iter().map(|f| f.quantized()).collect();
    let reference = ReferenceInput::Image(sample.reference.quantized());

    let mut cache = model.start_cache(&store, &reference)?;
    let mut last = Vec::new();
    println!("frame  worst |incr - full|  incr MACs   full MACs");
    for t in 1..=frames.len() {
        let step = model.forward_incremental(&store, &mut cache, &frames[t - 1])?;
        let full = model.forward_full(&store, &frames[..t], &reference)?;
        let full_macs = model.forward_full_macs(&store, &frames[..t], &reference)?;
        let worst = step
            .output
            .scores
            .data()
            .iter()
            .zip(full.scores.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        last = step.output.scores.data().to_vec();
        println!("{t:>5}  {worst:>19.2e}  {:>9}  {full_macs:>10}", step.macs);
    }
    println!("raw scores after the last frame: {last:.3?}");
    Ok(())
}
