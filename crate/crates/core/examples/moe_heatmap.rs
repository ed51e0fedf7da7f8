//! Routes a handful of synthetic processes through an untrained desk model
//! and prints per-block expert usage plus the attribute x depth heatmap of
//! the final mixture-of-experts stage.

use anyhow::Result;
use ppjudge::commands::embedder_for;
use ppjudge::data::synth::DatasetSpec;
use ppjudge::data::{load_manifest, manifest_dir, write_dataset};
use ppjudge::eval::{final_layer_attribution, heatmap};
use ppjudge::moe::REPRESENTATIVE_THRESHOLD;
use ppjudge::model::{PPJudge, PPJudgeConfig};
use ppjudge::numerics::Graph;
use ppjudge::train::prepare_samples;

fn main() -> Result<()> {
    let dir = tempfile::tempdir()?;
    let mut spec = DatasetSpec::new(6, 0, 5);
    spec.n_frames = 3;
    write_dataset(dir.path(), &spec)?;
    let manifest = dir.path().join("manifest.jsonl");
    let cfg = PPJudgeConfig::desk();
    let samples = prepare_samples(&load_manifest(&manifest)?, &manifest_dir(&manifest), &embedder_for(&cfg)?, &cfg)?;
    let (model, store) = PPJudge::init(&cfg, 5)?;

    let mut g = Graph::with_params(&store);
    let trace = model.forward_graph(&mut g, &samples[0].frames, &samples[0].reference)?;
    for (b, usage) in trace.usage.iter().enumerate() {
        println!("block {b}: {} tokens, events per depth {:?}", usage.tokens, usage.depth_counts);
    }

    // A token counts for an attribute once that attribute holds more than
    // the threshold share of its attribution; untrained models rarely get
    // there, so show how concentrated the shares are.
    let mut best = Vec::new();
    for s in &samples {
        let (_, attribution) = final_layer_attribution(&model, &store, s)?;
        best.extend(attribution.iter().map(|row| row.iter().cloned().fold(0.0, f64::max)));
    }
    best.sort_by(f64::total_cmp);
    let over = best.iter().filter(|&&b| b > REPRESENTATIVE_THRESHOLD).count();
    println!(
        "largest attribute share per token: median {:.3}, max {:.3}; {over} of {} tokens above {REPRESENTATIVE_THRESHOLD}",
        best[best.len() / 2],
        best[best.len() - 1],
        best.len()
    );

    let map = heatmap(&model, &store, &samples)?;
    print!("{}", map.to_csv());
    Ok(())
}
