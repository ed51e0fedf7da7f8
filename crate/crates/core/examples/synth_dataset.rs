//! Generates a small synthetic process dataset and prints what the oracle
//! recorded for one sample.
//!
//! ```text
//! cargo run --example synth_dataset -- /tmp/ppj-data
//! ```

use std::path::PathBuf;

use anyhow::Result;
use ppjudge::data::synth::{synth_generate, DatasetSpec};
use ppjudge::data::{write_dataset, ATTRIBUTES};

fn main() -> Result<()> {
    let out: PathBuf = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("ppjudge-synth"));
    let mut spec = DatasetSpec::new(16, 4, 7);
    spec.n_frames = 6;
    let records = write_dataset(&out, &spec)?;
    println!("{} samples under {}", records.len(), out.display());

    let (profile, split) = spec.profiles().remove(0);
    let sample = synth_generate(&profile)?;
    println!("first sample ({split:?}), style {}, {} frames", profile.style, sample.frames.len());
    for (t, ev) in sample.events.frames.iter().enumerate() {
        println!("  frame {}: {ev:?}", t + 1);
    }
    for (name, v) in ATTRIBUTES.iter().zip(sample.scores.to_array()) {
        println!("  {name:<22} {v:.2}");
    }
    Ok(())
}
