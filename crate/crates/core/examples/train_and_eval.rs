//! Trains the desk model briefly on a small synthetic dataset and reports
//! test metrics next to the constant-mean baseline. Short runs are noisy;
//! the acceptance suite holds the full 200-sample, 30-epoch benchmark.
//!
//! ```text
//! cargo run --release --example train_and_eval -- 12
//! ```

use anyhow::Result;
use ppjudge::commands::embedder_for;
use ppjudge::data::synth::DatasetSpec;
use ppjudge::data::{load_manifest, manifest_dir, write_dataset, Split};
use ppjudge::eval::evaluate;
use ppjudge::model::{PPJudge, PPJudgeConfig};
use ppjudge::train::{prepare_samples, Phase, TrainOptions, Trainer};

fn main() -> Result<()> {
    let epochs: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(12);
    let dir = tempfile::tempdir()?;
    let mut spec = DatasetSpec::new(48, 16, 1);
    spec.n_frames = 4;
    write_dataset(dir.path(), &spec)?;

    let manifest = dir.path().join("manifest.jsonl");
    let cfg = PPJudgeConfig::desk();
    let embedder = embedder_for(&cfg)?;
    let (train, test): (Vec<_>, Vec<_>) = load_manifest(&manifest)?.into_iter().partition(|r| r.split == Split::Train);
    let base = manifest_dir(&manifest);
    let train = prepare_samples(&train, &base, &embedder, &cfg)?;
    let test = prepare_samples(&test, &base, &embedder, &cfg)?;

    let (model, store) = PPJudge::init(&cfg, 1)?;
    let mut options = TrainOptions::new(Phase::Pretrain, epochs, 1);
    options.batch_size = 4;
    let mut trainer = Trainer::new(model, store, options)?;
    for _ in 0..epochs {
        let log = trainer.train_epoch(&train)?;
        println!(
            "epoch {:>2}  total {:8.3}  score {:6.3}  style {:6.3}",
            log.epoch, log.loss.total, log.loss.score, log.loss.style_total
        );
    }

    let (_, report) = evaluate(&trainer.model, &trainer.store, &test)?;
    print!("{}", report.to_csv());
    let baseline: Vec<String> = (0..8)
        .map(|a| {
            let mean = train.iter().map(|s| s.labels.data()[a]).sum::<f64>() / train.len() as f64;
            let mse = test.iter().map(|s| (s.labels.data()[a] - mean).powi(2)).sum::<f64>() / test.len() as f64;
            format!("{mse:.3}")
        })
        .collect();
    println!("constant-mean MSE per attribute: {}", baseline.join(" "));
    Ok(())
}
