//! Command-line front end: argument definitions and the six commands.
//!
//! The binary only parses arguments and reports errors; everything else
//! lives here so the commands can be driven from tests and examples.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::data::synth::{DatasetSpec, KnobOverrides, Regime};
use crate::data::{load_manifest, manifest_dir, write_dataset, ProcessSample, Split, ATTRIBUTES};
use crate::error::{Error, Result};
use crate::eval;
use crate::keyframe::{load_frames, select_keyframes, KeyframeParams};
use crate::model::{clamp_score, PPJudge, PPJudgeConfig, ReferenceInput};
use crate::numerics::{checkpoint, Tensor};
use crate::train::{prepare_samples, Phase, PreparedSample, StyleGradient, TrainOptions, Trainer};
use crate::vision::{Frame, MockStyleEmbedder, StyleEmbedder, DESK_STYLES};

/// Seed of the mock style embedder. Fixed so that embeddings agree across
/// commands regardless of `--seed`.
pub const EMBEDDER_SEED: u64 = 0x5EED;

#[derive(Debug, Parser)]
#[command(name = "ppjudge", version, about = "Painting-process assessment")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,
    /// Model config (TOML); the desk config when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Checkpoint to read (eval, score, heatmap) or resume from (train).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with oracle scores.
    Synth(SynthArgs),
    /// Train a model on the train split of a manifest.
    Train(TrainArgs),
    /// Per-attribute SRCC/PCC/MSE/ACC on the test split.
    Eval(EvalArgs),
    /// Score one frame sequence.
    Score(ScoreArgs),
    /// Select keyframes from a frame directory.
    Keyframes(KeyframeArgs),
    /// Attribute x expert-depth usage of the final MoE stage.
    Heatmap(HeatmapArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of training samples.
    #[arg(long)]
    pub count: usize,
    /// Number of additional test samples.
    #[arg(long, default_value_t = 0)]
    pub test_count: usize,
    #[arg(long, default_value_t = 10)]
    pub frames: usize,
    #[arg(long, value_enum, default_value_t = Regime::Pretrain)]
    pub regime: Regime,
    #[arg(long)]
    pub style: Option<usize>,
    #[arg(long)]
    pub color_jump_prob: Option<f64>,
    #[arg(long)]
    pub regression_prob: Option<f64>,
    #[arg(long)]
    pub style_drift_prob: Option<f64>,
    #[arg(long)]
    pub layout_shift_prob: Option<f64>,
    #[arg(long)]
    pub detail_growth_rate: Option<f64>,
    #[arg(long)]
    pub palette_growth_rate: Option<f64>,
    #[arg(long)]
    pub layout_growth_rate: Option<f64>,
    #[arg(long)]
    pub corruption: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Manifest of the dataset.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    /// Learning rate; 1e-3 for pretrain and 1e-4 for finetune by default.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum, default_value_t = Phase::Pretrain)]
    pub phase: Phase,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, value_enum, default_value_t = StyleGradient::Isolated)]
    pub style_gradient: StyleGradient,
    /// Continue from `--checkpoint` including optimizer state and epoch
    /// count; without it `--checkpoint` only provides starting weights.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Score the labels against themselves instead of running a model.
    #[arg(long)]
    pub passthrough: bool,
    /// Evaluate every record instead of the test split only.
    #[arg(long)]
    pub all: bool,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Directory of numbered frames, or a file listing frame paths.
    #[arg(long)]
    pub frames: PathBuf,
    /// Reference image path, or a text prompt.
    #[arg(long)]
    pub reference: String,
    /// Feed frames one at a time through the key/value cache.
    #[arg(long)]
    pub incremental: bool,
}

#[derive(Debug, Args)]
pub struct KeyframeArgs {
    #[arg(long)]
    pub frames: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 5)]
    pub n_min: usize,
    #[arg(long, default_value_t = 20)]
    pub n_max: usize,
    /// Threshold scale.
    #[arg(long, default_value_t = 1.0)]
    pub c: f64,
    /// Copy selected frames into this directory.
    #[arg(long)]
    pub copy_to: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// At most this many randomly chosen samples.
    #[arg(long, default_value_t = 1000)]
    pub limit: usize,
}

/// Runs a parsed command, writing human-readable output to `stdout`.
pub fn run(cli: &Cli, stdout: &mut dyn Write) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Synth(a) => cmd_synth(g, a, stdout),
        Command::Train(a) => cmd_train(g, a, stdout),
        Command::Eval(a) => cmd_eval(g, a, stdout),
        Command::Score(a) => cmd_score(g, a, stdout),
        Command::Keyframes(a) => cmd_keyframes(g, a, stdout),
        Command::Heatmap(a) => cmd_heatmap(g, a, stdout),
    }
}

/// `ppjudge: error[kind]: message` on one line.
pub fn diagnostic(e: &Error) -> String {
    let msg = e.to_string().replace('\n', " ");
    format!("ppjudge: error[{}]: {msg}", e.kind())
}

fn say(out: &mut dyn Write, text: impl AsRef<str>) -> Result<()> {
    out.write_all(text.as_ref().as_bytes())
        .and_then(|_| out.write_all(b"\n"))
        .map_err(|e| Error::io("<stdout>", e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn model_config(g: &GlobalArgs) -> Result<PPJudgeConfig> {
    match &g.config {
        Some(p) => PPJudgeConfig::load(p),
        None => Ok(PPJudgeConfig::desk()),
    }
}

/// The mock embedder matching a config's style width.
pub fn embedder_for(cfg: &PPJudgeConfig) -> Result<MockStyleEmbedder> {
    let styles: Vec<String> = DESK_STYLES.iter().map(|s| s.to_string()).collect();
    MockStyleEmbedder::new(EMBEDDER_SEED, cfg.d_style, &styles)
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf> {
    p.as_ref().ok_or_else(|| Error::Config(format!("missing required flag --{flag}")))
}

fn load_model(g: &GlobalArgs) -> Result<(PPJudgeConfig, PPJudge, crate::numerics::ParamStore)> {
    let cfg = model_config(g)?;
    let store = checkpoint::load(require(&g.checkpoint, "checkpoint")?)?;
    let model = PPJudge::bind(&cfg, &store)?;
    Ok((cfg, model, store))
}

fn load_split(path: &Path, cfg: &PPJudgeConfig, keep: impl Fn(&ProcessSample) -> bool) -> Result<Vec<PreparedSample>> {
    let records: Vec<ProcessSample> = load_manifest(path)?.into_iter().filter(keep).collect();
    prepare_samples(&records, &manifest_dir(path), &embedder_for(cfg)?, cfg)
}

fn cmd_synth(g: &GlobalArgs, a: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let dir = require(&g.out, "out")?;
    let spec = DatasetSpec {
        train: a.count,
        test: a.test_count,
        seed: g.seed,
        n_frames: a.frames,
        regime: a.regime,
        overrides: KnobOverrides {
            n_frames: None,
            style: a.style,
            color_jump_prob: a.color_jump_prob,
            regression_prob: a.regression_prob,
            style_drift_prob: a.style_drift_prob,
            layout_shift_prob: a.layout_shift_prob,
            detail_growth_rate: a.detail_growth_rate,
            palette_growth_rate: a.palette_growth_rate,
            layout_growth_rate: a.layout_growth_rate,
            corruption: a.corruption,
        },
    };
    let records = write_dataset(dir, &spec)?;
    say(out, format!("wrote {} samples to {}", records.len(), dir.join("manifest.jsonl").display()))?;
    for (i, name) in ATTRIBUTES.iter().enumerate() {
        let mut hist: BTreeMap<i64, usize> = BTreeMap::new();
        for r in &records {
            *hist.entry(r.scores.to_array()[i].round() as i64).or_default() += 1;
        }
        let cells: Vec<String> = hist.iter().map(|(k, v)| format!("{k}:{v}")).collect();
        say(out, format!("{name:<22} {}", cells.join(" ")))?;
    }
    Ok(())
}

/// Path of the per-step loss log written next to a checkpoint.
pub fn loss_csv_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".loss.csv");
    s.into()
}

fn cmd_train(g: &GlobalArgs, a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = model_config(g)?;
    let ckpt_out = g.out.clone().unwrap_or_else(|| PathBuf::from("ppjudge.ckpt"));
    let data = load_split(&a.data, &cfg, |r| r.split == Split::Train)?;
    let mut opts = TrainOptions::new(a.phase, a.epochs, g.seed);
    opts.lr = a.lr.unwrap_or(a.phase.default_lr());
    opts.batch_size = a.batch_size;
    opts.style_gradient = a.style_gradient;
    let mut trainer = match (&g.checkpoint, a.resume) {
        (Some(p), true) => Trainer::resume(&cfg, p, opts)?,
        (Some(p), false) => {
            let store = checkpoint::load(p)?;
            Trainer::new(PPJudge::bind(&cfg, &store)?, store, opts)?
        }
        (None, true) => return Err(Error::Config("--resume needs --checkpoint".into())),
        (None, false) => {
            let (m, s) = PPJudge::init(&cfg, g.seed)?;
            Trainer::new(m, s, opts)?
        }
    };
    let mut log = String::from(crate::losses::LossBreakdown::CSV_HEADER);
    log.push('\n');
    let first_epoch = trainer.epoch;
    for _ in 0..a.epochs {
        let e = trainer.train_epoch(&data)?;
        for s in &e.steps {
            log.push_str(&s.loss.csv_row(s.step));
            log.push('\n');
        }
        say(
            out,
            format!(
                "epoch {} total {:.6} style {:.6} score {:.6}",
                e.epoch, e.loss.total, e.loss.style_total, e.loss.score
            ),
        )?;
    }
    trainer.save(&ckpt_out)?;
    write_file(&loss_csv_path(&ckpt_out), &log)?;
    say(
        out,
        format!(
            "trained epochs {}..{} on {} samples; checkpoint {}",
            first_epoch + 1,
            trainer.epoch,
            data.len(),
            ckpt_out.display()
        ),
    )
}

fn cmd_eval(g: &GlobalArgs, a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let keep = |r: &ProcessSample| a.all || r.split == Split::Test;
    let report = if a.passthrough {
        let cfg = model_config(g)?;
        eval::passthrough_report(&load_split(&a.data, &cfg, keep)?)?
    } else {
        let (cfg, model, store) = load_model(g)?;
        let samples = load_split(&a.data, &cfg, keep)?;
        eval::evaluate(&model, &store, &samples)?.1
    };
    let csv = report.to_csv();
    if let Some(p) = &g.out {
        write_file(p, &csv)?;
    }
    out.write_all(csv.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

fn named_scores(raw: &[f64]) -> serde_json::Value {
    let m: serde_json::Map<String, serde_json::Value> = ATTRIBUTES
        .iter()
        .zip(raw)
        .map(|(n, v)| (n.to_string(), json!(clamp_score(*v))))
        .collect();
    serde_json::Value::Object(m)
}

fn cmd_score(g: &GlobalArgs, a: &ScoreArgs, out: &mut dyn Write) -> Result<()> {
    let (cfg, model, store) = load_model(g)?;
    let frames = load_frames(&a.frames)?;
    let reference = if Path::new(&a.reference).is_file() {
        ReferenceInput::Image(Frame::load(Path::new(&a.reference))?)
    } else {
        ReferenceInput::Prompt(embedder_for(&cfg)?.embed_text(&a.reference)?)
    };
    let (raw, trajectory): (Tensor, Option<Vec<serde_json::Value>>) = if a.incremental {
        let mut cache = model.start_cache(&store, &reference)?;
        let mut steps = Vec::with_capacity(frames.len());
        let mut last = None;
        for (i, f) in frames.iter().enumerate() {
            let step = model.forward_incremental(&store, &mut cache, f)?;
            steps.push(json!({
                "frame": i + 1,
                "scores": named_scores(step.output.scores.data()),
                "raw": step.output.scores.data(),
                "macs": step.macs,
            }));
            last = Some(step.output.scores);
        }
        (last.ok_or_else(|| Error::Contract("no frames to score".into()))?, Some(steps))
    } else {
        (model.forward_full(&store, &frames, &reference)?.scores, None)
    };
    let line: Vec<String> = ATTRIBUTES
        .iter()
        .zip(raw.data())
        .map(|(n, v)| format!("{n}={:.4}", clamp_score(*v)))
        .collect();
    say(out, line.join(" "))?;
    let mut doc = json!({
        "scores": named_scores(raw.data()),
        "raw": raw.data(),
        "frames": frames.len(),
        "incremental": a.incremental,
    });
    if let Some(t) = trajectory {
        doc["trajectory"] = serde_json::Value::Array(t);
    }
    let text = serde_json::to_string_pretty(&doc).expect("json serializes");
    match &g.out {
        Some(p) => write_file(p, &text),
        None => say(out, text),
    }
}

fn cmd_keyframes(g: &GlobalArgs, a: &KeyframeArgs, out: &mut dyn Write) -> Result<()> {
    let params = KeyframeParams {
        stride: a.k,
        n_min: a.n_min,
        n_max: a.n_max,
        threshold_scale: a.c,
    };
    params.validate()?;
    let frames = load_frames(&a.frames)?;
    let sel = select_keyframes(&frames, &params)?;
    let text = serde_json::to_string(&sel.indices).expect("json serializes");
    if let Some(dir) = &a.copy_to {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (n, &i) in sel.indices.iter().enumerate() {
            let dst = dir.join(format!("{:04}.png", n + 1));
            frames[i].save_png(&dst)?;
        }
    }
    match &g.out {
        Some(p) => write_file(p, &text)?,
        None => say(out, &text)?,
    }
    say(out, format!("selected {} of {} frames (tau {:.6})", sel.indices.len(), frames.len(), sel.tau))
}

fn cmd_heatmap(g: &GlobalArgs, a: &HeatmapArgs, out: &mut dyn Write) -> Result<()> {
    let (cfg, model, store) = load_model(g)?;
    let mut records = load_manifest(&a.data)?;
    if records.len() > a.limit {
        let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
        records.shuffle(&mut rng);
        records.truncate(a.limit);
    }
    let samples = prepare_samples(&records, &manifest_dir(&a.data), &embedder_for(&cfg)?, &cfg)?;
    let map = eval::heatmap(&model, &store, &samples)?;
    let csv = map.to_csv();
    if let Some(p) = &g.out {
        write_file(p, &csv)?;
    }
    out.write_all(csv.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}
