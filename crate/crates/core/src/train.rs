//! Mini-batch training.
//!
//! Each step averages per-sample gradients of `style + 10 * score` over a
//! batch and takes one optimizer step. Samples of a batch are processed in
//! parallel and reduced in batch order, so results do not depend on the
//! thread count. The sample order of epoch `e` is a seeded shuffle that
//! depends only on `(seed, e)`, which lets a resumed run continue exactly.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{LoadedReference, ProcessSample};
use crate::error::{Error, Result};
use crate::losses::{alpha_schedule, score_loss_graph, style_loss_graph, LossBreakdown, LAMBDA_SCORE};
use crate::model::{PPJudge, PPJudgeConfig, ReferenceInput};
use crate::numerics::{checkpoint, Graph, OptimizerKind, OptimizerState, ParamStore, Tensor};
use crate::vision::{Frame, StyleEmbedder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// AdamW on the broad synthetic distribution.
    Pretrain,
    /// Adam at a lower rate on the narrower distribution.
    Finetune,
}

impl Phase {
    pub fn optimizer(self) -> OptimizerKind {
        match self {
            Phase::Pretrain => OptimizerKind::Adamw,
            Phase::Finetune => OptimizerKind::Adam,
        }
    }

    pub fn default_lr(self) -> f64 {
        match self {
            Phase::Pretrain => 1e-3,
            Phase::Finetune => 1e-4,
        }
    }
}

/// How the style loss reaches the parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum StyleGradient {
    /// The style gradient stops at the input of each MoE stage: only the
    /// shared experts and the style projection learn from it.
    #[default]
    Isolated,
    /// Plain gradient of the total loss.
    Exact,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub phase: Phase,
    pub seed: u64,
    pub style_gradient: StyleGradient,
}

impl TrainOptions {
    pub fn new(phase: Phase, epochs: usize, seed: u64) -> Self {
        Self {
            epochs,
            lr: phase.default_lr(),
            batch_size: 16,
            phase,
            seed,
            style_gradient: StyleGradient::Isolated,
        }
    }
}

/// A sample ready for the model.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub id: String,
    pub frames: Vec<Frame>,
    pub reference: ReferenceInput,
    /// Target of the style loss.
    pub style_embedding: Tensor,
    pub labels: Tensor,
}

/// Loads frames and embeds references.
pub fn prepare_samples(
    records: &[ProcessSample],
    base: &Path,
    embedder: &dyn StyleEmbedder,
    cfg: &PPJudgeConfig,
) -> Result<Vec<PreparedSample>> {
    if embedder.dim() != cfg.d_style {
        return Err(Error::Contract(format!(
            "style embedder has dimension {}, model expects {}",
            embedder.dim(),
            cfg.d_style
        )));
    }
    records
        .iter()
        .map(|r| {
            let loaded = r.load(base)?;
            if loaded.frames.len() > cfg.max_frames {
                return Err(Error::Range(format!(
                    "sample {} has {} frames, model accepts {}",
                    r.id,
                    loaded.frames.len(),
                    cfg.max_frames
                )));
            }
            let (reference, style_embedding) = match loaded.reference {
                LoadedReference::Image(f) => {
                    let e = embedder.embed_image_hinted(&f, r.style)?;
                    (ReferenceInput::Image(f), e)
                }
                LoadedReference::Prompt(text) => {
                    let e = embedder.embed_text(&text)?;
                    (ReferenceInput::Prompt(e.clone()), e)
                }
            };
            Ok(PreparedSample {
                id: r.id.clone(),
                frames: loaded.frames,
                reference,
                style_embedding,
                labels: r.scores.to_tensor(),
            })
        })
        .collect()
}

/// Gradient of every parameter, indexed like the store.
pub type ParamGrads = Vec<Option<Tensor>>;

fn collect_grads(store: &ParamStore, grads: &crate::numerics::Gradients, into: &mut ParamGrads, scale: f64) {
    if into.is_empty() {
        into.resize(store.len(), None);
    }
    for (id, g) in grads.params() {
        if let Some(g) = g {
            let slot = into[id.index()].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for (a, b) in slot.data_mut().iter_mut().zip(g.data()) {
                *a += scale * b;
            }
        }
    }
}

/// Loss of one sample and its parameter gradients.
pub fn sample_gradients(
    model: &PPJudge,
    store: &ParamStore,
    sample: &PreparedSample,
    alpha: &[f64],
    mode: StyleGradient,
) -> Result<(LossBreakdown, ParamGrads)> {
    let mut g = Graph::with_params(store);
    let trace = model.forward_graph(&mut g, &sample.frames, &sample.reference)?;
    let score = score_loss_graph(&mut g, trace.scores, &sample.labels)?;
    let w = g.param(model.style_proj);
    let (style, per_layer) = style_loss_graph(&mut g, &trace.shared_pooled, w, &sample.style_embedding, alpha)?;
    let loss = LossBreakdown::new(g.value(style).item(), per_layer, g.value(score).item());
    let mut grads = ParamGrads::new();
    match mode {
        StyleGradient::Exact => {
            let weighted = g.scale(score, LAMBDA_SCORE);
            let total = g.add(style, weighted)?;
            collect_grads(store, &g.backward(total)?, &mut grads, 1.0);
        }
        StyleGradient::Isolated => {
            collect_grads(store, &g.backward(score)?, &mut grads, LAMBDA_SCORE);
            let stopped = g.backward_with_stops(style, &trace.moe_inputs)?;
            collect_grads(store, &stopped, &mut grads, 1.0);
        }
    }
    Ok((loss, grads))
}

/// Loss of one sample without gradients.
pub fn sample_loss(model: &PPJudge, store: &ParamStore, sample: &PreparedSample, alpha: &[f64]) -> Result<LossBreakdown> {
    let mut g = Graph::with_params(store);
    let trace = model.forward_graph(&mut g, &sample.frames, &sample.reference)?;
    let score = score_loss_graph(&mut g, trace.scores, &sample.labels)?;
    let w = g.param(model.style_proj);
    let (style, per_layer) = style_loss_graph(&mut g, &trace.shared_pooled, w, &sample.style_embedding, alpha)?;
    Ok(LossBreakdown::new(g.value(style).item(), per_layer, g.value(score).item()))
}

/// Shuffled sample order for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean over the epoch's samples, each measured before its batch's update.
    pub loss: LossBreakdown,
    pub steps: Vec<StepLog>,
}

pub struct Trainer {
    pub model: PPJudge,
    pub store: ParamStore,
    pub optimizer: OptimizerState,
    pub options: TrainOptions,
    alpha: Vec<f64>,
    /// Epochs completed so far.
    pub epoch: usize,
    pub steps: usize,
}

impl Trainer {
    pub fn new(model: PPJudge, store: ParamStore, options: TrainOptions) -> Result<Self> {
        if options.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let alpha = alpha_schedule(model.config().n_blocks)?;
        let optimizer = OptimizerState::new(options.phase.optimizer(), options.lr)?;
        Ok(Self {
            model,
            store,
            optimizer,
            options,
            alpha,
            epoch: 0,
            steps: 0,
        })
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    /// Runs one epoch over `data`.
    pub fn train_epoch(&mut self, data: &[PreparedSample]) -> Result<EpochLog> {
        if data.is_empty() {
            return Err(Error::Contract("training set is empty".into()));
        }
        let order = epoch_order(data.len(), self.options.seed, self.epoch);
        let mut epoch_loss = LossBreakdown::default();
        let mut steps = Vec::new();
        for batch in order.chunks(self.options.batch_size) {
            let (model, store, alpha, mode) = (&self.model, &self.store, &self.alpha, self.options.style_gradient);
            let results = batch
                .par_iter()
                .map(|&i| sample_gradients(model, store, &data[i], alpha, mode))
                .collect::<Result<Vec<_>>>()?;
            self.store.zero_grads();
            let mut batch_loss = LossBreakdown::default();
            for (loss, grads) in &results {
                self.store.accumulate_from(grads, 1.0 / batch.len() as f64);
                batch_loss.accumulate(loss, batch.len());
                epoch_loss.accumulate(loss, data.len());
            }
            self.steps += 1;
            if !batch_loss.total.is_finite() {
                return Err(Error::Diverged {
                    step: self.steps,
                    message: format!("total loss {} in epoch {}", batch_loss.total, self.epoch + 1),
                });
            }
            self.optimizer.step(&mut self.store)?;
            steps.push(StepLog {
                step: self.steps,
                loss: batch_loss,
            });
        }
        self.epoch += 1;
        Ok(EpochLog {
            epoch: self.epoch,
            loss: epoch_loss,
            steps,
        })
    }

    /// Saves weights to `path` and optimizer state plus progress to
    /// `path` with an `.optim` suffix.
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.store, path)?;
        let mut state = self.optimizer.export(&self.store)?;
        state.insert("progress.epoch", Tensor::scalar(self.epoch as f64))?;
        state.insert("progress.steps", Tensor::scalar(self.steps as f64))?;
        checkpoint::save(&state, &optim_path(path))
    }

    /// Restores a run saved by [`Trainer::save`].
    pub fn resume(cfg: &PPJudgeConfig, path: &Path, options: TrainOptions) -> Result<Self> {
        let store = checkpoint::load(path)?;
        let model = PPJudge::bind(cfg, &store)?;
        let mut t = Self::new(model, store, options)?;
        let op = optim_path(path);
        if op.exists() {
            let state = checkpoint::load(&op)?;
            t.optimizer = OptimizerState::import(t.options.phase.optimizer(), t.options.lr, &state, &t.store)?;
            let get = |n: &str| state.id(n).map(|id| state.tensor(id).item() as usize).unwrap_or(0);
            t.epoch = get("progress.epoch");
            t.steps = get("progress.steps");
        }
        Ok(t)
    }
}

pub fn optim_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".optim");
    s.into()
}
