//! The assessment transformer.
//!
//! A sequence is one reference token followed by the patch tokens of each
//! frame. Every block is a pre-norm residual pair: multi-head attention
//! with temporally corrected rotary encoding, then the heterogeneous MoE.
//! Attention is frame-causal: a token of frame `t` sees the reference and
//! every token of frames `1..=t`. Final tokens are layer-normalized,
//! mean-pooled and mapped to eight scores by a three-layer SiLU MLP.
//!
//! Frames are numbered from 1; the reference token sits at frame 0,
//! spatial position 0. Spatial positions restart at 0 in every frame.

mod cache;
mod config;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use cache::{IncrementalStep, KVCache};
pub use config::{PPJudgeConfig, N_ATTRIBUTES};

use crate::error::{Error, Result};
use crate::moe::{MoeLayer, RouterDecision, UsageStats};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::rope::RotationPlan;
use crate::vision::{patchify, Frame};

/// What the sequence is judged against.
#[derive(Clone, Debug, PartialEq)]
pub enum ReferenceInput {
    /// Embedded through the patch projection and mean-pooled to one token.
    Image(Frame),
    /// A style-embedder vector (`d_style`) projected to one token.
    Prompt(Tensor),
}

#[derive(Clone, Debug)]
struct Block {
    ln1: (ParamId, ParamId),
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2: (ParamId, ParamId),
    moe: MoeLayer,
}

/// Three affine layers with SiLU after the first two.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub layers: [(ParamId, ParamId); 3],
}

impl Classifier {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let (w, b) = (g.param(w), g.param(b));
            h = g.matmul(h, w)?;
            h = g.add_bias(h, b)?;
            if i < 2 {
                h = g.silu(h);
            }
        }
        Ok(h)
    }
}

/// Subtracted from every pixel before the patch projection.
pub const PIXEL_CENTER: f64 = 0.5;

/// Clamp into the `[1, 10]` rating range.
pub fn clamp_score(s: f64) -> f64 {
    s.clamp(1.0, 10.0)
}

/// Plain-value result of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    /// Raw classifier outputs, one per attribute.
    pub scores: Tensor,
    /// Token-mean of the shared-expert output of every block.
    pub shared_outputs: Vec<Tensor>,
    pub pooled_feature: Tensor,
}

impl ModelOutput {
    pub fn clamped_scores(&self) -> Vec<f64> {
        self.scores.data().iter().map(|&s| clamp_score(s)).collect()
    }
}

/// Graph handles from a forward pass, for losses and analysis.
pub struct ForwardTrace {
    /// `[1, 8]` raw scores.
    pub scores: Var,
    pub pooled: Var,
    /// `[1, d_model]` token-mean shared output per block.
    pub shared_pooled: Vec<Var>,
    /// Normalized input of each block's MoE stage.
    pub moe_inputs: Vec<Var>,
    pub decisions: Vec<Vec<RouterDecision>>,
    pub usage: Vec<UsageStats>,
    /// Rotated keys and values of each block.
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
    /// Layer-normalized final tokens.
    pub final_tokens: Var,
}

impl ForwardTrace {
    pub fn output(&self, g: &Graph) -> ModelOutput {
        ModelOutput {
            scores: Tensor::vector(g.value(self.scores).data().to_vec()),
            shared_outputs: self
                .shared_pooled
                .iter()
                .map(|&v| Tensor::vector(g.value(v).data().to_vec()))
                .collect(),
            pooled_feature: Tensor::vector(g.value(self.pooled).data().to_vec()),
        }
    }
}

pub(crate) struct BlockOut {
    h: Var,
    k: Var,
    v: Var,
    moe_input: Var,
    shared_pooled: Var,
    shared_tokens: Option<Var>,
    decisions: Vec<RouterDecision>,
    usage: UsageStats,
}

/// Parameter layout and forward logic. Values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct PPJudge {
    cfg: PPJudgeConfig,
    plan: RotationPlan,
    patch: (ParamId, ParamId),
    prompt: (ParamId, ParamId),
    blocks: Vec<Block>,
    final_ln: (ParamId, ParamId),
    pub classifier: Classifier,
    /// Projects pooled shared-expert outputs into the style space.
    pub style_proj: ParamId,
}

impl PPJudge {
    /// Builds the layout and a freshly initialized parameter store.
    pub fn init(cfg: &PPJudgeConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let d = cfg.d_model;
        let patch = (
            s.insert_uniform("embed.patch.w", &[cfg.patch_dim(), d], &mut rng)?,
            s.insert_zeros("embed.patch.b", &[d])?,
        );
        let prompt = (
            s.insert_uniform("embed.prompt.w", &[cfg.d_style, d], &mut rng)?,
            s.insert_zeros("embed.prompt.b", &[d])?,
        );
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for b in 0..cfg.n_blocks {
            let p = format!("block{b}");
            blocks.push(Block {
                ln1: (
                    s.insert_full(format!("{p}.ln1.g"), &[d], 1.0)?,
                    s.insert_zeros(format!("{p}.ln1.b"), &[d])?,
                ),
                wq: s.insert_uniform(format!("{p}.attn.wq"), &[d, d], &mut rng)?,
                wk: s.insert_uniform(format!("{p}.attn.wk"), &[d, d], &mut rng)?,
                wv: s.insert_uniform(format!("{p}.attn.wv"), &[d, d], &mut rng)?,
                wo: s.insert_uniform(format!("{p}.attn.wo"), &[d, d], &mut rng)?,
                ln2: (
                    s.insert_full(format!("{p}.ln2.g"), &[d], 1.0)?,
                    s.insert_zeros(format!("{p}.ln2.b"), &[d])?,
                ),
                moe: MoeLayer::init(&mut s, &format!("{p}.moe"), &cfg.moe, &mut rng)?,
            });
        }
        let final_ln = (
            s.insert_full("final_ln.g", &[d], 1.0)?,
            s.insert_zeros("final_ln.b", &[d])?,
        );
        let hid = cfg.classifier_hidden;
        let dims = [(d, hid), (hid, hid), (hid, cfg.n_attributes)];
        let mut layers = [(patch.0, patch.0); 3];
        for (i, &(a, b)) in dims.iter().enumerate() {
            layers[i] = (
                s.insert_uniform(format!("classifier.l{i}.w"), &[a, b], &mut rng)?,
                s.insert_zeros(format!("classifier.l{i}.b"), &[b])?,
            );
        }
        let style_proj = s.insert_uniform("style.proj", &[d, cfg.d_style], &mut rng)?;
        let model = Self {
            cfg: cfg.clone(),
            plan: RotationPlan::new(&cfg.rope)?,
            patch,
            prompt,
            blocks,
            final_ln,
            classifier: Classifier { layers },
            style_proj,
        };
        Ok((model, s))
    }

    /// Binds a loaded store to the layout of `cfg`; names and shapes must
    /// match exactly.
    pub fn bind(cfg: &PPJudgeConfig, store: &ParamStore) -> Result<Self> {
        let (model, fresh) = Self::init(cfg, 0)?;
        if fresh.len() != store.len() {
            return Err(Error::Contract(format!(
                "checkpoint has {} parameters, config expects {}",
                store.len(),
                fresh.len()
            )));
        }
        for ((_, a), (_, b)) in fresh.iter().zip(store.iter()) {
            if a.name != b.name || a.tensor.shape() != b.tensor.shape() {
                return Err(Error::Contract(format!(
                    "checkpoint parameter `{}` {:?} does not match config parameter `{}` {:?}",
                    b.name,
                    b.tensor.shape(),
                    a.name,
                    a.tensor.shape()
                )));
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &PPJudgeConfig {
        &self.cfg
    }

    pub fn plan(&self) -> &RotationPlan {
        &self.plan
    }

    pub fn moe_layers(&self) -> impl Iterator<Item = &MoeLayer> {
        self.blocks.iter().map(|b| &b.moe)
    }

    pub fn check_frame(&self, f: &Frame) -> Result<()> {
        let s = self.cfg.image_size;
        if f.dims() != (s, s, self.cfg.channels) {
            return Err(Error::Contract(format!(
                "frame is {:?}, model expects {s}x{s}x{}",
                f.dims(),
                self.cfg.channels
            )));
        }
        Ok(())
    }

    fn embed_frame(&self, g: &mut Graph, f: &Frame) -> Result<Var> {
        self.check_frame(f)?;
        // Centered so that layer norm does not erase a patch's brightness.
        let mut p = patchify(f, self.cfg.patch_size)?;
        p.data_mut().iter_mut().for_each(|v| *v -= PIXEL_CENTER);
        let x = g.input(p);
        let (w, b) = (g.param(self.patch.0), g.param(self.patch.1));
        let t = g.matmul(x, w)?;
        g.add_bias(t, b)
    }

    pub(crate) fn embed_reference(&self, g: &mut Graph, r: &ReferenceInput) -> Result<Var> {
        match r {
            ReferenceInput::Image(f) => {
                let t = self.embed_frame(g, f)?;
                g.mean_rows(t)
            }
            ReferenceInput::Prompt(e) => {
                if e.len() != self.cfg.d_style {
                    return Err(Error::Dimension(format!(
                        "prompt embedding of length {} for d_style {}",
                        e.len(),
                        self.cfg.d_style
                    )));
                }
                let x = g.input(Tensor::from_parts(vec![1, e.len()], e.data().to_vec()));
                let (w, b) = (g.param(self.prompt.0), g.param(self.prompt.1));
                let t = g.matmul(x, w)?;
                g.add_bias(t, b)
            }
        }
    }

    /// `(spatial position, frame)` for the reference and frames `first..=last`.
    fn positions(&self, with_reference: bool, first: usize, last: usize) -> Vec<(usize, usize)> {
        let m = self.cfg.tokens_per_frame();
        let mut pos = Vec::new();
        if with_reference {
            pos.push((0, 0));
        }
        for t in first..=last {
            pos.extend((0..m).map(|j| (j, t)));
        }
        pos
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn block_forward(
        &self,
        g: &mut Graph,
        b: usize,
        h: Var,
        table: &Arc<crate::numerics::RotationTable>,
        prefix: Option<(&Tensor, &Tensor)>,
        limits: &Arc<Vec<usize>>,
    ) -> Result<BlockOut> {
        let blk = &self.blocks[b];
        let eps = self.cfg.layer_norm_eps;
        let (g1, b1) = (g.param(blk.ln1.0), g.param(blk.ln1.1));
        let x = g.layer_norm(h, g1, b1, eps)?;
        let (wq, wk, wv, wo) = (g.param(blk.wq), g.param(blk.wk), g.param(blk.wv), g.param(blk.wo));
        let q = g.matmul(x, wq)?;
        let q = g.rope(q, table.clone())?;
        let k = g.matmul(x, wk)?;
        let k = g.rope(k, table.clone())?;
        let v = g.matmul(x, wv)?;
        let (k_all, v_all) = match prefix {
            Some((pk, pv)) => {
                let (pk, pv) = (g.input(pk.clone()), g.input(pv.clone()));
                (g.concat_rows(&[pk, k])?, g.concat_rows(&[pv, v])?)
            }
            None => (k, v),
        };
        let a = g.attention(q, k_all, v_all, self.cfg.n_heads, limits.clone())?;
        let a = g.matmul(a, wo)?;
        let h = g.add(h, a)?;
        let (g2, b2) = (g.param(blk.ln2.0), g.param(blk.ln2.1));
        let x2 = g.layer_norm(h, g2, b2, eps)?;
        let moe = blk.moe.forward(g, x2)?;
        let h = g.add(h, moe.delta)?;
        let shared_pooled = match moe.shared {
            Some(s) => g.mean_rows(s)?,
            None => g.input(Tensor::zeros(&[1, self.cfg.d_model])),
        };
        Ok(BlockOut {
            h,
            k,
            v,
            moe_input: x2,
            shared_pooled,
            shared_tokens: moe.shared,
            decisions: moe.decisions,
            usage: moe.stats,
        })
    }

    pub(crate) fn head(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let (fg, fb) = (g.param(self.final_ln.0), g.param(self.final_ln.1));
        g.layer_norm(h, fg, fb, self.cfg.layer_norm_eps)
    }

    /// Encodes the whole sequence at once.
    pub fn forward_graph(&self, g: &mut Graph, frames: &[Frame], reference: &ReferenceInput) -> Result<ForwardTrace> {
        if frames.is_empty() {
            return Err(Error::Contract("empty frame sequence".into()));
        }
        if frames.len() > self.cfg.max_frames {
            return Err(Error::Range(format!(
                "{} frames exceed max_frames {}",
                frames.len(),
                self.cfg.max_frames
            )));
        }
        let m = self.cfg.tokens_per_frame();
        let mut parts = vec![self.embed_reference(g, reference)?];
        for f in frames {
            parts.push(self.embed_frame(g, f)?);
        }
        let mut h = g.concat_rows(&parts)?;
        let table = self.plan.table(&self.positions(true, 1, frames.len()))?;
        let mut limits = vec![1usize];
        for t in 1..=frames.len() {
            limits.extend(std::iter::repeat(1 + m * t).take(m));
        }
        let limits = Arc::new(limits);

        let mut trace = ForwardTrace {
            scores: h,
            pooled: h,
            shared_pooled: Vec::new(),
            moe_inputs: Vec::new(),
            decisions: Vec::new(),
            usage: Vec::new(),
            keys: Vec::new(),
            values: Vec::new(),
            final_tokens: h,
        };
        for b in 0..self.blocks.len() {
            let out = self.block_forward(g, b, h, &table, None, &limits)?;
            h = out.h;
            trace.shared_pooled.push(out.shared_pooled);
            trace.moe_inputs.push(out.moe_input);
            trace.decisions.push(out.decisions);
            trace.usage.push(out.usage);
            trace.keys.push(out.k);
            trace.values.push(out.v);
        }
        let fin = self.head(g, h)?;
        let pooled = g.mean_rows(fin)?;
        trace.final_tokens = fin;
        trace.pooled = pooled;
        trace.scores = self.classifier.forward(g, pooled)?;
        Ok(trace)
    }

    pub fn forward_full(&self, store: &ParamStore, frames: &[Frame], reference: &ReferenceInput) -> Result<ModelOutput> {
        let mut g = Graph::with_params(store);
        let trace = self.forward_graph(&mut g, frames, reference)?;
        Ok(trace.output(&g))
    }

    /// Multiply-adds of one full forward pass.
    pub fn forward_full_macs(&self, store: &ParamStore, frames: &[Frame], reference: &ReferenceInput) -> Result<u64> {
        let mut g = Graph::with_params(store);
        self.forward_graph(&mut g, frames, reference)?;
        Ok(g.macs())
    }

    /// Starts an incremental session by encoding the reference token.
    pub fn start_cache(&self, store: &ParamStore, reference: &ReferenceInput) -> Result<KVCache> {
        KVCache::new(self, store, reference)
    }

    /// Appends one frame to `cache` and scores the extended sequence.
    pub fn forward_incremental(&self, store: &ParamStore, cache: &mut KVCache, frame: &Frame) -> Result<IncrementalStep> {
        cache.append(self, store, frame)
    }
}

/// Total scalar parameter count.
pub fn count_parameters(store: &ParamStore) -> usize {
    store.count()
}
