//! Key/value cache for frame-by-frame scoring.
//!
//! Attention is frame-causal, so the keys, values and final token states
//! of earlier frames never change when a frame is appended. The cache keeps
//! them, together with running sums of the final tokens and of the shared
//! expert outputs, so one appended frame costs attention over the cached
//! prefix plus the per-token work of its own tokens.

use std::sync::Arc;

use super::{ModelOutput, PPJudge, PPJudgeConfig, ReferenceInput};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor};
use crate::vision::Frame;

/// Scores after one appended frame.
#[derive(Clone, Debug)]
pub struct IncrementalStep {
    pub output: ModelOutput,
    /// Multiply-adds spent on this step.
    pub macs: u64,
}

#[derive(Clone, Debug)]
pub struct KVCache {
    /// Rotated keys of every block, `[tokens_cached, d_model]`.
    keys: Vec<Tensor>,
    values: Vec<Tensor>,
    /// Column sums of the normalized final tokens.
    final_sum: Vec<f64>,
    /// Column sums of each block's shared-expert output.
    shared_sums: Vec<Vec<f64>>,
    frames: usize,
    tokens: usize,
    cfg: PPJudgeConfig,
}

fn add_row_sums(acc: &mut [f64], t: &Tensor) {
    for row in t.data().chunks(acc.len()) {
        for (a, x) in acc.iter_mut().zip(row) {
            *a += x;
        }
    }
}

fn append_rows(base: &Tensor, extra: &Tensor) -> Tensor {
    let d = base.shape()[1];
    let mut data = base.data().to_vec();
    data.extend_from_slice(extra.data());
    Tensor::from_parts(vec![data.len() / d, d], data)
}

impl KVCache {
    /// Encodes the reference token.
    pub fn new(model: &PPJudge, store: &ParamStore, reference: &ReferenceInput) -> Result<Self> {
        let d = model.config().d_model;
        let mut cache = Self {
            keys: Vec::new(),
            values: Vec::new(),
            final_sum: vec![0.0; d],
            shared_sums: Vec::new(),
            frames: 0,
            tokens: 0,
            cfg: model.config().clone(),
        };
        let mut g = Graph::with_params(store);
        let h = model.embed_reference(&mut g, reference)?;
        cache.run(model, &mut g, h, &[(0, 0)], true)?;
        Ok(cache)
    }

    pub fn frames_cached(&self) -> usize {
        self.frames
    }

    pub fn tokens_cached(&self) -> usize {
        self.tokens
    }

    /// Runs `h` (new rows) through every block against the cached prefix
    /// and folds the results into the cache.
    fn run(
        &mut self,
        model: &PPJudge,
        g: &mut Graph,
        mut h: crate::numerics::Var,
        positions: &[(usize, usize)],
        first: bool,
    ) -> Result<()> {
        let table = model.plan().table(positions)?;
        let total = self.tokens + positions.len();
        let limits = Arc::new(vec![total; positions.len()]);
        let n_blocks = model.config().n_blocks;
        let mut new_keys = Vec::with_capacity(n_blocks);
        let mut new_values = Vec::with_capacity(n_blocks);
        let mut new_shared = Vec::with_capacity(n_blocks);
        for b in 0..n_blocks {
            let prefix = if first {
                None
            } else {
                Some((&self.keys[b], &self.values[b]))
            };
            let out = model.block_forward(g, b, h, &table, prefix, &limits)?;
            h = out.h;
            new_keys.push(g.value(out.k).clone());
            new_values.push(g.value(out.v).clone());
            new_shared.push(out.shared_tokens.map(|s| g.value(s).clone()));
        }
        let fin = model.head(g, h)?;
        let d = model.config().d_model;
        add_row_sums(&mut self.final_sum, g.value(fin));
        for (b, (k, v)) in new_keys.into_iter().zip(new_values).enumerate() {
            if first {
                self.keys.push(k);
                self.values.push(v);
                self.shared_sums.push(vec![0.0; d]);
            } else {
                self.keys[b] = append_rows(&self.keys[b], &k);
                self.values[b] = append_rows(&self.values[b], &v);
            }
            if let Some(s) = &new_shared[b] {
                add_row_sums(&mut self.shared_sums[b], s);
            }
        }
        self.tokens = total;
        Ok(())
    }

    /// Appends one frame and scores the sequence seen so far.
    pub fn append(&mut self, model: &PPJudge, store: &ParamStore, frame: &Frame) -> Result<IncrementalStep> {
        let cfg = model.config();
        if *cfg != self.cfg {
            return Err(Error::Contract("cache was built for a different model config".into()));
        }
        if self.frames >= cfg.max_frames {
            return Err(Error::Range(format!(
                "cache already holds max_frames = {} frames",
                cfg.max_frames
            )));
        }
        model.check_frame(frame)?;
        let t = self.frames + 1;
        let m = cfg.tokens_per_frame();
        let positions: Vec<(usize, usize)> = (0..m).map(|j| (j, t)).collect();
        let mut g = Graph::with_params(store);
        let tokens = model.embed_frame(&mut g, frame)?;
        self.run(model, &mut g, tokens, &positions, false)?;
        self.frames = t;

        let n = self.tokens as f64;
        let pooled = Tensor::from_parts(vec![1, cfg.d_model], self.final_sum.iter().map(|s| s / n).collect());
        let pv = g.input(pooled.clone());
        let scores = model.classifier.forward(&mut g, pv)?;
        let output = ModelOutput {
            scores: Tensor::vector(g.value(scores).data().to_vec()),
            shared_outputs: self
                .shared_sums
                .iter()
                .map(|s| Tensor::vector(s.iter().map(|x| x / n).collect()))
                .collect(),
            pooled_feature: Tensor::vector(pooled.into_data()),
        };
        Ok(IncrementalStep { output, macs: g.macs() })
    }
}
