//! Rotary position encoding with a per-frame temporal correction.
//!
//! Tokens of a multi-frame sequence are indexed by a spatial position that
//! restarts at 0 in every frame, plus the frame index `t`. Each rotary pair
//! `i` is turned by
//!
//! ```text
//! angle_i(p, t) = p * theta_i + offset_i(t)
//! offset_i(t)   = -beta * theta_i * (t / t_max)^gamma
//! theta_i       = base^(-2i / d)
//! ```
//!
//! so spatially aligned tokens in neighbouring frames sit a small, bounded
//! angle apart instead of a whole frame's worth of positions. With
//! `beta = 0` the encoding is plain RoPE over the spatial index.
//!
//! `t_max` is a configuration constant rather than the length of the
//! current sequence, so keys cached for earlier frames stay valid as new
//! frames arrive.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RotationTable, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub base: f64,
    pub beta: f64,
    pub gamma: f64,
    pub t_max: usize,
}

impl RopeConfig {
    pub fn new(head_dim: usize, t_max: usize) -> Self {
        Self {
            head_dim,
            base: 10000.0,
            beta: 0.5,
            gamma: 1.0,
            t_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "rope head_dim must be even and positive, got {}",
                self.head_dim
            )));
        }
        if self.t_max == 0 {
            return Err(Error::Config("rope t_max must be at least 1".into()));
        }
        if !(self.base > 0.0 && self.base.is_finite()) {
            return Err(Error::Config(format!("rope base must be positive, got {}", self.base)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("rope beta must be >= 0, got {}", self.beta)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("rope gamma must be > 0, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Frequencies and per-frame offsets, built once per configuration.
#[derive(Clone, Debug)]
pub struct RotationPlan {
    cfg: RopeConfig,
    freqs: Vec<f64>,
    /// Row `t` holds `offset(t)` for `t` in `0..=t_max`.
    offsets: Vec<Vec<f64>>,
}

impl RotationPlan {
    pub fn new(cfg: &RopeConfig) -> Result<Self> {
        cfg.validate()?;
        let half = cfg.head_dim / 2;
        let freqs: Vec<f64> = (0..half)
            .map(|i| cfg.base.powf(-2.0 * i as f64 / cfg.head_dim as f64))
            .collect();
        let offsets = (0..=cfg.t_max)
            .map(|t| offset_row(cfg, &freqs, t))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            freqs,
            offsets,
        })
    }

    pub fn config(&self) -> &RopeConfig {
        &self.cfg
    }

    /// `theta_i` for each rotary pair.
    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn temporal_offset(&self, t: usize) -> Result<&[f64]> {
        self.offsets.get(t).map(Vec::as_slice).ok_or_else(|| {
            Error::Range(format!("frame index {t} exceeds t_max {}", self.cfg.t_max))
        })
    }

    /// Rotation angle of every pair for a token at `(pos, t)`.
    pub fn angles(&self, pos: usize, t: usize) -> Result<Vec<f64>> {
        let off = self.temporal_offset(t)?;
        Ok(self
            .freqs
            .iter()
            .zip(off)
            .map(|(f, o)| pos as f64 * f + o)
            .collect())
    }

    /// Rotates one head-sized vector.
    pub fn rotate(&self, v: &Tensor, pos: usize, t: usize) -> Result<Tensor> {
        if v.len() != self.cfg.head_dim {
            return Err(Error::Dimension(format!(
                "rotate: vector of length {} for head_dim {}",
                v.len(),
                self.cfg.head_dim
            )));
        }
        let angles = self.angles(pos, t)?;
        let x = v.data();
        let mut out = vec![0.0; x.len()];
        for (i, a) in angles.iter().enumerate() {
            let (s, c) = a.sin_cos();
            out[2 * i] = x[2 * i] * c - x[2 * i + 1] * s;
            out[2 * i + 1] = x[2 * i] * s + x[2 * i + 1] * c;
        }
        Ok(Tensor::from_parts(v.shape().to_vec(), out))
    }

    /// Relative angle per pair seen by a query at `(q_pos, q_t)` looking at
    /// a key at `(k_pos, k_t)`.
    pub fn attention_angle(
        &self,
        q_pos: usize,
        q_t: usize,
        k_pos: usize,
        k_t: usize,
    ) -> Result<Vec<f64>> {
        let (oq, ok) = (self.temporal_offset(q_t)?, self.temporal_offset(k_t)?);
        let dp = q_pos as f64 - k_pos as f64;
        Ok(self
            .freqs
            .iter()
            .zip(oq.iter().zip(ok))
            .map(|(f, (a, b))| dp * f + (a - b))
            .collect())
    }

    /// cos/sin tables for a token sequence given as `(pos, t)` pairs.
    pub fn table(&self, tokens: &[(usize, usize)]) -> Result<Arc<RotationTable>> {
        let half = self.freqs.len();
        let mut cos = Vec::with_capacity(tokens.len() * half);
        let mut sin = Vec::with_capacity(tokens.len() * half);
        for &(pos, t) in tokens {
            for a in self.angles(pos, t)? {
                let (s, c) = a.sin_cos();
                cos.push(c);
                sin.push(s);
            }
        }
        Ok(Arc::new(RotationTable { half, cos, sin }))
    }
}

fn offset_row(cfg: &RopeConfig, freqs: &[f64], t: usize) -> Vec<f64> {
    if t == 0 || cfg.beta == 0.0 {
        return vec![0.0; freqs.len()];
    }
    let frac = (t as f64 / cfg.t_max as f64).powf(cfg.gamma);
    freqs.iter().map(|f| -cfg.beta * f * frac).collect()
}

/// Offset for one frame without building a plan.
pub fn temporal_offset(t: usize, cfg: &RopeConfig) -> Result<Vec<f64>> {
    Ok(RotationPlan::new(cfg)?.temporal_offset(t)?.to_vec())
}
