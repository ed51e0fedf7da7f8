use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::MoeConfig;
use crate::rope::RopeConfig;

pub const N_ATTRIBUTES: usize = 8;

/// Architecture of the assessment model. Serialized as TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PPJudgeConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_attributes: usize,
    /// Longest frame sequence the model accepts; also the rope `t_max`.
    pub max_frames: usize,
    /// Frames are square `image_size x image_size`.
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub d_style: usize,
    pub classifier_hidden: usize,
    pub layer_norm_eps: f64,
    pub rope: RopeConfig,
    pub moe: MoeConfig,
}

impl PPJudgeConfig {
    /// CPU-trainable configuration: 8 blocks of width 64, 4 heads,
    /// 64x64 RGB frames cut into 8x8 patches (64 tokens per frame).
    pub fn desk() -> Self {
        let (d, heads, frames) = (64, 4, 10);
        Self {
            n_blocks: 8,
            d_model: d,
            n_heads: heads,
            n_attributes: N_ATTRIBUTES,
            max_frames: frames,
            image_size: 64,
            channels: 3,
            patch_size: 8,
            d_style: 64,
            classifier_hidden: d,
            layer_norm_eps: 1e-5,
            rope: RopeConfig::new(d / heads, frames),
            moe: MoeConfig::desk(d),
        }
    }

    /// Full-width configuration: width 512, 8 heads, 2 shared + 30 routed
    /// experts per block with a 32-wide expert bottleneck.
    pub fn reference() -> Self {
        let (d, heads, frames) = (512, 8, 10);
        Self {
            d_model: d,
            n_heads: heads,
            classifier_hidden: d,
            rope: RopeConfig::new(d / heads, frames),
            moe: MoeConfig::reference(d, 32),
            ..Self::desk()
        }
    }

    /// Small enough for finite-difference checks of the whole model.
    pub fn tiny() -> Self {
        let (d, heads, frames) = (8, 2, 3);
        let mut moe = MoeConfig::desk(d);
        moe.routed_depth_histogram = [(1, 2), (2, 1)].into_iter().collect();
        moe.top_k = 2;
        moe.expert_hidden = 6;
        Self {
            n_blocks: 2,
            d_model: d,
            n_heads: heads,
            n_attributes: N_ATTRIBUTES,
            max_frames: frames,
            image_size: 8,
            channels: 3,
            patch_size: 4,
            d_style: 4,
            classifier_hidden: 6,
            layer_norm_eps: 1e-5,
            rope: RopeConfig::new(d / heads, frames),
            moe,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn tokens_per_frame(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_blocks == 0 || self.d_model == 0 || self.n_heads == 0 {
            return bad("n_blocks, d_model and n_heads must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.n_attributes != N_ATTRIBUTES {
            return bad(format!("n_attributes must be {N_ATTRIBUTES}, got {}", self.n_attributes));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if !(self.channels == 1 || self.channels == 3) {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.rope.head_dim != self.head_dim() {
            return bad(format!(
                "rope.head_dim {} != d_model / n_heads = {}",
                self.rope.head_dim,
                self.head_dim()
            ));
        }
        if self.rope.t_max != self.max_frames {
            return bad(format!("rope.t_max {} != max_frames {}", self.rope.t_max, self.max_frames));
        }
        if self.moe.d_model != self.d_model {
            return bad(format!("moe.d_model {} != d_model {}", self.moe.d_model, self.d_model));
        }
        if self.max_frames == 0 || self.d_style == 0 || self.classifier_hidden == 0 {
            return bad("max_frames, d_style and classifier_hidden must be positive".into());
        }
        self.rope.validate()?;
        self.moe.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}
