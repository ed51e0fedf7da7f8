use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Attribute names in canonical order.
pub const ATTRIBUTES: [&str; 8] = [
    "consistency",
    "style_stability",
    "color_stability",
    "composition_stability",
    "process_stability",
    "detail_depth",
    "color_depth",
    "composition_depth",
];

pub const SCORE_MIN: f64 = 1.0;
pub const SCORE_MAX: f64 = 10.0;

/// The eight ratings of one painting process, each in `[1, 10]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeScores {
    pub consistency: f64,
    pub style_stability: f64,
    pub color_stability: f64,
    pub composition_stability: f64,
    pub process_stability: f64,
    pub detail_depth: f64,
    pub color_depth: f64,
    pub composition_depth: f64,
}

impl AttributeScores {
    pub fn from_array(v: [f64; 8]) -> Result<Self> {
        let s = Self {
            consistency: v[0],
            style_stability: v[1],
            color_stability: v[2],
            composition_stability: v[3],
            process_stability: v[4],
            detail_depth: v[5],
            color_depth: v[6],
            composition_depth: v[7],
        };
        s.validate()?;
        Ok(s)
    }

    pub fn to_array(&self) -> [f64; 8] {
        [
            self.consistency,
            self.style_stability,
            self.color_stability,
            self.composition_stability,
            self.process_stability,
            self.detail_depth,
            self.color_depth,
            self.composition_depth,
        ]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::vector(self.to_array().to_vec())
    }

    /// Name of the first attribute outside `[1, 10]`, if any.
    pub fn out_of_range(&self) -> Option<(&'static str, f64)> {
        ATTRIBUTES
            .iter()
            .zip(self.to_array())
            .find(|(_, v)| !(SCORE_MIN..=SCORE_MAX).contains(v))
            .map(|(n, v)| (*n, v))
    }

    pub fn validate(&self) -> Result<()> {
        match self.out_of_range() {
            Some((name, v)) => Err(Error::Range(format!("{name} = {v} outside [1, 10]"))),
            None => Ok(()),
        }
    }
}
