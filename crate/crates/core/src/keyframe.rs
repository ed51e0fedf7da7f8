//! Keyframe extraction from a recorded painting video.
//!
//! Every `k`-th frame is considered. A frame becomes a keyframe when its
//! mean absolute pixel difference from the last keyframe reaches the
//! threshold `tau`, which starts at `c * total_change / n_max` and is
//! scaled by 1.5 up or down until the count lands within
//! `[n_min, n_max]`. The first frame is always kept and the last frame of
//! the video is appended if the scan did not reach it.
//!
//! A frame identical to the last keyframe is never kept, even at `tau = 0`,
//! so a static video yields just its two endpoints.
//!
//! The count is not monotone in `tau` and can jump over a narrow range of
//! bounds. When scaling brackets the bounds without landing inside them,
//! every distinct outcome is enumerated and the in-bounds one with the
//! threshold nearest the bracket is taken.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vision::Frame;

/// Growth/shrink factor applied to `tau` between scans.
pub const TAU_FACTOR: f64 = 1.5;

/// Below this `tau` is treated as zero when lowering.
const TAU_FLOOR: f64 = 1e-12;

const MAX_RESCANS: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyframeParams {
    pub stride: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub threshold_scale: f64,
}

impl Default for KeyframeParams {
    fn default() -> Self {
        Self {
            stride: 5,
            n_min: 5,
            n_max: 20,
            threshold_scale: 1.0,
        }
    }
}

impl KeyframeParams {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::Config("keyframe stride must be positive".into()));
        }
        if self.n_min == 0 || self.n_min > self.n_max {
            return Err(Error::Config(format!(
                "keyframe bounds need 1 <= n_min <= n_max, got {}..{}",
                self.n_min, self.n_max
            )));
        }
        if !(self.threshold_scale > 0.0 && self.threshold_scale.is_finite()) {
            return Err(Error::Config(format!(
                "threshold scale must be positive, got {}",
                self.threshold_scale
            )));
        }
        Ok(())
    }
}

/// Mean absolute difference over all pixels and channels.
pub fn frame_diff(a: &Frame, b: &Frame) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension(format!(
            "frame_diff of {:?} and {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let s: f64 = a.pixels().iter().zip(b.pixels()).map(|(x, y)| (x - y).abs()).sum();
    Ok(s / a.pixels().len() as f64)
}

/// Result of [`select_keyframes`].
#[derive(Clone, Debug, PartialEq)]
pub struct KeyframeSelection {
    /// Indices into the original video, strictly increasing.
    pub indices: Vec<usize>,
    /// Threshold of the final scan.
    pub tau: f64,
    /// Candidate indices after stride sampling.
    pub candidates: Vec<usize>,
}

/// Stride-sampled candidate indices; the last frame is always a candidate.
pub fn stride_indices(len: usize, stride: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).step_by(stride.max(1)).collect();
    if len > 0 && idx.last() != Some(&(len - 1)) {
        idx.push(len - 1);
    }
    idx
}

/// One greedy pass over `candidates` with threshold `tau`. `diff(i, j)`
/// compares original frames `i` and `j`.
pub fn greedy_scan(candidates: &[usize], tau: f64, diff: &dyn Fn(usize, usize) -> f64) -> Vec<usize> {
    let Some(&first) = candidates.first() else {
        return Vec::new();
    };
    let mut kept = vec![first];
    for &c in &candidates[1..] {
        let d = diff(*kept.last().unwrap(), c);
        if d > 0.0 && d >= tau {
            kept.push(c);
        }
    }
    let last = *candidates.last().unwrap();
    if *kept.last().unwrap() != last {
        kept.push(last);
    }
    kept
}

/// Adaptive-threshold keyframe selection.
pub fn select_keyframes(video: &[Frame], params: &KeyframeParams) -> Result<KeyframeSelection> {
    params.validate()?;
    if video.is_empty() {
        return Err(Error::Contract("keyframe selection of an empty video".into()));
    }
    for f in video {
        if f.dims() != video[0].dims() {
            return Err(Error::Contract("video frames differ in size".into()));
        }
    }
    let candidates = stride_indices(video.len(), params.stride);
    let memo = RefCell::new(HashMap::new());
    let diff = |i: usize, j: usize| {
        *memo
            .borrow_mut()
            .entry((i, j))
            .or_insert_with(|| frame_diff(&video[i], &video[j]).expect("uniform frames"))
    };
    let total: f64 = candidates.windows(2).map(|w| diff(w[0], w[1])).sum();
    let mut tau = params.threshold_scale * total / params.n_max as f64;
    let mut kept = greedy_scan(&candidates, tau, &diff);
    let in_bounds = |n: usize| n >= params.n_min && n <= params.n_max;

    let (mut low, mut high): (Option<f64>, Option<f64>) = (None, None);
    for _ in 0..MAX_RESCANS {
        let n = kept.len();
        if n > params.n_max {
            low = Some(tau);
        } else if n < params.n_min && tau > 0.0 {
            high = Some(tau);
        } else {
            break;
        }
        if low.is_some() && high.is_some() {
            // The count jumped across the bounds; scaling tau further
            // would only oscillate.
            break;
        }
        tau = match low {
            Some(_) if tau == 0.0 => TAU_FLOOR,
            Some(_) => tau * TAU_FACTOR,
            None => {
                let t = tau / TAU_FACTOR;
                if t < TAU_FLOOR {
                    0.0
                } else {
                    t
                }
            }
        };
        kept = greedy_scan(&candidates, tau, &diff);
    }
    if !in_bounds(kept.len()) && low.is_some() && high.is_some() {
        if let Some((t, k)) = sweep(&candidates, &diff, low.unwrap_or(0.0), &in_bounds) {
            tau = t;
            kept = k;
        }
    }
    Ok(KeyframeSelection {
        indices: kept,
        tau,
        candidates,
    })
}

/// Walks every distinct greedy outcome for thresholds from 0 upwards and
/// returns the in-bounds one whose threshold is nearest to `near`.
///
/// The outcome of a scan at `tau` stays the same until `tau` passes the
/// smallest compared difference that was still accepted, so stepping just
/// past that value visits each outcome once.
fn sweep(
    candidates: &[usize],
    diff: &dyn Fn(usize, usize) -> f64,
    near: f64,
    ok: &dyn Fn(usize) -> bool,
) -> Option<(f64, Vec<usize>)> {
    let mut tau = 0.0f64;
    let mut best: Option<(f64, Vec<usize>)> = None;
    loop {
        let kept = greedy_scan(candidates, tau, diff);
        if ok(kept.len()) {
            let closer = best.as_ref().map_or(true, |(t, _)| (tau - near).abs() < (t - near).abs());
            if closer {
                best = Some((tau, kept.clone()));
            }
            if tau >= near {
                return best;
            }
        }
        // Smallest accepted difference along this scan.
        let mut next = f64::INFINITY;
        let mut last = candidates[0];
        for &c in &candidates[1..] {
            let d = diff(last, c);
            if d > 0.0 && d >= tau {
                next = next.min(d);
                last = c;
            }
        }
        if !next.is_finite() {
            return best;
        }
        tau = next_up(next);
    }
}

/// Smallest float above a positive finite `x`.
fn next_up(x: f64) -> f64 {
    f64::from_bits(x.to_bits() + 1)
}

/// Frame files of `path`: a directory of numerically named images (sorted
/// by number), or a text file listing one path per line.
pub fn frame_paths(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let mut numbered = Vec::new();
        for entry in fs::read_dir(path).map_err(|e| Error::io(path, e))? {
            let p = entry.map_err(|e| Error::io(path, e))?.path();
            let n = p
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.parse::<u64>().ok());
            if let Some(n) = n {
                numbered.push((n, p));
            }
        }
        numbered.sort();
        if numbered.is_empty() {
            return Err(Error::Contract(format!("no numbered frames in {}", path.display())));
        }
        return Ok(numbered.into_iter().map(|(_, p)| p).collect());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| base.join(l))
        .collect())
}

pub fn load_frames(path: &Path) -> Result<Vec<Frame>> {
    frame_paths(path)?.iter().map(|p| Frame::load(p)).collect()
}
