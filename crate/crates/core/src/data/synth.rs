//! Procedural painting processes with rule-based ground-truth scores.
//!
//! A sample is a 64x64 canvas on which coloured shapes accumulate frame by
//! frame. Knobs of a [`SynthProfile`] control how often a frame carries a
//! defect and how far the painting develops:
//!
//! | knob                  | event per transition            | attribute             |
//! |-----------------------|---------------------------------|-----------------------|
//! | `color_jump_prob`     | palette hue rotates half a turn | color_stability       |
//! | `style_drift_prob`    | frame drawn in a foreign shape  | style_stability       |
//! | `layout_shift_prob`   | frame drawn off-centre          | composition_stability |
//! | `regression_prob`     | recent shapes are erased        | process_stability     |
//! | `detail_growth_rate`  | more, smaller shapes per frame  | detail_depth          |
//! | `palette_growth_rate` | more palette colours in use     | color_depth           |
//! | `layout_growth_rate`  | wider spread over the canvas    | composition_depth     |
//! | `corruption`          | reference blended to negative   | consistency           |
//!
//! Scores follow from the realized [`EventLog`] alone:
//!
//! ```text
//! stability = 10 - 9 * events / (n_frames - 1)      (10 for a single frame)
//! depth     = 1 + 9 * level / max_level
//! consistency = 10 - 9 * corruption
//! ```
//!
//! Rates saturate at 1, where the depth level is at its maximum.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{save_manifest, ProcessSample, Reference, Source, Split};
use super::scores::AttributeScores;
use crate::error::{Error, Result};
use crate::vision::{Frame, DESK_STYLES};

pub const CANVAS: usize = 64;
pub const DETAIL_LEVELS: usize = 6;
pub const PALETTE_LEVELS: usize = 7;
pub const LAYOUT_LEVELS: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthProfile {
    pub seed: u64,
    /// Index into the desk style list.
    pub style: usize,
    pub n_frames: usize,
    pub color_jump_prob: f64,
    pub regression_prob: f64,
    pub style_drift_prob: f64,
    pub layout_shift_prob: f64,
    pub detail_growth_rate: f64,
    pub palette_growth_rate: f64,
    pub layout_growth_rate: f64,
    pub corruption: f64,
}

impl SynthProfile {
    /// Defect-free, fully developed painting.
    pub fn clean(seed: u64, style: usize, n_frames: usize) -> Self {
        Self {
            seed,
            style,
            n_frames,
            color_jump_prob: 0.0,
            regression_prob: 0.0,
            style_drift_prob: 0.0,
            layout_shift_prob: 0.0,
            detail_growth_rate: 1.0,
            palette_growth_rate: 1.0,
            layout_growth_rate: 1.0,
            corruption: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_frames == 0 {
            return Err(Error::Config("n_frames must be at least 1".into()));
        }
        if self.style >= DESK_STYLES.len() {
            return Err(Error::Config(format!("style index {} out of range", self.style)));
        }
        let unit = [
            ("color_jump_prob", self.color_jump_prob),
            ("regression_prob", self.regression_prob),
            ("style_drift_prob", self.style_drift_prob),
            ("layout_shift_prob", self.layout_shift_prob),
            ("corruption", self.corruption),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        let rates = [
            ("detail_growth_rate", self.detail_growth_rate),
            ("palette_growth_rate", self.palette_growth_rate),
            ("layout_growth_rate", self.layout_growth_rate),
        ];
        for (name, v) in rates {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be >= 0")));
            }
        }
        Ok(())
    }
}

fn level(rate: f64, max: usize) -> usize {
    (rate.min(1.0) * max as f64).round() as usize
}

/// What happened at one frame.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameEvents {
    pub color_jump: bool,
    pub style_drift: bool,
    pub layout_shift: bool,
    pub regression: bool,
    pub shapes_added: usize,
    pub shapes_erased: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventLog {
    pub frames: Vec<FrameEvents>,
    pub detail_level: usize,
    pub palette_level: usize,
    pub layout_level: usize,
    pub corruption: f64,
}

impl EventLog {
    /// Ground-truth scores implied by the log.
    pub fn scores(&self) -> AttributeScores {
        let transitions = self.frames.len().saturating_sub(1);
        let stability = |count: usize| {
            if transitions == 0 {
                10.0
            } else {
                10.0 - 9.0 * count as f64 / transitions as f64
            }
        };
        let count = |f: fn(&FrameEvents) -> bool| self.frames.iter().filter(|e| f(e)).count();
        let depth = |l: usize, max: usize| 1.0 + 9.0 * l as f64 / max as f64;
        AttributeScores {
            consistency: 10.0 - 9.0 * self.corruption,
            style_stability: stability(count(|e| e.style_drift)),
            color_stability: stability(count(|e| e.color_jump)),
            composition_stability: stability(count(|e| e.layout_shift)),
            process_stability: stability(count(|e| e.regression)),
            detail_depth: depth(self.detail_level, DETAIL_LEVELS),
            color_depth: depth(self.palette_level, PALETTE_LEVELS),
            composition_depth: depth(self.layout_level, LAYOUT_LEVELS),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Rectangle,
    Triangle,
    Stroke,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [Self::Circle, Self::Rectangle, Self::Triangle, Self::Stroke];

    fn contains(self, dx: f64, dy: f64, r: f64, angle: f64) -> bool {
        match self {
            Self::Circle => dx * dx + dy * dy <= r * r,
            Self::Rectangle => dx.abs() <= r && dy.abs() <= 0.6 * r,
            Self::Triangle => dy >= -r && dy <= r && dx.abs() <= 0.5 * (dy + r),
            Self::Stroke => {
                let (s, c) = angle.sin_cos();
                let along = dx * c + dy * s;
                let across = -dx * s + dy * c;
                along.abs() <= 1.3 * r && across.abs() <= 1.5
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Shape {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    r: f64,
    angle: f64,
    color: [f64; 3],
}

struct StyleLook {
    background: [f64; 3],
    kind: ShapeKind,
    hue: f64,
    saturation: f64,
    value: f64,
    opacity: f64,
}

fn look(style: usize) -> StyleLook {
    match style {
        0 => StyleLook {
            background: [0.96, 0.94, 0.88],
            kind: ShapeKind::Circle,
            hue: 0.55,
            saturation: 0.45,
            value: 0.85,
            opacity: 0.6,
        },
        1 => StyleLook {
            background: [0.22, 0.17, 0.12],
            kind: ShapeKind::Rectangle,
            hue: 0.05,
            saturation: 0.8,
            value: 0.8,
            opacity: 1.0,
        },
        2 => StyleLook {
            background: [0.93, 0.93, 0.93],
            kind: ShapeKind::Stroke,
            hue: 0.0,
            saturation: 0.15,
            value: 0.3,
            opacity: 1.0,
        },
        _ => StyleLook {
            background: [0.08, 0.1, 0.18],
            kind: ShapeKind::Triangle,
            hue: 0.8,
            saturation: 0.9,
            value: 1.0,
            opacity: 1.0,
        },
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn render(background: [f64; 3], shapes: &[Shape], opacity: f64) -> Frame {
    let n = CANVAS;
    let mut px: Vec<f64> = (0..n * n).flat_map(|_| background).collect();
    for s in shapes {
        let reach = 1.4 * s.r + 2.0;
        let x0 = ((s.cx - reach).floor().max(0.0)) as usize;
        let x1 = ((s.cx + reach).ceil().min(n as f64 - 1.0)) as usize;
        let y0 = ((s.cy - reach).floor().max(0.0)) as usize;
        let y1 = ((s.cy + reach).ceil().min(n as f64 - 1.0)) as usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x as f64 + 0.5 - s.cx, y as f64 + 0.5 - s.cy);
                if s.kind.contains(dx, dy, s.r, s.angle) {
                    let o = (y * n + x) * 3;
                    for c in 0..3 {
                        px[o + c] = (1.0 - opacity) * px[o + c] + opacity * s.color[c];
                    }
                }
            }
        }
    }
    Frame::new(n, n, 3, px).expect("canvas dimensions are valid")
}

/// One generated process.
#[derive(Clone, Debug)]
pub struct SynthSample {
    pub profile: SynthProfile,
    pub frames: Vec<Frame>,
    pub reference: Frame,
    pub events: EventLog,
    pub scores: AttributeScores,
}

/// Renders a process. Deterministic in the profile.
pub fn synth_generate(profile: &SynthProfile) -> Result<SynthSample> {
    profile.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
    let st = look(profile.style);
    let n = profile.n_frames;
    let detail_level = level(profile.detail_growth_rate, DETAIL_LEVELS);
    let palette_level = level(profile.palette_growth_rate, PALETTE_LEVELS);
    let layout_level = level(profile.layout_growth_rate, LAYOUT_LEVELS);

    let per_frame = 1 + detail_level;
    let radius = 11.0 - 1.1 * detail_level as f64;
    let colors = 1 + palette_level;
    let half = CANVAS as f64 / 2.0;
    let final_extent = 8.0 + 4.0 * layout_level as f64;

    let mut hue_shift = 0.0;
    let mut shapes: Vec<Shape> = Vec::new();
    let mut added_per_frame: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(n);
    let mut frames = Vec::with_capacity(n);
    for t in 1..=n {
        let mut ev = FrameEvents::default();
        if t > 1 {
            ev.color_jump = rng.gen_bool(profile.color_jump_prob);
            ev.regression = rng.gen_bool(profile.regression_prob);
            let drift = rng.gen_bool(profile.style_drift_prob);
            let shift = rng.gen_bool(profile.layout_shift_prob);
            if !ev.regression {
                ev.style_drift = drift;
                ev.layout_shift = shift;
            }
        }
        if ev.color_jump {
            hue_shift += 0.5;
        }
        if ev.regression {
            // erase what the last two drawing frames added
            let erase: usize = added_per_frame.iter().rev().take(2).sum();
            let erase = erase.min(shapes.len());
            shapes.truncate(shapes.len() - erase);
            for _ in 0..2 {
                added_per_frame.pop();
            }
            ev.shapes_erased = erase;
        } else {
            let kind = if ev.style_drift {
                let others: Vec<ShapeKind> = ShapeKind::ALL.into_iter().filter(|k| *k != st.kind).collect();
                others[rng.gen_range(0..others.len())]
            } else {
                st.kind
            };
            let progress = t as f64 / n as f64;
            let extent = 4.0 + (final_extent - 4.0) * progress;
            let (cx0, cy0) = if ev.layout_shift {
                let q = rng.gen_range(0..4);
                let off = 18.0;
                (
                    half + if q % 2 == 0 { -off } else { off },
                    half + if q / 2 == 0 { -off } else { off },
                )
            } else {
                (half, half)
            };
            let spread = if ev.layout_shift { 6.0 } else { extent };
            for _ in 0..per_frame {
                let c = rng.gen_range(0..colors);
                let hue = st.hue + hue_shift + 0.09 * c as f64;
                shapes.push(Shape {
                    kind,
                    cx: (cx0 + rng.gen_range(-spread..=spread)).clamp(0.0, CANVAS as f64),
                    cy: (cy0 + rng.gen_range(-spread..=spread)).clamp(0.0, CANVAS as f64),
                    r: radius * rng.gen_range(0.8..1.2),
                    angle: rng.gen_range(0.0..std::f64::consts::PI),
                    color: hsv(hue, st.saturation, st.value),
                });
            }
            added_per_frame.push(per_frame);
            ev.shapes_added = per_frame;
        }
        frames.push(render(st.background, &shapes, st.opacity));
        log.push(ev);
    }

    let last = frames.last().expect("at least one frame");
    let c = profile.corruption;
    let reference = Frame::new(
        CANVAS,
        CANVAS,
        3,
        last.pixels().iter().map(|p| (1.0 - c) * p + c * (1.0 - p)).collect(),
    )?;
    let events = EventLog {
        frames: log,
        detail_level,
        palette_level,
        layout_level,
        corruption: c,
    };
    let scores = events.scores();
    Ok(SynthSample {
        profile: profile.clone(),
        frames,
        reference,
        events,
        scores,
    })
}

/// Knob distribution a dataset is drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Skill uniform over the whole range.
    Pretrain,
    /// Mostly competent painters; milder defects.
    Finetune,
}

/// Knob values forced for every sample; `None` leaves the knob random.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KnobOverrides {
    pub n_frames: Option<usize>,
    pub style: Option<usize>,
    pub color_jump_prob: Option<f64>,
    pub regression_prob: Option<f64>,
    pub style_drift_prob: Option<f64>,
    pub layout_shift_prob: Option<f64>,
    pub detail_growth_rate: Option<f64>,
    pub palette_growth_rate: Option<f64>,
    pub layout_growth_rate: Option<f64>,
    pub corruption: Option<f64>,
}

/// Draws a profile. A latent skill in `[0, 1]` lowers every defect
/// probability and raises every growth rate, each with its own noise.
pub fn sample_profile<R: Rng>(rng: &mut R, regime: Regime, n_frames: usize, o: &KnobOverrides) -> SynthProfile {
    let skill: f64 = match regime {
        Regime::Pretrain => rng.gen_range(0.0..1.0),
        Regime::Finetune => rng.gen_range(0.3..1.0),
    };
    let noise = Normal::new(0.0, 0.12).expect("valid normal");
    let mut draw = |mean: f64| (mean + noise.sample(rng)).clamp(0.0, 1.0);
    let defect = 0.9 * (1.0 - skill);
    let p = SynthProfile {
        seed: 0,
        style: 0,
        n_frames: o.n_frames.unwrap_or(n_frames),
        color_jump_prob: o.color_jump_prob.unwrap_or_else(|| draw(defect)),
        regression_prob: o.regression_prob.unwrap_or_else(|| draw(defect)),
        style_drift_prob: o.style_drift_prob.unwrap_or_else(|| draw(defect)),
        layout_shift_prob: o.layout_shift_prob.unwrap_or_else(|| draw(defect)),
        detail_growth_rate: o.detail_growth_rate.unwrap_or_else(|| draw(skill)),
        palette_growth_rate: o.palette_growth_rate.unwrap_or_else(|| draw(skill)),
        layout_growth_rate: o.layout_growth_rate.unwrap_or_else(|| draw(skill)),
        corruption: o.corruption.unwrap_or_else(|| draw(defect)),
    };
    SynthProfile {
        style: o.style.unwrap_or_else(|| rng.gen_range(0..DESK_STYLES.len())),
        seed: rng.gen(),
        ..p
    }
}

/// Specification of a generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub train: usize,
    pub test: usize,
    pub seed: u64,
    pub n_frames: usize,
    pub regime: Regime,
    pub overrides: KnobOverrides,
}

impl DatasetSpec {
    pub fn new(train: usize, test: usize, seed: u64) -> Self {
        Self {
            train,
            test,
            seed,
            n_frames: 10,
            regime: Regime::Pretrain,
            overrides: KnobOverrides::default(),
        }
    }

    /// Profiles in order: train samples first, then test samples.
    pub fn profiles(&self) -> Vec<(SynthProfile, Split)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.train + self.test)
            .map(|i| {
                let split = if i < self.train { Split::Train } else { Split::Test };
                (sample_profile(&mut rng, self.regime, self.n_frames, &self.overrides), split)
            })
            .collect()
    }
}

pub fn sample_id(i: usize) -> String {
    format!("s{i:05}")
}

/// Renders the dataset into `out` (one directory per sample, PNG frames,
/// `manifest.jsonl`) and returns the manifest records.
pub fn write_dataset(out: &Path, spec: &DatasetSpec) -> Result<Vec<ProcessSample>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut records = Vec::new();
    for (i, (profile, split)) in spec.profiles().into_iter().enumerate() {
        let s = synth_generate(&profile)?;
        let id = sample_id(i);
        let dir = out.join(&id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut frames = Vec::with_capacity(s.frames.len());
        for (t, f) in s.frames.iter().enumerate() {
            let name = format!("{id}/{:02}.png", t + 1);
            f.save_png(&out.join(&name))?;
            frames.push(name);
        }
        let ref_name = format!("{id}/ref.png");
        s.reference.save_png(&out.join(&ref_name))?;
        records.push(ProcessSample {
            id,
            reference: Reference::Image(ref_name),
            frames,
            scores: s.scores,
            split,
            source: Source::Synthetic,
            style: Some(profile.style),
        });
    }
    save_manifest(&out.join("manifest.jsonl"), &records)?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_profile_scores_top_marks() {
        let s = synth_generate(&SynthProfile::clean(3, 1, 10)).unwrap();
        assert_eq!(s.scores.to_array(), [10.0; 8]);
    }

    #[test]
    fn same_seed_same_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = sample_profile(&mut rng, Regime::Pretrain, 6, &KnobOverrides::default());
        let (a, b) = (synth_generate(&p).unwrap(), synth_generate(&p).unwrap());
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.reference, b.reference);
        assert_eq!(a.events, b.events);
    }

    #[test]
    fn constant_jumps_hit_the_floor() {
        let mut p = SynthProfile::clean(8, 0, 10);
        p.color_jump_prob = 1.0;
        let s = synth_generate(&p).unwrap();
        assert_eq!(s.events.frames.iter().filter(|e| e.color_jump).count(), 9);
        assert_eq!(s.scores.color_stability, 1.0);
    }

    #[test]
    fn regression_erases_shapes() {
        let mut p = SynthProfile::clean(2, 3, 6);
        p.regression_prob = 1.0;
        let s = synth_generate(&p).unwrap();
        assert!(s.events.frames[1..].iter().all(|e| e.regression && e.shapes_added == 0));
        assert_eq!(s.scores.process_stability, 1.0);
        let blank = Frame::new(CANVAS, CANVAS, 3, (0..CANVAS * CANVAS).flat_map(|_| look(3).background).collect()).unwrap();
        assert_eq!(s.frames[1], blank);
        assert_ne!(s.frames[0], blank);
    }

    #[test]
    fn invalid_profiles_rejected() {
        let mut p = SynthProfile::clean(0, 0, 4);
        p.regression_prob = 1.5;
        assert!(synth_generate(&p).is_err());
        let mut p = SynthProfile::clean(0, 0, 4);
        p.detail_growth_rate = -0.1;
        assert!(synth_generate(&p).is_err());
        assert!(synth_generate(&SynthProfile::clean(0, 9, 4)).is_err());
    }
}
