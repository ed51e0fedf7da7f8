//! Picks keyframes from a long synthetic recording: every painting frame is
//! held for a while with light sensor noise, so most frames are redundant.

use anyhow::Result;
use ppjudge::data::synth::{synth_generate, SynthProfile};
use ppjudge::keyframe::{select_keyframes, KeyframeParams};
use ppjudge::vision::Frame;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let sample = synth_generate(&SynthProfile::clean(11, 2, 12))?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut video = Vec::new();
    for f in &sample.frames {
        let hold = rng.gen_range(6..14);
        for _ in 0..hold {
            let (h, w, c) = f.dims();
            let px = f.pixels().iter().map(|p| (p + rng.gen_range(-0.004..0.004)).clamp(0.0, 1.0)).collect();
            video.push(Frame::new(h, w, c, px)?);
        }
    }

    for params in [
        KeyframeParams::default(),
        KeyframeParams { n_min: 3, n_max: 6, ..KeyframeParams::default() },
        KeyframeParams { stride: 1, n_min: 10, n_max: 14, threshold_scale: 1.0 },
    ] {
        let sel = select_keyframes(&video, &params)?;
        println!(
            "stride {} bounds [{}, {}]: {} of {} frames, tau {:.4}\n  {:?}",
            params.stride,
            params.n_min,
            params.n_max,
            sel.indices.len(),
            video.len(),
            sel.tau,
            sel.indices
        );
    }
    Ok(())
}
