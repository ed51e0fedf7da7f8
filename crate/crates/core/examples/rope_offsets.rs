//! Shows the two properties of the temporally offset rotary embedding:
//! attention angles depend on spatial distance only through `q - k`, and
//! tokens of different frames are separated by a per-frame offset.

use anyhow::Result;
use ppjudge::numerics::Tensor;
use ppjudge::rope::{RopeConfig, RotationPlan};

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn main() -> Result<()> {
    let cfg = RopeConfig::new(8, 6);
    let plan = RotationPlan::new(&cfg)?;
    let q = Tensor::vector(vec![0.3, -1.2, 0.8, 0.5, -0.1, 0.9, 1.1, -0.4]);
    let k = Tensor::vector(vec![-0.7, 0.2, 0.6, -0.9, 0.4, 0.3, -0.5, 1.0]);

    println!("same frame, distance 3 at different absolute positions:");
    for p in [0, 5, 20] {
        let s = dot(&plan.rotate(&q, p + 3, 2)?, &plan.rotate(&k, p, 2)?);
        println!("  q at {:>2}, k at {:>2}: {s:+.6}", p + 3, p);
    }

    println!("same spatial position, growing frame gap:");
    for t in 1..=cfg.t_max {
        let s = dot(&plan.rotate(&q, 4, t)?, &plan.rotate(&k, 4, 1)?);
        println!("  frames 1 and {t}: {s:+.6}");
    }

    println!("temporal offset per pair at t = 1, 3, 6:");
    for t in [1, 3, 6] {
        let off = plan.temporal_offset(t)?;
        println!("  {t}: {:.4?}", off);
    }
    Ok(())
}
