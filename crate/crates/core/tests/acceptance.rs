//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs with a custom harness so the criteria execute in order and their
//! verdicts reach the terminal uncaptured. `PPJUDGE_CRITERIA=1,3,7` limits
//! the run to the listed criteria.

use std::collections::BTreeMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use clap::Parser;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ppjudge::commands::{embedder_for, loss_csv_path, run, Cli};
use ppjudge::data::synth::DatasetSpec;
use ppjudge::data::{
    acc, load_manifest, manifest_dir, mse, pcc, srcc, write_dataset, AttributeScores, Split, ATTRIBUTES,
};
use ppjudge::eval::evaluate;
use ppjudge::keyframe::{frame_diff, select_keyframes, stride_indices, KeyframeParams};
use ppjudge::losses::{
    alpha_schedule, score_loss, style_loss_graph, style_loss_layer, style_loss_total, total_loss, LossBreakdown,
};
use ppjudge::model::{count_parameters, PPJudge, PPJudgeConfig, ReferenceInput};
use ppjudge::moe::{usage_heatmap, MoeConfig, MoeLayer, RouterDecision};
use ppjudge::numerics::{Graph, ParamStore, RotationTable, Tensor, Var};
use ppjudge::rope::{temporal_offset, RopeConfig, RotationPlan};
use ppjudge::train::{prepare_samples, sample_gradients, sample_loss, Phase, StyleGradient, TrainOptions, Trainer};
use ppjudge::vision::Frame;

type Verdict = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn rand_frame(rng: &mut ChaCha8Rng, size: usize) -> Frame {
    Frame::new(size, size, 3, (0..size * size * 3).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `||a - n|| / max(||a||, ||n||)`; both vanishing counts as agreement.
fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-9 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

// ---------------------------------------------------------------- 1

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

type OpFn = dyn Fn(&mut Graph, &[Var]) -> ppjudge::Result<Var>;

/// Largest relative error between backward and central differences for
/// `sum(op(inputs) * r)` with a fixed random `r`.
fn check_op(op: &OpFn, inputs: &[Tensor], seed: u64) -> f64 {
    let eval = |xs: &[Tensor], want_grads: bool| -> (f64, Vec<Tensor>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone())).collect();
        let out = op(&mut g, &vars).unwrap();
        let shape = g.value(out).shape().to_vec();
        let r = rand_tensor(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xABCD), &shape);
        let r = g.input(r);
        let p = g.mul(out, r).unwrap();
        let loss = g.sum(p);
        let value = g.value(loss).item();
        if !want_grads {
            return (value, Vec::new());
        }
        let grads = g.backward(loss).unwrap();
        let gs = vars
            .iter()
            .zip(xs)
            .map(|(v, x)| grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
            .collect();
        (value, gs)
    };
    let (_, analytic) = eval(inputs, true);
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; x.len()];
        for j in 0..x.len() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] = x.data()[j] + FD_STEP;
            let up = eval(&xs, false).0;
            xs[i].data_mut()[j] = x.data()[j] - FD_STEP;
            let down = eval(&xs, false).0;
            numeric[j] = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_error(analytic[i].data(), &numeric));
    }
    worst
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Box<OpFn>, Vec<Tensor>)> {
    let (n, d) = (rng.gen_range(2..5), rng.gen_range(2..5) * 2);
    let mut cases: Vec<(&'static str, Box<OpFn>, Vec<Tensor>)> = Vec::new();
    let m = |rng: &mut ChaCha8Rng, r, c| rand_tensor(rng, &[r, c]);
    cases.push(("add", Box::new(|g, v| g.add(v[0], v[1])), vec![m(rng, n, d), m(rng, n, d)]));
    cases.push(("sub", Box::new(|g, v| g.sub(v[0], v[1])), vec![m(rng, n, d), m(rng, n, d)]));
    cases.push(("mul", Box::new(|g, v| g.mul(v[0], v[1])), vec![m(rng, n, d), m(rng, n, d)]));
    cases.push(("scale", Box::new(|g, v| Ok(g.scale(v[0], -1.7))), vec![m(rng, n, d)]));
    cases.push((
        "add_bias",
        Box::new(|g, v| g.add_bias(v[0], v[1])),
        vec![m(rng, n, d), rand_tensor(rng, &[d])],
    ));
    cases.push(("mul_col", Box::new(|g, v| g.mul_col(v[0], v[1])), vec![m(rng, n, d), m(rng, n, 1)]));
    cases.push(("matmul", Box::new(|g, v| g.matmul(v[0], v[1])), vec![m(rng, n, d), m(rng, d, 3)]));
    cases.push(("transpose", Box::new(|g, v| g.transpose(v[0])), vec![m(rng, n, d)]));
    cases.push((
        "reshape",
        Box::new(move |g, v| g.reshape(v[0], &[d, n])),
        vec![m(rng, n, d)],
    ));
    cases.push((
        "concat_rows",
        Box::new(|g, v| g.concat_rows(&[v[0], v[1], v[0]])),
        vec![m(rng, n, d), m(rng, 1, d)],
    ));
    cases.push(("slice_rows", Box::new(move |g, v| g.slice_rows(v[0], 1, n)), vec![m(rng, n, d)]));
    let idx: Arc<Vec<usize>> = Arc::new((0..n + 2).map(|_| rng.gen_range(0..n)).collect());
    let i2 = idx.clone();
    cases.push(("gather_rows", Box::new(move |g, v| g.gather_rows(v[0], i2.clone())), vec![m(rng, n, d)]));
    let i3 = idx.clone();
    cases.push((
        "scatter_rows",
        Box::new(move |g, v| g.scatter_rows(v[0], i3.clone(), n)),
        vec![m(rng, idx.len(), d)],
    ));
    let at: Arc<Vec<(usize, usize)>> = Arc::new((0..5).map(|_| (rng.gen_range(0..n), rng.gen_range(0..d))).collect());
    cases.push(("gather_elems", Box::new(move |g, v| g.gather_elems(v[0], at.clone())), vec![m(rng, n, d)]));
    cases.push(("sum", Box::new(|g, v| Ok(g.sum(v[0]))), vec![m(rng, n, d)]));
    cases.push(("mean", Box::new(|g, v| Ok(g.mean(v[0]))), vec![m(rng, n, d)]));
    cases.push(("mean_rows", Box::new(|g, v| g.mean_rows(v[0])), vec![m(rng, n, d)]));
    cases.push(("softmax_rows", Box::new(|g, v| g.softmax(v[0], 1)), vec![m(rng, n, d)]));
    cases.push(("softmax_cols", Box::new(|g, v| g.softmax(v[0], 0)), vec![m(rng, n, d)]));
    let pos = m(rng, n, d).map(|x| x.abs() + 0.2);
    cases.push(("row_normalize", Box::new(|g, v| g.row_normalize(v[0])), vec![pos]));
    cases.push(("silu", Box::new(|g, v| Ok(g.silu(v[0]))), vec![m(rng, n, d).map(|x| 3.0 * x)]));
    cases.push((
        "layer_norm",
        Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        vec![m(rng, n, d), rand_tensor(rng, &[d]), rand_tensor(rng, &[d])],
    ));
    cases.push(("cosine", Box::new(|g, v| g.cosine(v[0], v[1])), vec![m(rng, 1, d), m(rng, 1, d)]));
    let half = d / 2;
    let angles: Vec<f64> = (0..n * half).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let table = Arc::new(RotationTable {
        half,
        cos: angles.iter().map(|a| a.cos()).collect(),
        sin: angles.iter().map(|a| a.sin()).collect(),
    });
    cases.push(("rope", Box::new(move |g, v| g.rope(v[0], table.clone())), vec![m(rng, n, d)]));
    let nk = n + 3;
    let limits: Arc<Vec<usize>> = Arc::new((0..n).map(|_| rng.gen_range(1..=nk)).collect());
    cases.push((
        "attention",
        Box::new(move |g, v| g.attention(v[0], v[1], v[2], 2, limits.clone())),
        vec![m(rng, n, d), m(rng, nk, d), m(rng, nk, d)],
    ));
    cases
}

/// Relative error of every parameter's gradient of `f` against central
/// differences. Perturbations that change a routing decision are skipped
/// (the loss is not differentiable there) and counted.
fn check_params(
    store: &ParamStore,
    analytic: &[Option<Tensor>],
    f: &dyn Fn(&ParamStore) -> (f64, Vec<Vec<usize>>),
) -> (f64, usize) {
    let (_, base_routes) = f(store);
    let mut worst: f64 = 0.0;
    let mut skipped = 0;
    let mut work = store.clone();
    for (id, p) in store.iter() {
        let mut numeric = vec![0.0; p.tensor.len()];
        let mut a = analytic[id.index()]
            .clone()
            .map(Tensor::into_data)
            .unwrap_or_else(|| vec![0.0; p.tensor.len()]);
        for j in 0..p.tensor.len() {
            let x = p.tensor.data()[j];
            work.get_mut(id).tensor.data_mut()[j] = x + FD_STEP;
            let (up, r_up) = f(&work);
            work.get_mut(id).tensor.data_mut()[j] = x - FD_STEP;
            let (down, r_down) = f(&work);
            work.get_mut(id).tensor.data_mut()[j] = x;
            if r_up != base_routes || r_down != base_routes {
                skipped += 1;
                a[j] = 0.0;
                continue;
            }
            numeric[j] = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_error(&a, &numeric));
    }
    (worst, skipped)
}

fn routes(decisions: &[Vec<RouterDecision>]) -> Vec<Vec<usize>> {
    decisions
        .iter()
        .flat_map(|layer| layer.iter().map(|d| d.experts.clone()))
        .collect()
}

fn tiny_sample(seed: u64, cfg: &PPJudgeConfig) -> ppjudge::train::PreparedSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=cfg.max_frames);
    let frames = (0..n).map(|_| rand_frame(&mut rng, cfg.image_size)).collect();
    let reference = if seed % 3 == 0 {
        ReferenceInput::Prompt(rand_tensor(&mut rng, &[cfg.d_style]))
    } else {
        ReferenceInput::Image(rand_frame(&mut rng, cfg.image_size))
    };
    let style = rand_tensor(&mut rng, &[cfg.d_style]);
    let labels = Tensor::vector((0..8).map(|_| rng.gen_range(1.0..10.0)).collect());
    ppjudge::train::PreparedSample {
        id: format!("fd{seed}"),
        frames,
        reference,
        style_embedding: style,
        labels,
    }
}

fn criterion_gradients() -> Verdict {
    let mut worst_op: (f64, &str) = (0.0, "");
    let mut n_ops = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, op, inputs) in op_cases(&mut rng) {
            let e = check_op(op.as_ref(), &inputs, seed);
            n_ops += 1;
            if e > worst_op.0 {
                worst_op = (e, name);
            }
            ensure(e < FD_TOL, || format!("op {name} seed {seed}: relative error {e:.3e}"))?;
        }
    }

    // MoE stage with respect to its parameters.
    let mut worst_moe: f64 = 0.0;
    let mut skipped = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let cfg = MoeConfig {
            d_model: 4,
            shared_count: 1,
            shared_depth: 1,
            routed_depth_histogram: BTreeMap::from([(1, 2), (2, 1), (3, 1)]),
            top_k: 2,
            expert_hidden: 3,
        };
        let mut store = ParamStore::new();
        let layer = MoeLayer::init(&mut store, "moe", &cfg, &mut rng).unwrap();
        let x = rand_tensor(&mut rng, &[5, 4]);
        let r = rand_tensor(&mut rng, &[5, 4]);
        let f = |s: &ParamStore| -> (f64, Vec<Vec<usize>>, Option<ppjudge::numerics::Gradients>) {
            let mut g = Graph::with_params(s);
            let xv = g.input(x.clone());
            let out = layer.forward(&mut g, xv).unwrap();
            let rv = g.input(r.clone());
            let p = g.mul(out.delta, rv).unwrap();
            let l = g.sum(p);
            let routes = out.decisions.iter().map(|d| d.experts.clone()).collect();
            (g.value(l).item(), routes, Some(g.backward(l).unwrap()))
        };
        let (_, _, grads) = f(&store);
        let grads = grads.unwrap();
        let mut full = vec![None; store.len()];
        for (id, t) in grads.params() {
            full[id.index()] = t.cloned();
        }
        let (e, s) = check_params(&store, &full, &|st| {
            let (v, r, _) = f(st);
            (v, r)
        });
        worst_moe = worst_moe.max(e);
        skipped += s;
        ensure(e < FD_TOL, || format!("moe seed {seed}: relative error {e:.3e}"))?;
    }

    // End-to-end total loss of the tiny model, plain gradient.
    let cfg = PPJudgeConfig::tiny();
    let mut worst_e2e: f64 = 0.0;
    let mut n_params = 0;
    for seed in 0..20u64 {
        let (model, store) = PPJudge::init(&cfg, seed).unwrap();
        let sample = tiny_sample(seed, &cfg);
        let alpha = alpha_schedule(cfg.n_blocks).unwrap();
        let (_, grads) = sample_gradients(&model, &store, &sample, &alpha, StyleGradient::Exact).unwrap();
        let f = |s: &ParamStore| {
            let mut g = Graph::with_params(s);
            let trace = model.forward_graph(&mut g, &sample.frames, &sample.reference).unwrap();
            let r = routes(&trace.decisions);
            drop(g);
            (sample_loss(&model, s, &sample, &alpha).unwrap().total, r)
        };
        let (e, s) = check_params(&store, &grads, &f);
        n_params = store.count();
        worst_e2e = worst_e2e.max(e);
        skipped += s;
        ensure(e < FD_TOL, || format!("end-to-end seed {seed}: relative error {e:.3e}"))?;
    }
    Ok(format!(
        "{n_ops} op checks (worst {:.2e} in {}), moe worst {worst_moe:.2e}, end-to-end over {n_params} params worst {worst_e2e:.2e}, {skipped} routing-flip perturbations skipped; 20 seeds, tol {FD_TOL:.0e}",
        worst_op.0, worst_op.1
    ))
}

// ---------------------------------------------------------------- 2

fn criterion_incremental() -> Verdict {
    let cfg = PPJudgeConfig::desk();
    let mut worst: f64 = 0.0;
    let mut worst_ratio: f64 = 0.0;
    for seed in 0..20u64 {
        let (model, store) = PPJudge::init(&cfg, 1000 + seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames: Vec<Frame> = (0..cfg.max_frames).map(|_| rand_frame(&mut rng, cfg.image_size)).collect();
        let reference = ReferenceInput::Image(rand_frame(&mut rng, cfg.image_size));
        let mut cache = model.start_cache(&store, &reference).unwrap();
        let mut last_macs = 0;
        for n in 1..=frames.len() {
            let step = model.forward_incremental(&store, &mut cache, &frames[n - 1]).unwrap();
            let full = model.forward_full(&store, &frames[..n], &reference).unwrap();
            let d = step.output.scores.max_abs_diff(&full.scores);
            worst = worst.max(d);
            ensure(d < 1e-6, || format!("seed {seed}, {n} frames: max abs diff {d:.3e}"))?;
            last_macs = step.macs;
        }
        let full_macs = model.forward_full_macs(&store, &frames, &reference).unwrap();
        let ratio = last_macs as f64 / full_macs as f64;
        worst_ratio = worst_ratio.max(ratio);
        ensure(ratio < 0.25, || format!("seed {seed}: final append costs {ratio:.3} of a full forward"))?;
    }
    Ok(format!(
        "20 models x 1..10 frames: max |incremental - full| {worst:.2e} (tol 1e-6); final append / full forward multiply-adds <= {worst_ratio:.3} (tol 0.25)"
    ))
}

// ---------------------------------------------------------------- 3

/// Plain rotary encoding written from the textbook definition.
fn textbook_rope(x: &[f64], pos: usize, base: f64) -> Vec<f64> {
    let d = x.len();
    let mut out = vec![0.0; d];
    for i in 0..d / 2 {
        let theta = 1.0 / base.powf((2 * i) as f64 / d as f64);
        let a = pos as f64 * theta;
        out[2 * i] = x[2 * i] * a.cos() - x[2 * i + 1] * a.sin();
        out[2 * i + 1] = x[2 * i] * a.sin() + x[2 * i + 1] * a.cos();
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn criterion_rope() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_rel: f64 = 0.0;
    let mut worst_norm: f64 = 0.0;
    let mut worst_textbook: f64 = 0.0;
    for case in 0..200 {
        let head_dim = 2 * rng.gen_range(1..17);
        let t_max = rng.gen_range(1..21);
        let mut cfg = RopeConfig::new(head_dim, t_max);
        cfg.beta = rng.gen_range(0.0..2.0);
        cfg.gamma = rng.gen_range(0.25..3.0);
        let plan = RotationPlan::new(&cfg).unwrap();
        let q = rand_tensor(&mut rng, &[head_dim]);
        let k = rand_tensor(&mut rng, &[head_dim]);
        let t = rng.gen_range(0..=t_max);
        let (p1, p2, shift) = (rng.gen_range(0..64), rng.gen_range(0..64), rng.gen_range(0..64));

        // Same frame: the score depends only on the position difference.
        let s1 = dot(plan.rotate(&q, p1, t).unwrap().data(), plan.rotate(&k, p2, t).unwrap().data());
        let s2 = dot(
            plan.rotate(&q, p1 + shift, t).unwrap().data(),
            plan.rotate(&k, p2 + shift, t).unwrap().data(),
        );
        worst_rel = worst_rel.max((s1 - s2).abs());

        let r = plan.rotate(&q, p1, t).unwrap();
        worst_norm = worst_norm.max((r.norm() - q.norm()).abs());

        ensure(temporal_offset(0, &cfg).unwrap().iter().all(|&o| o == 0.0), || {
            format!("case {case}: offset(0) is not exactly zero")
        })?;
        let end = temporal_offset(t_max, &cfg).unwrap();
        for (i, (o, th)) in end.iter().zip(plan.freqs()).enumerate() {
            ensure(*o == -cfg.beta * th, || {
                format!("case {case}: offset(t_max)[{i}] = {o} != -beta*theta = {}", -cfg.beta * th)
            })?;
        }
        for (i, th) in plan.freqs().iter().enumerate() {
            let tb = 1.0 / cfg.base.powf((2 * i) as f64 / head_dim as f64);
            ensure((th - tb).abs() <= 1e-15 * tb.max(1.0), || format!("theta_{i} = {th} vs {tb}"))?;
        }

        // beta = 0 against the textbook encoding, both the single-vector
        // path and the batched graph op used by attention.
        let mut flat = cfg.clone();
        flat.beta = 0.0;
        let fplan = RotationPlan::new(&flat).unwrap();
        let toks: Vec<(usize, usize)> = (0..4).map(|_| (rng.gen_range(0..64), rng.gen_range(0..=t_max))).collect();
        let x = rand_tensor(&mut rng, &[toks.len(), head_dim * 2]);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = g.rope(xv, fplan.table(&toks).unwrap()).unwrap();
        for (row, &(p, tt)) in toks.iter().enumerate() {
            for h in 0..2 {
                let seg = &x.row(row)[h * head_dim..(h + 1) * head_dim];
                let want = textbook_rope(seg, p, cfg.base);
                let got = &g.value(y).row(row)[h * head_dim..(h + 1) * head_dim];
                let single = fplan.rotate(&Tensor::vector(seg.to_vec()), p, tt).unwrap();
                for ((a, b), c) in want.iter().zip(got).zip(single.data()) {
                    worst_textbook = worst_textbook.max((a - b).abs()).max((a - c).abs());
                }
            }
        }
    }
    ensure(worst_rel < 1e-10, || format!("relative-position invariance off by {worst_rel:.3e}"))?;
    ensure(worst_norm < 1e-12, || format!("rotation changed a norm by {worst_norm:.3e}"))?;
    ensure(worst_textbook < 1e-12, || format!("beta=0 differs from textbook RoPE by {worst_textbook:.3e}"))?;
    Ok(format!(
        "200 random configs: relative-position invariance {worst_rel:.1e} (tol 1e-10), norm {worst_norm:.1e} (tol 1e-12), offset(0)=0 and offset(T_max)=-beta*theta exact, beta=0 vs textbook {worst_textbook:.1e} (tol 1e-12)"
    ))
}

// ---------------------------------------------------------------- 4

fn moe_layer(seed: u64, cfg: &MoeConfig) -> (ParamStore, MoeLayer) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = MoeLayer::init(&mut store, "moe", cfg, &mut rng).unwrap();
    (store, layer)
}

fn moe_output(store: &ParamStore, layer: &MoeLayer, x: &Tensor) -> (Tensor, Vec<RouterDecision>) {
    let mut g = Graph::with_params(store);
    let xv = g.input(x.clone());
    let out = layer.forward(&mut g, xv).unwrap();
    (g.value(out.delta).clone(), out.decisions)
}

fn criterion_moe() -> Verdict {
    let cfg = MoeConfig::desk(16);
    let (store, layer) = moe_layer(4, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[10_000, 16]);
    let mut g = Graph::with_params(&store);
    let xv = g.input(x.clone());
    let (decisions, _) = layer.route(&mut g, xv).unwrap();
    let mut worst_sum: f64 = 0.0;
    for d in &decisions {
        let mut e = d.experts.clone();
        e.sort_unstable();
        e.dedup();
        ensure(e.len() == cfg.top_k && d.weights.len() == cfg.top_k, || {
            format!("token {} selected {} distinct experts", d.token, e.len())
        })?;
        ensure(d.weights.iter().all(|w| *w >= 0.0), || "negative routing weight".into())?;
        worst_sum = worst_sum.max((d.weights.iter().sum::<f64>() - 1.0).abs());
    }
    ensure(worst_sum < 1e-9, || format!("weights sum off by {worst_sum:.3e}"))?;

    // Identical routed experts: the router cannot matter.
    let uniform = MoeConfig {
        routed_depth_histogram: BTreeMap::from([(1, 8)]),
        ..cfg.clone()
    };
    let (mut ustore, ulayer) = moe_layer(5, &uniform);
    let first = ulayer.routed[0].clone();
    for e in &ulayer.routed[1..] {
        for (&(w, b), &(w0, b0)) in e.layers.iter().zip(&first.layers) {
            let (tw, tb) = (ustore.tensor(w0).clone(), ustore.tensor(b0).clone());
            ustore.get_mut(w).tensor = tw;
            ustore.get_mut(b).tensor = tb;
        }
    }
    let xs = rand_tensor(&mut rng, &[200, 16]);
    let (y1, _) = moe_output(&ustore, &ulayer, &xs);
    let mut other = ustore.clone();
    other.get_mut(ulayer.router).tensor = rand_tensor(&mut rng, &[16, 8]).map(|v| 5.0 * v);
    let (y2, _) = moe_output(&other, &ulayer, &xs);
    let router_gap = y1.max_abs_diff(&y2);
    ensure(router_gap < 1e-10, || format!("identical experts: router changed output by {router_gap:.3e}"))?;

    // Removing an expert no token picked leaves the output bit-identical.
    // Three tokens pick at most 12 of the 15 routed experts.
    let few = rand_tensor(&mut rng, &[3, 16]);
    let (y, decs) = moe_output(&store, &layer, &few);
    let mut used = vec![false; layer.routed.len()];
    for d in &decs {
        for &e in &d.experts {
            used[e] = true;
        }
    }
    let removed = used.iter().position(|u| !u);
    let removal = match removed {
        None => return Err("every routed expert was used by three tokens".into()),
        Some(e) => {
            let mut st = store.clone();
            let r = store.tensor(layer.router);
            let (rows, cols) = r.as_matrix_dims();
            let mut data = Vec::with_capacity(rows * (cols - 1));
            for i in 0..rows {
                for j in 0..cols {
                    if j != e {
                        data.push(r.data()[i * cols + j]);
                    }
                }
            }
            let rid = st.insert("moe.router_reduced.w", Tensor::matrix(rows, cols - 1, data).unwrap()).unwrap();
            let mut reduced = layer.clone();
            let depth = reduced.routed.remove(e).depth;
            *reduced.cfg.routed_depth_histogram.get_mut(&depth).unwrap() -= 1;
            reduced.router = rid;
            let (y_red, _) = moe_output(&st, &reduced, &few);
            ensure(y_red.data() == y.data(), || format!("removing idle expert {e} changed the output"))?;
            e
        }
    };

    // Heatmap against an independent recount.
    let depths = layer.routed_depths();
    let names: Vec<String> = ATTRIBUTES.iter().map(|s| s.to_string()).collect();
    let mut worst_row: f64 = 0.0;
    for trial in 0..20 {
        let attribution: Vec<Vec<f64>> = (0..decs.len())
            .map(|_| {
                let mut w: Vec<f64> = (0..8).map(|_| rng.gen::<f64>().powi(4)).collect();
                let s: f64 = w.iter().sum();
                w.iter_mut().for_each(|v| *v /= s);
                w
            })
            .collect();
        let hm = usage_heatmap(&decs, &depths, &attribution, &names).unwrap();
        let mut distinct = depths.clone();
        distinct.sort_unstable();
        distinct.dedup();
        for a in 0..8 {
            let mut counts = vec![0u64; distinct.len()];
            for (d, attr) in decs.iter().zip(&attribution) {
                if attr[a] > 0.5 {
                    for &e in &d.experts {
                        let c = distinct.iter().position(|&x| x == depths[e]).unwrap();
                        counts[c] += 1;
                    }
                }
            }
            ensure(hm.counts[a] == counts, || format!("trial {trial}: attribute {a} counts differ from recount"))?;
            let total: u64 = counts.iter().sum();
            if total > 0 {
                let s: f64 = hm.rows[a].iter().sum();
                worst_row = worst_row.max((s - 1.0).abs());
                for (v, c) in hm.rows[a].iter().zip(&counts) {
                    ensure(*v == *c as f64 / total as f64, || "normalized row differs from recount".into())?;
                }
            }
        }
    }
    ensure(worst_row < 1e-9, || format!("heatmap row sums off by {worst_row:.3e}"))?;
    Ok(format!(
        "10000 tokens: top-{} distinct, weight sums within {worst_sum:.1e}; identical experts router gap {router_gap:.1e} (tol 1e-10); idle expert {removal} removed bit-identically; 20 heatmaps match recount, rows sum within {worst_row:.1e}",
        cfg.top_k
    ))
}

// ---------------------------------------------------------------- 5

fn criterion_losses() -> Verdict {
    for l in 1..=64 {
        let a = alpha_schedule(l).unwrap();
        ensure(a[l - 1] == 0.8, || format!("alpha_L for L={l} is {}", a[l - 1]))?;
        ensure(a[0] >= 0.0 && a.windows(2).all(|w| w[0] < w[1]), || format!("alpha for L={l} not increasing"))?;
    }
    let a8 = alpha_schedule(8).unwrap();
    let e = std::f64::consts::E;
    let want = 0.8 * ((1.0f64 / 8.0).exp() - 1.0) / (e - 1.0);
    ensure((a8[0] - want).abs() < 1e-15, || format!("alpha_1 = {} vs {want}", a8[0]))?;
    ensure(alpha_schedule(0).is_err(), || "L=0 accepted".into())?;

    let w = Tensor::eye(4);
    let v = Tensor::vector(vec![1.0, 2.0, -1.0, 0.5]);
    let cases = [
        (v.map(|x| 3.0 * x), 0.0),
        (Tensor::vector(vec![2.0, -1.0, 0.0, 0.0]), 1.0),
        (v.map(|x| -0.5 * x), 2.0),
    ];
    for (o, want) in &cases {
        let got = style_loss_layer(o, &w, &v).unwrap();
        ensure(got == *want, || format!("style loss {got} != {want}"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let o = rand_tensor(&mut rng, &[6]);
        let wp = rand_tensor(&mut rng, &[6, 3]);
        let s = rand_tensor(&mut rng, &[3]);
        let l = style_loss_layer(&o, &wp, &s).unwrap();
        ensure((0.0..=2.0).contains(&l), || format!("style loss {l} outside [0,2]"))?;
    }
    let ones = Tensor::vector(vec![5.0; 8]);
    ensure(score_loss(&ones, &ones).unwrap() == 0.0, || "score(y,y) != 0".into())?;
    ensure(score_loss(&ones.map(|x| x + 1.0), &ones).unwrap() == 1.0, || "offset 1 != 1".into())?;
    let mut p = ones.clone();
    p.data_mut()[0] = 2.0;
    ensure(score_loss(&p, &ones).unwrap() == 9.0 / 8.0, || "single diff 3 != 9/8".into())?;
    ensure(total_loss(0.5, 0.1) == 1.5 && total_loss(0.0, 0.0) == 0.0, || "total_loss hand cases".into())?;
    for _ in 0..1000 {
        let (s, c) = (rng.gen_range(0.0..2.0), rng.gen_range(0.0..100.0));
        ensure(LossBreakdown::new(s, vec![], c).total == s + 10.0 * c, || "breakdown total".into())?;
    }
    let all_one: Vec<Tensor> = (0..8).map(|_| Tensor::vector(vec![2.0, -1.0, 0.0, 0.0])).collect();
    let (t, _) = style_loss_total(&all_one, &w, &v, &a8).unwrap();
    ensure(t == a8.iter().map(|a| a * 1.0).sum::<f64>(), || "all-ones style total != sum alpha".into())?;

    // Isolation: the stopped style gradient touches only shared experts and
    // the projection; routed experts and everything upstream stay clean.
    let cfg = PPJudgeConfig::tiny();
    let mut checked = 0;
    for seed in 0..5u64 {
        let (model, store) = PPJudge::init(&cfg, seed).unwrap();
        let sample = tiny_sample(seed + 1, &cfg);
        let mut g = Graph::with_params(&store);
        let trace = model.forward_graph(&mut g, &sample.frames, &sample.reference).unwrap();
        let wv = g.param(model.style_proj);
        let (style, _) = style_loss_graph(&mut g, &trace.shared_pooled, wv, &sample.style_embedding, &a8[..2]).unwrap();
        let grads = g.backward_with_stops(style, &trace.moe_inputs).unwrap();
        let mut touched_shared = false;
        for (id, gr) in grads.params() {
            let name = &store.get(id).name;
            let nonzero = gr.is_some_and(|t| t.data().iter().any(|x| *x != 0.0));
            let allowed = name.contains(".shared") || name == "style.proj";
            ensure(allowed || !nonzero, || format!("style gradient reached {name}"))?;
            touched_shared |= nonzero && name.contains(".shared");
            if name.contains(".routed") {
                checked += 1;
            }
        }
        ensure(touched_shared, || "style gradient never reached a shared expert".into())?;
        // The training step in its default mode uses the same isolation.
        let alpha = alpha_schedule(cfg.n_blocks).unwrap();
        let (_, iso) = sample_gradients(&model, &store, &sample, &alpha, StyleGradient::Isolated).unwrap();
        let mut g = Graph::with_params(&store);
        let trace = model.forward_graph(&mut g, &sample.frames, &sample.reference).unwrap();
        let score = ppjudge::losses::score_loss_graph(&mut g, trace.scores, &sample.labels).unwrap();
        let only_score = g.backward(score).unwrap();
        for (id, gr) in only_score.params() {
            let name = &store.get(id).name;
            if name.contains(".routed") {
                let a = gr.map(|t| t.map(|x| 10.0 * x));
                let b = iso[id.index()].clone();
                let same = match (a, b) {
                    (Some(a), Some(b)) => a.max_abs_diff(&b) == 0.0,
                    (None, None) => true,
                    (Some(a), None) | (None, Some(a)) => a.data().iter().all(|x| *x == 0.0),
                };
                ensure(same, || format!("training gradient of {name} carries a style component"))?;
            }
        }
    }
    Ok(format!(
        "alpha_L = 0.8 exactly for L=1..64; style loss cases 0/1/2 exact and range [0,2]; MSE hand cases exact; total = style + 10*score exact; {checked} routed-expert tensors receive zero style gradient"
    ))
}

// ---------------------------------------------------------------- 6

/// Frames per synthetic sample in the learning benchmark.
const BENCH_FRAMES: usize = 5;

fn criterion_learning() -> Verdict {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut spec = DatasetSpec::new(200, 50, 42);
    spec.n_frames = BENCH_FRAMES;
    write_dataset(dir.path(), &spec).unwrap();
    let manifest = dir.path().join("manifest.jsonl");
    let cfg = PPJudgeConfig::desk();
    let records = load_manifest(&manifest).unwrap();
    let embedder = embedder_for(&cfg).unwrap();
    let base = manifest_dir(&manifest);
    let (train_r, test_r): (Vec<_>, Vec<_>) = records.into_iter().partition(|r| r.split == Split::Train);
    let train = prepare_samples(&train_r, &base, &embedder, &cfg).unwrap();
    let test = prepare_samples(&test_r, &base, &embedder, &cfg).unwrap();

    let (model, store) = PPJudge::init(&cfg, 42).unwrap();
    let mut trainer = Trainer::new(model, store, TrainOptions::new(Phase::Pretrain, 30, 42)).unwrap();
    let mut curve = Vec::new();
    for _ in 0..30 {
        let log = trainer.train_epoch(&train).unwrap();
        curve.push(log.loss.total);
    }
    let (pred, report) = evaluate(&trainer.model, &trainer.store, &test).unwrap();
    let _ = pred;
    let mean: Vec<f64> = (0..8)
        .map(|a| train.iter().map(|s| s.labels.data()[a]).sum::<f64>() / train.len() as f64)
        .collect();
    let mut beats = 0;
    let mut cells = Vec::new();
    for (a, row) in report.rows.iter().enumerate() {
        let base_mse = test.iter().map(|s| (s.labels.data()[a] - mean[a]).powi(2)).sum::<f64>() / test.len() as f64;
        if row.mse < base_mse {
            beats += 1;
        }
        cells.push(format!("{}:{:.2}/{:.2}", &row.name[..5.min(row.name.len())], row.mse, base_mse));
    }
    let ratio = curve[29] / curve[0];
    let mean_srcc = report.mean.srcc.unwrap_or(f64::NAN);
    let detail = format!(
        "loss {:.2} -> {:.2} (ratio {ratio:.3}, need < 0.5); MSE below mean baseline on {beats}/8 (need >= 6) [{}]; mean SRCC {mean_srcc:.3} (need > 0.5); {:.0}s",
        curve[0],
        curve[29],
        cells.join(" "),
        start.elapsed().as_secs_f64()
    );
    if ratio < 0.5 && beats >= 6 && mean_srcc > 0.5 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 7

/// Keeps a candidate when its difference to the last kept one reaches
/// `tau`; identical frames are never kept; the final candidate is forced.
fn greedy_oracle(video: &[Frame], candidates: &[usize], tau: f64) -> Vec<usize> {
    let mut out = vec![candidates[0]];
    for &c in &candidates[1..] {
        let last = *out.last().unwrap();
        let d: f64 = video[last]
            .pixels()
            .iter()
            .zip(video[c].pixels())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / video[c].pixels().len() as f64;
        if d != 0.0 && d >= tau {
            out.push(c);
        }
    }
    if out.last() != candidates.last() {
        out.push(*candidates.last().unwrap());
    }
    out
}

/// Every threshold at which some greedy scan can change: 0 and each
/// pairwise difference, plus the next float above it.
fn all_thresholds(video: &[Frame], candidates: &[usize]) -> Vec<f64> {
    let mut t = vec![0.0];
    for (a, &i) in candidates.iter().enumerate() {
        for &j in &candidates[a + 1..] {
            let d = frame_diff(&video[i], &video[j]).unwrap();
            t.push(d);
            t.push(f64::from_bits(d.to_bits() + 1));
        }
    }
    t
}

/// A painting-like video: blocks are painted in one by one, with the odd
/// abrupt recolouring.
fn random_video(rng: &mut ChaCha8Rng) -> Vec<Frame> {
    let len = rng.gen_range(1..150);
    let size = 12;
    let mut px = vec![1.0; size * size * 3];
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        if rng.gen_bool(0.03) {
            let shift = rng.gen_range(0.2..0.8);
            px.iter_mut().for_each(|p| *p = (*p + shift) % 1.0);
        }
        let (y0, x0) = (rng.gen_range(0..size), rng.gen_range(0..size));
        let (h, w) = (rng.gen_range(1..5), rng.gen_range(1..5));
        let c: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
        for y in y0..(y0 + h).min(size) {
            for x in x0..(x0 + w).min(size) {
                for ch in 0..3 {
                    px[(y * size + x) * 3 + ch] = c[ch];
                }
            }
        }
        out.push(Frame::new(size, size, 3, px.clone()).unwrap());
    }
    out
}

fn criterion_keyframes() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut in_bounds, mut unattainable) = (0, 0);
    for case in 0..100 {
        let video = random_video(&mut rng);
        let n_min = rng.gen_range(1..8);
        let params = KeyframeParams {
            stride: rng.gen_range(1..7),
            n_min,
            n_max: rng.gen_range(n_min.max(2)..n_min + 16),
            threshold_scale: rng.gen_range(0.3..3.0),
        };
        let sel = select_keyframes(&video, &params).unwrap();
        let idx = &sel.indices;
        let tag = || format!("case {case} ({} frames, {params:?})", video.len());
        ensure(idx.windows(2).all(|w| w[0] < w[1]), || format!("{}: not increasing", tag()))?;
        ensure(idx[0] == 0 && *idx.last().unwrap() == video.len() - 1, || format!("{}: endpoints", tag()))?;
        let candidates = stride_indices(video.len(), params.stride);
        ensure(sel.candidates == candidates, || format!("{}: candidate set", tag()))?;
        if idx.len() >= params.n_min && idx.len() <= params.n_max {
            in_bounds += 1;
        } else {
            // Out of bounds is only acceptable when no threshold at all
            // gives an in-bounds greedy scan.
            let reachable = all_thresholds(&video, &candidates)
                .into_iter()
                .map(|t| greedy_oracle(&video, &candidates, t).len())
                .any(|n| n >= params.n_min && n <= params.n_max);
            ensure(!reachable, || format!("{}: {} keyframes outside attainable bounds", tag(), idx.len()))?;
            unattainable += 1;
        }
        for w in idx.windows(2).take(idx.len().saturating_sub(2)) {
            let d = frame_diff(&video[w[0]], &video[w[1]]).unwrap();
            ensure(d >= sel.tau, || format!("{}: kept pair diff {d} below tau {}", tag(), sel.tau))?;
        }
        let oracle = greedy_oracle(&video, &candidates, sel.tau);
        ensure(*idx == oracle, || format!("{}: {idx:?} vs oracle {oracle:?}", tag()))?;
        ensure(select_keyframes(&video, &params).unwrap() == sel, || format!("{}: not deterministic", tag()))?;
    }
    let still = vec![Frame::filled(4, 4, 3, 0.3).unwrap(); 23];
    let sel = select_keyframes(&still, &KeyframeParams::default()).unwrap();
    ensure(sel.indices == vec![0, 22], || format!("static video gave {:?}", sel.indices))?;
    Ok(format!(
        "100 random videos: increasing, endpoints, tau rule and greedy oracle exact; count within bounds on {in_bounds}, bounds unattainable by any tau on {unattainable}; static video -> [first, last]"
    ))
}

// ---------------------------------------------------------------- 8

fn brute_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|x| {
            let less = v.iter().filter(|y| *y < x).count() as f64;
            let equal = v.iter().filter(|y| *y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

fn brute_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - sa / n) * (y - sb / n)).sum();
    let va: f64 = a.iter().map(|x| (x - sa / n).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - sb / n).powi(2)).sum();
    cov / va.sqrt() / vb.sqrt()
}

fn brute_round(x: f64) -> f64 {
    let m = (x.abs() + 0.5).floor();
    if x < 0.0 {
        -m
    } else {
        m
    }
}

fn criterion_metrics() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    let mut tie_cases = 0;
    for case in 0..100 {
        let n = rng.gen_range(3..60);
        let kind = case % 3;
        let draw = |rng: &mut ChaCha8Rng| match kind {
            0 => rng.gen_range(1.0..10.0),
            // heavy ties
            1 => rng.gen_range(1..6) as f64,
            // exact halves exercise the rounding rule
            _ => rng.gen_range(2..20) as f64 / 2.0,
        };
        let a: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let b: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        if kind != 0 {
            tie_cases += 1;
        }
        let ra = brute_ranks(&a);
        let rb = brute_ranks(&b);
        let defined = ra.iter().any(|r| *r != ra[0]) && rb.iter().any(|r| *r != rb[0]);
        if defined {
            worst = worst.max((srcc(&a, &b).unwrap() - brute_pearson(&ra, &rb)).abs());
            worst = worst.max((pcc(&a, &b).unwrap() - brute_pearson(&a, &b)).abs());
        } else {
            ensure(srcc(&a, &b).is_err(), || format!("case {case}: constant input gave a correlation"))?;
        }
        let m: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64;
        worst = worst.max((mse(&a, &b).unwrap() - m).abs());
        let hits = a.iter().zip(&b).filter(|(x, y)| brute_round(**x) == brute_round(**y)).count();
        worst = worst.max((acc(&a, &b).unwrap() - hits as f64 / n as f64).abs());
    }
    ensure(worst < 1e-12, || format!("metrics differ from brute force by {worst:.3e}"))?;
    let scores = |v: f64| AttributeScores::from_array([v; 8]).unwrap();
    let labels: Vec<AttributeScores> = (1..=10).map(|v| scores(v as f64)).collect();
    let r = ppjudge::data::MetricsReport::compute(&labels, &labels).unwrap();
    ensure(
        r.rows.iter().all(|x| x.srcc == Some(1.0) && x.mse == 0.0 && x.acc == 1.0),
        || "passthrough is not perfect".into(),
    )?;
    Ok(format!(
        "100 random pairs ({tie_cases} with tied ranks / half-integer rounding): SRCC/PCC/MSE/ACC within {worst:.1e} of brute force (tol 1e-12)"
    ))
}

// ---------------------------------------------------------------- 9

fn criterion_reference() -> Verdict {
    let cfg = PPJudgeConfig::reference();
    let hist: Vec<(usize, usize)> = cfg.moe.routed_depth_histogram.iter().map(|(a, b)| (*a, *b)).collect();
    ensure(
        cfg.n_blocks == 8
            && cfg.d_model == 512
            && cfg.moe.shared_count == 2
            && cfg.moe.routed_count() == 30
            && hist == vec![(1, 16), (2, 6), (3, 4), (4, 2), (5, 2)]
            && cfg.moe.top_k == 4,
        || format!("reference config differs: {cfg:?}"),
    )?;
    let (model, store) = PPJudge::init(&cfg, 9).unwrap();
    let count = count_parameters(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let frames: Vec<Frame> = (0..2).map(|_| rand_frame(&mut rng, cfg.image_size)).collect();
    let reference = ReferenceInput::Image(rand_frame(&mut rng, cfg.image_size));
    let out = model.forward_full(&store, &frames, &reference).unwrap();
    ensure(out.scores.len() == 8 && out.scores.all_finite(), || "forward produced bad scores".into())?;
    let dev = count as f64 / 17.21e6 - 1.0;
    ensure(dev.abs() <= 0.2, || format!("{count} parameters, {:+.1}% from 17.21M", 100.0 * dev))?;
    Ok(format!("8x512, 2+30 experts, depths 16/6/4/2/2, top-4: {count} parameters ({:+.1}% of 17.21M, tol 20%); forward over 2 frames finite", 100.0 * dev))
}

// ---------------------------------------------------------------- 10

fn run_cli(args: &[&str]) -> Result<String, String> {
    let mut argv = vec!["ppjudge"];
    argv.extend_from_slice(args);
    let cli = Cli::try_parse_from(&argv).map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    run(&cli, &mut out).map_err(|e| format!("{:?}: {e}", args))?;
    Ok(String::from_utf8(out).unwrap())
}

fn tree_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().to_string();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Every command once in a fresh directory; returns all stdout and files.
fn pipeline(root: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let s = |p: &Path| p.to_string_lossy().to_string();
    let data = root.join("data");
    let ckpt = root.join("model.ckpt");
    let manifest = data.join("manifest.jsonl");
    let mut stdout = String::new();
    stdout += &run_cli(&["synth", "--count", "12", "--test-count", "4", "--frames", "3", "--out", &s(&data)])?;
    stdout += &run_cli(&["train", "--data", &s(&manifest), "--epochs", "2", "--batch-size", "4", "--out", &s(&ckpt)])?;
    stdout += &run_cli(&["eval", "--data", &s(&manifest), "--checkpoint", &s(&ckpt), "--out", &s(&root.join("metrics.csv"))])?;
    let sample = data.join("s00013");
    for (flag, name) in [(None, "score.json"), (Some("--incremental"), "score_inc.json")] {
        let mut args = vec![
            "score".to_string(),
            "--frames".into(),
            s(&sample),
            "--reference".into(),
            s(&sample.join("ref.png")),
            "--checkpoint".into(),
            s(&ckpt),
            "--out".into(),
            s(&root.join(name)),
        ];
        if let Some(f) = flag {
            args.push(f.into());
        }
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        stdout += &run_cli(&refs)?;
    }
    stdout += &run_cli(&["keyframes", "--frames", &s(&sample), "--k", "1", "--n-min", "1", "--n-max", "3"])?;
    stdout += &run_cli(&["heatmap", "--data", &s(&manifest), "--checkpoint", &s(&ckpt), "--limit", "5"])?;
    let mut files = tree_bytes(root);
    files.insert("<stdout>".into(), stdout.into_bytes());
    Ok(files)
}

fn criterion_determinism() -> Verdict {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let fa = pipeline(a.path())?;
    let fb = pipeline(b.path())?;
    // Paths in stdout differ between the two roots; normalize them.
    let norm = |m: &BTreeMap<String, Vec<u8>>, root: &Path| -> BTreeMap<String, Vec<u8>> {
        m.iter()
            .map(|(k, v)| {
                let text = String::from_utf8_lossy(v).replace(&root.to_string_lossy().to_string(), "<root>");
                let bytes = if std::str::from_utf8(v).is_ok() { text.into_bytes() } else { v.clone() };
                (k.clone(), bytes)
            })
            .collect()
    };
    let (na, nb) = (norm(&fa, a.path()), norm(&fb, b.path()));
    ensure(na.keys().eq(nb.keys()), || "runs produced different file sets".into())?;
    for (k, v) in &na {
        ensure(nb[k] == *v, || format!("{k} differs between runs"))?;
    }
    let curve = String::from_utf8(fa[&loss_csv_path(Path::new("model.ckpt")).to_string_lossy().to_string()].clone())
        .unwrap();
    Ok(format!(
        "two runs of synth/train/eval/score/keyframes/heatmap: {} files and stdout bit-identical; loss curve of {} steps identical",
        na.len() - 1,
        curve.lines().count() - 1
    ))
}

// ---------------------------------------------------------------- main

fn main() {
    let criteria: Vec<(usize, &str, fn() -> Verdict)> = vec![
        (1, "gradient suite", criterion_gradients),
        (2, "incremental equivalence", criterion_incremental),
        (3, "rope properties", criterion_rope),
        (4, "moe invariants", criterion_moe),
        (5, "loss identities", criterion_losses),
        (6, "synthetic learning benchmark", criterion_learning),
        (7, "keyframe pipeline", criterion_keyframes),
        (8, "metrics oracles", criterion_metrics),
        (9, "reference config", criterion_reference),
        (10, "determinism", criterion_determinism),
    ];
    let only: Option<Vec<usize>> = std::env::var("PPJUDGE_CRITERIA")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    // Quiet panics: failures are reported on the criterion line.
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut err = std::io::stderr().lock();
    for (n, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t0 = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        let line = match verdict {
            Ok(d) => format!("PASS criterion {n:>2} {name} ({secs:.1}s): {d}"),
            Err(d) => {
                failed += 1;
                format!("FAIL criterion {n:>2} {name} ({secs:.1}s): {d}")
            }
        };
        writeln!(err, "{line}").unwrap();
        err.flush().unwrap();
    }
    if failed > 0 {
        writeln!(err, "acceptance: {failed} criteria failed").unwrap();
        std::process::exit(1);
    }
    writeln!(err, "acceptance: all criteria passed").unwrap();
}
