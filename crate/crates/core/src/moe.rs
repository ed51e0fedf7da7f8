//! Heterogeneous mixture-of-experts feed-forward stage.
//!
//! Every token passes through all shared experts and through the `top_k`
//! routed experts its router ranks highest. Routed experts differ in
//! depth, the number of hidden SiLU layers between the input and output
//! projections.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub d_model: usize,
    pub shared_count: usize,
    /// Depth of every shared expert.
    pub shared_depth: usize,
    /// Number of routed experts of each depth.
    #[serde(with = "depth_keys")]
    pub routed_depth_histogram: BTreeMap<usize, usize>,
    pub top_k: usize,
    pub expert_hidden: usize,
}

/// Depth keys as strings so the histogram can live in a TOML table.
mod depth_keys {
    use std::collections::BTreeMap;

    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &BTreeMap<usize, usize>, s: S) -> Result<S::Ok, S::Error> {
        let named: BTreeMap<String, usize> = m.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        named.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<usize, usize>, D::Error> {
        BTreeMap::<String, usize>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| {
                k.parse()
                    .map(|k| (k, v))
                    .map_err(|_| D::Error::custom(format!("depth key `{k}` is not an integer")))
            })
            .collect()
    }
}

impl MoeConfig {
    /// Two shared experts and 30 routed ones of depths 16x1, 6x2, 4x3,
    /// 2x4 and 2x5, four active per token.
    pub fn reference(d_model: usize, expert_hidden: usize) -> Self {
        Self {
            d_model,
            shared_count: 2,
            shared_depth: 1,
            routed_depth_histogram: BTreeMap::from([(1, 16), (2, 6), (3, 4), (4, 2), (5, 2)]),
            top_k: 4,
            expert_hidden,
        }
    }

    /// Scaled-down mix for CPU training: 8x1, 3x2, 2x3, 1x4, 1x5.
    pub fn desk(d_model: usize) -> Self {
        Self {
            routed_depth_histogram: BTreeMap::from([(1, 8), (2, 3), (3, 2), (4, 1), (5, 1)]),
            ..Self::reference(d_model, d_model)
        }
    }

    pub fn routed_count(&self) -> usize {
        self.routed_depth_histogram.values().sum()
    }

    pub fn total_experts(&self) -> usize {
        self.shared_count + self.routed_count()
    }

    /// Depth of each routed expert, by expert index (shallowest first).
    pub fn routed_depths(&self) -> Vec<usize> {
        self.routed_depth_histogram
            .iter()
            .flat_map(|(&d, &n)| std::iter::repeat(d).take(n))
            .collect()
    }

    pub fn distinct_depths(&self) -> Vec<usize> {
        self.routed_depth_histogram
            .iter()
            .filter(|(_, &n)| n > 0)
            .map(|(&d, _)| d)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.expert_hidden == 0 {
            return Err(Error::Config("moe widths must be positive".into()));
        }
        if self.routed_depth_histogram.contains_key(&0) || self.shared_depth == 0 {
            return Err(Error::Config("expert depth must be at least 1".into()));
        }
        if self.top_k == 0 || self.top_k > self.routed_count() {
            return Err(Error::Config(format!(
                "top_k {} must lie in 1..={} routed experts",
                self.top_k,
                self.routed_count()
            )));
        }
        Ok(())
    }
}

/// Affine maps `d -> hidden -> ... -> hidden -> d` with SiLU between them.
#[derive(Clone, Debug)]
pub struct Expert {
    pub depth: usize,
    pub layers: Vec<(ParamId, ParamId)>,
}

impl Expert {
    fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        depth: usize,
        d_model: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dims = vec![d_model];
        dims.extend(std::iter::repeat(hidden).take(depth));
        dims.push(d_model);
        let mut layers = Vec::with_capacity(depth + 1);
        for (i, w) in dims.windows(2).enumerate() {
            let wid = store.insert_uniform(format!("{prefix}.l{i}.w"), &[w[0], w[1]], rng)?;
            let bid = store.insert_zeros(format!("{prefix}.l{i}.b"), &[w[1]])?;
            layers.push((wid, bid));
        }
        Ok(Self { depth, layers })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let (w, b) = (g.param(w), g.param(b));
            h = g.matmul(h, w)?;
            h = g.add_bias(h, b)?;
            if i < last {
                h = g.silu(h);
            }
        }
        Ok(h)
    }

    /// The final projection, zeroed to make the expert output vanish.
    pub fn output_layer(&self) -> (ParamId, ParamId) {
        *self.layers.last().expect("experts have at least one layer")
    }
}

/// Routed experts chosen for one token.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterDecision {
    pub token: usize,
    /// Expert indices in order of decreasing routing probability.
    pub experts: Vec<usize>,
    /// Renormalized weights, aligned with `experts`; they sum to 1.
    pub weights: Vec<f64>,
}

/// Indices of the `k` largest probabilities, largest first, ties to the
/// lower index.
pub fn select_top_k(probs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Routing-event counters for one layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UsageStats {
    pub expert_counts: Vec<u64>,
    pub depth_counts: BTreeMap<usize, u64>,
    pub tokens: u64,
}

impl UsageStats {
    pub fn new(cfg: &MoeConfig) -> Self {
        Self {
            expert_counts: vec![0; cfg.routed_count()],
            depth_counts: cfg.distinct_depths().into_iter().map(|d| (d, 0)).collect(),
            tokens: 0,
        }
    }

    pub fn record(&mut self, decisions: &[RouterDecision], depths: &[usize]) {
        for d in decisions {
            self.tokens += 1;
            for &e in &d.experts {
                self.expert_counts[e] += 1;
                *self.depth_counts.entry(depths[e]).or_insert(0) += 1;
            }
        }
    }

    pub fn total_events(&self) -> u64 {
        self.expert_counts.iter().sum()
    }

    pub fn merge(&mut self, other: &UsageStats) {
        for (a, b) in self.expert_counts.iter_mut().zip(&other.expert_counts) {
            *a += b;
        }
        for (d, n) in &other.depth_counts {
            *self.depth_counts.entry(*d).or_insert(0) += n;
        }
        self.tokens += other.tokens;
    }
}

/// Result of [`MoeLayer::forward`].
pub struct MoeOutput {
    /// Sum of shared and weighted routed expert outputs (no residual).
    pub delta: Var,
    /// Sum of shared expert outputs per token, `None` without shared experts.
    pub shared: Option<Var>,
    pub decisions: Vec<RouterDecision>,
    pub stats: UsageStats,
}

#[derive(Clone, Debug)]
pub struct MoeLayer {
    pub cfg: MoeConfig,
    pub shared: Vec<Expert>,
    pub routed: Vec<Expert>,
    /// `[d_model, routed_count]`, no bias.
    pub router: ParamId,
}

impl MoeLayer {
    pub fn init<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: &MoeConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut shared = Vec::with_capacity(cfg.shared_count);
        for s in 0..cfg.shared_count {
            shared.push(Expert::init(
                store,
                &format!("{prefix}.shared{s}"),
                cfg.shared_depth,
                cfg.d_model,
                cfg.expert_hidden,
                rng,
            )?);
        }
        let mut routed = Vec::with_capacity(cfg.routed_count());
        for (e, depth) in cfg.routed_depths().into_iter().enumerate() {
            routed.push(Expert::init(
                store,
                &format!("{prefix}.routed{e}"),
                depth,
                cfg.d_model,
                cfg.expert_hidden,
                rng,
            )?);
        }
        let router = store.insert_uniform(format!("{prefix}.router.w"), &[cfg.d_model, cfg.routed_count()], rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            shared,
            routed,
            router,
        })
    }

    pub fn routed_depths(&self) -> Vec<usize> {
        self.routed.iter().map(|e| e.depth).collect()
    }

    /// Top-k routing. Returns the decisions and the `[n, k]` weight matrix
    /// on the graph; weights are a softmax over the selected logits, which
    /// equals renormalizing the full softmax over the selected experts.
    pub fn route(&self, g: &mut Graph, x: Var) -> Result<(Vec<RouterDecision>, Var)> {
        let k = self.cfg.top_k;
        let n_exp = self.routed.len();
        if k == 0 || k > n_exp {
            return Err(Error::Config(format!("top_k {k} with {n_exp} routed experts")));
        }
        let (n, d) = match g.value(x).shape() {
            [n, d] => (*n, *d),
            s => return Err(Error::Dimension(format!("route expects [n, d], got {s:?}"))),
        };
        if d != self.cfg.d_model {
            return Err(Error::Dimension(format!("route: width {d} != d_model {}", self.cfg.d_model)));
        }
        let w = g.param(self.router);
        let logits = g.matmul(x, w)?;
        let mut picks = Vec::with_capacity(n * k);
        let mut selected = Vec::with_capacity(n);
        for t in 0..n {
            let probs = softmax_row(g.value(logits).row(t));
            let top = select_top_k(&probs, k);
            picks.extend(top.iter().map(|&e| (t, e)));
            selected.push(top);
        }
        let sel = g.gather_elems(logits, Arc::new(picks))?;
        let sel = g.reshape(sel, &[n, k])?;
        let weights = g.softmax(sel, 1)?;
        let decisions = selected
            .into_iter()
            .enumerate()
            .map(|(t, experts)| RouterDecision {
                token: t,
                weights: g.value(weights).row(t).to_vec(),
                experts,
            })
            .collect();
        Ok((decisions, weights))
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<MoeOutput> {
        let n = g.value(x).shape()[0];
        let mut shared_sum: Option<Var> = None;
        for e in &self.shared {
            let y = e.forward(g, x)?;
            shared_sum = Some(match shared_sum {
                Some(s) => g.add(s, y)?,
                None => y,
            });
        }

        let (decisions, weights) = self.route(g, x)?;
        let mut assigned: Vec<Vec<(usize, usize)>> = vec![Vec::new(); self.routed.len()];
        for d in &decisions {
            for (slot, &e) in d.experts.iter().enumerate() {
                assigned[e].push((d.token, slot));
            }
        }
        let mut routed_sum: Option<Var> = None;
        for (e, slots) in assigned.into_iter().enumerate() {
            if slots.is_empty() {
                continue;
            }
            let tokens = Arc::new(slots.iter().map(|&(t, _)| t).collect::<Vec<_>>());
            let xe = g.gather_rows(x, tokens.clone())?;
            let ye = self.routed[e].forward(g, xe)?;
            let we = g.gather_elems(weights, Arc::new(slots))?;
            let ye = g.mul_col(ye, we)?;
            let ye = g.scatter_rows(ye, tokens, n)?;
            routed_sum = Some(match routed_sum {
                Some(s) => g.add(s, ye)?,
                None => ye,
            });
        }
        let routed_sum = routed_sum.expect("every token selects at least one expert");
        let delta = match shared_sum {
            Some(s) => g.add(s, routed_sum)?,
            None => routed_sum,
        };
        let mut stats = UsageStats::new(&self.cfg);
        stats.record(&decisions, &self.routed_depths());
        Ok(MoeOutput {
            delta,
            shared: shared_sum,
            decisions,
            stats,
        })
    }
}

/// Standalone residual MoE: `tokens + shared(tokens) + routed(tokens)`.
pub fn moe_forward(g: &mut Graph, layer: &MoeLayer, tokens: Var) -> Result<(Var, MoeOutput)> {
    let out = layer.forward(g, tokens)?;
    let y = g.add(tokens, out.delta)?;
    Ok((y, out))
}

/// Expert-usage frequencies of representative tokens grouped by depth.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub depths: Vec<usize>,
    pub attributes: Vec<String>,
    /// Raw routing-event counts, `[attribute][depth]`.
    pub counts: Vec<Vec<u64>>,
    /// Rows normalized to sum to 1; rows without representative tokens
    /// stay all-zero.
    pub rows: Vec<Vec<f64>>,
}

pub const REPRESENTATIVE_THRESHOLD: f64 = 0.5;

/// Builds the attribute x depth usage map.
///
/// `decisions` is the routing log of the analysed layer and
/// `attribution[token][attribute]` the token's normalized contribution to
/// each attribute. Tokens whose weight for an attribute exceeds 0.5 count
/// as representative for it; each of their routing events adds one to the
/// depth of the chosen expert.
pub fn usage_heatmap(
    decisions: &[RouterDecision],
    expert_depths: &[usize],
    attribution: &[Vec<f64>],
    attributes: &[String],
) -> Result<Heatmap> {
    if decisions.len() != attribution.len() {
        return Err(Error::Dimension(format!(
            "{} routing decisions but {} attribution rows",
            decisions.len(),
            attribution.len()
        )));
    }
    let mut depths: Vec<usize> = expert_depths.to_vec();
    depths.sort_unstable();
    depths.dedup();
    let col = |d: usize| depths.binary_search(&d).expect("depth listed");
    let mut counts = vec![vec![0u64; depths.len()]; attributes.len()];
    for (dec, attr) in decisions.iter().zip(attribution) {
        if attr.len() != attributes.len() {
            return Err(Error::Dimension("attribution row width != attribute count".into()));
        }
        for (a, &w) in attr.iter().enumerate() {
            if w > REPRESENTATIVE_THRESHOLD {
                for &e in &dec.experts {
                    counts[a][col(expert_depths[e])] += 1;
                }
            }
        }
    }
    let rows = counts
        .iter()
        .map(|r| {
            let s: u64 = r.iter().sum();
            if s == 0 {
                vec![0.0; r.len()]
            } else {
                r.iter().map(|&c| c as f64 / s as f64).collect()
            }
        })
        .collect();
    Ok(Heatmap {
        depths,
        attributes: attributes.to_vec(),
        counts,
        rows,
    })
}

impl Heatmap {
    /// Merges counts from another heatmap over the same axes.
    pub fn merge_counts(&mut self, other: &Heatmap) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.rows = self
            .counts
            .iter()
            .map(|r| {
                let s: u64 = r.iter().sum();
                r.iter().map(|&c| if s == 0 { 0.0 } else { c as f64 / s as f64 }).collect()
            })
            .collect();
    }

    /// `attribute,depth_1,...` header then one row per attribute.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("attribute");
        for d in &self.depths {
            let _ = write!(s, ",depth_{d}");
        }
        s.push('\n');
        for (name, row) in self.attributes.iter().zip(&self.rows) {
            s.push_str(name);
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

/// Per-token attribution from gradient x input saliency.
///
/// `saliency[a][t]` is `|grad_a(t) . x(t)|` for attribute `a`; each token's
/// row is normalized across attributes (uniform when all are zero).
pub fn normalize_attribution(saliency: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n_attr = saliency.len();
    let n_tok = saliency.first().map_or(0, Vec::len);
    (0..n_tok)
        .map(|t| {
            let col: Vec<f64> = (0..n_attr).map(|a| saliency[a][t].abs()).collect();
            let s: f64 = col.iter().sum();
            if s == 0.0 {
                vec![1.0 / n_attr as f64; n_attr]
            } else {
                col.into_iter().map(|v| v / s).collect()
            }
        })
        .collect()
}

/// Attribution of one output to each row of `x` as `|grad . x|` per row.
pub fn grad_times_input(grad: &Tensor, x: &Tensor) -> Vec<f64> {
    let (r, _) = x.as_matrix_dims();
    (0..r)
        .map(|i| grad.row(i).iter().zip(x.row(i)).map(|(a, b)| a * b).sum::<f64>().abs())
        .collect()
}
