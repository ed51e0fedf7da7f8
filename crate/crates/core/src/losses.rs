//! Training objectives.
//!
//! `total = style + 10 * score`. The style term pulls the projected,
//! token-pooled shared-expert output of every block towards the style
//! embedding of the reference, weighted by an exponential layer schedule
//! that grows to 0.8 at the last block. The score term is the mean squared
//! error over the eight attributes.
//!
//! Every loss exists twice: as a plain function on tensors, and as a graph
//! builder used during training. Tests tie the two together.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Weight of the score term in the total loss.
pub const LAMBDA_SCORE: f64 = 10.0;

/// Weight of the last layer's style loss.
pub const ALPHA_MAX: f64 = 0.8;

/// `alpha_l = 0.8 * (e^(l/L) - 1) / (e - 1)` for `l = 1..=L`.
pub fn alpha_schedule(layers: usize) -> Result<Vec<f64>> {
    if layers == 0 {
        return Err(Error::Contract("alpha schedule needs at least one layer".into()));
    }
    let e = std::f64::consts::E;
    let mut a: Vec<f64> = (1..=layers)
        .map(|l| ALPHA_MAX * ((l as f64 / layers as f64).exp() - 1.0) / (e - 1.0))
        .collect();
    a[layers - 1] = ALPHA_MAX;
    Ok(a)
}

fn project(o_se: &Tensor, w_proj: &Tensor) -> Result<Tensor> {
    if w_proj.ndim() != 2 {
        return Err(Error::Dimension(format!("projection must be a matrix, got {:?}", w_proj.shape())));
    }
    let (d, s) = w_proj.as_matrix_dims();
    if o_se.len() != d {
        return Err(Error::Dimension(format!(
            "shared output of length {} for projection [{d}, {s}]",
            o_se.len()
        )));
    }
    Tensor::from_parts(vec![1, d], o_se.data().to_vec()).matmul(w_proj)
}

fn check_style(e_style: &Tensor, d_style: usize) -> Result<()> {
    if e_style.len() != d_style {
        return Err(Error::Dimension(format!(
            "style embedding of length {} for d_style {d_style}",
            e_style.len()
        )));
    }
    if e_style.norm() == 0.0 {
        return Err(Error::DegenerateInput("style embedding has zero norm".into()));
    }
    Ok(())
}

/// `1 - cos(o_se W_proj, e_style)`, in `[0, 2]`. A zero projection counts
/// as orthogonal (loss 1) and is logged.
pub fn style_loss_layer(o_se: &Tensor, w_proj: &Tensor, e_style: &Tensor) -> Result<f64> {
    let p = project(o_se, w_proj)?;
    check_style(e_style, p.len())?;
    let n = p.norm();
    if n == 0.0 {
        log::warn!("style loss: projected shared output has zero norm, using loss 1");
        return Ok(1.0);
    }
    let c = (p.dot(e_style) / (n * e_style.norm())).clamp(-1.0, 1.0);
    Ok(1.0 - c)
}

/// `sum_l alpha_l * style_loss_layer(o_se[l], ...)`, with the per-layer terms.
pub fn style_loss_total(
    o_se: &[Tensor],
    w_proj: &Tensor,
    e_style: &Tensor,
    alpha: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if o_se.len() != alpha.len() {
        return Err(Error::Dimension(format!(
            "{} shared outputs for {} layer weights",
            o_se.len(),
            alpha.len()
        )));
    }
    let per = o_se
        .iter()
        .map(|o| style_loss_layer(o, w_proj, e_style))
        .collect::<Result<Vec<_>>>()?;
    Ok((per.iter().zip(alpha).map(|(l, a)| a * l).sum(), per))
}

/// `(1/n) * sum (pred - label)^2` over the attributes.
pub fn score_loss(pred: &Tensor, label: &Tensor) -> Result<f64> {
    if pred.len() != label.len() || pred.len() == 0 {
        return Err(Error::Dimension(format!(
            "score loss of {} predictions against {} labels",
            pred.len(),
            label.len()
        )));
    }
    let s: f64 = pred.data().iter().zip(label.data()).map(|(p, y)| (p - y).powi(2)).sum();
    Ok(s / pred.len() as f64)
}

pub fn total_loss(style: f64, score: f64) -> f64 {
    style + LAMBDA_SCORE * score
}

/// Graph form of [`style_loss_total`]. Returns the weighted sum and the
/// per-layer values.
pub fn style_loss_graph(
    g: &mut Graph,
    o_se: &[Var],
    w_proj: Var,
    e_style: &Tensor,
    alpha: &[f64],
) -> Result<(Var, Vec<f64>)> {
    if o_se.len() != alpha.len() || o_se.is_empty() {
        return Err(Error::Dimension(format!(
            "{} shared outputs for {} layer weights",
            o_se.len(),
            alpha.len()
        )));
    }
    let d_style = *g.value(w_proj).shape().last().expect("nonempty shape");
    check_style(e_style, d_style)?;
    let e = g.input(Tensor::from_parts(vec![1, d_style], e_style.data().to_vec()));
    let mut per = Vec::with_capacity(o_se.len());
    let mut total: Option<Var> = None;
    for (&o, &a) in o_se.iter().zip(alpha) {
        let p = g.matmul(o, w_proj)?;
        let layer = if g.value(p).norm() == 0.0 {
            log::warn!("style loss: projected shared output has zero norm, using loss 1");
            g.input(Tensor::scalar(1.0))
        } else {
            let c = g.cosine(p, e)?;
            let neg = g.scale(c, -1.0);
            let one = g.input(Tensor::scalar(1.0));
            g.add(one, neg)?
        };
        per.push(g.value(layer).item());
        let w = g.scale(layer, a);
        total = Some(match total {
            Some(t) => g.add(t, w)?,
            None => w,
        });
    }
    Ok((total.expect("at least one layer"), per))
}

/// Graph form of [`score_loss`]; `pred` is `[1, n]`.
pub fn score_loss_graph(g: &mut Graph, pred: Var, label: &Tensor) -> Result<Var> {
    let n = g.value(pred).len();
    if label.len() != n {
        return Err(Error::Dimension(format!("score loss of {n} predictions against {} labels", label.len())));
    }
    let y = g.input(Tensor::from_parts(g.value(pred).shape().to_vec(), label.data().to_vec()));
    let diff = g.sub(pred, y)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean(sq))
}

/// Loss values of one step or epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub style_total: f64,
    pub style_per_layer: Vec<f64>,
    pub score: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(style_total: f64, style_per_layer: Vec<f64>, score: f64) -> Self {
        Self {
            style_total,
            style_per_layer,
            score,
            total: total_loss(style_total, score),
        }
    }

    /// Running mean over samples: adds `other` with weight `1/count`.
    pub fn accumulate(&mut self, other: &LossBreakdown, count: usize) {
        let w = 1.0 / count as f64;
        if self.style_per_layer.len() < other.style_per_layer.len() {
            self.style_per_layer.resize(other.style_per_layer.len(), 0.0);
        }
        for (a, b) in self.style_per_layer.iter_mut().zip(&other.style_per_layer) {
            *a += w * b;
        }
        self.style_total += w * other.style_total;
        self.score += w * other.score;
        self.total += w * other.total;
    }

    pub const CSV_HEADER: &'static str = "step,style_total,score,total";

    /// `step,style_total,score,total`, full round-trip precision.
    pub fn csv_row(&self, step: usize) -> String {
        format!("{step},{:?},{:?},{:?}", self.style_total, self.score, self.total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_endpoints() {
        assert_eq!(alpha_schedule(1).unwrap(), vec![0.8]);
        let a = alpha_schedule(8).unwrap();
        assert_eq!(a[7], 0.8);
        let e = std::f64::consts::E;
        assert!((a[0] - 0.8 * ((0.125f64).exp() - 1.0) / (e - 1.0)).abs() < 1e-15);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(alpha_schedule(0).is_err());
    }

    #[test]
    fn analytic_cosine_cases() {
        let w = Tensor::eye(3);
        let e = Tensor::vector(vec![1.0, 0.0, 0.0]);
        let l = |v: Vec<f64>| style_loss_layer(&Tensor::vector(v), &w, &e).unwrap();
        assert_eq!(l(vec![3.0, 0.0, 0.0]), 0.0);
        assert_eq!(l(vec![0.0, 2.0, 0.0]), 1.0);
        assert_eq!(l(vec![-0.5, 0.0, 0.0]), 2.0);
        assert_eq!(l(vec![0.0, 0.0, 0.0]), 1.0);
    }

    #[test]
    fn score_hand_cases() {
        let y = Tensor::vector(vec![5.0; 8]);
        assert_eq!(score_loss(&y, &y).unwrap(), 0.0);
        assert_eq!(score_loss(&Tensor::vector(vec![6.0; 8]), &y).unwrap(), 1.0);
        let mut p = vec![5.0; 8];
        p[0] = 2.0;
        assert_eq!(score_loss(&Tensor::vector(p), &y).unwrap(), 9.0 / 8.0);
        assert!(score_loss(&Tensor::vector(vec![1.0; 7]), &y).is_err());
    }

    #[test]
    fn total_is_linear() {
        assert_eq!(total_loss(0.0, 0.0), 0.0);
        assert_eq!(total_loss(0.5, 0.1), 1.5);
    }

    #[test]
    fn graph_forms_match_plain() {
        let w = Tensor::matrix(3, 2, vec![0.3, -0.2, 0.1, 0.5, -0.4, 0.7]).unwrap();
        let o = [Tensor::vector(vec![1.0, 2.0, -1.0]), Tensor::vector(vec![0.5, -0.1, 0.2])];
        let e = Tensor::vector(vec![0.6, -0.8]);
        let alpha = alpha_schedule(2).unwrap();
        let (want, want_per) = style_loss_total(&o, &w, &e, &alpha).unwrap();
        let mut g = Graph::new();
        let wv = g.leaf(w.clone());
        let ov: Vec<Var> = o
            .iter()
            .map(|t| g.leaf(Tensor::matrix(1, 3, t.data().to_vec()).unwrap()))
            .collect();
        let (got, per) = style_loss_graph(&mut g, &ov, wv, &e, &alpha).unwrap();
        assert!((g.value(got).item() - want).abs() < 1e-14);
        assert_eq!(per, want_per);

        let p = g.leaf(Tensor::matrix(1, 8, (0..8).map(|i| i as f64).collect()).unwrap());
        let y = Tensor::vector(vec![3.0; 8]);
        let s = score_loss_graph(&mut g, p, &y).unwrap();
        let plain = score_loss(&Tensor::vector((0..8).map(|i| i as f64).collect()), &y).unwrap();
        assert_eq!(g.value(s).item(), plain);
    }

    #[test]
    fn csv_row_format() {
        let b = LossBreakdown::new(0.5, vec![0.5], 0.1);
        assert_eq!(b.total, 1.5);
        assert_eq!(b.csv_row(3), "3,0.5,0.1,1.5");
    }
}
