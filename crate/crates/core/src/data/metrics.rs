//! SRCC, PCC, MSE and rounded accuracy, per attribute over a test set.

use super::scores::{AttributeScores, ATTRIBUTES};
use crate::error::{Error, Result};

fn check_lengths(pred: &[f64], label: &[f64], min: usize) -> Result<()> {
    if pred.len() != label.len() {
        return Err(Error::Dimension(format!(
            "{} predictions against {} labels",
            pred.len(),
            label.len()
        )));
    }
    if pred.len() < min {
        return Err(Error::UndefinedMetric(format!("needs at least {min} values, got {}", pred.len())));
    }
    Ok(())
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation coefficient.
pub fn pcc(pred: &[f64], label: &[f64]) -> Result<f64> {
    check_lengths(pred, label, 2)?;
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let ml = label.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, l) in pred.iter().zip(label) {
        let (dx, dy) = (p - mp, l - ml);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric("correlation of a constant vector".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn srcc(pred: &[f64], label: &[f64]) -> Result<f64> {
    check_lengths(pred, label, 2)?;
    pcc(&average_ranks(pred), &average_ranks(label))
}

pub fn mse(pred: &[f64], label: &[f64]) -> Result<f64> {
    check_lengths(pred, label, 1)?;
    Ok(pred.iter().zip(label).map(|(p, l)| (p - l).powi(2)).sum::<f64>() / pred.len() as f64)
}

/// Nearest integer, halves away from zero.
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

/// Fraction of pairs whose rounded values agree.
pub fn acc(pred: &[f64], label: &[f64]) -> Result<f64> {
    check_lengths(pred, label, 1)?;
    let hits = pred
        .iter()
        .zip(label)
        .filter(|(p, l)| round_half_away(**p) == round_half_away(**l))
        .count();
    Ok(hits as f64 / pred.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub name: String,
    /// `None` when undefined (constant predictions or labels).
    pub srcc: Option<f64>,
    pub pcc: Option<f64>,
    pub mse: f64,
    pub acc: f64,
}

/// Per-attribute metrics plus a mean row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
    pub mean: MetricRow,
}

fn mean_of(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let xs: Vec<f64> = v.flatten().collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

impl MetricsReport {
    pub fn compute(pred: &[AttributeScores], label: &[AttributeScores]) -> Result<Self> {
        if pred.len() != label.len() || pred.is_empty() {
            return Err(Error::Dimension(format!(
                "{} predictions against {} labels",
                pred.len(),
                label.len()
            )));
        }
        let mut rows = Vec::with_capacity(ATTRIBUTES.len());
        for (a, name) in ATTRIBUTES.iter().enumerate() {
            let p: Vec<f64> = pred.iter().map(|s| s.to_array()[a]).collect();
            let l: Vec<f64> = label.iter().map(|s| s.to_array()[a]).collect();
            rows.push(MetricRow {
                name: name.to_string(),
                srcc: srcc(&p, &l).ok(),
                pcc: pcc(&p, &l).ok(),
                mse: mse(&p, &l)?,
                acc: acc(&p, &l)?,
            });
        }
        let n = rows.len() as f64;
        let mean = MetricRow {
            name: "mean".into(),
            srcc: mean_of(rows.iter().map(|r| r.srcc)),
            pcc: mean_of(rows.iter().map(|r| r.pcc)),
            mse: rows.iter().map(|r| r.mse).sum::<f64>() / n,
            acc: rows.iter().map(|r| r.acc).sum::<f64>() / n,
        };
        Ok(Self { rows, mean })
    }

    /// Rows are attributes then `mean`; undefined correlations print `nan`.
    pub fn to_csv(&self) -> String {
        let f = |x: Option<f64>| x.map_or("nan".to_string(), |v| format!("{v:.6}"));
        let mut s = String::from("attribute,SRCC,PCC,MSE,ACC\n");
        for r in self.rows.iter().chain(std::iter::once(&self.mean)) {
            s.push_str(&format!("{},{},{},{:.6},{:.6}\n", r.name, f(r.srcc), f(r.pcc), r.mse, r.acc));
        }
        s
    }
}
