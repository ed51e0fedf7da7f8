//! Prediction, test-set metrics and the expert-usage heatmap.

use std::sync::Arc;

use rayon::prelude::*;

use crate::data::{AttributeScores, MetricsReport, ATTRIBUTES};
use crate::error::{Error, Result};
use crate::model::{clamp_score, PPJudge};
use crate::moe::{grad_times_input, normalize_attribution, usage_heatmap, Heatmap};
use crate::numerics::{Graph, ParamStore};
use crate::train::PreparedSample;

/// Clamped scores for one sample.
pub fn predict(model: &PPJudge, store: &ParamStore, sample: &PreparedSample) -> Result<AttributeScores> {
    let out = model.forward_full(store, &sample.frames, &sample.reference)?;
    let mut v = [0.0; 8];
    for (o, s) in v.iter_mut().zip(out.scores.data()) {
        *o = clamp_score(*s);
    }
    AttributeScores::from_array(v)
}

/// Predictions in input order.
pub fn predict_all(model: &PPJudge, store: &ParamStore, samples: &[PreparedSample]) -> Result<Vec<AttributeScores>> {
    samples.par_iter().map(|s| predict(model, store, s)).collect()
}

fn labels_of(samples: &[PreparedSample]) -> Result<Vec<AttributeScores>> {
    samples
        .iter()
        .map(|s| {
            let mut v = [0.0; 8];
            v.copy_from_slice(s.labels.data());
            AttributeScores::from_array(v)
        })
        .collect()
}

/// Predictions and per-attribute metrics against the samples' labels.
pub fn evaluate(
    model: &PPJudge,
    store: &ParamStore,
    samples: &[PreparedSample],
) -> Result<(Vec<AttributeScores>, MetricsReport)> {
    let pred = predict_all(model, store, samples)?;
    let report = MetricsReport::compute(&pred, &labels_of(samples)?)?;
    Ok((pred, report))
}

/// Metrics of the labels scored against themselves.
pub fn passthrough_report(samples: &[PreparedSample]) -> Result<MetricsReport> {
    let l = labels_of(samples)?;
    MetricsReport::compute(&l, &l)
}

/// Per-token attribution of the final MoE stage's input, `[token][attribute]`.
///
/// For every attribute, the gradient of its raw score with respect to the
/// MoE input is multiplied with that input and summed per token; each token
/// is then normalized across attributes.
pub fn final_layer_attribution(
    model: &PPJudge,
    store: &ParamStore,
    sample: &PreparedSample,
) -> Result<(Vec<crate::moe::RouterDecision>, Vec<Vec<f64>>)> {
    let mut g = Graph::with_params(store);
    let trace = model.forward_graph(&mut g, &sample.frames, &sample.reference)?;
    let x = *trace.moe_inputs.last().expect("at least one block");
    let mut saliency = Vec::with_capacity(ATTRIBUTES.len());
    for a in 0..ATTRIBUTES.len() {
        let s = g.gather_elems(trace.scores, Arc::new(vec![(0, a)]))?;
        let s = g.sum(s);
        let grads = g.backward(s)?;
        let grad = grads
            .wrt(x)
            .ok_or_else(|| Error::Contract("final MoE input received no gradient".into()))?;
        saliency.push(grad_times_input(grad, g.value(x)));
    }
    let decisions = trace.decisions.last().expect("at least one block").clone();
    Ok((decisions, normalize_attribution(&saliency)))
}

/// Attribute x depth usage of representative tokens in the final MoE
/// stage, summed over `samples`.
pub fn heatmap(model: &PPJudge, store: &ParamStore, samples: &[PreparedSample]) -> Result<Heatmap> {
    let layer = model.moe_layers().last().expect("at least one block");
    let depths = layer.routed_depths();
    let names: Vec<String> = ATTRIBUTES.iter().map(|s| s.to_string()).collect();
    let maps = samples
        .par_iter()
        .map(|s| {
            let (decisions, attribution) = final_layer_attribution(model, store, s)?;
            usage_heatmap(&decisions, &depths, &attribution, &names)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = usage_heatmap(&[], &depths, &[], &names)?;
    for m in &maps {
        total.merge_counts(m);
    }
    Ok(total)
}
