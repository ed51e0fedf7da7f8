//! Dataset records, the synthetic process generator and evaluation metrics.

pub mod manifest;
pub mod metrics;
pub mod scores;
pub mod synth;

pub use manifest::{
    load_manifest, manifest_dir, manifest_to_string, parse_manifest, save_manifest, LoadedReference, LoadedSample, ProcessSample,
    Reference, Source, Split,
};
pub use metrics::{acc, average_ranks, mse, pcc, round_half_away, srcc, MetricRow, MetricsReport};
pub use scores::{AttributeScores, ATTRIBUTES};
pub use synth::{synth_generate, write_dataset, DatasetSpec, EventLog, KnobOverrides, Regime, SynthProfile, SynthSample};
