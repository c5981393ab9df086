//! Demographic bias auditing for text classifiers served behind
//! chat-completion endpoints.
//!
//! The pipeline: load a labeled dataset, subsample it, expand every sample
//! into demographically contextualized variants, render prompts under one of
//! six strategies, collect model responses (live endpoint or deterministic
//! mock), parse structured predictions, and score weighted-F1 and Equalized
//! Odds stratified by social factor. A mitigation comparison mode contrasts
//! fairness-aware prompt strategies against a reference run.

pub mod backend;
pub mod config;
pub mod datasets;
pub mod metrics;
pub mod parser;
pub mod pipeline;
pub mod prompt;
pub mod report;
pub mod taxonomy;

pub use backend::{BackendError, BackendResponse, GenerationParams, MockBiasProfile};
pub use datasets::{DatasetSpec, LabelValue, Sample};
pub use metrics::{ConfusionCounts, FairnessReport, GroupRates};
pub use parser::{ParseStatus, ParsedPrediction};
pub use prompt::{Exemplar, PromptStrategy, TaskKind, TaskShape};
pub use taxonomy::{DemographicFactor, DemographicVariant, EnrichedSample, InjectionMode, Taxonomy};
