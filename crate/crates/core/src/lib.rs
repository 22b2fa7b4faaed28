//! Calibrated correctness probabilities for multiple-choice model answers.
//!
//! Two confidence channels are combined per record: the normalized
//! probability mass over the option-label tokens and the per-option
//! confidences the model states in text. A five-cue reliability descriptor
//! feeds a logistic head with non-negative weights, and a single bias shift
//! aligns the mean prediction with held-out accuracy.

pub mod alignment;
pub mod artifact;
pub mod collect;
pub mod error;
pub mod features;
pub mod fusion;
pub mod metrics;
pub mod parsing;
pub mod pipeline;
pub mod records;
pub mod report;
pub mod synth;

pub use alignment::{apply_shift, solve_delta, AlignmentConfig, AlignmentSolution};
pub use artifact::{AlignmentMode, CalibratorArtifact, ARTIFACT_FORMAT_VERSION};
pub use collect::{collect, CollectionConfig, CollectionOutcome, HttpTransport, Question};
pub use error::{Error, ErrorClass, Result};
pub use features::{build_descriptor, FeatureHyperParams, FeatureSet, ReliabilityDescriptor, Standardizer};
pub use fusion::{fit_head, predict_prob, FitConfig, FusionParameters, LabeledRows};
pub use metrics::{evaluate_scores, MetricReport};
pub use parsing::{parse_verbal_response, LabelAlphabet, ParsedVerbal, PromptTemplate, VerbalSource};
pub use pipeline::{evaluate, fit_pipeline, Channel, PipelineConfig, PipelineFit};
pub use records::{load_records, save_records, split_dataset, ConfidenceRecord, LoadOptions, SplitConfig, SplitTag};
pub use report::{write_report, EvaluationDocument};
pub use synth::{generate_synthetic, SyntheticConfig};
