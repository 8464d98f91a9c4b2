//! Label-free transductive refinement of zero-shot probabilities and
//! failure-aware split conformal prediction.

pub mod config;
pub mod conformal;
pub mod error;
pub mod graph;
pub mod harness;
pub mod io;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod refine;
pub mod signals;

pub use error::{FormatError, LataError, Result};
pub use graph::{build_graph, SparseAffinityGraph};
pub use matrix::Matrix;
pub use model::{Embedding, LabeledExample, PrototypeBank, ProbabilityVector, TestExample};
pub use refine::{ClassPrior, RefineConfig, RefineTrace};
pub use conformal::{ConformalThreshold, FailureAwareParams, PredictionSet, ScoreKind, ScoreRule, Threshold};
pub use metrics::{AggregateReport, ConformalReport, EvaluationRecord};
pub use signals::{FailureProvider, FailureSignals, HeuristicProvider, ViluProvider, ViluWeights};
pub use config::{ProviderKind, RunConfig};
pub use io::{DataConfig, Dataset};
