//! Continual learning with a growing mixture of low-rank adapter experts.
//!
//! Each new task pre-expands every adapter layer with candidate experts and a
//! router, trains briefly under a routing-weighted proximal penalty that
//! pushes the task onto already learned experts, prunes candidates the router
//! ignores, then fine-tunes the survivors. At inference the task is either
//! given or identified from a bank of task embeddings.

pub mod adapter;
pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod ifer;
pub mod lifecycle;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod scr;
pub mod stream;

pub use adapter::{ExpertId, LoraExpert, MixtureAdapterLayer, Router, RoutingDistribution, TaskId};
pub use backbone::{FrozenBackbone, Routing};
pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use experiment::{run_experiment, write_artifacts, ExperimentConfig, RunResult, RunSummary};
pub use ifer::{routed_inference, DistanceMetric, IferConfig, MatchResult, TaskEmbeddingBank};
pub use lifecycle::{learn_task, PhaseSchedule, RoutingTrace, TrainConfig, TruncationReport};
pub use metrics::{AccuracyMatrix, CilTrace, Metrics, Protocol};
pub use model::{AdapterModel, ModelConfig};
pub use numerics::{Matrix, ProbVector};
pub use optim::OptimizerConfig;
pub use scr::ScrConfig;
pub use stream::{Alignment, StreamGenerator, TaskData, TaskSpec};
