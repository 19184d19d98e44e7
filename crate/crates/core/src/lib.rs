//! Hierarchical softmax classification with granularity-adaptive
//! out-of-distribution inference.
//!
//! The pipeline: build or prune a class [`hierarchy`], generate or load
//! labelled [`data`], train the shared-trunk [`model`] under the
//! multi-objective [`training`] loss, compute path-based OOD [`scoring`],
//! calibrate stopping thresholds for [`inference`] at a target TNR, and
//! measure AUROC / hierarchy-distance [`evaluation`] metrics. The
//! [`benchmark`] module wires all of it into a reproducible synthetic
//! end-to-end run.

pub mod benchmark;
pub mod data;
pub mod evaluation;
pub mod hierarchy;
pub mod inference;
pub mod model;
pub mod scoring;
pub mod training;

pub use benchmark::{run_bench, write_report, BenchConfig, BenchError, BenchReport};
pub use data::{Band, DataError, Dataset, DatasetSplits, Sample, SplitSpec};
pub use evaluation::{auroc, EvalError, OodPool, Outcomes, ScoreDirection, SweepPoint};
pub use hierarchy::{Granularity, Hierarchy, HierarchyError, HoldoutRoot, NodeId};
pub use inference::{CalibrationError, ThresholdMode, ThresholdTable};
pub use model::{ModelConfig, ModelError, ModelParams};
pub use scoring::PathScore;
pub use training::{LossConfig, Objective, TrainConfig, TrainError};
