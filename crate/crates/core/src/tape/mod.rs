//! A small reverse-mode tape over dense 2-D tensors.
//!
//! Every node declares the buffers its backward reads; those are the only
//! state kept between forward and backward and each one is recorded in the
//! forward pass's [`Ledger`](crate::memledger::Ledger).

mod config;
mod data;
mod gradcheck;
mod graph;
mod optim;
mod train;

pub use config::{
    load_levels, ActivationChoice, CoefficientPaths, LayerSpec, LossKind, ModelConfig, NormChoice, StorageSpec, TaskSpec,
};
pub use data::{DataSource, Spiral, TeacherRegression};
pub use gradcheck::{check_graph, rel_error, GradcheckOptions, GradcheckReport, KindReport};
pub use graph::{
    ForwardOutput, GradSet, Gradients, Graph, GraphBuilder, Loss, NodeKind, Param, ParamId, StoragePolicy, Target,
};
pub use optim::{Optimizer, OptimizerConfig};
pub use train::{evaluate, median_gap, relative_gap, trace_csv, train, TraceRecord, TrainOptions, TrainOutcome};
