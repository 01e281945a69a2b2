//! Temporal meta-learning for entity prediction on temporal knowledge
//! graphs.
//!
//! A temporal KG is a sequence of snapshots. Training treats every pair of
//! adjacent snapshots as a meta-task, learns the tasks one at a time in
//! chronological order, and links consecutive tasks by gating the two most
//! recent parameter states. At test time the model keeps adapting with
//! multi-step updates on each newly observed snapshot.
//!
//! Modules:
//! - [`data`]: quadruple parsing, snapshots, splits, interaction history
//! - [`backbone`]: the model contract and the built-in trilinear scorer
//! - [`meta`]: meta-tasks, gating, the training loop, adaptation, baselines
//! - [`eval`]: raw ranking, MRR / Hits@k, bucketed reports
//! - [`synth`]: synthetic graphs with a changepoint and cold entities
//! - [`experiment`], [`cli`]: pipelines and the command-line front end

pub mod backbone;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod meta;
pub mod optim;
pub mod synth;

pub use backbone::{init_params, Backbone, GradSet, ParamSet, Trilinear};
pub use config::{Ablation, MetaConfig, Optimizer};
pub use data::{
    build_history_index, build_temporal_kg, parse_quadruples, split_by_time, HistoryIndex,
    HistoryMode, Quadruple, Snapshot, Split, TemporalKg,
};
pub use error::{Error, Result};
pub use eval::{compute_metrics, EvalReport, RankLog};
pub use experiment::Mode;
pub use meta::{GateSet, MetaLearner, ParamHistory};
