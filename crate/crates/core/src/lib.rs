//! Multi-view fake-news classification with an improved mixture-of-experts
//! fusion layer, learned single-view reweighing and cross-modal
//! consistency learning.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod consistency;
pub mod encoders;
pub mod error;
pub mod export;
pub mod immoe;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod synth;
pub mod train;

pub use ablation::{ablation_preset, run_ablation, AblationRow, ConfigDelta};
pub use config::{BmrConfig, GateInput, GateMode, RefineMode, ReweighMode, View};
pub use consistency::{build_consistency_set, ConsistencyPair};
pub use encoders::{clean, CleanRules, Grid, RawNews};
pub use error::{BmrError, Result};
pub use metrics::{derive_threshold, evaluate, Metrics};
pub use model::{bce, Batch, Bmr, BmrNet, Scores, ViewOutputs};
pub use synth::{synth_corpus, Corpus, SignalSpec, SynthSpec};
pub use train::{train, RunReport, TrainOptions, TrainedRun};
