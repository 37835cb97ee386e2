// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment orchestration, trace interchange and output layout.

pub mod config;
pub mod interchange;
pub mod run;

pub use config::{Analysis, ExperimentConfig, ModelSource};
pub use interchange::{read_traces, write_traces, TraceManifest, TraceSet, SCHEMA_VERSION};
pub use run::{exit_code, run_experiment, AnalysisStatus, RunManifest, RunOutcome};
