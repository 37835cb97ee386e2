// SPDX-License-Identifier: MIT OR Apache-2.0

//! Cross-lingual knowledge-consistency probing.
//!
//! Builds mono / code-mixed / subject-masked cloze probes from parallel
//! knowledge triples, reads top-k candidates from a desk-scale multilingual
//! model (or from exported traces), and scores them with RankC and Top@1.
//! Interpretability tools cover layer-wise readouts, linear CKA,
//! integrated-gradient neuron attribution and FFN activation patching.

#![allow(clippy::needless_range_loop)]

pub mod arch;
pub mod attribution;
pub mod corpus;
pub mod error;
pub mod evolution;
pub mod intervention;
pub mod metrics;
pub mod pipeline;
pub mod repsim;
pub mod stats;
pub mod toymodel;

pub use arch::Arch;
pub use error::{Result, XcError};
