// SPDX-License-Identifier: MIT OR Apache-2.0

//! Desk-scale multilingual language model with manual differentiation,
//! activation tracing and FFN patching hooks.

pub mod beam;
pub mod checkpoint;
pub mod cloze;
pub mod config;
pub mod fixture;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod trace;
pub mod train;
pub mod vocab;

pub use beam::{beam_search, beam_search_candidates, Decoder, Hypothesis, PatchPlan, ReadMode};
pub use cloze::ClozeInput;
pub use config::ModelConfig;
pub use fixture::{fixture_vocabulary, train_fixture, Fixture, FixtureSpec, FixtureTraining};
pub use model::{FfnGradients, ForwardOptions, ForwardOutput, Model, ModelInput, Objective, Readout};
pub use tensor::Mat;
pub use trace::{FfnShift, LayerRecord, LayerTrace, NeuronSelector, PatchSpec, ScaleSpec, TokenSelector};
pub use train::{AdamOptions, TrainExample, TrainReport};
pub use vocab::{Tokenizer, Vocabulary};
