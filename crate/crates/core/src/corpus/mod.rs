// SPDX-License-Identifier: MIT OR Apache-2.0

//! Parallel knowledge triples, language metadata and probe construction.

pub mod languages;
pub mod mlama;
pub mod probe;

pub use languages::{categorize_language, Factor, Family, Geography, LanguageMeta, LanguageTable, Script};
pub use mlama::{load_mlama, Corpus, KnowledgeTriple};
pub use probe::{
    build_probe, build_probe_set, probe_id, subject_phrase, DecoderWrapper, ProbeBuilder, ProbeSet, ProbeTriple, Variant,
};
