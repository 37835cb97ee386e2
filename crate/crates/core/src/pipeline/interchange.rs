// SPDX-License-Identifier: MIT OR Apache-2.0

//! Trace interchange directories.
//!
//! ```text
//! manifest.json      {schema_version, model_id, arch, n_layers, d_ff, vocab_hash}
//! candidates.jsonl   {probe_id, variant, layer, rank, token_ids, surface, logprob}
//! embeddings.jsonl   {probe_id, lang, layer, vector}
//! gradients*.jsonl   {probe_id, variant, layer, step_k, m, position, activations, grads}
//! ```
//!
//! `layer` is an index, `"FINAL"` (candidates) or `"EMB"` (embeddings).
//! Gradient records may be sharded over several `gradients*.jsonl` files,
//! read in file-name order. Numbers written as 32-bit floats are read as `f64`.

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::arch::Arch;
use crate::attribution::GradientRecord;
use crate::error::{Result, XcError};
use crate::evolution::CandidateRecord;
use crate::repsim::EmbeddingRecord;
use crate::toymodel::Model;

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const CANDIDATES: &str = "candidates.jsonl";
pub const EMBEDDINGS: &str = "embeddings.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceManifest {
    pub schema_version: u32,
    pub model_id: String,
    pub arch: Arch,
    pub n_layers: usize,
    pub d_ff: usize,
    pub vocab_hash: String,
}

impl TraceManifest {
    pub fn for_model(model: &Model, model_id: &str) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            model_id: model_id.to_string(),
            arch: model.arch(),
            n_layers: model.n_layers(),
            d_ff: model.d_ff(),
            vocab_hash: model.vocab().hash(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    pub manifest: TraceManifest,
    pub candidates: Vec<CandidateRecord>,
    pub embeddings: Vec<EmbeddingRecord>,
    pub gradients: Vec<GradientRecord>,
}

impl TraceSet {
    pub fn new(manifest: TraceManifest) -> Self {
        Self {
            manifest,
            candidates: Vec::new(),
            embeddings: Vec::new(),
            gradients: Vec::new(),
        }
    }
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| XcError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n").map_err(|e| XcError::io(path, e))?;
    }
    w.flush().map_err(|e| XcError::io(path, e))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| XcError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| XcError::parse(path, i + 1, e.to_string())))
        .collect()
}

fn gradient_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| XcError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("gradients") && n.ends_with(".jsonl"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Whether `dir` holds any non-empty gradient shard.
pub fn has_gradients(dir: &Path) -> Result<bool> {
    Ok(gradient_files(dir)?
        .iter()
        .any(|p| std::fs::metadata(p).is_ok_and(|m| m.len() > 0)))
}

pub fn read_manifest(dir: &Path) -> Result<TraceManifest> {
    let path = dir.join(MANIFEST);
    if !path.is_file() {
        return Err(XcError::Version(format!("{} has no {MANIFEST}", dir.display())));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| XcError::io(&path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| XcError::parse(&path, e.line(), e.to_string()))?;
    match value.get("schema_version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == u64::from(SCHEMA_VERSION) => {}
        Some(v) => {
            return Err(XcError::Version(format!(
                "{}: schema version {v}, expected {SCHEMA_VERSION}",
                path.display()
            )))
        }
        None => return Err(XcError::Version(format!("{}: no schema_version", path.display()))),
    }
    serde_json::from_value(value).map_err(|e| XcError::parse(&path, 1, e.to_string()))
}

/// Read a trace directory; absent record files read as empty.
pub fn read_traces(dir: &Path) -> Result<TraceSet> {
    let manifest = read_manifest(dir)?;
    let optional = |name: &str| -> Option<PathBuf> {
        let p = dir.join(name);
        p.is_file().then_some(p)
    };
    let candidates = match optional(CANDIDATES) {
        Some(p) => read_jsonl(&p)?,
        None => Vec::new(),
    };
    let embeddings = match optional(EMBEDDINGS) {
        Some(p) => read_jsonl(&p)?,
        None => Vec::new(),
    };
    let mut gradients = Vec::new();
    for p in gradient_files(dir)? {
        gradients.extend(read_jsonl::<GradientRecord>(&p)?);
    }
    for g in &gradients {
        if g.layer >= manifest.n_layers || g.activations.len() != manifest.d_ff || g.grads.len() != manifest.d_ff {
            return Err(XcError::Trace(format!(
                "{}: gradient record for layer {} does not fit the manifest shape",
                g.probe_id, g.layer
            )));
        }
    }
    Ok(TraceSet {
        manifest,
        candidates,
        embeddings,
        gradients,
    })
}

/// Write a trace directory, creating it if needed.
pub fn write_traces(dir: &Path, traces: &TraceSet) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| XcError::io(dir, e))?;
    let path = dir.join(MANIFEST);
    std::fs::write(&path, serde_json::to_string_pretty(&traces.manifest)? + "\n").map_err(|e| XcError::io(&path, e))?;
    write_jsonl(&dir.join(CANDIDATES), &traces.candidates)?;
    write_jsonl(&dir.join(EMBEDDINGS), &traces.embeddings)?;
    write_jsonl(&dir.join("gradients.jsonl"), &traces.gradients)?;
    Ok(())
}
