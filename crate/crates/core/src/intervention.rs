// SPDX-License-Identifier: MIT OR Apache-2.0

//! FFN activation patching: mono-run activations donated into the
//! code-mixed run at selected layers, then consistency re-measured.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ProbeTriple, Variant};
use crate::error::{Result, XcError};
use crate::evolution::{input_candidates, probe_candidates, probe_pair, CandidateSet, EvolutionCurve, Metric, Pairing, Readouts};
use crate::metrics::CandidateList;
use crate::toymodel::Model;

pub const TAG_PATCH: &str = "ffn_patch";
pub const TAG_REFERENCE: &str = "ffn_patch_reference";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterventionConfig {
    pub layers: BTreeSet<usize>,
    pub k: usize,
}

impl InterventionConfig {
    pub fn new(layers: impl IntoIterator<Item = usize>, k: usize) -> Self {
        Self {
            layers: layers.into_iter().collect(),
            k,
        }
    }

    pub fn validate(&self, model: &Model) -> Result<()> {
        if self.layers.is_empty() {
            return Err(XcError::Config("patch layer set is empty".into()));
        }
        if let Some(&l) = self.layers.iter().find(|&&l| l >= model.n_layers()) {
            return Err(XcError::Config(format!(
                "patch layer {l} out of range for {} layers",
                model.n_layers()
            )));
        }
        if self.k == 0 {
            return Err(XcError::Config("k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Candidates of the patched and unpatched runs over the surviving probes.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchedEval {
    pub l1: String,
    pub l2: String,
    /// Mono candidates with patched code-mixed candidates.
    pub patched: CandidateSet,
    /// Mono and unpatched code-mixed candidates.
    pub unpatched: CandidateSet,
    pub processed: Vec<String>,
    /// Probes whose object positions have no aligned donor position.
    pub skipped: Vec<String>,
}

impl PatchedEval {
    pub fn supplied(&self) -> usize {
        self.processed.len() + self.skipped.len()
    }

    /// `(patched, unpatched)` curves of code-mixed vs mono.
    pub fn curves(&self, metric: Metric) -> Result<(EvolutionCurve, EvolutionCurve)> {
        if self.processed.is_empty() {
            return Err(XcError::Undefined(format!(
                "{}-{}: every probe was skipped",
                self.l1, self.l2
            )));
        }
        let ids: Vec<&str> = self.processed.iter().map(String::as_str).collect();
        Ok((
            self.patched.curve(&self.l1, &self.l2, &ids, metric, Pairing::CmVsMono)?,
            self.unpatched.curve(&self.l1, &self.l2, &ids, metric, Pairing::CmVsMono)?,
        ))
    }
}

/// Patch each probe's code-mixed run with its mono run's FFN activations.
pub fn run_patched_eval(model: &Model, probes: &[&ProbeTriple], config: &InterventionConfig) -> Result<PatchedEval> {
    config.validate(model)?;
    let (l1, l2) = probe_pair(probes)?;
    let outcomes: Vec<Option<Vec<CandidateList>>> = probes
        .par_iter()
        .map(|p| match input_candidates(model, p, Variant::Cm, Readouts::Layers, config.k, Some(&config.layers)) {
            Ok(lists) => Ok(Some(lists)),
            Err(XcError::Patch(msg)) => {
                log::info!("skipping {}: {msg}", p.probe_id);
                Ok(None)
            }
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;

    let mut processed = Vec::new();
    let mut skipped = Vec::new();
    let mut patched_lists = Vec::new();
    for (p, out) in probes.iter().zip(outcomes) {
        match out {
            Some(lists) => {
                processed.push(p.probe_id.clone());
                patched_lists.extend(lists);
            }
            None => skipped.push(p.probe_id.clone()),
        }
    }
    let ok: BTreeSet<&str> = processed.iter().map(String::as_str).collect();
    let kept: Vec<&ProbeTriple> = probes
        .iter()
        .copied()
        .filter(|p| ok.contains(p.probe_id.as_str()))
        .collect();
    let unpatched = probe_candidates(model, &kept, &[Variant::Mono, Variant::Cm], Readouts::Layers, config.k)?;
    let mut patched = probe_candidates(model, &kept, &[Variant::Mono], Readouts::Layers, config.k)?;
    for list in patched_lists {
        patched.insert(list)?;
    }
    Ok(PatchedEval {
        l1,
        l2,
        patched,
        unpatched,
        processed,
        skipped,
    })
}
