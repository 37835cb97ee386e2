// SPDX-License-Identifier: MIT OR Apache-2.0

//! Beam search over fixed-length object n-grams.
//!
//! Expansions are ranked by total log-probability, descending, ties broken
//! by the lexicographic order of the token-id sequence. `max(width, k)`
//! hypotheses survive each intermediate step and `k` the last one.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};

use super::cloze::ClozeInput;
use super::model::{log_probs, ForwardOptions, Model, ModelInput, Readout};
use super::trace::{PatchSpec, TokenSelector};
use crate::corpus::Variant;
use crate::error::{Result, XcError};
use crate::metrics::{Candidate, CandidateList, LayerIndex};

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub logprob: f64,
}

/// Total order used for every candidate ranking.
pub fn rank_order(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.logprob
        .partial_cmp(&a.logprob)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// `k` clamped to the number of distinct `n`-grams over `vocab_size` tokens.
pub fn effective_k(k: usize, vocab_size: usize, n: usize) -> usize {
    let mut total: usize = 1;
    for _ in 0..n {
        total = total.saturating_mul(vocab_size);
    }
    if k > total {
        log::warn!("k = {k} exceeds the {total} possible {n}-token candidates; truncated");
        total
    } else {
        k
    }
}

/// Beam search with `next(prefix)` returning log-probabilities over the vocabulary.
pub fn beam_search<F>(n: usize, k: usize, width: usize, vocab_size: usize, mut next: F) -> Result<Vec<Hypothesis>>
where
    F: FnMut(&[u32]) -> Result<Vec<f64>>,
{
    if k == 0 || n == 0 || width == 0 {
        return Err(XcError::Argument("k, width and object length must be at least 1".into()));
    }
    let k = effective_k(k, vocab_size, n);
    let mut beams = vec![Hypothesis {
        tokens: Vec::new(),
        logprob: 0.0,
    }];
    for step in 0..n {
        let mut expanded = Vec::with_capacity(beams.len() * vocab_size);
        for beam in &beams {
            let lp = next(&beam.tokens)?;
            if lp.len() != vocab_size {
                return Err(XcError::Argument(format!(
                    "scorer returned {} log-probabilities for a vocabulary of {vocab_size}",
                    lp.len()
                )));
            }
            if lp.iter().any(|v| v.is_nan()) {
                return Err(XcError::numeric("beam scores"));
            }
            for (t, &l) in lp.iter().enumerate() {
                let mut tokens = beam.tokens.clone();
                tokens.push(t as u32);
                expanded.push(Hypothesis {
                    tokens,
                    logprob: beam.logprob + l,
                });
            }
        }
        expanded.sort_by(rank_order);
        expanded.truncate(if step + 1 == n { k } else { width.max(k) });
        beams = expanded;
    }
    Ok(beams)
}

/// Common-prefix plus common-suffix alignment of two token sequences.
/// Equal lengths align position by position.
pub fn align_tokens(target: &[u32], donor: &[u32]) -> Vec<(usize, usize)> {
    if target.len() == donor.len() {
        return (0..target.len()).map(|i| (i, i)).collect();
    }
    let short = target.len().min(donor.len());
    let prefix = target.iter().zip(donor).take_while(|(a, b)| a == b).count();
    let suffix = target
        .iter()
        .rev()
        .zip(donor.iter().rev())
        .take(short - prefix)
        .take_while(|(a, b)| a == b)
        .count();
    let mut pairs: Vec<(usize, usize)> = (0..prefix).map(|i| (i, i)).collect();
    for j in (1..=suffix).rev() {
        pairs.push((target.len() - j, donor.len() - j));
    }
    pairs
}

/// FFN patch applied while decoding: donor activations come from
/// `donor` run with the same object prefix.
#[derive(Debug, Clone)]
pub struct PatchPlan<'a> {
    pub layers: BTreeSet<usize>,
    pub donor: &'a ClozeInput,
}

/// Which readouts a [`Decoder`] computes per prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadMode {
    /// One readout (the final head, or a single lens layer).
    Single(Readout),
    /// Every layer of the primary stack in one pass.
    AllLayers,
}

/// Memoised per-prefix scorer for one cloze input.
pub struct Decoder<'a> {
    model: &'a Model,
    cloze: &'a ClozeInput,
    mode: ReadMode,
    patch: Option<PatchPlan<'a>>,
    memo: HashMap<Vec<u32>, Vec<Vec<f64>>>,
}

impl<'a> Decoder<'a> {
    pub fn new(model: &'a Model, cloze: &'a ClozeInput, mode: ReadMode) -> Self {
        Self {
            model,
            cloze,
            mode,
            patch: None,
            memo: HashMap::new(),
        }
    }

    pub fn with_patch(mut self, plan: PatchPlan<'a>) -> Self {
        self.patch = Some(plan);
        self
    }

    /// Patch specification for one prefix; `None` when an object position
    /// of the target has no aligned donor position.
    pub fn patch_for(&self, input: &ModelInput, prefix: &[u32]) -> Result<Option<PatchSpec>> {
        let Some(plan) = &self.patch else {
            return Ok(None);
        };
        let donor_input = plan.donor.step(prefix);
        let (_, trace) = self.model.forward_with_trace(&donor_input, None)?;
        let pairs = align_tokens(&input.source, &donor_input.source);
        let aligned: BTreeSet<usize> = pairs.iter().map(|p| p.0).collect();
        let required = self.cloze.neuron_positions(self.cloze.n_object);
        if !required
            .iter()
            .filter(|&&p| p < input.source.len())
            .all(|p| aligned.contains(p))
        {
            return Ok(None);
        }
        Ok(Some(
            PatchSpec::new(plan.layers.iter().copied(), trace).with_tokens(TokenSelector::Aligned(pairs)),
        ))
    }

    /// Whether patching can be applied to this input at all.
    pub fn patch_is_aligned(&self) -> Result<bool> {
        let input = self.cloze.step(&[]);
        Ok(self.patch.is_none() || self.patch_for(&input, &[])?.is_some())
    }

    fn scores(&mut self, prefix: &[u32]) -> Result<&Vec<Vec<f64>>> {
        if !self.memo.contains_key(prefix) {
            let input = self.cloze.step(prefix);
            let spec = self.patch_for(&input, prefix)?;
            if self.patch.is_some() && spec.is_none() {
                return Err(XcError::Patch("object positions are not aligned with the donor".into()));
            }
            let (readout, lens_all) = match self.mode {
                ReadMode::Single(r) => (r, false),
                ReadMode::AllLayers => (Readout::Final, true),
            };
            let out = self.model.forward(
                &input,
                &ForwardOptions {
                    readout,
                    patch: spec.as_ref(),
                    lens_all,
                    ..Default::default()
                },
            )?;
            let rows = if lens_all {
                out.lens.iter().map(|m| log_probs(m).row(0).to_vec()).collect()
            } else {
                vec![out.log_probs().row(0).to_vec()]
            };
            self.memo.insert(prefix.to_vec(), rows);
        }
        Ok(&self.memo[prefix])
    }

    /// Candidates read out at `readout`.
    pub fn candidates(&mut self, readout: Readout, k: usize, width: usize) -> Result<Vec<Hypothesis>> {
        let idx = match self.mode {
            ReadMode::Single(r) if r == readout => 0,
            ReadMode::Single(_) => {
                return Err(XcError::Argument(format!("decoder was built for a different readout than {readout:?}")));
            }
            ReadMode::AllLayers => match readout {
                Readout::Final => self.model.n_layers() - 1,
                Readout::Layer(l) if l < self.model.n_layers() => l,
                Readout::Layer(l) => return Err(XcError::Argument(format!("layer {l} out of range"))),
            },
        };
        let n = self.cloze.n_object;
        let v = self.model.vocab_size();
        beam_search(n, k, width, v, |prefix| Ok(self.scores(prefix)?[idx].clone()))
    }
}

/// Convert hypotheses to a [`CandidateList`].
pub fn to_candidate_list(
    model: &Model,
    probe_id: &str,
    variant: Variant,
    layer: LayerIndex,
    hyps: Vec<Hypothesis>,
) -> Result<CandidateList> {
    let entries = hyps
        .into_iter()
        .map(|h| Candidate {
            surface: model.vocab().detokenize(&h.tokens),
            token_ids: h.tokens,
            logprob: h.logprob,
        })
        .collect();
    CandidateList::new(probe_id, variant, layer, entries)
}

/// Final-head top-`k` candidates of one cloze input, beam width `k`.
pub fn beam_search_candidates(
    model: &Model,
    cloze: &ClozeInput,
    probe_id: &str,
    variant: Variant,
    k: usize,
) -> Result<CandidateList> {
    let hyps = Decoder::new(model, cloze, ReadMode::Single(Readout::Final)).candidates(Readout::Final, k, k)?;
    to_candidate_list(model, probe_id, variant, LayerIndex::Final, hyps)
}
