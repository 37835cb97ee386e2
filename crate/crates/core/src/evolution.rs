// SPDX-License-Identifier: MIT OR Apache-2.0

//! Layer-wise readouts (LogitLens, DecoderLens) and consistency curves.
//!
//! Native runs and trace-fed runs meet at [`CandidateSet`]: every score is
//! computed from the candidate lists it holds, whatever produced them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arch::Arch;
use crate::corpus::{ProbeTriple, Variant};
use crate::error::{Result, XcError};
use crate::metrics::{rankc, top1_accuracy, Candidate, CandidateList, LayerIndex};
use crate::toymodel::beam::{to_candidate_list, Decoder, PatchPlan, ReadMode};
use crate::toymodel::{ClozeInput, Model, Readout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Rankc,
    Top1,
    Cka,
    Ig2Disparity,
    /// Spearman ρ between IG² disparity and RankC.
    RhoRankc,
    RhoTop1,
    /// Two-sided p-value of the matching ρ.
    PRankc,
    PTop1,
}

impl Metric {
    pub const ALL: [Metric; 8] = [
        Metric::Rankc,
        Metric::Top1,
        Metric::Cka,
        Metric::Ig2Disparity,
        Metric::RhoRankc,
        Metric::RhoTop1,
        Metric::PRankc,
        Metric::PTop1,
    ];

    /// Closed interval every value of this metric lies in.
    pub fn bounds(self) -> (f64, f64) {
        match self {
            Metric::RhoRankc | Metric::RhoTop1 => (-1.0, 1.0),
            Metric::Ig2Disparity => (0.0, f64::INFINITY),
            _ => (0.0, 1.0),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Rankc => "rankc",
            Metric::Top1 => "top1",
            Metric::Cka => "cka",
            Metric::Ig2Disparity => "ig2_disparity",
            Metric::RhoRankc => "rho_rankc",
            Metric::RhoTop1 => "rho_top1",
            Metric::PRankc => "p_rankc",
            Metric::PTop1 => "p_top1",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = XcError;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| XcError::Argument(format!("unknown metric `{s}`")))
    }
}

/// Which two inputs a score compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    CmVsMono,
    BaselineVsMono,
    /// Representations of `l1` and `l2` subjects.
    L1VsL2,
    /// `l1` subjects against the masked subject.
    L1VsMask,
    /// Mono against code-mixed attribution maps.
    MonoVsCm,
}

impl Pairing {
    pub fn as_str(self) -> &'static str {
        match self {
            Pairing::CmVsMono => "cm_vs_mono",
            Pairing::BaselineVsMono => "baseline_vs_mono",
            Pairing::L1VsL2 => "l1_vs_l2",
            Pairing::L1VsMask => "l1_vs_mask",
            Pairing::MonoVsCm => "mono_vs_cm",
        }
    }

    /// The variant compared against mono, for candidate pairings.
    pub fn variant(self) -> Result<Variant> {
        match self {
            Pairing::CmVsMono => Ok(Variant::Cm),
            Pairing::BaselineVsMono => Ok(Variant::Baseline),
            other => Err(XcError::Argument(format!("{} is not a candidate pairing", other.as_str()))),
        }
    }
}

impl fmt::Display for Pairing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Pairing {
    type Err = XcError;

    fn from_str(s: &str) -> Result<Self> {
        [
            Pairing::CmVsMono,
            Pairing::BaselineVsMono,
            Pairing::L1VsL2,
            Pairing::L1VsMask,
            Pairing::MonoVsCm,
        ]
        .into_iter()
        .find(|p| p.as_str() == s)
        .ok_or_else(|| XcError::Argument(format!("unknown pairing `{s}`")))
    }
}

/// One consistency value per readout layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionCurve {
    pub l1: String,
    pub l2: String,
    pub metric: Metric,
    pub pairing: Pairing,
    pub layers: Vec<LayerIndex>,
    pub values: Vec<f64>,
}

/// One row of a candidate export; `rank` starts at 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub probe_id: String,
    pub variant: Variant,
    pub layer: LayerIndex,
    pub rank: usize,
    pub token_ids: Vec<u32>,
    pub surface: String,
    pub logprob: f64,
}

type ListKey = (String, Variant, LayerIndex);

/// Candidate lists keyed by `(probe, variant, layer)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CandidateSet {
    lists: BTreeMap<ListKey, CandidateList>,
}

impl CandidateSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, list: CandidateList) -> Result<()> {
        let key = (list.probe_id.clone(), list.variant, list.layer);
        if self.lists.contains_key(&key) {
            return Err(XcError::Invariant(format!(
                "duplicate candidates for {} ({}, layer {})",
                key.0, key.1, key.2
            )));
        }
        self.lists.insert(key, list);
        Ok(())
    }

    pub fn extend(&mut self, other: CandidateSet) -> Result<()> {
        for list in other.lists.into_values() {
            self.insert(list)?;
        }
        Ok(())
    }

    pub fn get(&self, probe_id: &str, variant: Variant, layer: LayerIndex) -> Option<&CandidateList> {
        self.lists.get(&(probe_id.to_string(), variant, layer))
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    pub fn lists(&self) -> impl Iterator<Item = &CandidateList> {
        self.lists.values()
    }

    pub fn probe_ids(&self) -> BTreeSet<&str> {
        self.lists.keys().map(|k| k.0.as_str()).collect()
    }

    /// Numbered layers present for `probe_id`, ascending.
    pub fn layers_of(&self, probe_id: &str) -> Vec<LayerIndex> {
        let set: BTreeSet<LayerIndex> = self
            .lists
            .keys()
            .filter(|k| k.0 == probe_id && matches!(k.2, LayerIndex::Layer(_)))
            .map(|k| k.2)
            .collect();
        set.into_iter().collect()
    }

    pub fn to_records(&self) -> Vec<CandidateRecord> {
        self.lists
            .values()
            .flat_map(|list| {
                list.entries().iter().enumerate().map(move |(i, c)| CandidateRecord {
                    probe_id: list.probe_id.clone(),
                    variant: list.variant,
                    layer: list.layer,
                    rank: i + 1,
                    token_ids: c.token_ids.clone(),
                    surface: c.surface.clone(),
                    logprob: c.logprob,
                })
            })
            .collect()
    }

    /// Rebuild lists from records; ranks of each list must be 1..=n.
    pub fn from_records(records: impl IntoIterator<Item = CandidateRecord>) -> Result<Self> {
        let mut grouped: BTreeMap<ListKey, Vec<(usize, Candidate)>> = BTreeMap::new();
        for r in records {
            grouped.entry((r.probe_id, r.variant, r.layer)).or_default().push((
                r.rank,
                Candidate {
                    token_ids: r.token_ids,
                    surface: r.surface,
                    logprob: r.logprob,
                },
            ));
        }
        let mut set = Self::new();
        for ((probe_id, variant, layer), mut entries) in grouped {
            entries.sort_by_key(|e| e.0);
            if entries.iter().enumerate().any(|(i, e)| e.0 != i + 1) {
                return Err(XcError::Trace(format!(
                    "{probe_id} ({variant}, layer {layer}): ranks are not 1..={}",
                    entries.len()
                )));
            }
            set.insert(CandidateList::new(
                probe_id,
                variant,
                layer,
                entries.into_iter().map(|e| e.1).collect(),
            )?)?;
        }
        Ok(set)
    }

    /// `metric` over `probe_ids` at `layer`, comparing `pairing`'s variant to mono.
    pub fn score(&self, probe_ids: &[&str], layer: LayerIndex, metric: Metric, pairing: Pairing) -> Result<f64> {
        let variant = pairing.variant()?;
        let mut pairs = Vec::with_capacity(probe_ids.len());
        for id in probe_ids {
            let missing = |v: Variant| XcError::Trace(format!("no {v} candidates for {id} at layer {layer}"));
            let other = self.get(id, variant, layer).ok_or_else(|| missing(variant))?;
            let mono = self.get(id, Variant::Mono, layer).ok_or_else(|| missing(Variant::Mono))?;
            pairs.push((other, mono));
        }
        match metric {
            Metric::Rankc => rankc(pairs),
            Metric::Top1 => top1_accuracy(pairs),
            other => Err(XcError::Argument(format!("{other} is not a candidate metric"))),
        }
    }

    /// Curve over the numbered layers shared by every probe.
    pub fn curve(&self, l1: &str, l2: &str, probe_ids: &[&str], metric: Metric, pairing: Pairing) -> Result<EvolutionCurve> {
        let Some(first) = probe_ids.first() else {
            return Err(XcError::Undefined(format!("{l1}-{l2}: no probes")));
        };
        let layers = self.layers_of(first);
        if layers.is_empty() {
            return Err(XcError::Trace(format!("no per-layer candidates for {first}")));
        }
        let values = layers
            .par_iter()
            .map(|&layer| self.score(probe_ids, layer, metric, pairing))
            .collect::<Result<Vec<f64>>>()?;
        Ok(EvolutionCurve {
            l1: l1.to_string(),
            l2: l2.to_string(),
            metric,
            pairing,
            layers,
            values,
        })
    }
}

/// LogitLens: the model's head applied at `layer` of an encoder or decoder model.
pub fn logit_lens_candidates(
    model: &Model,
    probe_id: &str,
    variant: Variant,
    cloze: &ClozeInput,
    layer: usize,
    k: usize,
) -> Result<CandidateList> {
    if model.arch() == Arch::EncoderDecoder {
        return Err(XcError::Config("LogitLens needs an encoder or decoder model; use DecoderLens".into()));
    }
    lens(model, probe_id, variant, cloze, layer, k)
}

/// DecoderLens: the full decoder reading the encoder truncated after `encoder_layer`.
pub fn decoder_lens_candidates(
    model: &Model,
    probe_id: &str,
    variant: Variant,
    cloze: &ClozeInput,
    encoder_layer: usize,
    k: usize,
) -> Result<CandidateList> {
    if model.arch() != Arch::EncoderDecoder {
        return Err(XcError::Config(format!(
            "DecoderLens needs an encoder-decoder model, got {}",
            model.arch()
        )));
    }
    lens(model, probe_id, variant, cloze, encoder_layer, k)
}

fn lens(model: &Model, probe_id: &str, variant: Variant, cloze: &ClozeInput, layer: usize, k: usize) -> Result<CandidateList> {
    if layer >= model.n_layers() {
        return Err(XcError::Argument(format!(
            "layer {layer} out of range for {} layers",
            model.n_layers()
        )));
    }
    let readout = Readout::Layer(layer);
    let hyps = Decoder::new(model, cloze, ReadMode::Single(readout)).candidates(readout, k, k)?;
    to_candidate_list(model, probe_id, variant, LayerIndex::Layer(layer), hyps)
}

/// How [`probe_candidates`] reads a probe out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Readouts {
    /// The ordinary model output only.
    Final,
    /// Every layer of the primary stack.
    Layers,
}

/// Candidate lists of one probe input; `patch` donates FFN activations
/// from the same probe's mono input at the given layers.
pub fn input_candidates(
    model: &Model,
    probe: &ProbeTriple,
    variant: Variant,
    readouts: Readouts,
    k: usize,
    patch: Option<&BTreeSet<usize>>,
) -> Result<Vec<CandidateList>> {
    let vocab = model.vocab();
    let cloze = ClozeInput::from_probe(probe, variant, vocab, probe.object_tokens)?;
    let donor = match patch {
        Some(_) => Some(ClozeInput::from_probe(probe, Variant::Mono, vocab, probe.object_tokens)?),
        None => None,
    };
    let mode = match readouts {
        Readouts::Final => ReadMode::Single(Readout::Final),
        Readouts::Layers => ReadMode::AllLayers,
    };
    let mut decoder = Decoder::new(model, &cloze, mode);
    if let (Some(layers), Some(donor)) = (patch, donor.as_ref()) {
        decoder = decoder.with_patch(PatchPlan {
            layers: layers.clone(),
            donor,
        });
        if !decoder.patch_is_aligned()? {
            return Err(XcError::Patch(format!(
                "{}: object positions are not aligned with the donor",
                probe.probe_id
            )));
        }
    }
    match readouts {
        Readouts::Final => {
            let hyps = decoder.candidates(Readout::Final, k, k)?;
            Ok(vec![to_candidate_list(model, &probe.probe_id, variant, LayerIndex::Final, hyps)?])
        }
        Readouts::Layers => (0..model.n_layers())
            .map(|l| {
                let hyps = decoder.candidates(Readout::Layer(l), k, k)?;
                to_candidate_list(model, &probe.probe_id, variant, LayerIndex::Layer(l), hyps)
            })
            .collect(),
    }
}

/// Candidates of `variants` of every probe, in parallel over probes.
pub fn probe_candidates(
    model: &Model,
    probes: &[&ProbeTriple],
    variants: &[Variant],
    readouts: Readouts,
    k: usize,
) -> Result<CandidateSet> {
    for p in probes {
        if p.arch != model.arch() {
            return Err(XcError::Config(format!(
                "probe {} was built for {}, model is {}",
                p.probe_id,
                p.arch,
                model.arch()
            )));
        }
    }
    let per: Vec<Vec<CandidateList>> = probes
        .par_iter()
        .map(|p| {
            let mut out = Vec::new();
            for &v in variants {
                out.extend(input_candidates(model, p, v, readouts, k, None)?);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut set = CandidateSet::new();
    for list in per.into_iter().flatten() {
        set.insert(list)?;
    }
    Ok(set)
}

/// Language pair shared by `probes`.
pub fn probe_pair(probes: &[&ProbeTriple]) -> Result<(String, String)> {
    let first = probes
        .first()
        .ok_or_else(|| XcError::Undefined("no probes".into()))?;
    if probes
        .iter()
        .any(|p| p.matrix_lang != first.matrix_lang || p.embedded_lang != first.embedded_lang)
    {
        return Err(XcError::Argument("probes span several language pairs".into()));
    }
    Ok((first.matrix_lang.clone(), first.embedded_lang.clone()))
}

/// Per-layer `metric` for code-mixed vs mono, and baseline vs mono.
pub fn consistency_evolution(
    model: &Model,
    probes: &[&ProbeTriple],
    metric: Metric,
    k: usize,
) -> Result<(EvolutionCurve, EvolutionCurve)> {
    let (l1, l2) = probe_pair(probes)?;
    let set = probe_candidates(model, probes, &Variant::ALL, Readouts::Layers, k)?;
    let ids: Vec<&str> = probes.iter().map(|p| p.probe_id.as_str()).collect();
    Ok((
        set.curve(&l1, &l2, &ids, metric, Pairing::CmVsMono)?,
        set.curve(&l1, &l2, &ids, metric, Pairing::BaselineVsMono)?,
    ))
}
