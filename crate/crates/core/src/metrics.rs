// SPDX-License-Identifier: MIT OR Apache-2.0

//! Candidate lists and the consistency metrics defined over pairs of them.
//!
//! Candidates are identified by their token-id sequence. RankC weights rank
//! `j` of an `N`-long list by `e^(N-j) / Σ_k e^(N-k)`.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::corpus::Variant;
use crate::error::{Result, XcError};

/// A readout layer, or the model's ordinary output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerIndex {
    Layer(usize),
    Final,
}

impl fmt::Display for LayerIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerIndex::Layer(l) => write!(f, "{l}"),
            LayerIndex::Final => f.write_str("FINAL"),
        }
    }
}

impl FromStr for LayerIndex {
    type Err = XcError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "FINAL" {
            return Ok(LayerIndex::Final);
        }
        s.parse()
            .map(LayerIndex::Layer)
            .map_err(|_| XcError::Argument(format!("layer must be an index or FINAL, got `{s}`")))
    }
}

impl Serialize for LayerIndex {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            LayerIndex::Layer(l) => s.serialize_u64(*l as u64),
            LayerIndex::Final => s.serialize_str("FINAL"),
        }
    }
}

impl<'de> Deserialize<'de> for LayerIndex {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Index(u64),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Index(i) => Ok(LayerIndex::Layer(i as usize)),
            Raw::Name(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub token_ids: Vec<u32>,
    pub surface: String,
    pub logprob: f64,
}

/// Ranked top-k predictions for one input at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateList {
    pub probe_id: String,
    pub variant: Variant,
    pub layer: LayerIndex,
    entries: Vec<Candidate>,
}

fn entry_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.logprob
        .partial_cmp(&a.logprob)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.token_ids.cmp(&b.token_ids))
}

impl CandidateList {
    /// Entries must be ranked by descending log-probability (exact ties in
    /// lexicographic token-id order) and free of duplicate sequences.
    pub fn new(probe_id: impl Into<String>, variant: Variant, layer: LayerIndex, entries: Vec<Candidate>) -> Result<Self> {
        let probe_id = probe_id.into();
        if entries.iter().any(|e| e.logprob.is_nan()) {
            return Err(XcError::Invariant(format!("{probe_id}: NaN log-probability")));
        }
        if entries.windows(2).any(|w| entry_order(&w[0], &w[1]) == Ordering::Greater) {
            return Err(XcError::Invariant(format!("{probe_id}: candidates are not ranked")));
        }
        let distinct: BTreeSet<&[u32]> = entries.iter().map(|e| e.token_ids.as_slice()).collect();
        if distinct.len() != entries.len() {
            return Err(XcError::Invariant(format!("{probe_id}: duplicate candidate")));
        }
        Ok(Self {
            probe_id,
            variant,
            layer,
            entries,
        })
    }

    /// List over bare token sequences in the given rank order.
    pub fn from_ranked(sequences: Vec<Vec<u32>>) -> Result<Self> {
        let entries = sequences
            .into_iter()
            .enumerate()
            .map(|(i, token_ids)| Candidate {
                surface: String::new(),
                token_ids,
                logprob: -(i as f64),
            })
            .collect();
        Self::new("", Variant::Mono, LayerIndex::Final, entries)
    }

    pub fn entries(&self) -> &[Candidate] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn top(&self) -> Option<&Candidate> {
        self.entries.first()
    }

    /// The first `k` entries.
    pub fn truncated(&self, k: usize) -> Self {
        let mut out = self.clone();
        out.entries.truncate(k);
        out
    }
}

/// `|prefix_j(a) ∩ prefix_j(b)| / j`.
pub fn precision_at_j(a: &CandidateList, b: &CandidateList, j: usize) -> Result<f64> {
    if j == 0 || j > a.len().min(b.len()) {
        return Err(XcError::Argument(format!(
            "j = {j} outside 1..={}",
            a.len().min(b.len())
        )));
    }
    let pa: BTreeSet<&[u32]> = a.entries[..j].iter().map(|e| e.token_ids.as_slice()).collect();
    let hits = b.entries[..j]
        .iter()
        .filter(|e| pa.contains(e.token_ids.as_slice()))
        .count();
    Ok(hits as f64 / j as f64)
}

/// RankC weights for a list of length `n`; they sum to 1.
pub fn rankc_weights(n: usize) -> Vec<f64> {
    let exps: Vec<f64> = (1..=n).map(|j| ((n - j) as f64).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / denom).collect()
}

/// RankC contribution of one statement.
pub fn pair_rankc(cm: &CandidateList, mono: &CandidateList) -> Result<f64> {
    if cm.len() != mono.len() {
        return Err(XcError::Argument(format!(
            "{}: candidate lists of unequal length {} and {}",
            mono.probe_id,
            cm.len(),
            mono.len()
        )));
    }
    if cm.is_empty() {
        return Err(XcError::Argument(format!("{}: empty candidate list", mono.probe_id)));
    }
    let n = cm.len();
    let mut score = 0.0;
    for (j, w) in (1..=n).zip(rankc_weights(n)) {
        score += w * precision_at_j(cm, mono, j)?;
    }
    Ok(score)
}

/// Mean RankC over `(cm, mono)` pairs.
pub fn rankc<'a, I>(pairs: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a CandidateList, &'a CandidateList)>,
{
    let mut total = 0.0;
    let mut count = 0usize;
    for (cm, mono) in pairs {
        total += pair_rankc(cm, mono)?;
        count += 1;
    }
    if count == 0 {
        return Err(XcError::Undefined("RankC over no statements".into()));
    }
    Ok(total / count as f64)
}

/// Fraction of pairs whose rank-1 candidates are the same sequence.
pub fn top1_accuracy<'a, I>(pairs: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a CandidateList, &'a CandidateList)>,
{
    let mut hits = 0usize;
    let mut count = 0usize;
    for (cm, mono) in pairs {
        let (Some(a), Some(b)) = (cm.top(), mono.top()) else {
            return Err(XcError::Argument(format!("{}: empty candidate list", mono.probe_id)));
        };
        hits += usize::from(a.token_ids == b.token_ids);
        count += 1;
    }
    if count == 0 {
        return Err(XcError::Undefined("Top@1 over no statements".into()));
    }
    Ok(hits as f64 / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn list(ids: &[u32]) -> CandidateList {
        CandidateList::from_ranked(ids.iter().map(|&i| vec![i]).collect()).unwrap()
    }

    #[test]
    fn precision_by_hand() {
        let (a, b) = (list(&[0, 1, 2]), list(&[1, 0, 3]));
        assert_eq!(precision_at_j(&a, &b, 2).unwrap(), 1.0);
        assert_eq!(precision_at_j(&a, &b, 3).unwrap(), 2.0 / 3.0);
        assert_eq!(precision_at_j(&a, &b, 1).unwrap(), 0.0);
        assert!(precision_at_j(&a, &b, 4).is_err());
        assert!(precision_at_j(&a, &b, 0).is_err());
    }

    #[test]
    fn anchors() {
        let (a, b) = (list(&[0, 1, 2, 3, 4]), list(&[5, 6, 7, 8, 9]));
        assert_eq!(rankc([(&a, &a)]).unwrap(), 1.0);
        assert_eq!(rankc([(&a, &b)]).unwrap(), 0.0);
        let swap = rankc([(&list(&[0, 1]), &list(&[1, 0]))]).unwrap();
        assert!((swap - 1.0 / (1.0 + std::f64::consts::E)).abs() < 1e-12);
        assert!((swap - 0.26894).abs() < 1e-5);
    }

    #[test]
    fn weights_decay_and_sum_to_one() {
        for n in 1..8 {
            let w = rankc_weights(n);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            assert!(w.windows(2).all(|p| p[0] > p[1]));
        }
    }

    #[test]
    fn top1_hand_count() {
        let pairs = [
            (list(&[0, 1]), list(&[0, 2])),
            (list(&[1, 0]), list(&[0, 1])),
            (list(&[3, 1]), list(&[3, 1])),
            (list(&[2, 1]), list(&[1, 2])),
        ];
        let v = top1_accuracy(pairs.iter().map(|(a, b)| (a, b))).unwrap();
        assert_eq!(v, 0.5);
    }

    #[test]
    fn errors() {
        let empty: [(&CandidateList, &CandidateList); 0] = [];
        assert!(matches!(rankc(empty), Err(XcError::Undefined(_))));
        assert!(matches!(top1_accuracy(empty), Err(XcError::Undefined(_))));
        assert!(matches!(
            rankc([(&list(&[0, 1]), &list(&[0]))]),
            Err(XcError::Argument(_))
        ));
        assert!(CandidateList::from_ranked(vec![vec![1], vec![1]]).is_err());
        let unranked = vec![
            Candidate { token_ids: vec![1], surface: String::new(), logprob: -2.0 },
            Candidate { token_ids: vec![2], surface: String::new(), logprob: -1.0 },
        ];
        assert!(CandidateList::new("p", Variant::Cm, LayerIndex::Final, unranked).is_err());
    }

    #[test]
    fn layer_index_serde() {
        assert_eq!(serde_json::to_string(&LayerIndex::Final).unwrap(), "\"FINAL\"");
        assert_eq!(serde_json::from_str::<LayerIndex>("3").unwrap(), LayerIndex::Layer(3));
        assert_eq!("FINAL".parse::<LayerIndex>().unwrap(), LayerIndex::Final);
        assert!("last".parse::<LayerIndex>().is_err());
    }
}
