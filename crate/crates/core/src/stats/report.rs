// SPDX-License-Identifier: MIT OR Apache-2.0

//! The consistency report, factor grouping and tokenizer parity.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::corpus::{Factor, LanguageTable};
use crate::error::{Result, XcError};
use crate::attribution::DisparityProfile;
use crate::evolution::{EvolutionCurve, Metric, Pairing};
use crate::metrics::LayerIndex;
use crate::repsim::RepLayer;
use crate::toymodel::Tokenizer;

/// Tag of rows not produced by an intervention.
pub const NO_INTERVENTION: &str = "none";

/// Layer column of a report row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ReportLayer {
    Index(usize),
    Embeddings,
    Final,
    /// A value pooled over every layer.
    All,
}

impl fmt::Display for ReportLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReportLayer::Index(l) => write!(f, "{l}"),
            ReportLayer::Embeddings => f.write_str("EMB"),
            ReportLayer::Final => f.write_str("FINAL"),
            ReportLayer::All => f.write_str("ALL"),
        }
    }
}

impl FromStr for ReportLayer {
    type Err = XcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "EMB" => Ok(ReportLayer::Embeddings),
            "FINAL" => Ok(ReportLayer::Final),
            "ALL" => Ok(ReportLayer::All),
            _ => s
                .parse()
                .map(ReportLayer::Index)
                .map_err(|_| XcError::Argument(format!("bad report layer `{s}`"))),
        }
    }
}

impl From<LayerIndex> for ReportLayer {
    fn from(l: LayerIndex) -> Self {
        match l {
            LayerIndex::Layer(i) => ReportLayer::Index(i),
            LayerIndex::Final => ReportLayer::Final,
        }
    }
}

impl From<RepLayer> for ReportLayer {
    fn from(l: RepLayer) -> Self {
        match l {
            RepLayer::Layer(i) => ReportLayer::Index(i),
            RepLayer::Embeddings => ReportLayer::Embeddings,
        }
    }
}

impl Serialize for ReportLayer {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ReportLayer::Index(l) => s.serialize_u64(*l as u64),
            other => s.serialize_str(&other.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for ReportLayer {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = ReportLayer;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a layer index, EMB, FINAL or ALL")
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<ReportLayer, E> {
                Ok(ReportLayer::Index(v as usize))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<ReportLayer, E> {
                usize::try_from(v)
                    .map(ReportLayer::Index)
                    .map_err(|_| E::custom(format!("negative layer {v}")))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<ReportLayer, E> {
                v.parse().map_err(E::custom)
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model_id: String,
    pub l1: String,
    /// Embedded language, or `*` for values pooled over every pair.
    pub l2: String,
    pub metric: Metric,
    pub layer: ReportLayer,
    pub value: f64,
    pub pairing: Pairing,
    pub intervention: String,
    pub geography: String,
    pub family: String,
    pub script: String,
}

pub const POOLED_L2: &str = "*";

impl ReportRow {
    /// Row with factor columns joined from `languages` (empty for pooled rows).
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        languages: &LanguageTable,
        model_id: &str,
        l1: &str,
        l2: &str,
        metric: Metric,
        layer: impl Into<ReportLayer>,
        value: f64,
        pairing: Pairing,
        intervention: &str,
    ) -> Result<Self> {
        let (geography, family, script) = if l2 == POOLED_L2 {
            Default::default()
        } else {
            let meta = languages.categorize(l2)?;
            (
                meta.category(Factor::Geography).to_string(),
                meta.category(Factor::Family).to_string(),
                meta.category(Factor::Script).to_string(),
            )
        };
        Ok(Self {
            model_id: model_id.to_string(),
            l1: l1.to_string(),
            l2: l2.to_string(),
            metric,
            layer: layer.into(),
            value,
            pairing,
            intervention: intervention.to_string(),
            geography,
            family,
            script,
        })
    }

    fn key(&self) -> (String, String, String, Metric, ReportLayer, Pairing, String) {
        (
            self.model_id.clone(),
            self.l1.clone(),
            self.l2.clone(),
            self.metric,
            self.layer,
            self.pairing,
            self.intervention.clone(),
        )
    }

    fn factor(&self, factor: Factor) -> &str {
        match factor {
            Factor::Geography => &self.geography,
            Factor::Family => &self.family,
            Factor::Script => &self.script,
        }
    }
}

/// Report rows with a unique `(model, l1, l2, metric, layer, pairing, intervention)` key.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ConsistencyReport {
    rows: Vec<ReportRow>,
    #[serde(skip)]
    keys: BTreeSet<(String, String, String, Metric, ReportLayer, Pairing, String)>,
}

impl ConsistencyReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: impl IntoIterator<Item = ReportRow>) -> Result<Self> {
        let mut r = Self::new();
        for row in rows {
            r.push(row)?;
        }
        Ok(r)
    }

    /// Append a row; duplicate keys and out-of-range values are errors.
    pub fn push(&mut self, row: ReportRow) -> Result<()> {
        let (lo, hi) = row.metric.bounds();
        let tol = 1e-12;
        if !row.value.is_finite() || row.value < lo - tol || row.value > hi + tol {
            return Err(XcError::Invariant(format!(
                "{} = {} outside [{lo}, {hi}] for {}-{} layer {}",
                row.metric, row.value, row.l1, row.l2, row.layer
            )));
        }
        if !self.keys.insert(row.key()) {
            return Err(XcError::Invariant(format!(
                "duplicate report row {} {}-{} {} layer {} {} {}",
                row.model_id, row.l1, row.l2, row.metric, row.layer, row.pairing, row.intervention
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn extend(&mut self, rows: impl IntoIterator<Item = ReportRow>) -> Result<()> {
        rows.into_iter().try_for_each(|r| self.push(r))
    }

    pub fn rows(&self) -> &[ReportRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn filter(&self, keep: impl Fn(&ReportRow) -> bool) -> Self {
        Self::from_rows(self.rows.iter().filter(|r| keep(r)).cloned()).expect("subset of a valid report")
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.rows.is_empty() {
            w.write_record(HEADER)?;
        }
        for row in &self.rows {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| XcError::Invariant(format!("csv buffer: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv writer emits UTF-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()?).map_err(|e| XcError::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| XcError::io(path, e))?;
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let mut report = Self::new();
        for (i, row) in r.deserialize::<ReportRow>().enumerate() {
            let row = row.map_err(|e| XcError::parse(path, i + 2, e.to_string()))?;
            report.push(row)?;
        }
        Ok(report)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.rows)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rows: Vec<ReportRow> = serde_json::from_str(text)?;
        Self::from_rows(rows)
    }

    /// Disparity profiles and per-layer `cm_vs_mono` consistency curves of
    /// `model_id`, as consumed by the IG² correlation.
    pub fn correlation_inputs(&self, model_id: &str) -> Result<(Vec<DisparityProfile>, Vec<EvolutionCurve>)> {
        type Series = BTreeMap<usize, f64>;
        let mut disparity: BTreeMap<(String, String), Series> = BTreeMap::new();
        let mut consistency: BTreeMap<(String, String, Metric), Series> = BTreeMap::new();
        for row in &self.rows {
            let ReportLayer::Index(layer) = row.layer else { continue };
            if row.model_id != model_id || row.intervention != NO_INTERVENTION {
                continue;
            }
            let pair = (row.l1.clone(), row.l2.clone());
            match (row.metric, row.pairing) {
                (Metric::Ig2Disparity, _) => {
                    disparity.entry(pair).or_default().insert(layer, row.value);
                }
                (Metric::Rankc | Metric::Top1, Pairing::CmVsMono) => {
                    consistency.entry((pair.0, pair.1, row.metric)).or_default().insert(layer, row.value);
                }
                _ => {}
            }
        }
        if disparity.is_empty() {
            return Err(XcError::Undefined(format!("report has no ig2_disparity rows for `{model_id}`")));
        }
        let dense = |what: &str, s: &Series| -> Result<Vec<f64>> {
            if s.keys().copied().ne(0..s.len()) {
                return Err(XcError::Invariant(format!("{what}: layers are not contiguous from 0")));
            }
            Ok(s.values().copied().collect())
        };
        let profiles = disparity
            .iter()
            .map(|((l1, l2), s)| {
                Ok(DisparityProfile {
                    l1: l1.clone(),
                    l2: l2.clone(),
                    values: dense(&format!("{l1}-{l2} ig2_disparity"), s)?,
                })
            })
            .collect::<Result<_>>()?;
        let curves = consistency
            .iter()
            .map(|((l1, l2, metric), s)| {
                Ok(EvolutionCurve {
                    l1: l1.clone(),
                    l2: l2.clone(),
                    metric: *metric,
                    pairing: Pairing::CmVsMono,
                    layers: s.keys().map(|&l| LayerIndex::Layer(l)).collect(),
                    values: dense(&format!("{l1}-{l2} {metric}"), s)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok((profiles, curves))
    }
}

const HEADER: [&str; 11] = [
    "model_id",
    "l1",
    "l2",
    "metric",
    "layer",
    "value",
    "pairing",
    "intervention",
    "geography",
    "family",
    "script",
];

/// Per-category means of one factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSummary {
    pub factor: Factor,
    /// Category → (mean, row count).
    pub groups: BTreeMap<String, (f64, usize)>,
    /// Categories of the factor with no rows.
    pub absent: Vec<String>,
}

/// Mean value per category of `factor`. Filter the report to a single
/// metric first; every `l2` must be a known language.
pub fn group_by_factor(report: &ConsistencyReport, factor: Factor, languages: &LanguageTable) -> Result<FactorSummary> {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for row in report.rows() {
        let meta = languages.categorize(&row.l2)?;
        let cat = meta.category(factor);
        if !row.factor(factor).is_empty() && row.factor(factor) != cat {
            return Err(XcError::Invariant(format!(
                "row for `{}` is tagged {} but the table says {cat}",
                row.l2,
                row.factor(factor)
            )));
        }
        let e = sums.entry(cat.to_string()).or_default();
        e.0 += row.value;
        e.1 += 1;
    }
    let groups: BTreeMap<String, (f64, usize)> = sums.into_iter().map(|(k, (s, n))| (k, (s / n as f64, n))).collect();
    let absent: Vec<String> = factor
        .categories()
        .iter()
        .filter(|c| !groups.contains_key(**c))
        .map(|c| c.to_string())
        .collect();
    for c in &absent {
        log::warn!("no rows in category {c} of {factor}");
    }
    Ok(FactorSummary { factor, groups, absent })
}

/// Per language, mean over its subjects of `len_a / len_b` token counts.
pub fn parity_ratio(
    a: &dyn Tokenizer,
    b: &dyn Tokenizer,
    subjects: &BTreeMap<String, Vec<String>>,
) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for (lang, list) in subjects {
        if list.is_empty() {
            return Err(XcError::Undefined(format!("no `{lang}` subjects")));
        }
        let mut total = 0.0;
        for s in list {
            let (na, nb) = (a.tokenize(s)?.len(), b.tokenize(s)?.len());
            if nb == 0 {
                return Err(XcError::Undefined(format!("`{s}` has no tokens under the second tokenizer")));
            }
            total += na as f64 / nb as f64;
        }
        out.insert(lang.clone(), total / list.len() as f64);
    }
    if out.is_empty() {
        return Err(XcError::Undefined("no subjects".into()));
    }
    Ok(out)
}
