// SPDX-License-Identifier: MIT OR Apache-2.0

//! Linear CKA between batches of cross-lingual subject representations.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::corpus::subject_phrase;
use crate::error::{Result, XcError};
use crate::toymodel::tensor::Mat;
use crate::toymodel::vocab::{Tokenizer, MASK};
use crate::toymodel::Model;

/// Representation layer: the embedding output or a transformer layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RepLayer {
    Embeddings,
    Layer(usize),
}

impl fmt::Display for RepLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RepLayer::Embeddings => f.write_str("EMB"),
            RepLayer::Layer(l) => write!(f, "{l}"),
        }
    }
}

impl FromStr for RepLayer {
    type Err = XcError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "EMB" {
            return Ok(RepLayer::Embeddings);
        }
        s.parse()
            .map(RepLayer::Layer)
            .map_err(|_| XcError::Argument(format!("layer must be an index or EMB, got `{s}`")))
    }
}

impl Serialize for RepLayer {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            RepLayer::Embeddings => s.serialize_str("EMB"),
            RepLayer::Layer(l) => s.serialize_u64(*l as u64),
        }
    }
}

impl<'de> Deserialize<'de> for RepLayer {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Index(u64),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Index(i) => Ok(RepLayer::Layer(i as usize)),
            Raw::Name(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// One pooled subject representation. `lang` is a language code, or
/// `"mask"` for the subject-masked baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub probe_id: String,
    pub lang: String,
    pub layer: RepLayer,
    pub vector: Vec<f64>,
}

pub const MASK_LANG: &str = "mask";

/// `‖Ycᵀ Xc‖²_F / (‖Xcᵀ Xc‖_F ‖Ycᵀ Yc‖_F)` over column-centred batches;
/// 0 when either centred batch is all zero.
pub fn cka_linear(x: &Mat, y: &Mat) -> Result<f64> {
    if x.rows != y.rows {
        return Err(XcError::Argument(format!(
            "batches have {} and {} rows",
            x.rows, y.rows
        )));
    }
    if x.rows < 2 {
        return Err(XcError::Argument("CKA needs at least two rows".into()));
    }
    if !x.is_finite() || !y.is_finite() {
        return Err(XcError::numeric("CKA input"));
    }
    let mut xc = x.clone();
    let mut yc = y.clone();
    xc.center_columns();
    yc.center_columns();
    let cross = yc.t_matmul(&xc).frobenius_sq();
    let xx = xc.t_matmul(&xc).frobenius_sq().sqrt();
    let yy = yc.t_matmul(&yc).frobenius_sq().sqrt();
    if xx == 0.0 || yy == 0.0 {
        return Ok(0.0);
    }
    Ok(cross / (xx * yy))
}

/// Token positions pooled for a subject representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Mean over the subject's tokens.
    #[default]
    Subject,
    /// Mean over the whole phrase, relation included.
    Phrase,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CkaOptions {
    pub pooling: Pooling,
    pub include_embeddings: bool,
    /// Also compute the masked-subject baseline against `l1`.
    pub baseline: bool,
}

/// A subject in both languages plus the matrix-language template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectPair {
    pub probe_id: String,
    pub template: String,
    pub subject_l1: String,
    pub subject_l2: String,
}

/// Per-layer CKA values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkaCurve {
    pub layers: Vec<RepLayer>,
    pub values: Vec<f64>,
    pub baseline: Option<Vec<f64>>,
}

fn mean_rows(m: &Mat, rows: std::ops::Range<usize>) -> Vec<f64> {
    let n = rows.len() as f64;
    let mut out = vec![0.0; m.cols];
    for r in rows {
        for (o, v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= n);
    out
}

/// Pooled representations of `subject` in `template` at every layer.
fn pooled(model: &Model, template: &str, subject: &str, opts: &CkaOptions) -> Result<Vec<(RepLayer, Vec<f64>)>> {
    let vocab = model.vocab();
    let n_subject = vocab.tokenize(subject)?.len();
    let phrase = vocab.tokenize(&subject_phrase(template, subject))?;
    let trace = model.hidden_states(&phrase)?;
    let span = match opts.pooling {
        Pooling::Subject => 0..n_subject,
        Pooling::Phrase => 0..phrase.len(),
    };
    let mut out = Vec::with_capacity(trace.layers.len() + 1);
    if opts.include_embeddings {
        let e = trace.embeddings.as_ref().expect("hidden_states records embeddings");
        out.push((RepLayer::Embeddings, mean_rows(e, span.clone())));
    }
    for (l, rec) in trace.layers.iter().enumerate() {
        out.push((RepLayer::Layer(l), mean_rows(&rec.hidden, span.clone())));
    }
    Ok(out)
}

/// Embedding records of every subject pair (and the masked baseline).
pub fn subject_embeddings(
    model: &Model,
    pairs: &[SubjectPair],
    l1: &str,
    l2: &str,
    opts: &CkaOptions,
) -> Result<Vec<EmbeddingRecord>> {
    let per_pair: Vec<Vec<EmbeddingRecord>> = pairs
        .par_iter()
        .map(|p| {
            let mut recs = Vec::new();
            let mut push = |lang: &str, subject: &str| -> Result<()> {
                for (layer, vector) in pooled(model, &p.template, subject, opts)? {
                    recs.push(EmbeddingRecord {
                        probe_id: p.probe_id.clone(),
                        lang: lang.to_string(),
                        layer,
                        vector,
                    });
                }
                Ok(())
            };
            push(l1, &p.subject_l1)?;
            if l2 != l1 {
                push(l2, &p.subject_l2)?;
            }
            if opts.baseline {
                push(MASK_LANG, MASK)?;
            }
            Ok(recs)
        })
        .collect::<Result<_>>()?;
    Ok(per_pair.into_iter().flatten().collect())
}

/// CKA curve between `l1` and `other` rows of `records`, paired by probe id.
pub fn cka_curve_from_records(records: &[EmbeddingRecord], l1: &str, other: &str) -> Result<(Vec<RepLayer>, Vec<f64>)> {
    let mut by: BTreeMap<(RepLayer, &str), BTreeMap<&str, &Vec<f64>>> = BTreeMap::new();
    for r in records {
        by.entry((r.layer, r.lang.as_str()))
            .or_default()
            .insert(r.probe_id.as_str(), &r.vector);
    }
    let layers: Vec<RepLayer> = {
        let mut ls: Vec<RepLayer> = by.keys().filter(|(_, lang)| *lang == l1).map(|(l, _)| *l).collect();
        ls.dedup();
        ls
    };
    if layers.is_empty() {
        return Err(XcError::Trace(format!("no `{l1}` embeddings")));
    }
    let values = layers
        .par_iter()
        .map(|&layer| {
            let a = &by[&(layer, l1)];
            let b = by
                .get(&(layer, other))
                .ok_or_else(|| XcError::Trace(format!("no `{other}` embeddings at layer {layer}")))?;
            let ids: Vec<&str> = a.keys().copied().collect();
            let mut xr = Vec::with_capacity(ids.len());
            let mut yr = Vec::with_capacity(ids.len());
            for id in &ids {
                let y = b
                    .get(id)
                    .ok_or_else(|| XcError::Trace(format!("`{other}` embedding missing for {id} at layer {layer}")))?;
                xr.push(a[id].clone());
                yr.push((*y).clone());
            }
            if b.len() != ids.len() {
                return Err(XcError::Trace(format!("unpaired `{other}` embeddings at layer {layer}")));
            }
            cka_linear(&Mat::from_rows(&xr), &Mat::from_rows(&yr))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok((layers, values))
}

/// Layer-wise CKA between `l1` and `l2` subject representations.
pub fn layerwise_cka_curve(model: &Model, pairs: &[SubjectPair], l1: &str, l2: &str, opts: &CkaOptions) -> Result<CkaCurve> {
    let records = subject_embeddings(model, pairs, l1, l2, opts)?;
    curve_from_records(&records, l1, l2, opts.baseline)
}

/// Trace-fed counterpart of [`layerwise_cka_curve`].
pub fn curve_from_records(records: &[EmbeddingRecord], l1: &str, l2: &str, baseline: bool) -> Result<CkaCurve> {
    let (layers, values) = cka_curve_from_records(records, l1, l2)?;
    let baseline = if baseline {
        let (bl, bv) = cka_curve_from_records(records, l1, MASK_LANG)?;
        if bl != layers {
            return Err(XcError::Trace("baseline layers differ from subject layers".into()));
        }
        Some(bv)
    } else {
        None
    };
    Ok(CkaCurve {
        layers,
        values,
        baseline,
    })
}
