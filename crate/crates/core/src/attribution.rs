// SPDX-License-Identifier: MIT OR Apache-2.0

//! IG² neuron attribution and mono-vs-code-mixed disparity profiles.
//!
//! `IG²(w) = (w/m) Σ_{k=1..m} ∂P̄/∂((k/m)w)` with `P̄` the mean probability
//! of the gold-object tokens, teacher-forced, and a zero baseline. A
//! neuron's score sums this over the attributed positions. Native runs
//! produce [`GradientRecord`]s and share [`aggregate_ig2`] with trace-fed runs.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Variant;
use crate::error::{Result, XcError};
use crate::toymodel::trace::ScaleSpec;
use crate::toymodel::{ClozeInput, Model, Objective};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    /// Every neuron of a layer scaled together; per-neuron gradients read off.
    #[default]
    LayerJoint,
    /// One neuron scaled at a time.
    PerNeuron,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ig2Options {
    pub m: usize,
    pub scaling: Scaling,
    pub objective: Objective,
    pub deadline: Option<Instant>,
}

impl Default for Ig2Options {
    fn default() -> Self {
        Self {
            m: 20,
            scaling: Scaling::LayerJoint,
            objective: Objective::Probability,
            deadline: None,
        }
    }
}

/// Path gradient of one layer at one position and one scale step.
/// `activations` holds the unscaled reference values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientRecord {
    pub probe_id: String,
    pub variant: Variant,
    pub layer: usize,
    pub step_k: usize,
    pub m: usize,
    pub position: usize,
    pub activations: Vec<f64>,
    pub grads: Vec<f64>,
}

/// IG² score per `(layer, neuron)` for one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub probe_id: String,
    pub variant: Variant,
    pub m: usize,
    pub scores: Vec<Vec<f64>>,
}

impl AttributionMap {
    pub fn n_layers(&self) -> usize {
        self.scores.len()
    }

    pub fn d_ff(&self) -> usize {
        self.scores.first().map_or(0, Vec::len)
    }

    pub fn layer_mean(&self, layer: usize) -> f64 {
        let row = &self.scores[layer];
        row.iter().sum::<f64>() / row.len() as f64
    }
}

/// Gradient records for one input: every layer, attributed position and step.
pub fn ig2_records(
    model: &Model,
    probe_id: &str,
    variant: Variant,
    cloze: &ClozeInput,
    gold: &[u32],
    opts: &Ig2Options,
) -> Result<Vec<GradientRecord>> {
    if opts.m == 0 {
        return Err(XcError::Argument("m must be at least 1".into()));
    }
    if gold.is_empty() {
        return Err(XcError::Argument(format!("{probe_id}: empty gold object")));
    }
    if let Some(&t) = gold.iter().find(|&&t| t as usize >= model.vocab_size()) {
        return Err(XcError::Argument(format!("{probe_id}: token {t} not in the vocabulary")));
    }
    let n = gold.len().min(cloze.n_object);
    let gold = &gold[..n];
    let input = cloze.teacher_forced(gold)?;
    let targets: Vec<(usize, u32)> = gold.iter().copied().enumerate().collect();
    let positions = cloze.neuron_positions(n);
    let reference = model.grad_wrt_ffn(&input, &targets, None, opts.objective)?;
    let d_ff = model.d_ff();
    let m = opts.m;

    let units: Vec<(usize, usize)> = (0..model.n_layers())
        .flat_map(|l| (1..=m).map(move |k| (l, k)))
        .collect();
    let done = AtomicUsize::new(0);
    let total = units.len();
    let per_unit: Vec<Vec<GradientRecord>> = units
        .par_iter()
        .map(|&(layer, k)| {
            if opts.deadline.is_some_and(|d| Instant::now() >= d) {
                return Err(XcError::Cancelled {
                    completed: done.load(Ordering::Relaxed),
                    total,
                });
            }
            let f = k as f64 / m as f64;
            let grads: Vec<Vec<f64>> = match opts.scaling {
                Scaling::LayerJoint => {
                    let scale = ScaleSpec::uniform(layer, d_ff, f).at_positions(positions.clone());
                    let g = model.grad_wrt_ffn(&input, &targets, Some(&scale), opts.objective)?;
                    positions.iter().map(|&p| g.grads[layer].row(p).to_vec()).collect()
                }
                Scaling::PerNeuron => {
                    let mut rows = vec![vec![0.0; d_ff]; positions.len()];
                    for j in 0..d_ff {
                        let mut factors = vec![1.0; d_ff];
                        factors[j] = f;
                        let scale = ScaleSpec {
                            factors: BTreeMap::from([(layer, factors)]),
                            positions: Some(positions.clone()),
                        };
                        let g = model.grad_wrt_ffn(&input, &targets, Some(&scale), opts.objective)?;
                        for (row, &p) in rows.iter_mut().zip(&positions) {
                            row[j] = g.grads[layer].get(p, j);
                        }
                    }
                    rows
                }
            };
            done.fetch_add(1, Ordering::Relaxed);
            Ok(positions
                .iter()
                .zip(grads)
                .map(|(&position, grads)| GradientRecord {
                    probe_id: probe_id.to_string(),
                    variant,
                    layer,
                    step_k: k,
                    m,
                    position,
                    activations: reference.activations[layer].row(position).to_vec(),
                    grads,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_unit.into_iter().flatten().collect())
}

/// Riemann-sum aggregation of gradient records into one map per
/// `(probe, variant)`. Every `(layer, position)` must carry steps `1..=m`
/// with one reference activation vector.
pub fn aggregate_ig2(records: &[GradientRecord]) -> Result<Vec<AttributionMap>> {
    type Steps<'a> = BTreeMap<usize, &'a GradientRecord>;
    type Sites<'a> = BTreeMap<(usize, usize), Steps<'a>>;
    let mut grouped: BTreeMap<(&str, Variant), Sites> = BTreeMap::new();
    for r in records {
        let steps = grouped
            .entry((r.probe_id.as_str(), r.variant))
            .or_default()
            .entry((r.layer, r.position))
            .or_default();
        if steps.insert(r.step_k, r).is_some() {
            return Err(XcError::Trace(format!(
                "{} ({}): duplicate step {} at layer {} position {}",
                r.probe_id, r.variant, r.step_k, r.layer, r.position
            )));
        }
    }
    grouped
        .into_iter()
        .map(|((probe_id, variant), cells)| {
            let bad = |msg: String| XcError::Trace(format!("{probe_id} ({variant}): {msg}"));
            let first = cells.values().next().and_then(|s| s.values().next()).expect("non-empty group");
            let (m, d_ff) = (first.m, first.activations.len());
            if m == 0 {
                return Err(bad("m = 0".into()));
            }
            let layers: BTreeSet<usize> = cells.keys().map(|c| c.0).collect();
            let n_layers = layers.last().map_or(0, |l| l + 1);
            if layers.len() != n_layers {
                return Err(bad("layers are not contiguous from 0".into()));
            }
            let mut scores = vec![vec![0.0; d_ff]; n_layers];
            for (&(layer, position), steps) in &cells {
                let reference = &steps.values().next().expect("non-empty").activations;
                if steps.len() != m || steps.keys().next() != Some(&1) || steps.keys().last() != Some(&m) {
                    return Err(bad(format!("layer {layer} position {position}: steps are not 1..={m}")));
                }
                let mut sum = vec![0.0; d_ff];
                for r in steps.values() {
                    if r.m != m || r.grads.len() != d_ff || r.activations.len() != d_ff {
                        return Err(bad(format!("layer {layer} position {position}: inconsistent record shape")));
                    }
                    if r.activations != *reference {
                        return Err(bad(format!("layer {layer} position {position}: reference activations differ between steps")));
                    }
                    for (s, g) in sum.iter_mut().zip(&r.grads) {
                        *s += g;
                    }
                }
                for ((score, w), s) in scores[layer].iter_mut().zip(reference).zip(sum) {
                    *score += w * s / m as f64;
                }
            }
            if scores.iter().flatten().any(|v| !v.is_finite()) {
                return Err(XcError::numeric(format!("IG² scores of {probe_id}")));
            }
            Ok(AttributionMap {
                probe_id: probe_id.to_string(),
                variant,
                m,
                scores,
            })
        })
        .collect()
}

/// IG² map of one input over gold-object tokens `gold`.
pub fn ig2_map(
    model: &Model,
    probe_id: &str,
    variant: Variant,
    cloze: &ClozeInput,
    gold: &[u32],
    opts: &Ig2Options,
) -> Result<AttributionMap> {
    let records = ig2_records(model, probe_id, variant, cloze, gold, opts)?;
    let mut maps = aggregate_ig2(&records)?;
    Ok(maps.pop().expect("one input, one map"))
}

/// Per-layer mean of `|IG²_mono − IG²_cm|` over neurons and probes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisparityProfile {
    pub l1: String,
    pub l2: String,
    pub values: Vec<f64>,
}

/// Disparity of maps paired by probe id.
pub fn ig2_disparity(l1: &str, l2: &str, mono: &[AttributionMap], cm: &[AttributionMap]) -> Result<DisparityProfile> {
    let index = |maps: &[AttributionMap], want: Variant| -> Result<BTreeMap<String, usize>> {
        let mut out = BTreeMap::new();
        for (i, m) in maps.iter().enumerate() {
            if m.variant != want {
                return Err(XcError::Argument(format!("{}: expected a {want} map, got {}", m.probe_id, m.variant)));
            }
            if out.insert(m.probe_id.clone(), i).is_some() {
                return Err(XcError::Argument(format!("{}: duplicate {want} map", m.probe_id)));
            }
        }
        Ok(out)
    };
    let a = index(mono, Variant::Mono)?;
    let b = index(cm, Variant::Cm)?;
    if a.keys().ne(b.keys()) {
        return Err(XcError::Argument("mono and code-mixed maps cover different probes".into()));
    }
    if a.is_empty() {
        return Err(XcError::Undefined(format!("{l1}-{l2}: no attribution maps")));
    }
    let first = &mono[*a.values().next().expect("non-empty")];
    let (n_layers, d_ff) = (first.n_layers(), first.d_ff());
    let mut values = vec![0.0; n_layers];
    for (id, &i) in &a {
        let (x, y) = (&mono[i], &cm[b[id]]);
        for map in [x, y] {
            if map.n_layers() != n_layers || map.scores.iter().any(|r| r.len() != d_ff) {
                return Err(XcError::Argument(format!("{id}: map shape differs")));
            }
        }
        for (l, v) in values.iter_mut().enumerate() {
            *v += x.scores[l].iter().zip(&y.scores[l]).map(|(p, q)| (p - q).abs()).sum::<f64>();
        }
    }
    let denom = (a.len() * d_ff) as f64;
    values.iter_mut().for_each(|v| *v /= denom);
    Ok(DisparityProfile {
        l1: l1.to_string(),
        l2: l2.to_string(),
        values,
    })
}

/// The `n` layers of highest disparity (lowest with `include_low`), ties to
/// the lower index; returned ascending.
pub fn select_layers_by_disparity(profile: &DisparityProfile, n: usize, include_low: bool) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(XcError::Argument("select at least one layer".into()));
    }
    if n > profile.values.len() {
        return Err(XcError::Argument(format!(
            "{n} layers requested from a profile of {}",
            profile.values.len()
        )));
    }
    if profile.values.iter().any(|v| v.is_nan()) {
        return Err(XcError::numeric("disparity profile"));
    }
    let mut order: Vec<usize> = (0..profile.values.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (profile.values[i], profile.values[j]);
        let by_value = if include_low { a.total_cmp(&b) } else { b.total_cmp(&a) };
        by_value.then(i.cmp(&j))
    });
    let mut chosen = order[..n].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(variant: Variant, id: &str, scores: Vec<Vec<f64>>) -> AttributionMap {
        AttributionMap {
            probe_id: id.into(),
            variant,
            m: 1,
            scores,
        }
    }

    fn profile(values: Vec<f64>) -> DisparityProfile {
        DisparityProfile {
            l1: "en".into(),
            l2: "ta".into(),
            values,
        }
    }

    #[test]
    fn hand_disparity() {
        let mono = [
            map(Variant::Mono, "a", vec![vec![1.0, 2.0], vec![0.0, 0.0]]),
            map(Variant::Mono, "b", vec![vec![0.0, 0.0], vec![3.0, -1.0]]),
        ];
        let cm = [
            map(Variant::Cm, "b", vec![vec![1.0, 1.0], vec![1.0, 1.0]]),
            map(Variant::Cm, "a", vec![vec![0.0, 4.0], vec![0.5, 0.0]]),
        ];
        let p = ig2_disparity("en", "ta", &mono, &cm).unwrap();
        // layer 0: (1 + 2 + 1 + 1) / 4; layer 1: (0.5 + 0 + 2 + 2) / 4
        assert_eq!(p.values, vec![1.25, 1.125]);
        assert!(ig2_disparity("en", "ta", &mono, &cm[..1]).is_err());
        let same = ig2_disparity("en", "ta", &mono[..1], &[map(Variant::Cm, "a", mono[0].scores.clone())]).unwrap();
        assert_eq!(same.values, vec![0.0, 0.0]);
    }

    #[test]
    fn layer_selection() {
        assert_eq!(select_layers_by_disparity(&profile(vec![0.1, 0.9, 0.3, 0.8]), 2, false).unwrap(), vec![1, 3]);
        assert_eq!(select_layers_by_disparity(&profile(vec![0.1, 0.9, 0.3, 0.8]), 2, true).unwrap(), vec![0, 2]);
        assert_eq!(select_layers_by_disparity(&profile(vec![0.5; 6]), 3, false).unwrap(), vec![0, 1, 2]);
        assert!(select_layers_by_disparity(&profile(vec![0.5; 3]), 0, false).is_err());
        assert!(select_layers_by_disparity(&profile(vec![0.5; 3]), 4, false).is_err());
    }

    #[test]
    fn aggregation_checks_steps() {
        let rec = |k: usize| GradientRecord {
            probe_id: "p".into(),
            variant: Variant::Mono,
            layer: 0,
            step_k: k,
            m: 2,
            position: 0,
            activations: vec![2.0, 0.0],
            grads: vec![k as f64, 5.0],
        };
        let maps = aggregate_ig2(&[rec(1), rec(2)]).unwrap();
        assert_eq!(maps[0].scores, vec![vec![3.0, 0.0]]);
        assert!(aggregate_ig2(&[rec(1)]).is_err());
        assert!(aggregate_ig2(&[rec(1), rec(1)]).is_err());
    }
}
