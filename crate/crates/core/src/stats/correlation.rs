// SPDX-License-Identifier: MIT OR Apache-2.0

//! Spearman rank correlation and its pairing with IG² disparity.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::attribution::DisparityProfile;
use crate::error::{Result, XcError};
use crate::evolution::{EvolutionCurve, Metric, Pairing};
use crate::metrics::LayerIndex;

pub const ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PValueMethod {
    /// Two-sided t approximation with `n - 2` degrees of freedom.
    #[default]
    TApprox,
    /// Exact two-sided permutation test over all `n!` orderings; `n ≤ 10`.
    Permutation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub rho: f64,
    pub p_value: f64,
    pub n: usize,
}

impl Correlation {
    pub fn significant(&self) -> bool {
        self.p_value < ALPHA
    }
}

/// 1-based ranks, ties sharing the mean of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

fn t_p_value(rho: f64, n: usize) -> f64 {
    if rho.abs() >= 1.0 {
        return 0.0;
    }
    let df = (n - 2) as f64;
    let t = rho * (df / (1.0 - rho * rho)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("n >= 3 gives positive degrees of freedom");
    (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
}

fn permutation_p_value(rx: &[f64], ry: &[f64], rho: f64) -> f64 {
    // Heap's algorithm over orderings of ry
    let n = ry.len();
    let mut perm = ry.to_vec();
    let mut c = vec![0usize; n];
    let tol = 1e-12;
    let mut total = 1u64;
    let mut extreme = u64::from(pearson(rx, &perm).abs() >= rho.abs() - tol);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            total += 1;
            extreme += u64::from(pearson(rx, &perm).abs() >= rho.abs() - tol);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    extreme as f64 / total as f64
}

/// Spearman ρ with a t-approximated two-sided p-value.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Correlation> {
    spearman_with(x, y, PValueMethod::TApprox)
}

pub fn spearman_with(x: &[f64], y: &[f64], method: PValueMethod) -> Result<Correlation> {
    if x.len() != y.len() {
        return Err(XcError::Argument(format!("sequences of length {} and {}", x.len(), y.len())));
    }
    let n = x.len();
    if n < 3 {
        return Err(XcError::Argument(format!("Spearman needs at least 3 points, got {n}")));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(XcError::numeric("Spearman input"));
    }
    for (name, s) in [("x", x), ("y", y)] {
        if s.iter().all(|v| *v == s[0]) {
            return Err(XcError::Undefined(format!("correlation with constant {name}")));
        }
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let rho = pearson(&rx, &ry);
    let p_value = match method {
        PValueMethod::TApprox => t_p_value(rho, n),
        PValueMethod::Permutation => {
            if n > 10 {
                return Err(XcError::Argument(format!("exact permutation test limited to n <= 10, got {n}")));
            }
            permutation_p_value(&rx, &ry, rho)
        }
    };
    Ok(Correlation { rho, p_value, n })
}

/// `"*"` when `p < 0.05`, else empty.
pub fn stars(p_value: f64) -> &'static str {
    if p_value < ALPHA {
        "*"
    } else {
        ""
    }
}

/// One correlation-table row, e.g. `mT0-base 0.528* / 0.519*`.
pub fn format_table_row(model: &str, rankc: &Correlation, top1: &Correlation) -> String {
    format!(
        "{model} {:.3}{} / {:.3}{}",
        rankc.rho,
        stars(rankc.p_value),
        top1.rho,
        stars(top1.p_value)
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ig2Correlation {
    pub rankc: Correlation,
    pub top1: Correlation,
}

/// Spearman between per-layer IG² disparity and per-layer code-mixed
/// consistency, pooled over every `(layer, language pair)` point.
pub fn correlate_ig2_consistency(profiles: &[DisparityProfile], curves: &[EvolutionCurve]) -> Result<Ig2Correlation> {
    let pooled = |metric: Metric| -> Result<Correlation> {
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for profile in profiles {
            let curve = curves
                .iter()
                .find(|c| c.l1 == profile.l1 && c.l2 == profile.l2 && c.metric == metric && c.pairing == Pairing::CmVsMono)
                .ok_or_else(|| {
                    XcError::Argument(format!("no {metric} curve for {}-{}", profile.l1, profile.l2))
                })?;
            let expected: Vec<LayerIndex> = (0..profile.values.len()).map(LayerIndex::Layer).collect();
            if curve.layers != expected {
                return Err(XcError::Argument(format!(
                    "{}-{}: {metric} curve layers do not match the {}-layer disparity profile",
                    profile.l1,
                    profile.l2,
                    profile.values.len()
                )));
            }
            xs.extend_from_slice(&profile.values);
            ys.extend_from_slice(&curve.values);
        }
        spearman(&xs, &ys)
    };
    Ok(Ig2Correlation {
        rankc: pooled(Metric::Rankc)?,
        top1: pooled(Metric::Top1)?,
    })
}
