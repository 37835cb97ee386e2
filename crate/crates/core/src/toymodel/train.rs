// SPDX-License-Identifier: MIT OR Apache-2.0

//! Full-batch Adam on teacher-forced cross-entropy.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{Model, ModelInput};
use super::tensor::Mat;
use crate::error::{Result, XcError};

/// One supervised example: an input and `(slot row, gold token)` targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainExample {
    pub input: ModelInput,
    pub targets: Vec<(usize, u32)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamOptions {
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamOptions {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss before each update.
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// Mean loss and summed gradients over `examples`, reduced in input order.
pub fn batch_loss(model: &Model, examples: &[TrainExample]) -> Result<(f64, Vec<Mat>)> {
    let parts: Vec<(f64, Vec<Mat>)> = examples
        .par_iter()
        .map(|ex| {
            let (loss, grads) = model.cross_entropy(&ex.input, &ex.targets, true)?;
            Ok((loss, grads.expect("gradients requested")))
        })
        .collect::<Result<_>>()?;
    let n = examples.len() as f64;
    let mut total = 0.0;
    let mut sum: Vec<Mat> = model.params().iter().map(|p| Mat::zeros(p.rows, p.cols)).collect();
    for (loss, grads) in parts {
        total += loss;
        for (s, g) in sum.iter_mut().zip(&grads) {
            s.add_assign(g);
        }
    }
    for s in &mut sum {
        *s = s.scale(1.0 / n);
    }
    Ok((total / n, sum))
}

/// Train in place. Deterministic for a given model and example order.
pub fn train(model: &mut Model, examples: &[TrainExample], opts: &AdamOptions) -> Result<TrainReport> {
    if examples.is_empty() && opts.steps > 0 {
        return Err(XcError::Argument("no training examples".into()));
    }
    let mut m: Vec<Mat> = model.params().iter().map(|p| Mat::zeros(p.rows, p.cols)).collect();
    let mut v = m.clone();
    let mut report = TrainReport::default();
    for step in 0..opts.steps {
        let (loss, grads) = batch_loss(model, examples)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(XcError::Training { step, loss });
        }
        report.losses.push(loss);
        let t = (step + 1) as i32;
        let c1 = 1.0 - opts.beta1.powi(t);
        let c2 = 1.0 - opts.beta2.powi(t);
        for ((p, g), (mi, vi)) in model.params_mut().iter_mut().zip(&grads).zip(m.iter_mut().zip(v.iter_mut())) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                mi.data[i] = opts.beta1 * mi.data[i] + (1.0 - opts.beta1) * gi;
                vi.data[i] = opts.beta2 * vi.data[i] + (1.0 - opts.beta2) * gi * gi;
                let mh = mi.data[i] / c1;
                let vh = vi.data[i] / c2;
                p.data[i] -= opts.lr * mh / (vh.sqrt() + opts.eps);
            }
        }
        if step % 50 == 0 {
            log::debug!("step {step}: loss {loss:.5}");
        }
    }
    Ok(report)
}

/// `exp` of the mean per-token cross-entropy.
pub fn perplexity(model: &Model, examples: &[TrainExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(XcError::Undefined("perplexity of an empty split".into()));
    }
    let per: Vec<(f64, usize)> = examples
        .par_iter()
        .map(|ex| {
            let (loss, _) = model.cross_entropy(&ex.input, &ex.targets, false)?;
            Ok((loss * ex.targets.len() as f64, ex.targets.len()))
        })
        .collect::<Result<_>>()?;
    let (nll, n) = per.iter().fold((0.0, 0), |(a, b), &(l, c)| (a + l, b + c));
    Ok((nll / n as f64).exp())
}
