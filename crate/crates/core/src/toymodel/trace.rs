// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation traces and the hooks that act on FFN activations.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::tensor::Mat;
use super::vocab::SPECIAL;
use crate::error::{Result, XcError};

/// Activations of one transformer layer for one forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    /// Residual stream after the layer, `[seq × d_model]`.
    pub hidden: Mat,
    /// Post-GELU, pre-down-projection activations, `[seq × d_ff]`.
    pub ffn: Mat,
}

/// Per-layer record of a forward pass. `layers` covers the primary stack
/// (the encoder for the encoder-decoder family).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LayerTrace {
    pub tokens: Vec<u32>,
    /// Token + position embeddings, `[seq × d_model]`.
    pub embeddings: Option<Mat>,
    pub layers: Vec<LayerRecord>,
    /// Decoder stack of the encoder-decoder family; empty otherwise.
    pub decoder: Vec<LayerRecord>,
}

impl LayerTrace {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .chain(&self.decoder)
            .all(|l| l.hidden.is_finite() && l.ffn.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeuronSelector {
    #[default]
    All,
    Indices(BTreeSet<usize>),
}

impl NeuronSelector {
    fn contains(&self, j: usize) -> bool {
        match self {
            NeuronSelector::All => true,
            NeuronSelector::Indices(set) => set.contains(&j),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenSelector {
    /// Every position; donor and target must have the same length.
    #[default]
    All,
    /// Mask and sentinel positions, matched to the donor's in order.
    MaskTokens,
    /// Explicit `(target position, donor position)` pairs.
    Aligned(Vec<(usize, usize)>),
}

/// Replace FFN activations of a forward pass with those of a donor run.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSpec {
    pub layers: BTreeSet<usize>,
    pub neurons: NeuronSelector,
    pub tokens: TokenSelector,
    pub donor: LayerTrace,
}

impl PatchSpec {
    pub fn new(layers: impl IntoIterator<Item = usize>, donor: LayerTrace) -> Self {
        Self {
            layers: layers.into_iter().collect(),
            neurons: NeuronSelector::All,
            tokens: TokenSelector::All,
            donor,
        }
    }

    pub fn with_tokens(mut self, tokens: TokenSelector) -> Self {
        self.tokens = tokens;
        self
    }

    pub fn with_neurons(mut self, neurons: NeuronSelector) -> Self {
        self.neurons = neurons;
        self
    }

    pub(crate) fn validate(&self, n_layers: usize) -> Result<()> {
        if let Some(&l) = self.layers.iter().find(|&&l| l >= n_layers) {
            return Err(XcError::Patch(format!(
                "layer {l} out of range for a {n_layers}-layer model"
            )));
        }
        if let Some(&l) = self.layers.iter().find(|&&l| l >= self.donor.layers.len()) {
            return Err(XcError::Patch(format!("donor trace has no layer {l}")));
        }
        Ok(())
    }

    /// `(target, donor)` position pairs for a target sequence.
    pub(crate) fn position_pairs(&self, target_tokens: &[u32]) -> Result<Vec<(usize, usize)>> {
        let donor_len = self.donor.tokens.len();
        let pairs = match &self.tokens {
            TokenSelector::All => {
                if donor_len != target_tokens.len() {
                    return Err(XcError::Patch(format!(
                        "donor has {donor_len} positions, target has {}",
                        target_tokens.len()
                    )));
                }
                (0..donor_len).map(|i| (i, i)).collect()
            }
            TokenSelector::MaskTokens => {
                let is_slot = |t: &u32| {
                    *t == SPECIAL.mask || *t == SPECIAL.sentinel_0 || *t == SPECIAL.sentinel_1
                };
                let target: Vec<usize> = target_tokens
                    .iter()
                    .enumerate()
                    .filter(|(_, t)| is_slot(t))
                    .map(|(i, _)| i)
                    .collect();
                let donor: Vec<usize> = self
                    .donor
                    .tokens
                    .iter()
                    .enumerate()
                    .filter(|(_, t)| is_slot(t))
                    .map(|(i, _)| i)
                    .collect();
                if target.len() != donor.len() {
                    return Err(XcError::Patch(format!(
                        "donor has {} mask positions, target has {}",
                        donor.len(),
                        target.len()
                    )));
                }
                target.into_iter().zip(donor).collect()
            }
            TokenSelector::Aligned(pairs) => {
                if let Some(&(t, d)) = pairs
                    .iter()
                    .find(|&&(t, d)| t >= target_tokens.len() || d >= donor_len)
                {
                    return Err(XcError::Patch(format!(
                        "aligned pair ({t}, {d}) out of range"
                    )));
                }
                pairs.clone()
            }
        };
        Ok(pairs)
    }

    /// Donor values laid out on the target grid plus the replacement mask.
    pub(crate) fn layer_values(
        &self,
        layer: usize,
        pairs: &[(usize, usize)],
        target_rows: usize,
    ) -> Result<(Mat, Vec<bool>)> {
        let donor = &self.donor.layers[layer].ffn;
        let cols = donor.cols;
        let mut values = Mat::zeros(target_rows, cols);
        let mut replaced = vec![false; target_rows * cols];
        for &(t, d) in pairs {
            for j in 0..cols {
                if self.neurons.contains(j) {
                    values.set(t, j, donor.get(d, j));
                    replaced[t * cols + j] = true;
                }
            }
        }
        Ok((values, replaced))
    }
}

/// Per-neuron multipliers applied to FFN activations before the
/// down-projection, at the given positions (all positions when `None`).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScaleSpec {
    pub factors: BTreeMap<usize, Vec<f64>>,
    pub positions: Option<Vec<usize>>,
}

impl ScaleSpec {
    /// Scale every neuron of `layer` by `factor`.
    pub fn uniform(layer: usize, d_ff: usize, factor: f64) -> Self {
        Self {
            factors: BTreeMap::from([(layer, vec![factor; d_ff])]),
            positions: None,
        }
    }

    pub fn at_positions(mut self, positions: Vec<usize>) -> Self {
        self.positions = Some(positions);
        self
    }

    pub(crate) fn check_unit_interval(&self) -> Result<()> {
        for (layer, f) in &self.factors {
            if let Some(v) = f.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(XcError::Argument(format!(
                    "scale multiplier {v} at layer {layer} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn layer_matrix(&self, layer: usize, rows: usize, cols: usize) -> Result<Option<Mat>> {
        let Some(f) = self.factors.get(&layer) else {
            return Ok(None);
        };
        if f.len() != cols {
            return Err(XcError::Argument(format!(
                "layer {layer}: {} multipliers for {cols} neurons",
                f.len()
            )));
        }
        let mut m = Mat::filled(rows, cols, 1.0);
        let positions: Vec<usize> = match &self.positions {
            Some(p) => p.clone(),
            None => (0..rows).collect(),
        };
        for p in positions {
            if p >= rows {
                return Err(XcError::Argument(format!("scale position {p} out of range")));
            }
            m.row_mut(p).copy_from_slice(f);
        }
        Ok(Some(m))
    }
}

/// Additive offset on one scaled FFN activation; used for finite differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FfnShift {
    pub layer: usize,
    pub position: usize,
    pub neuron: usize,
    pub delta: f64,
}
