// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tokenized cloze inputs and the per-family way of reading the object out.
//!
//! Encoder: the object masks are filled left to right, each step reading
//! the next mask. Encoder-decoder: the decoder starts from `<s>` plus the
//! object sentinel and generates the span. Decoder: the prompt is continued.

use crate::arch::Arch;
use crate::corpus::{ProbeTriple, Variant};
use crate::error::{Result, XcError};

use super::model::ModelInput;
use super::vocab::{Tokenizer, Vocabulary, SPECIAL};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ClozeInput {
    pub arch: Arch,
    pub tokens: Vec<u32>,
    /// Encoder: object mask positions. Encoder-decoder: the object
    /// sentinel's position in the source. Decoder: empty.
    pub object_positions: Vec<usize>,
    /// Decoder prefix of the encoder-decoder family.
    pub decoder_start: Vec<u32>,
    /// Number of object tokens to decode.
    pub n_object: usize,
}

fn positions_of(tokens: &[u32], pred: impl Fn(u32) -> bool) -> Vec<usize> {
    tokens
        .iter()
        .enumerate()
        .filter(|(_, &t)| pred(t))
        .map(|(i, _)| i)
        .collect()
}

impl ClozeInput {
    /// Tokenize one variant of a probe. `n_object` is used by the
    /// encoder-decoder and decoder families; encoder probes carry their
    /// own mask count.
    pub fn from_probe(probe: &ProbeTriple, variant: Variant, vocab: &Vocabulary, n_object: usize) -> Result<Self> {
        let tokens = vocab.tokenize(probe.input(variant))?;
        match probe.arch {
            Arch::Encoder => {
                let masks = positions_of(&tokens, |t| t == SPECIAL.mask);
                let n = probe.object_tokens;
                let expected = if variant == Variant::Baseline { n + 1 } else { n };
                if masks.len() != expected {
                    return Err(XcError::Invariant(format!(
                        "{} ({variant}): {} masks, expected {expected}",
                        probe.probe_id,
                        masks.len()
                    )));
                }
                let object_positions = if variant == Variant::Baseline && probe.subject_first {
                    masks[1..].to_vec()
                } else {
                    masks[..n].to_vec()
                };
                Ok(Self {
                    arch: Arch::Encoder,
                    tokens,
                    object_positions,
                    decoder_start: Vec::new(),
                    n_object: n,
                })
            }
            Arch::EncoderDecoder => {
                let sentinel = if variant == Variant::Baseline && probe.subject_first {
                    SPECIAL.sentinel_1
                } else {
                    SPECIAL.sentinel_0
                };
                Self::encoder_decoder(tokens, sentinel, n_object, &probe.probe_id)
            }
            Arch::Decoder => Self::decoder(tokens, n_object),
        }
    }

    /// Tokenize free text: every `<mask>` is an object slot (encoder),
    /// `<extra_id_0>` marks the span (encoder-decoder), or the text is a
    /// prompt to continue (decoder).
    pub fn from_text(arch: Arch, text: &str, vocab: &Vocabulary, n_object: usize) -> Result<Self> {
        let tokens = vocab.tokenize(text)?;
        match arch {
            Arch::Encoder => {
                let masks = positions_of(&tokens, |t| t == SPECIAL.mask);
                if masks.is_empty() {
                    return Err(XcError::Argument("encoder input has no <mask>".into()));
                }
                Ok(Self {
                    arch,
                    n_object: masks.len(),
                    tokens,
                    object_positions: masks,
                    decoder_start: Vec::new(),
                })
            }
            Arch::EncoderDecoder => Self::encoder_decoder(tokens, SPECIAL.sentinel_0, n_object, text),
            Arch::Decoder => Self::decoder(tokens, n_object),
        }
    }

    fn encoder_decoder(tokens: Vec<u32>, sentinel: u32, n_object: usize, what: &str) -> Result<Self> {
        if n_object == 0 {
            return Err(XcError::Argument("object length must be at least 1".into()));
        }
        let pos = tokens
            .iter()
            .position(|&t| t == sentinel)
            .ok_or_else(|| XcError::Invariant(format!("{what}: object sentinel missing")))?;
        Ok(Self {
            arch: Arch::EncoderDecoder,
            tokens,
            object_positions: vec![pos],
            decoder_start: vec![SPECIAL.bos, sentinel],
            n_object,
        })
    }

    fn decoder(tokens: Vec<u32>, n_object: usize) -> Result<Self> {
        if n_object == 0 {
            return Err(XcError::Argument("object length must be at least 1".into()));
        }
        if tokens.is_empty() {
            return Err(XcError::Argument("empty prompt".into()));
        }
        Ok(Self {
            arch: Arch::Decoder,
            tokens,
            object_positions: Vec::new(),
            decoder_start: Vec::new(),
            n_object,
        })
    }

    /// Input predicting object token `prefix.len()` after `prefix`.
    pub fn step(&self, prefix: &[u32]) -> ModelInput {
        let i = prefix.len();
        assert!(i < self.n_object, "prefix already covers the object");
        match self.arch {
            Arch::Encoder => {
                let mut source = self.tokens.clone();
                for (&p, &t) in self.object_positions.iter().zip(prefix) {
                    source[p] = t;
                }
                ModelInput {
                    source,
                    target: Vec::new(),
                    slots: vec![self.object_positions[i]],
                }
            }
            Arch::EncoderDecoder => {
                let mut target = self.decoder_start.clone();
                target.extend_from_slice(prefix);
                ModelInput {
                    source: self.tokens.clone(),
                    slots: vec![target.len() - 1],
                    target,
                }
            }
            Arch::Decoder => {
                let mut source = self.tokens.clone();
                source.extend_from_slice(prefix);
                ModelInput {
                    slots: vec![source.len() - 1],
                    source,
                    target: Vec::new(),
                }
            }
        }
    }

    /// Single pass scoring every gold token; row `i` of the slots reads token `i`.
    /// Encoder slots all see the unfilled masks.
    pub fn teacher_forced(&self, gold: &[u32]) -> Result<ModelInput> {
        let n = gold.len();
        if n == 0 || n > self.n_object {
            return Err(XcError::Argument(format!(
                "{n} gold tokens for an object of {} tokens",
                self.n_object
            )));
        }
        Ok(match self.arch {
            Arch::Encoder => ModelInput {
                source: self.tokens.clone(),
                target: Vec::new(),
                slots: self.object_positions[..n].to_vec(),
            },
            Arch::EncoderDecoder => {
                let mut target = self.decoder_start.clone();
                target.extend_from_slice(&gold[..n - 1]);
                let start = self.decoder_start.len() - 1;
                ModelInput {
                    source: self.tokens.clone(),
                    target,
                    slots: (start..start + n).collect(),
                }
            }
            Arch::Decoder => {
                let mut source = self.tokens.clone();
                source.extend_from_slice(&gold[..n - 1]);
                let start = self.tokens.len() - 1;
                ModelInput {
                    source,
                    target: Vec::new(),
                    slots: (start..start + n).collect(),
                }
            }
        })
    }

    /// Primary-stack positions attributed for an `n`-token teacher-forced object.
    pub fn neuron_positions(&self, n: usize) -> Vec<usize> {
        match self.arch {
            Arch::Encoder => self.object_positions[..n.min(self.object_positions.len())].to_vec(),
            Arch::EncoderDecoder => self.object_positions.clone(),
            Arch::Decoder => {
                let start = self.tokens.len() - 1;
                (start..start + n).collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{KnowledgeTriple, ProbeBuilder};
    use std::collections::BTreeMap;

    fn triple(template: &str) -> KnowledgeTriple {
        KnowledgeTriple {
            triple_id: "P36-1".into(),
            relation_id: "P36".into(),
            template: template.into(),
            subject_surface: BTreeMap::from([("en".into(), "Paris".into()), ("de".into(), "Paris".into())]),
            object_surface: BTreeMap::from([("en".into(), "France".into())]),
        }
    }

    fn vocab() -> Vocabulary {
        Vocabulary::from_texts([
            "Paris is the capital of France . The",
            "Finish the cloze question with words. Do not give additional comments. Question: _ Answer:",
        ])
    }

    #[test]
    fn baseline_object_masks_follow_template_order() {
        let v = vocab();
        let b = ProbeBuilder::default();
        let p = b.build(&triple("[X] is the capital of [Y] ."), "en", "de", Arch::Encoder, 2).unwrap().unwrap();
        let c = ClozeInput::from_probe(&p, Variant::Baseline, &v, 2).unwrap();
        assert_eq!(c.object_positions, vec![5, 6]);
        let p = b.build(&triple("The capital of [Y] is [X] ."), "en", "de", Arch::Encoder, 2).unwrap().unwrap();
        let c = ClozeInput::from_probe(&p, Variant::Baseline, &v, 2).unwrap();
        assert_eq!(c.object_positions, vec![3, 4]);
    }

    #[test]
    fn encoder_decoder_baseline_reads_object_sentinel() {
        let v = vocab();
        let p = ProbeBuilder::default()
            .build(&triple("[X] is the capital of [Y] ."), "en", "de", Arch::EncoderDecoder, 1)
            .unwrap()
            .unwrap();
        let c = ClozeInput::from_probe(&p, Variant::Baseline, &v, 2).unwrap();
        assert_eq!(c.decoder_start, vec![SPECIAL.bos, SPECIAL.sentinel_1]);
        assert_eq!(c.object_positions, vec![5]);
        let m = ClozeInput::from_probe(&p, Variant::Mono, &v, 2).unwrap();
        assert_eq!(m.decoder_start, vec![SPECIAL.bos, SPECIAL.sentinel_0]);
    }

    #[test]
    fn steps_and_teacher_forcing_agree_on_positions() {
        let v = vocab();
        for arch in Arch::ALL {
            let p = ProbeBuilder::default()
                .build(&triple("[X] is the capital of [Y] ."), "en", "de", arch, 2)
                .unwrap()
                .unwrap();
            let c = ClozeInput::from_probe(&p, Variant::Mono, &v, 2).unwrap();
            let gold = [7, 8];
            let tf = c.teacher_forced(&gold).unwrap();
            let s1 = c.step(&gold[..1]);
            match arch {
                Arch::Encoder => assert_eq!(tf.source, c.tokens),
                Arch::EncoderDecoder => assert_eq!(tf.target, s1.target),
                Arch::Decoder => assert_eq!(tf.source, s1.source),
            }
            assert_eq!(tf.slots[1], s1.slots[0]);
            assert!(c.teacher_forced(&[]).is_err());
        }
    }
}
