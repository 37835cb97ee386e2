// SPDX-License-Identifier: MIT OR Apache-2.0

//! Three-way cloze probe construction (mono / code-mixed / subject-masked).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::mlama::{validate_template, Corpus, KnowledgeTriple, OBJECT_PLACEHOLDER, SUBJECT_PLACEHOLDER};
use crate::arch::Arch;
use crate::error::{Result, XcError};
use crate::toymodel::vocab::{Tokenizer, MASK, SENTINEL_0, SENTINEL_1};

/// Instruction wrapper used for decoder-family prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderWrapper {
    pub prefix: String,
    pub suffix: String,
    /// Token written in place of an elided entity.
    pub blank: String,
}

impl Default for DecoderWrapper {
    fn default() -> Self {
        Self {
            prefix: "Finish the cloze question with words. Do not give additional comments. Question:"
                .to_string(),
            suffix: "Answer:".to_string(),
            blank: "_".to_string(),
        }
    }
}

/// Which of the three inputs of a probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Mono,
    Cm,
    Baseline,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Mono, Variant::Cm, Variant::Baseline];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Mono => "mono",
            Variant::Cm => "cm",
            Variant::Baseline => "baseline",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One statement rendered as mono, code-mixed and baseline cloze inputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeTriple {
    pub probe_id: String,
    pub triple_id: String,
    pub matrix_lang: String,
    pub embedded_lang: String,
    pub arch: Arch,
    pub input_mono: String,
    pub input_cm: String,
    pub input_baseline: String,
    pub gold_object: String,
    pub subject_mono: String,
    pub subject_cm: String,
    /// Matrix-language template the inputs were rendered from.
    pub template: String,
    /// Number of object mask tokens (encoder family).
    pub object_tokens: usize,
    /// Whether `[X]` precedes `[Y]` in the template.
    pub subject_first: bool,
}

impl ProbeTriple {
    pub fn input(&self, variant: Variant) -> &str {
        match variant {
            Variant::Mono => &self.input_mono,
            Variant::Cm => &self.input_cm,
            Variant::Baseline => &self.input_baseline,
        }
    }

    /// The shared relation context: template with both entities removed.
    pub fn context(&self) -> String {
        render(&self.template, "", "")
    }
}

/// Builds [`ProbeTriple`]s; holds the decoder wrapper configuration.
#[derive(Debug, Clone, Default)]
pub struct ProbeBuilder {
    pub wrapper: DecoderWrapper,
}

impl ProbeBuilder {
    pub fn new(wrapper: DecoderWrapper) -> Self {
        Self { wrapper }
    }

    /// Build the probe with `object_tokens` masks in the encoder object slot.
    ///
    /// Returns `Ok(None)` when the triple has no subject in `embedded_lang`.
    pub fn build(
        &self,
        triple: &KnowledgeTriple,
        matrix_lang: &str,
        embedded_lang: &str,
        arch: Arch,
        object_tokens: usize,
    ) -> Result<Option<ProbeTriple>> {
        validate_template(&triple.template)?;
        if object_tokens == 0 {
            return Err(XcError::Argument("object slot needs at least one token".into()));
        }
        let subject_mono = triple.subject(matrix_lang).ok_or_else(|| {
            XcError::Argument(format!(
                "triple {} has no `{matrix_lang}` subject",
                triple.triple_id
            ))
        })?;
        let gold = triple.object(matrix_lang).ok_or_else(|| {
            XcError::Argument(format!(
                "triple {} has no `{matrix_lang}` object",
                triple.triple_id
            ))
        })?;
        let Some(subject_cm) = triple.subject(embedded_lang) else {
            return Ok(None);
        };
        let subject_first = triple.template.find(SUBJECT_PLACEHOLDER)
            < triple.template.find(OBJECT_PLACEHOLDER);

        let (object_slot, baseline_subject, baseline_object) = match arch {
            Arch::Encoder => {
                let masks = vec![MASK; object_tokens].join(" ");
                (masks.clone(), MASK.to_string(), masks)
            }
            Arch::EncoderDecoder => {
                // sentinels are numbered in order of appearance
                let (s, o) = if subject_first {
                    (SENTINEL_0, SENTINEL_1)
                } else {
                    (SENTINEL_1, SENTINEL_0)
                };
                (SENTINEL_0.to_string(), s.to_string(), o.to_string())
            }
            Arch::Decoder => (
                self.wrapper.blank.clone(),
                self.wrapper.blank.clone(),
                self.wrapper.blank.clone(),
            ),
        };

        let mono = render(&triple.template, subject_mono, &object_slot);
        let cm = render(&triple.template, subject_cm, &object_slot);
        let baseline = render(&triple.template, &baseline_subject, &baseline_object);
        let wrap = |cloze: String| match arch {
            Arch::Decoder => format!("{} {} {}", self.wrapper.prefix, cloze, self.wrapper.suffix),
            _ => cloze,
        };

        Ok(Some(ProbeTriple {
            probe_id: probe_id(&triple.triple_id, matrix_lang, embedded_lang),
            triple_id: triple.triple_id.clone(),
            matrix_lang: matrix_lang.to_string(),
            embedded_lang: embedded_lang.to_string(),
            arch,
            input_mono: wrap(mono),
            input_cm: wrap(cm),
            input_baseline: wrap(baseline),
            gold_object: gold.to_string(),
            subject_mono: subject_mono.to_string(),
            subject_cm: subject_cm.to_string(),
            template: triple.template.clone(),
            object_tokens: if arch == Arch::Encoder { object_tokens } else { 1 },
            subject_first,
        }))
    }
}

/// Build a probe with a single-token object slot and the default wrapper.
pub fn build_probe(
    triple: &KnowledgeTriple,
    matrix_lang: &str,
    embedded_lang: &str,
    arch: Arch,
) -> Result<Option<ProbeTriple>> {
    ProbeBuilder::default().build(triple, matrix_lang, embedded_lang, arch, 1)
}

/// Probes for every `(triple, embedded language)` of a corpus.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProbeSet {
    pub probes: Vec<ProbeTriple>,
    /// Per embedded language, triples skipped for lack of a subject.
    pub skipped: BTreeMap<String, usize>,
}

impl ProbeSet {
    pub fn for_pair<'a>(&'a self, embedded_lang: &'a str) -> impl Iterator<Item = &'a ProbeTriple> + 'a {
        self.probes.iter().filter(move |p| p.embedded_lang == embedded_lang)
    }
}

/// Build probes with the object slot sized by the gold object's token
/// count, capped at `max_object_tokens`.
pub fn build_probe_set(
    corpus: &Corpus,
    embedded_langs: &[String],
    arch: Arch,
    builder: &ProbeBuilder,
    tokenizer: &dyn Tokenizer,
    max_object_tokens: usize,
) -> Result<ProbeSet> {
    if max_object_tokens == 0 {
        return Err(XcError::Argument("max_object_tokens must be at least 1".into()));
    }
    let l1 = corpus.matrix_lang.as_str();
    let mut set = ProbeSet::default();
    for l2 in embedded_langs {
        set.skipped.insert(l2.clone(), 0);
    }
    for triple in &corpus.triples {
        let gold = triple
            .object(l1)
            .ok_or_else(|| XcError::Invariant(format!("triple {} has no `{l1}` object", triple.triple_id)))?;
        let n = tokenizer.tokenize(gold)?.len().clamp(1, max_object_tokens);
        for l2 in embedded_langs {
            match builder.build(triple, l1, l2, arch, n)? {
                Some(p) => set.probes.push(p),
                None => *set.skipped.get_mut(l2).expect("initialised") += 1,
            }
        }
    }
    Ok(set)
}

/// Identifier of the probe of `triple_id` for one language pair.
pub fn probe_id(triple_id: &str, matrix_lang: &str, embedded_lang: &str) -> String {
    format!("{triple_id}/{matrix_lang}-{embedded_lang}")
}

/// Substitute the two placeholders without touching the rest of the template.
pub fn render(template: &str, subject: &str, object: &str) -> String {
    let mut out = String::with_capacity(template.len() + subject.len() + object.len());
    let mut rest = template;
    while !rest.is_empty() {
        let xs = rest.find(SUBJECT_PLACEHOLDER);
        let ys = rest.find(OBJECT_PLACEHOLDER);
        let (pos, text) = match (xs, ys) {
            (Some(x), Some(y)) if x < y => (x, subject),
            (Some(x), None) => (x, subject),
            (_, Some(y)) => (y, object),
            (None, None) => {
                out.push_str(rest);
                break;
            }
        };
        out.push_str(&rest[..pos]);
        out.push_str(text);
        rest = &rest[pos + 3..];
    }
    out
}

/// Relation phrase used for subject representations: the subject followed
/// by the template text with both placeholders removed.
pub fn subject_phrase(template: &str, subject: &str) -> String {
    let relation = render(template, "", "");
    let relation = relation.split_whitespace().collect::<Vec<_>>().join(" ");
    if relation.is_empty() {
        subject.to_string()
    } else {
        format!("{subject} {relation}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paris() -> KnowledgeTriple {
        KnowledgeTriple {
            triple_id: "P36-1".into(),
            relation_id: "P36".into(),
            template: "[X] is the capital of [Y]".into(),
            subject_surface: BTreeMap::from([
                ("en".into(), "Paris".into()),
                ("ar".into(), "باريس".into()),
            ]),
            object_surface: BTreeMap::from([("en".into(), "France".into())]),
        }
    }

    #[test]
    fn encoder_inputs_match_table() {
        let p = build_probe(&paris(), "en", "ar", Arch::Encoder).unwrap().unwrap();
        assert_eq!(p.input_mono, "Paris is the capital of <mask>");
        assert_eq!(p.input_cm, "باريس is the capital of <mask>");
        assert_eq!(p.input_baseline, "<mask> is the capital of <mask>");
        assert_eq!(p.gold_object, "France");
    }

    #[test]
    fn encoder_decoder_uses_sentinels() {
        let p = build_probe(&paris(), "en", "ar", Arch::EncoderDecoder).unwrap().unwrap();
        assert_eq!(p.input_mono, "Paris is the capital of <extra_id_0>");
        assert_eq!(p.input_cm, "باريس is the capital of <extra_id_0>");
        assert_eq!(p.input_baseline, "<extra_id_0> is the capital of <extra_id_1>");
    }

    #[test]
    fn decoder_wraps_instruction() {
        let p = build_probe(&paris(), "en", "ar", Arch::Decoder).unwrap().unwrap();
        assert_eq!(
            p.input_mono,
            "Finish the cloze question with words. Do not give additional comments. Question: Paris is the capital of _ Answer:"
        );
        assert!(p.input_baseline.contains("Question: _ is the capital of _ Answer:"));
    }

    #[test]
    fn object_first_templates_number_sentinels_by_position() {
        let mut t = paris();
        t.template = "The capital of [Y] is [X] .".into();
        let p = build_probe(&t, "en", "ar", Arch::EncoderDecoder).unwrap().unwrap();
        assert_eq!(p.input_baseline, "The capital of <extra_id_0> is <extra_id_1> .");
        assert!(!p.subject_first);
    }

    #[test]
    fn multi_mask_object() {
        let p = ProbeBuilder::default()
            .build(&paris(), "en", "ar", Arch::Encoder, 2)
            .unwrap()
            .unwrap();
        assert_eq!(p.input_mono, "Paris is the capital of <mask> <mask>");
        assert_eq!(p.input_baseline, "<mask> is the capital of <mask> <mask>");
    }

    #[test]
    fn same_language_is_byte_identical() {
        for arch in Arch::ALL {
            let p = build_probe(&paris(), "en", "en", arch).unwrap().unwrap();
            assert_eq!(p.input_cm.as_bytes(), p.input_mono.as_bytes());
        }
    }

    #[test]
    fn missing_embedded_subject_is_skipped() {
        assert!(build_probe(&paris(), "en", "ta", Arch::Encoder).unwrap().is_none());
    }

    #[test]
    fn missing_placeholder_is_invariant_error() {
        let mut t = paris();
        t.template = "[X] is the capital".into();
        assert!(matches!(
            build_probe(&t, "en", "ar", Arch::Encoder),
            Err(XcError::Invariant(_))
        ));
    }

    #[test]
    fn subject_phrase_appends_relation() {
        assert_eq!(
            subject_phrase("[X] is the capital of [Y] .", "Munich"),
            "Munich is the capital of ."
        );
    }
}
