// SPDX-License-Identifier: MIT OR Apache-2.0

//! Desk-scale fixtures trained on a parallel corpus.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cloze::ClozeInput;
use super::config::ModelConfig;
use super::model::Model;
use super::train::{perplexity, train, AdamOptions, TrainExample, TrainReport};
use super::vocab::{Tokenizer, Vocabulary};
use crate::corpus::{build_probe_set, subject_phrase, Corpus, ProbeBuilder, ProbeTriple, Variant};
use crate::error::{Result, XcError};

fn default_exposure() -> f64 {
    0.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureTraining {
    #[serde(flatten)]
    pub adam: AdamOptions,
    /// Fraction of code-mixed probes per embedded language added to the
    /// training set; languages not listed use `default_code_mixed_exposure`.
    #[serde(default)]
    pub code_mixed_exposure: BTreeMap<String, f64>,
    #[serde(default = "default_exposure")]
    pub default_code_mixed_exposure: f64,
    /// Share input embeddings of equal-length coreferential subjects.
    #[serde(default)]
    pub tie_coreferential_embeddings: bool,
    /// Fraction of triples held out from training.
    #[serde(default)]
    pub held_out_fraction: f64,
}

impl Default for FixtureTraining {
    fn default() -> Self {
        Self {
            adam: AdamOptions::default(),
            code_mixed_exposure: BTreeMap::new(),
            default_code_mixed_exposure: 0.0,
            tie_coreferential_embeddings: false,
            held_out_fraction: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub config: ModelConfig,
    #[serde(default)]
    pub train: FixtureTraining,
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub model: Model,
    pub report: TrainReport,
    pub train_examples: Vec<TrainExample>,
    pub held_out_examples: Vec<TrainExample>,
    /// Ids of held-out triples.
    pub held_out: BTreeSet<String>,
    /// Coreferential token pairs left untied because of conflicts.
    pub untied_pairs: usize,
}

impl Fixture {
    pub fn held_out_perplexity(&self) -> Result<f64> {
        perplexity(&self.model, &self.held_out_examples)
    }
}

/// Every word of every probe text, gold object and subject phrase, with
/// per-language lexicons.
pub fn fixture_vocabulary(corpus: &Corpus, embedded: &[String], builder: &ProbeBuilder) -> Result<Vocabulary> {
    let l1 = corpus.matrix_lang.as_str();
    let mut texts: Vec<String> = vec![
        crate::toymodel::vocab::SPECIAL_TOKENS.join(" "),
        builder.wrapper.prefix.clone(),
        builder.wrapper.suffix.clone(),
        builder.wrapper.blank.clone(),
    ];
    for t in &corpus.triples {
        texts.push(crate::corpus::probe::render(&t.template, "", ""));
        texts.extend(t.object_surface.values().cloned());
        texts.extend(t.subject_surface.values().cloned());
    }
    let mut vocab = Vocabulary::from_texts(texts.iter().map(String::as_str));
    for t in &corpus.triples {
        vocab.register_lexicon(l1, &crate::corpus::probe::render(&t.template, "", ""))?;
        if let Some(o) = t.object(l1) {
            vocab.register_lexicon(l1, o)?;
        }
        if let Some(s) = t.subject(l1) {
            vocab.register_lexicon(l1, s)?;
            vocab.register_lexicon(l1, &subject_phrase(&t.template, s))?;
        }
        for l2 in embedded {
            if let Some(s) = t.subject(l2) {
                vocab.register_lexicon(l2, s)?;
            }
        }
    }
    Ok(vocab)
}

/// Alias map tying each equal-length `l2` subject token to its `l1`
/// counterpart. Returns the map and the number of conflicting pairs dropped.
pub fn coreferential_aliases(corpus: &Corpus, embedded: &[String], vocab: &Vocabulary) -> Result<(BTreeMap<u32, u32>, usize)> {
    let l1 = corpus.matrix_lang.as_str();
    let matrix: BTreeSet<u32> = vocab.lexicon(l1).cloned().unwrap_or_default();
    let mut proposed: BTreeMap<u32, u32> = BTreeMap::new();
    let mut conflicted: BTreeSet<u32> = BTreeSet::new();
    for t in &corpus.triples {
        let Some(s1) = t.subject(l1) else { continue };
        let a = vocab.tokenize(s1)?;
        for l2 in embedded {
            let Some(s2) = t.subject(l2) else { continue };
            let b = vocab.tokenize(s2)?;
            if a.len() != b.len() {
                continue;
            }
            for (&x, &y) in a.iter().zip(&b) {
                if x == y || matrix.contains(&y) || vocab.is_special(y) {
                    continue;
                }
                match proposed.get(&y) {
                    Some(&prev) if prev != x => {
                        conflicted.insert(y);
                    }
                    _ => {
                        proposed.insert(y, x);
                    }
                }
            }
        }
    }
    for y in &conflicted {
        proposed.remove(y);
    }
    Ok((proposed, conflicted.len()))
}

/// Teacher-forced example for one probe variant.
pub fn example_for(probe: &ProbeTriple, variant: Variant, vocab: &Vocabulary, max_object_tokens: usize) -> Result<TrainExample> {
    let gold = vocab.tokenize(&probe.gold_object)?;
    let n = gold.len().clamp(1, max_object_tokens);
    let cloze = ClozeInput::from_probe(probe, variant, vocab, n)?;
    let gold = &gold[..n.min(gold.len())];
    let input = cloze.teacher_forced(gold)?;
    Ok(TrainExample {
        input,
        targets: gold.iter().enumerate().map(|(i, &t)| (i, t)).collect(),
    })
}

/// Build the vocabulary, initialise from `spec.config`, and train on the
/// corpus's mono probes plus the configured share of code-mixed probes.
pub fn train_fixture(
    spec: &FixtureSpec,
    corpus: &Corpus,
    embedded: &[String],
    builder: &ProbeBuilder,
    max_object_tokens: usize,
) -> Result<Fixture> {
    let t = &spec.train;
    if !(0.0..1.0).contains(&t.held_out_fraction) {
        return Err(XcError::Config("held_out_fraction must lie in [0, 1)".into()));
    }
    let vocab = fixture_vocabulary(corpus, embedded, builder)?;
    let mut model = Model::init(spec.config.clone(), vocab.clone())?;
    let mut untied_pairs = 0;
    if t.tie_coreferential_embeddings {
        let (aliases, conflicts) = coreferential_aliases(corpus, embedded, &vocab)?;
        untied_pairs = conflicts;
        if conflicts > 0 {
            log::warn!("{conflicts} coreferential tokens left untied (conflicting pairings)");
        }
        model.set_aliases(aliases)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.config.seed.wrapping_add(1));
    let held_out: BTreeSet<String> = corpus
        .triples
        .iter()
        .filter(|_| rng.random::<f64>() < t.held_out_fraction)
        .map(|tr| tr.triple_id.clone())
        .collect();

    let set = build_probe_set(corpus, embedded, spec.config.arch, builder, &vocab, max_object_tokens)?;
    let mut train_examples = Vec::new();
    let mut held_out_examples = Vec::new();
    let mut seen_mono = BTreeSet::new();
    for p in &set.probes {
        let dest = if held_out.contains(&p.triple_id) {
            &mut held_out_examples
        } else {
            &mut train_examples
        };
        if seen_mono.insert(p.triple_id.clone()) {
            dest.push(example_for(p, Variant::Mono, &vocab, max_object_tokens)?);
        }
        let exposure = t
            .code_mixed_exposure
            .get(&p.embedded_lang)
            .copied()
            .unwrap_or(t.default_code_mixed_exposure);
        if p.embedded_lang != p.matrix_lang && rng.random::<f64>() < exposure {
            dest.push(example_for(p, Variant::Cm, &vocab, max_object_tokens)?);
        }
    }
    // triples without any embedded-language subject still teach the fact
    for tr in &corpus.triples {
        if seen_mono.contains(&tr.triple_id) {
            continue;
        }
        let l1 = corpus.matrix_lang.as_str();
        let gold_len = vocab.tokenize(tr.object(l1).unwrap_or_default())?.len().clamp(1, max_object_tokens);
        if let Some(p) = builder.build(tr, l1, l1, spec.config.arch, gold_len)? {
            let ex = example_for(&p, Variant::Mono, &vocab, max_object_tokens)?;
            if held_out.contains(&tr.triple_id) {
                held_out_examples.push(ex);
            } else {
                train_examples.push(ex);
            }
        }
    }

    let report = train(&mut model, &train_examples, &t.adam)?;
    Ok(Fixture {
        model,
        report,
        train_examples,
        held_out_examples,
        held_out,
        untied_pairs,
    })
}
