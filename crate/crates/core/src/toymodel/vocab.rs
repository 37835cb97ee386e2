// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic whitespace + greedy word-piece tokenizer.
//!
//! Words are looked up whole first; otherwise they are segmented by greedy
//! longest match, continuation pieces carrying a `##` prefix. The five
//! special tokens always occupy ids `0..5`.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, XcError};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<s>";
pub const MASK: &str = "<mask>";
pub const SENTINEL_0: &str = "<extra_id_0>";
pub const SENTINEL_1: &str = "<extra_id_1>";

pub const SPECIAL_TOKENS: [&str; 5] = [PAD, BOS, MASK, SENTINEL_0, SENTINEL_1];

const CONTINUATION: &str = "##";

/// Ids of the special tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub pad: u32,
    pub bos: u32,
    pub mask: u32,
    pub sentinel_0: u32,
    pub sentinel_1: u32,
}

pub const SPECIAL: SpecialIds = SpecialIds {
    pad: 0,
    bos: 1,
    mask: 2,
    sentinel_0: 3,
    sentinel_1: 4,
};

/// Anything that maps text to token ids.
pub trait Tokenizer {
    fn tokenize(&self, text: &str) -> Result<Vec<u32>>;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
    #[serde(default)]
    lexicons: BTreeMap<String, BTreeSet<u32>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    /// Per-language sub-lexicons (token ids seen in that language's text).
    lexicons: BTreeMap<String, BTreeSet<u32>>,
}

impl TryFrom<VocabRepr> for Vocabulary {
    type Error = XcError;

    fn try_from(repr: VocabRepr) -> Result<Self> {
        let mut vocab = Vocabulary::from_tokens(repr.tokens)?;
        for ids in repr.lexicons.values() {
            if ids.iter().any(|&id| id as usize >= vocab.len()) {
                return Err(XcError::Invariant("lexicon references unknown token id".into()));
            }
        }
        vocab.lexicons = repr.lexicons;
        Ok(vocab)
    }
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        VocabRepr {
            tokens: v.tokens,
            lexicons: v.lexicons,
        }
    }
}

impl Vocabulary {
    /// Specials followed by `words` (deduplicated, sorted).
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let set: BTreeSet<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_string())
            .filter(|w| !SPECIAL_TOKENS.contains(&w.as_str()) && !w.is_empty())
            .collect();
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(set)
            .collect();
        Self::from_tokens(tokens).expect("constructed token list is valid")
    }

    /// Every whitespace-separated word of `texts` becomes a token.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        Self::from_words(texts.into_iter().flat_map(str::split_whitespace))
    }

    /// Explicit token list; must begin with the five special tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len()
            || tokens.iter().zip(SPECIAL_TOKENS).any(|(t, s)| t != s)
        {
            return Err(XcError::Invariant(format!(
                "vocabulary must start with {SPECIAL_TOKENS:?}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(XcError::Invariant(format!("invalid token {t:?}")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(XcError::Invariant(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self {
            tokens,
            index,
            lexicons: BTreeMap::new(),
        })
    }

    /// Record which tokens `text` uses under language `lang`.
    pub fn register_lexicon(&mut self, lang: &str, text: &str) -> Result<()> {
        let ids = self.tokenize(text)?;
        self.lexicons.entry(lang.to_string()).or_default().extend(ids);
        Ok(())
    }

    pub fn lexicon(&self, lang: &str) -> Option<&BTreeSet<u32>> {
        self.lexicons.get(lang)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn special(&self) -> SpecialIds {
        SPECIAL
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < SPECIAL_TOKENS.len()
    }

    fn segment(&self, word: &str, out: &mut Vec<u32>) -> Result<()> {
        if let Some(id) = self.id(word) {
            out.push(id);
            return Ok(());
        }
        let mut pos = 0;
        let mut piece = String::new();
        while pos < word.len() {
            let mut found = None;
            let ends: Vec<usize> = word[pos..]
                .char_indices()
                .map(|(i, c)| pos + i + c.len_utf8())
                .collect();
            for &end in ends.iter().rev() {
                piece.clear();
                if pos > 0 {
                    piece.push_str(CONTINUATION);
                }
                piece.push_str(&word[pos..end]);
                if let Some(id) = self.id(&piece) {
                    found = Some((id, end));
                    break;
                }
            }
            let (id, end) = found.ok_or_else(|| XcError::Tokenize(word.to_string()))?;
            out.push(id);
            pos = end;
        }
        Ok(())
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            let t = self.token(id);
            match t.strip_prefix(CONTINUATION) {
                Some(rest) if !out.is_empty() && !rest.is_empty() => out.push_str(rest),
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(t);
                }
            }
        }
        out
    }

    /// SHA-256 over the newline-joined token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

impl Tokenizer for Vocabulary {
    fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            self.segment(word, &mut out)?;
        }
        Ok(out)
    }
}
