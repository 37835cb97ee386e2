// SPDX-License-Identifier: MIT OR Apache-2.0

//! Three-factor language classification (geography, family, script).

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, XcError};

/// Shipped table covering the 53 mLAMA languages.
const DEFAULT_TABLE: &str = include_str!("../../data/languages.csv");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geography {
    Europe,
    NonEurope,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    IndoEuropean,
    NonIndoEuropean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Script {
    Latin,
    NonLatin,
}

/// One of the three grouping factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factor {
    Geography,
    Family,
    Script,
}

impl Factor {
    pub const ALL: [Factor; 3] = [Factor::Geography, Factor::Family, Factor::Script];

    /// Both category labels of this factor, in a fixed order.
    pub fn categories(self) -> [&'static str; 2] {
        match self {
            Factor::Geography => ["europe", "non_europe"],
            Factor::Family => ["indo_european", "non_indo_european"],
            Factor::Script => ["latin", "non_latin"],
        }
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Factor::Geography => "geography",
            Factor::Family => "family",
            Factor::Script => "script",
        })
    }
}

impl std::str::FromStr for Factor {
    type Err = XcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "geography" => Ok(Factor::Geography),
            "family" => Ok(Factor::Family),
            "script" => Ok(Factor::Script),
            other => Err(XcError::Argument(format!("unknown factor `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageMeta {
    pub code: String,
    pub geography: Geography,
    pub family: Family,
    pub script: Script,
}

impl LanguageMeta {
    /// Category label of this language under `factor`.
    pub fn category(&self, factor: Factor) -> &'static str {
        let [a, b] = factor.categories();
        let first = match factor {
            Factor::Geography => self.geography == Geography::Europe,
            Factor::Family => self.family == Family::IndoEuropean,
            Factor::Script => self.script == Script::Latin,
        };
        if first {
            a
        } else {
            b
        }
    }
}

/// Lookup table from ISO-639 code to [`LanguageMeta`].
#[derive(Debug, Clone)]
pub struct LanguageTable {
    entries: BTreeMap<String, LanguageMeta>,
}

impl Default for LanguageTable {
    fn default() -> Self {
        Self::parse(DEFAULT_TABLE, Path::new("<builtin languages.csv>"))
            .expect("shipped language table is valid")
    }
}

impl LanguageTable {
    /// Load a replacement table (CSV: code, geography, family, script).
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| XcError::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut entries = BTreeMap::new();
        for (i, row) in reader.deserialize::<LanguageMeta>().enumerate() {
            // header is line 1
            let line = i + 2;
            let meta = row.map_err(|e| XcError::parse(origin, line, e.to_string()))?;
            if meta.code.is_empty() {
                return Err(XcError::parse(origin, line, "empty language code"));
            }
            if entries.insert(meta.code.clone(), meta).is_some() {
                return Err(XcError::parse(origin, line, "duplicate language code"));
            }
        }
        Ok(Self { entries })
    }

    pub fn categorize(&self, code: &str) -> Result<&LanguageMeta> {
        self.entries
            .get(code)
            .ok_or_else(|| XcError::UnknownLanguage(code.to_string()))
    }

    pub fn contains(&self, code: &str) -> bool {
        self.entries.contains_key(code)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn codes(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

/// Classify `code` with the shipped table.
pub fn categorize_language(code: &str) -> Result<LanguageMeta> {
    LanguageTable::default().categorize(code).cloned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_table_covers_mlama() {
        let table = LanguageTable::default();
        assert_eq!(table.len(), 53);
    }

    #[test]
    fn known_language_examples() {
        let de = categorize_language("de").unwrap();
        assert_eq!(
            (de.geography, de.family, de.script),
            (Geography::Europe, Family::IndoEuropean, Script::Latin)
        );
        let ta = categorize_language("ta").unwrap();
        assert_eq!(
            (ta.geography, ta.family, ta.script),
            (Geography::NonEurope, Family::NonIndoEuropean, Script::NonLatin)
        );
        let en = categorize_language("en").unwrap();
        assert_eq!(en.category(Factor::Script), "latin");
        let ar = categorize_language("ar").unwrap();
        assert_eq!(ar.family, Family::NonIndoEuropean);
        assert_eq!(ar.script, Script::NonLatin);
    }

    #[test]
    fn unknown_code_is_named() {
        let err = categorize_language("xx").unwrap_err();
        assert!(err.to_string().contains("`xx`"));
    }

    #[test]
    fn rejects_duplicate_rows() {
        let text = "code,geography,family,script\nde,europe,indo_european,latin\nde,europe,indo_european,latin\n";
        let err = LanguageTable::parse(text, Path::new("t.csv")).unwrap_err();
        assert!(matches!(err, XcError::Parse { line: 3, .. }));
    }
}
