// SPDX-License-Identifier: MIT OR Apache-2.0

//! mLAMA-style parallel triple ingestion.
//!
//! Two layouts are accepted:
//!
//! - a directory with one sub-directory per language code, each holding
//!   `*.jsonl` files of rows `{"lineid", "sub_label", "obj_label", "template", "predicate_id"}`;
//! - a consolidated TSV with the header
//!   `predicate_id, lang, template, sub_label, obj_label, lineid`.
//!
//! Rows are joined across languages on `(predicate_id, lineid)`. The matrix
//! language supplies the template and the object.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::languages::LanguageTable;
use crate::error::{Result, XcError};

pub const SUBJECT_PLACEHOLDER: &str = "[X]";
pub const OBJECT_PLACEHOLDER: &str = "[Y]";

/// One fact with its surfaces in every available language.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeTriple {
    pub triple_id: String,
    pub relation_id: String,
    /// Matrix-language template with exactly one `[X]` and one `[Y]`.
    pub template: String,
    pub subject_surface: BTreeMap<String, String>,
    pub object_surface: BTreeMap<String, String>,
}

impl KnowledgeTriple {
    pub fn validate(&self) -> Result<()> {
        validate_template(&self.template)?;
        for (lang, s) in self.subject_surface.iter().chain(&self.object_surface) {
            if s.trim().is_empty() {
                return Err(XcError::Invariant(format!(
                    "empty surface for `{lang}` in triple {}",
                    self.triple_id
                )));
            }
        }
        Ok(())
    }

    pub fn subject(&self, lang: &str) -> Option<&str> {
        self.subject_surface.get(lang).map(String::as_str)
    }

    pub fn object(&self, lang: &str) -> Option<&str> {
        self.object_surface.get(lang).map(String::as_str)
    }
}

pub(crate) fn validate_template(template: &str) -> Result<()> {
    let x = template.matches(SUBJECT_PLACEHOLDER).count();
    let y = template.matches(OBJECT_PLACEHOLDER).count();
    if x != 1 || y != 1 {
        return Err(XcError::Invariant(format!(
            "template `{template}` must contain exactly one [X] and one [Y] (found {x} and {y})"
        )));
    }
    Ok(())
}

/// Result of [`load_mlama`].
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub matrix_lang: String,
    pub triples: Vec<KnowledgeTriple>,
    /// Languages present in the data but absent from the language table,
    /// with the number of rows ignored for each.
    pub skipped_languages: BTreeMap<String, usize>,
    /// Matrix-language rows lacking a subject or an object.
    pub incomplete_rows: usize,
}

impl Corpus {
    /// Every language code with at least one subject surface.
    pub fn languages(&self) -> BTreeSet<&str> {
        self.triples
            .iter()
            .flat_map(|t| t.subject_surface.keys().map(String::as_str))
            .collect()
    }
}

#[derive(Debug, Deserialize)]
struct JsonRow {
    lineid: serde_json::Value,
    predicate_id: String,
    #[serde(default)]
    sub_label: Option<String>,
    #[serde(default)]
    obj_label: Option<String>,
    #[serde(default)]
    template: Option<String>,
}

#[derive(Debug, Deserialize)]
struct TsvRow {
    predicate_id: String,
    lang: String,
    #[serde(default)]
    template: Option<String>,
    #[serde(default)]
    sub_label: Option<String>,
    #[serde(default)]
    obj_label: Option<String>,
    lineid: String,
}

#[derive(Debug)]
struct Row {
    lang: String,
    predicate_id: String,
    lineid: String,
    template: Option<String>,
    sub_label: Option<String>,
    obj_label: Option<String>,
    origin: PathBuf,
    line: usize,
}

/// Load parallel triples for `matrix_lang` from `path` (directory or TSV).
pub fn load_mlama(path: &Path, matrix_lang: &str, languages: &LanguageTable) -> Result<Corpus> {
    let rows = if path.is_dir() {
        read_dir_layout(path)?
    } else {
        read_tsv(path)?
    };
    assemble(rows, matrix_lang, languages)
}

fn read_dir_layout(root: &Path) -> Result<Vec<Row>> {
    let mut lang_dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| XcError::io(root, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    lang_dirs.sort();

    let mut rows = Vec::new();
    for dir in lang_dirs {
        let lang = dir
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| XcError::io(&dir, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "jsonl"))
            .collect();
        files.sort();
        for file in files {
            let text = std::fs::read_to_string(&file).map_err(|e| XcError::io(&file, e))?;
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let row: JsonRow = serde_json::from_str(line)
                    .map_err(|e| XcError::parse(&file, i + 1, e.to_string()))?;
                let lineid = match row.lineid {
                    serde_json::Value::String(s) => s,
                    serde_json::Value::Number(n) => n.to_string(),
                    other => {
                        return Err(XcError::parse(
                            &file,
                            i + 1,
                            format!("lineid must be a string or number, got {other}"),
                        ))
                    }
                };
                rows.push(Row {
                    lang: lang.clone(),
                    predicate_id: row.predicate_id,
                    lineid,
                    template: row.template,
                    sub_label: row.sub_label,
                    obj_label: row.obj_label,
                    origin: file.clone(),
                    line: i + 1,
                });
            }
        }
    }
    Ok(rows)
}

fn read_tsv(path: &Path) -> Result<Vec<Row>> {
    let text = std::fs::read_to_string(path).map_err(|e| XcError::io(path, e))?;
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (i, record) in reader.deserialize::<TsvRow>().enumerate() {
        let line = i + 2;
        let r = record.map_err(|e| XcError::parse(path, line, e.to_string()))?;
        rows.push(Row {
            lang: r.lang,
            predicate_id: r.predicate_id,
            lineid: r.lineid,
            template: r.template.filter(|s| !s.is_empty()),
            sub_label: r.sub_label,
            obj_label: r.obj_label,
            origin: path.to_path_buf(),
            line,
        });
    }
    Ok(rows)
}

fn non_empty(s: &Option<String>) -> Option<&str> {
    s.as_deref().map(str::trim).filter(|s| !s.is_empty())
}

fn assemble(rows: Vec<Row>, matrix_lang: &str, languages: &LanguageTable) -> Result<Corpus> {
    let mut corpus = Corpus {
        matrix_lang: matrix_lang.to_string(),
        ..Corpus::default()
    };
    if rows.is_empty() {
        return Ok(corpus);
    }
    if !rows.iter().any(|r| r.lang == matrix_lang) {
        return Err(XcError::Config(format!(
            "matrix language `{matrix_lang}` is not present in the corpus"
        )));
    }
    languages.categorize(matrix_lang)?;

    // (predicate, lineid) -> triple under construction, in first-seen matrix order
    let mut order: Vec<(String, String)> = Vec::new();
    let mut by_key: BTreeMap<(String, String), KnowledgeTriple> = BTreeMap::new();
    for row in rows.iter().filter(|r| r.lang == matrix_lang) {
        let key = (row.predicate_id.clone(), row.lineid.clone());
        let (Some(sub), Some(obj)) = (non_empty(&row.sub_label), non_empty(&row.obj_label)) else {
            corpus.incomplete_rows += 1;
            continue;
        };
        let Some(template) = non_empty(&row.template) else {
            return Err(XcError::parse(&row.origin, row.line, "matrix-language row without template"));
        };
        validate_template(template)
            .map_err(|e| XcError::parse(&row.origin, row.line, e.to_string()))?;
        if by_key.contains_key(&key) {
            return Err(XcError::parse(
                &row.origin,
                row.line,
                format!("duplicate row {}/{}", key.0, key.1),
            ));
        }
        let triple = KnowledgeTriple {
            triple_id: format!("{}-{}", key.0, key.1),
            relation_id: row.predicate_id.clone(),
            template: template.to_string(),
            subject_surface: BTreeMap::from([(matrix_lang.to_string(), sub.to_string())]),
            object_surface: BTreeMap::from([(matrix_lang.to_string(), obj.to_string())]),
        };
        order.push(key.clone());
        by_key.insert(key, triple);
    }

    for row in rows.iter().filter(|r| r.lang != matrix_lang) {
        if !languages.contains(&row.lang) {
            *corpus.skipped_languages.entry(row.lang.clone()).or_default() += 1;
            continue;
        }
        let key = (row.predicate_id.clone(), row.lineid.clone());
        let Some(triple) = by_key.get_mut(&key) else {
            continue;
        };
        if let Some(sub) = non_empty(&row.sub_label) {
            triple.subject_surface.insert(row.lang.clone(), sub.to_string());
        }
        if let Some(obj) = non_empty(&row.obj_label) {
            triple.object_surface.insert(row.lang.clone(), obj.to_string());
        }
    }

    corpus.triples = order
        .into_iter()
        .filter_map(|k| by_key.remove(&k))
        .collect();
    Ok(corpus)
}
