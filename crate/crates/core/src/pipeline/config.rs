// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment configuration. Relative paths resolve against the directory
//! of the configuration file.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attribution::Scaling;
use crate::corpus::{DecoderWrapper, LanguageTable};
use crate::error::{Result, XcError};
use crate::repsim::CkaOptions;
use crate::toymodel::FixtureSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Analysis {
    Consistency,
    Evolution,
    Cka,
    Ig2,
    Intervention,
    Correlate,
}

impl Analysis {
    pub const ALL: [Analysis; 6] = [
        Analysis::Consistency,
        Analysis::Evolution,
        Analysis::Cka,
        Analysis::Ig2,
        Analysis::Intervention,
        Analysis::Correlate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Analysis::Consistency => "consistency",
            Analysis::Evolution => "evolution",
            Analysis::Cka => "cka",
            Analysis::Ig2 => "ig2",
            Analysis::Intervention => "intervention",
            Analysis::Correlate => "correlate",
        }
    }

    /// Whether the analysis needs a model to run rather than exported traces.
    pub fn needs_native_model(self) -> bool {
        self == Analysis::Intervention
    }
}

impl fmt::Display for Analysis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Analysis {
    type Err = XcError;

    fn from_str(s: &str) -> Result<Self> {
        Analysis::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| XcError::Argument(format!("unknown analysis `{s}`")))
    }
}

/// Where candidates, representations and gradients come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSource {
    /// Train a fixture model on the corpus.
    Fixture(FixtureSpec),
    Checkpoint(PathBuf),
    /// An exported trace directory.
    Traces(PathBuf),
}

fn default_k() -> usize {
    5
}

fn default_max_object_tokens() -> usize {
    3
}

fn default_m() -> usize {
    20
}

fn default_auto_layers() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: PathBuf,
    /// Language table replacing the built-in one.
    #[serde(default)]
    pub languages: Option<PathBuf>,
    pub matrix_lang: String,
    pub embedded_langs: Vec<String>,
    pub model: ModelSource,
    pub model_id: String,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_max_object_tokens")]
    pub max_object_tokens: usize,
    /// IG² approximation steps.
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default)]
    pub ig2_scaling: Scaling,
    #[serde(default)]
    pub analyses: Vec<Analysis>,
    /// Patch layers per embedded language; others are chosen by disparity.
    #[serde(default)]
    pub intervention_layers: BTreeMap<String, Vec<usize>>,
    /// Number of layers chosen by disparity when a language has no explicit set.
    #[serde(default = "default_auto_layers")]
    pub auto_layers: usize,
    #[serde(default)]
    pub cka: CkaOptions,
    pub output_dir: PathBuf,
    /// Overrides the fixture model's initialisation seed.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Cap on probes per language pair, taken in corpus order.
    #[serde(default)]
    pub max_probes: Option<usize>,
    /// Write the native run's traces under `output_dir/traces`.
    #[serde(default)]
    pub export_traces: bool,
    #[serde(default)]
    pub wrapper: DecoderWrapper,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| XcError::Config(e.to_string()))
    }

    /// Read a configuration file and resolve its relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| XcError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text).map_err(|e| XcError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus);
        fix(&mut self.output_dir);
        if let Some(l) = &mut self.languages {
            fix(l);
        }
        match &mut self.model {
            ModelSource::Checkpoint(p) | ModelSource::Traces(p) => fix(p),
            ModelSource::Fixture(_) => {}
        }
    }

    pub fn language_table(&self) -> Result<LanguageTable> {
        match &self.languages {
            Some(p) => LanguageTable::from_path(p),
            None => Ok(LanguageTable::default()),
        }
    }

    /// Checks that need no model: paths, counts, languages, analysis/source fit.
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(XcError::Config(m));
        if !self.corpus.exists() {
            return err(format!("corpus {} does not exist", self.corpus.display()));
        }
        if let Some(l) = &self.languages {
            if !l.exists() {
                return err(format!("language table {} does not exist", l.display()));
            }
        }
        if self.model_id.trim().is_empty() {
            return err("model_id is empty".into());
        }
        if self.k == 0 || self.m == 0 || self.max_object_tokens == 0 {
            return err("k, m and max_object_tokens must be at least 1".into());
        }
        if self.embedded_langs.is_empty() {
            return err("no embedded languages".into());
        }
        let distinct: BTreeSet<&String> = self.embedded_langs.iter().collect();
        if distinct.len() != self.embedded_langs.len() {
            return err("embedded languages repeat".into());
        }
        let table = self.language_table().map_err(|e| XcError::Config(e.to_string()))?;
        for lang in std::iter::once(&self.matrix_lang).chain(&self.embedded_langs) {
            if !table.contains(lang) {
                return err(format!("unknown language `{lang}`"));
            }
        }
        if self.max_probes == Some(0) {
            return err("max_probes must be at least 1".into());
        }
        for (lang, layers) in &self.intervention_layers {
            if !self.embedded_langs.contains(lang) {
                return err(format!("intervention layers for `{lang}`, which is not an embedded language"));
            }
            if layers.is_empty() {
                return err(format!("empty intervention layer set for `{lang}`"));
            }
        }
        if self.analyses.contains(&Analysis::Intervention) && self.auto_layers == 0 {
            return err("auto_layers must be at least 1".into());
        }
        match &self.model {
            ModelSource::Fixture(spec) => spec.config.validate().map_err(|e| XcError::Config(e.to_string()))?,
            ModelSource::Checkpoint(p) => {
                if !p.is_file() {
                    return err(format!("checkpoint {} does not exist", p.display()));
                }
            }
            ModelSource::Traces(dir) => {
                if !dir.is_dir() {
                    return err(format!("trace directory {} does not exist", dir.display()));
                }
                if let Some(a) = self.analyses.iter().find(|a| a.needs_native_model()) {
                    return err(format!("{a} needs a model; trace directories cannot be patched"));
                }
                let wants_gradients = self
                    .analyses
                    .iter()
                    .any(|a| matches!(a, Analysis::Ig2 | Analysis::Correlate));
                if wants_gradients && !super::interchange::has_gradients(dir)? {
                    return err(format!("{} has no gradient records for IG²", dir.display()));
                }
            }
        }
        if self.export_traces && matches!(self.model, ModelSource::Traces(_)) {
            return err("export_traces needs a model source".into());
        }
        Ok(())
    }

    /// The analyses in canonical order, without repeats.
    pub fn analysis_set(&self) -> BTreeSet<Analysis> {
        self.analyses.iter().copied().collect()
    }
}
