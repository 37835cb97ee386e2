// SPDX-License-Identifier: MIT OR Apache-2.0

//! `run_experiment`: every configured analysis over every language pair.
//!
//! Output layout under `output_dir`: `report.csv`, `report.json`,
//! `manifest.json`, `plots/*.csv` with `x,y,series` columns, and `traces/`
//! when exporting. A failing analysis is recorded in the manifest and adds
//! no rows; the others still run.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{Analysis, ExperimentConfig, ModelSource};
use super::interchange::{read_traces, write_traces, TraceManifest, TraceSet, SCHEMA_VERSION};
use crate::attribution::{
    aggregate_ig2, ig2_disparity, ig2_records, select_layers_by_disparity, AttributionMap, DisparityProfile,
    GradientRecord, Ig2Options,
};
use crate::corpus::{build_probe_set, load_mlama, probe_id, Corpus, LanguageTable, ProbeBuilder, ProbeTriple, Variant};
use crate::error::{Result, XcError};
use crate::evolution::{probe_candidates, CandidateSet, EvolutionCurve, Metric, Pairing, Readouts};
use crate::intervention::{run_patched_eval, InterventionConfig, TAG_PATCH, TAG_REFERENCE};
use crate::metrics::LayerIndex;
use crate::repsim::{curve_from_records, subject_embeddings, EmbeddingRecord, SubjectPair};
use crate::stats::report::POOLED_L2;
use crate::stats::{correlate_ig2_consistency, format_table_row, ConsistencyReport, ReportLayer, ReportRow, NO_INTERVENTION};
use crate::toymodel::checkpoint;
use crate::toymodel::{train_fixture, ClozeInput, Model, Tokenizer};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisStatus {
    /// `ok` or `failed`.
    pub status: String,
    pub rows: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeCounts {
    /// Probes evaluated for the pair.
    pub used: usize,
    /// Triples without a subject in the embedded language.
    pub no_subject: usize,
    /// Probes dropped by `max_probes`.
    pub capped: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterventionSummary {
    pub layers: Vec<usize>,
    /// `config` or `disparity`.
    pub selection: String,
    pub supplied: usize,
    pub processed: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSummary {
    pub table_row: String,
    pub rho_rankc: f64,
    pub p_rankc: f64,
    pub rho_top1: f64,
    pub p_top1: f64,
    pub points: usize,
    /// Pairs whose own correlation is undefined.
    #[serde(default)]
    pub undefined_pairs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub untied_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_sha256: String,
    pub engine_version: String,
    pub interchange_schema: u32,
    pub model_id: String,
    pub model: Option<TraceManifest>,
    pub analyses: BTreeMap<String, AnalysisStatus>,
    pub probes: BTreeMap<String, ProbeCounts>,
    pub intervention: BTreeMap<String, InterventionSummary>,
    pub correlation: Option<CorrelationSummary>,
    pub training: Option<TrainingSummary>,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: ConsistencyReport,
    pub manifest: RunManifest,
}

impl RunOutcome {
    pub fn failed(&self) -> Vec<&str> {
        self.manifest
            .analyses
            .iter()
            .filter(|(_, s)| s.status != "ok")
            .map(|(n, _)| n.as_str())
            .collect()
    }
}

/// 0 on success, 2 for configuration problems, 3 when an analysis failed.
pub fn exit_code(result: &Result<RunOutcome>) -> i32 {
    match result {
        Ok(o) if o.failed().is_empty() => 0,
        Ok(_) => 3,
        Err(XcError::Config(_) | XcError::Parse { .. } | XcError::UnknownLanguage(_) | XcError::Version(_)) => 2,
        Err(_) => 3,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct PlotPoint {
    x: String,
    y: f64,
    series: String,
}

enum Source {
    Native {
        model: Box<Model>,
        probes: BTreeMap<String, Vec<ProbeTriple>>,
    },
    Traces {
        traces: Box<TraceSet>,
        ids: BTreeMap<String, Vec<String>>,
        candidates: Option<CandidateSet>,
        maps: Option<Vec<AttributionMap>>,
    },
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    table: LanguageTable,
    l1: String,
    source: Source,
    final_set: Option<CandidateSet>,
    layer_set: Option<CandidateSet>,
    embeddings: Option<Vec<EmbeddingRecord>>,
    gradients: Option<Vec<GradientRecord>>,
    profiles: Option<BTreeMap<String, DisparityProfile>>,
    plots: BTreeMap<&'static str, Vec<PlotPoint>>,
    intervention: BTreeMap<String, InterventionSummary>,
    correlation: Option<CorrelationSummary>,
}

/// Validate, load, run every configured analysis and write the outputs.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    match std::env::var("XCONSIST_THREADS") {
        Ok(v) => {
            let n: usize = v
                .parse()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| XcError::Config(format!("XCONSIST_THREADS must be a positive integer, got `{v}`")))?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| XcError::Config(format!("thread pool: {e}")))?;
            pool.install(|| run_inner(cfg))
        }
        Err(_) => run_inner(cfg),
    }
}

fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(cfg)?)))
}

fn cap<T>(mut v: Vec<T>, max: Option<usize>) -> (Vec<T>, usize) {
    let n = v.len();
    if let Some(m) = max {
        v.truncate(m);
    }
    let kept = v.len();
    (v, n - kept)
}

fn trace_ids(corpus: &Corpus, l2: &str) -> Vec<String> {
    corpus
        .triples
        .iter()
        .filter(|t| t.subject(l2).is_some())
        .map(|t| probe_id(&t.triple_id, &corpus.matrix_lang, l2))
        .collect()
}

fn run_inner(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let table = cfg.language_table()?;
    let corpus = load_mlama(&cfg.corpus, &cfg.matrix_lang, &table)?;
    if corpus.triples.is_empty() {
        return Err(XcError::Config(format!("corpus {} has no usable triples", cfg.corpus.display())));
    }
    let builder = ProbeBuilder::new(cfg.wrapper.clone());
    let mut probe_counts = BTreeMap::new();
    let mut training = None;

    let (source, model_manifest) = match &cfg.model {
        ModelSource::Traces(dir) => {
            let traces = read_traces(dir)?;
            if traces.manifest.model_id != cfg.model_id {
                log::warn!(
                    "trace model id `{}` differs from configured `{}`",
                    traces.manifest.model_id,
                    cfg.model_id
                );
            }
            let mut ids = BTreeMap::new();
            for l2 in &cfg.embedded_langs {
                let all = trace_ids(&corpus, l2);
                let no_subject = corpus.triples.len() - all.len();
                let (kept, capped) = cap(all, cfg.max_probes);
                probe_counts.insert(
                    l2.clone(),
                    ProbeCounts {
                        used: kept.len(),
                        no_subject,
                        capped,
                    },
                );
                ids.insert(l2.clone(), kept);
            }
            let manifest = traces.manifest.clone();
            (
                Source::Traces {
                    traces: Box::new(traces),
                    ids,
                    candidates: None,
                    maps: None,
                },
                manifest,
            )
        }
        src => {
            let model = match src {
                ModelSource::Fixture(spec) => {
                    let mut spec = spec.clone();
                    if let Some(seed) = cfg.seed {
                        spec.config.seed = seed;
                    }
                    let fx = train_fixture(&spec, &corpus, &cfg.embedded_langs, &builder, cfg.max_object_tokens)?;
                    training = Some(TrainingSummary {
                        steps: fx.report.losses.len(),
                        final_loss: fx.report.final_loss(),
                        untied_pairs: fx.untied_pairs,
                    });
                    fx.model
                }
                ModelSource::Checkpoint(p) => checkpoint::load(p)?,
                ModelSource::Traces(_) => unreachable!("handled above"),
            };
            for (lang, layers) in &cfg.intervention_layers {
                if let Some(l) = layers.iter().find(|&&l| l >= model.n_layers()) {
                    return Err(XcError::Config(format!(
                        "intervention layer {l} for `{lang}` out of range for {} layers",
                        model.n_layers()
                    )));
                }
            }
            let auto = cfg.embedded_langs.iter().any(|l| !cfg.intervention_layers.contains_key(l));
            if cfg.analyses.contains(&Analysis::Intervention) && auto && cfg.auto_layers > model.n_layers() {
                return Err(XcError::Config(format!(
                    "auto_layers {} exceeds {} layers",
                    cfg.auto_layers,
                    model.n_layers()
                )));
            }
            let set = build_probe_set(
                &corpus,
                &cfg.embedded_langs,
                model.arch(),
                &builder,
                model.vocab() as &dyn Tokenizer,
                cfg.max_object_tokens,
            )?;
            let mut probes = BTreeMap::new();
            for l2 in &cfg.embedded_langs {
                let all: Vec<ProbeTriple> = set.for_pair(l2).cloned().collect();
                let (kept, capped) = cap(all, cfg.max_probes);
                probe_counts.insert(
                    l2.clone(),
                    ProbeCounts {
                        used: kept.len(),
                        no_subject: set.skipped.get(l2).copied().unwrap_or(0),
                        capped,
                    },
                );
                probes.insert(l2.clone(), kept);
            }
            let manifest = TraceManifest::for_model(&model, &cfg.model_id);
            (
                Source::Native {
                    model: Box::new(model),
                    probes,
                },
                manifest,
            )
        }
    };

    let mut ctx = Ctx {
        cfg,
        table,
        l1: cfg.matrix_lang.clone(),
        source,
        final_set: None,
        layer_set: None,
        embeddings: None,
        gradients: None,
        profiles: None,
        plots: BTreeMap::new(),
        intervention: BTreeMap::new(),
        correlation: None,
    };

    let mut report = ConsistencyReport::new();
    let mut statuses = BTreeMap::new();
    for analysis in cfg.analysis_set() {
        log::info!("running {analysis}");
        let result = ctx.run(analysis).and_then(|rows| {
            let mut next = report.clone();
            next.extend(rows.iter().cloned())?;
            Ok((next, rows.len()))
        });
        let status = match result {
            Ok((next, n)) => {
                report = next;
                AnalysisStatus {
                    status: "ok".into(),
                    rows: n,
                    error: None,
                }
            }
            Err(e) => {
                log::error!("{analysis} failed: {e}");
                AnalysisStatus {
                    status: "failed".into(),
                    rows: 0,
                    error: Some(e.to_string()),
                }
            }
        };
        statuses.insert(analysis.to_string(), status);
    }

    let out = &cfg.output_dir;
    std::fs::create_dir_all(out.join("plots")).map_err(|e| XcError::io(out, e))?;
    let mut outputs = vec!["report.csv".to_string(), "report.json".to_string()];
    report.write_csv(&out.join("report.csv"))?;
    let json_path = out.join("report.json");
    std::fs::write(&json_path, report.to_json()? + "\n").map_err(|e| XcError::io(&json_path, e))?;
    for (name, points) in &ctx.plots {
        let rel = format!("plots/{name}.csv");
        write_plot(&out.join(&rel), points)?;
        outputs.push(rel);
    }
    if cfg.export_traces {
        let traces = ctx.export(&model_manifest)?;
        write_traces(&out.join("traces"), &traces)?;
        outputs.push("traces/".into());
    }
    outputs.push("manifest.json".into());

    let manifest = RunManifest {
        config_sha256: config_hash(cfg)?,
        engine_version: env!("CARGO_PKG_VERSION").to_string(),
        interchange_schema: SCHEMA_VERSION,
        model_id: cfg.model_id.clone(),
        model: Some(model_manifest),
        analyses: statuses,
        probes: probe_counts,
        intervention: std::mem::take(&mut ctx.intervention),
        correlation: ctx.correlation.take(),
        training,
        outputs,
    };
    let mpath = out.join("manifest.json");
    std::fs::write(&mpath, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| XcError::io(&mpath, e))?;
    Ok(RunOutcome { report, manifest })
}

fn write_plot(path: &Path, points: &[PlotPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| XcError::Invariant(format!("{}: {e}", path.display())))?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush().map_err(|e| XcError::io(path, e))
}

impl Ctx<'_> {
    fn pairs(&self) -> Vec<String> {
        self.cfg.embedded_langs.clone()
    }

    fn ids(&self, l2: &str) -> Vec<String> {
        match &self.source {
            Source::Native { probes, .. } => probes[l2].iter().map(|p| p.probe_id.clone()).collect(),
            Source::Traces { ids, .. } => ids[l2].clone(),
        }
    }

    fn row(&self, l2: &str, metric: Metric, layer: impl Into<ReportLayer>, value: f64, pairing: Pairing, tag: &str) -> Result<ReportRow> {
        ReportRow::new(&self.table, &self.cfg.model_id, &self.l1, l2, metric, layer, value, pairing, tag)
    }

    fn plot(&mut self, name: &'static str, x: impl ToString, y: f64, series: String) {
        self.plots.entry(name).or_default().push(PlotPoint {
            x: x.to_string(),
            y,
            series,
        });
    }

    fn run(&mut self, analysis: Analysis) -> Result<Vec<ReportRow>> {
        match analysis {
            Analysis::Consistency => self.consistency(),
            Analysis::Evolution => self.evolution(),
            Analysis::Cka => self.cka(),
            Analysis::Ig2 => self.ig2(),
            Analysis::Intervention => self.intervene(),
            Analysis::Correlate => self.correlate(),
        }
    }

    fn trace_candidates(&mut self) -> Result<&CandidateSet> {
        let Source::Traces { traces, candidates, .. } = &mut self.source else {
            unreachable!("trace source")
        };
        if candidates.is_none() {
            *candidates = Some(CandidateSet::from_records(traces.candidates.iter().cloned())?);
        }
        Ok(candidates.as_ref().expect("set above"))
    }

    fn native_candidates(&self, readouts: Readouts) -> Result<CandidateSet> {
        let Source::Native { model, probes } = &self.source else {
            unreachable!("native source")
        };
        let mut set = CandidateSet::new();
        for l2 in self.pairs() {
            let refs: Vec<&ProbeTriple> = probes[&l2].iter().collect();
            set.extend(probe_candidates(model, &refs, &Variant::ALL, readouts, self.cfg.k)?)?;
        }
        Ok(set)
    }

    fn ensure_final(&mut self) -> Result<()> {
        if self.final_set.is_none() {
            let set = match self.source {
                Source::Native { .. } => self.native_candidates(Readouts::Final)?,
                Source::Traces { .. } => self.trace_candidates()?.clone(),
            };
            self.final_set = Some(set);
        }
        Ok(())
    }

    fn ensure_layers(&mut self) -> Result<()> {
        if self.layer_set.is_none() {
            let set = match self.source {
                Source::Native { .. } => self.native_candidates(Readouts::Layers)?,
                Source::Traces { .. } => self.trace_candidates()?.clone(),
            };
            self.layer_set = Some(set);
        }
        Ok(())
    }

    fn consistency(&mut self) -> Result<Vec<ReportRow>> {
        self.ensure_final()?;
        let mut rows = Vec::new();
        for l2 in self.pairs() {
            let ids = self.ids(&l2);
            let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
            for metric in [Metric::Rankc, Metric::Top1] {
                for pairing in [Pairing::CmVsMono, Pairing::BaselineVsMono] {
                    let set = self.final_set.as_ref().expect("ensured");
                    let v = if refs.is_empty() {
                        return Err(XcError::Undefined(format!("{}-{l2}: no probes", self.l1)));
                    } else {
                        set.score(&refs, LayerIndex::Final, metric, pairing)?
                    };
                    rows.push(self.row(&l2, metric, ReportLayer::Final, v, pairing, NO_INTERVENTION)?);
                    self.plot("consistency", &l2, v, format!("{metric}/{pairing}"));
                }
            }
        }
        Ok(rows)
    }

    fn curves(&mut self, l2: &str) -> Result<Vec<EvolutionCurve>> {
        self.ensure_layers()?;
        let ids = self.ids(l2);
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let set = self.layer_set.as_ref().expect("ensured");
        let mut out = Vec::new();
        for metric in [Metric::Rankc, Metric::Top1] {
            for pairing in [Pairing::CmVsMono, Pairing::BaselineVsMono] {
                out.push(set.curve(&self.l1, l2, &refs, metric, pairing)?);
            }
        }
        Ok(out)
    }

    fn evolution(&mut self) -> Result<Vec<ReportRow>> {
        let mut rows = Vec::new();
        for l2 in self.pairs() {
            for c in self.curves(&l2)? {
                for (&layer, &v) in c.layers.iter().zip(&c.values) {
                    rows.push(self.row(&l2, c.metric, layer, v, c.pairing, NO_INTERVENTION)?);
                    self.plot("evolution", layer, v, format!("{l2}/{}/{}", c.metric, c.pairing));
                }
            }
        }
        Ok(rows)
    }

    fn ensure_embeddings(&mut self) -> Result<()> {
        if self.embeddings.is_some() {
            return Ok(());
        }
        let records = match &self.source {
            Source::Native { model, probes } => {
                let mut all = Vec::new();
                for l2 in self.pairs() {
                    let pairs: Vec<SubjectPair> = probes[&l2]
                        .iter()
                        .map(|p| SubjectPair {
                            probe_id: p.probe_id.clone(),
                            template: p.template.clone(),
                            subject_l1: p.subject_mono.clone(),
                            subject_l2: p.subject_cm.clone(),
                        })
                        .collect();
                    all.extend(subject_embeddings(model, &pairs, &self.l1, &l2, &self.cfg.cka)?);
                }
                all
            }
            Source::Traces { traces, .. } => traces.embeddings.clone(),
        };
        self.embeddings = Some(records);
        Ok(())
    }

    fn cka(&mut self) -> Result<Vec<ReportRow>> {
        self.ensure_embeddings()?;
        let mut rows = Vec::new();
        for l2 in self.pairs() {
            let ids: BTreeSet<String> = self.ids(&l2).into_iter().collect();
            let recs: Vec<EmbeddingRecord> = self
                .embeddings
                .as_ref()
                .expect("ensured")
                .iter()
                .filter(|r| ids.contains(&r.probe_id))
                .cloned()
                .collect();
            let curve = curve_from_records(&recs, &self.l1, &l2, self.cfg.cka.baseline)?;
            for (i, &layer) in curve.layers.iter().enumerate() {
                let v = curve.values[i];
                rows.push(self.row(&l2, Metric::Cka, layer, v, Pairing::L1VsL2, NO_INTERVENTION)?);
                self.plot("cka", layer, v, format!("{l2}/{}", Pairing::L1VsL2));
                if let Some(b) = &curve.baseline {
                    rows.push(self.row(&l2, Metric::Cka, layer, b[i], Pairing::L1VsMask, NO_INTERVENTION)?);
                    self.plot("cka", layer, b[i], format!("{l2}/{}", Pairing::L1VsMask));
                }
            }
        }
        Ok(rows)
    }

    fn ig2_options(&self) -> Ig2Options {
        Ig2Options {
            m: self.cfg.m,
            scaling: self.cfg.ig2_scaling,
            ..Default::default()
        }
    }

    fn ensure_profiles(&mut self) -> Result<()> {
        if self.profiles.is_some() {
            return Ok(());
        }
        let opts = self.ig2_options();
        let maps: Vec<AttributionMap> = match &mut self.source {
            Source::Native { model, probes } => {
                let mut inputs: Vec<(&ProbeTriple, Variant)> = Vec::new();
                for l2 in &self.cfg.embedded_langs {
                    for p in &probes[l2] {
                        inputs.push((p, Variant::Mono));
                        inputs.push((p, Variant::Cm));
                    }
                }
                let model: &Model = model;
                let per: Vec<Vec<GradientRecord>> = inputs
                    .par_iter()
                    .map(|&(p, v)| {
                        let vocab = model.vocab();
                        let cloze = ClozeInput::from_probe(p, v, vocab, p.object_tokens)?;
                        let gold = vocab.tokenize(&p.gold_object)?;
                        ig2_records(model, &p.probe_id, v, &cloze, &gold, &opts)
                    })
                    .collect::<Result<_>>()?;
                let records: Vec<GradientRecord> = per.into_iter().flatten().collect();
                let maps = aggregate_ig2(&records)?;
                self.gradients = Some(records);
                maps
            }
            Source::Traces { traces, maps, .. } => {
                if maps.is_none() {
                    *maps = Some(aggregate_ig2(&traces.gradients)?);
                }
                maps.clone().expect("set above")
            }
        };
        let mut profiles = BTreeMap::new();
        for l2 in self.pairs() {
            let ids: BTreeSet<String> = self.ids(&l2).into_iter().collect();
            let (mono, cm): (Vec<AttributionMap>, Vec<AttributionMap>) = maps
                .iter()
                .filter(|m| ids.contains(&m.probe_id))
                .cloned()
                .partition(|m| m.variant == Variant::Mono);
            profiles.insert(l2.clone(), ig2_disparity(&self.l1, &l2, &mono, &cm)?);
        }
        self.profiles = Some(profiles);
        Ok(())
    }

    fn ig2(&mut self) -> Result<Vec<ReportRow>> {
        self.ensure_profiles()?;
        let mut rows = Vec::new();
        for l2 in self.pairs() {
            let values = self.profiles.as_ref().expect("ensured")[&l2].values.clone();
            for (l, v) in values.into_iter().enumerate() {
                rows.push(self.row(&l2, Metric::Ig2Disparity, ReportLayer::Index(l), v, Pairing::MonoVsCm, NO_INTERVENTION)?);
                self.plot("ig2", l, v, l2.clone());
            }
        }
        Ok(rows)
    }

    fn intervene(&mut self) -> Result<Vec<ReportRow>> {
        let mut layer_sets = BTreeMap::new();
        for l2 in self.pairs() {
            let set = match self.cfg.intervention_layers.get(&l2) {
                Some(layers) => (layers.clone(), "config"),
                None => {
                    self.ensure_profiles()?;
                    let profile = &self.profiles.as_ref().expect("ensured")[&l2];
                    (select_layers_by_disparity(profile, self.cfg.auto_layers, false)?, "disparity")
                }
            };
            layer_sets.insert(l2, set);
        }
        let Source::Native { model, probes } = &self.source else {
            return Err(XcError::Config("intervention needs a model".into()));
        };
        let mut rows = Vec::new();
        let mut plots = Vec::new();
        let mut summaries = BTreeMap::new();
        for l2 in self.pairs() {
            let (layers, selection) = &layer_sets[&l2];
            let refs: Vec<&ProbeTriple> = probes[&l2].iter().collect();
            let eval = run_patched_eval(model, &refs, &InterventionConfig::new(layers.iter().copied(), self.cfg.k))?;
            summaries.insert(
                l2.clone(),
                InterventionSummary {
                    layers: layers.clone(),
                    selection: selection.to_string(),
                    supplied: eval.supplied(),
                    processed: eval.processed.len(),
                    skipped: eval.skipped.len(),
                },
            );
            for metric in [Metric::Rankc, Metric::Top1] {
                let (patched, reference) = eval.curves(metric)?;
                for (curve, tag) in [(patched, TAG_PATCH), (reference, TAG_REFERENCE)] {
                    for (&layer, &v) in curve.layers.iter().zip(&curve.values) {
                        rows.push(self.row(&l2, metric, layer, v, Pairing::CmVsMono, tag)?);
                        plots.push((layer, v, format!("{l2}/{metric}/{tag}")));
                    }
                }
            }
        }
        for (x, y, s) in plots {
            self.plot("intervention", x, y, s);
        }
        self.intervention = summaries;
        Ok(rows)
    }

    fn correlate(&mut self) -> Result<Vec<ReportRow>> {
        self.ensure_profiles()?;
        let mut curves = Vec::new();
        for l2 in self.pairs() {
            curves.extend(self.curves(&l2)?.into_iter().filter(|c| c.pairing == Pairing::CmVsMono));
        }
        let profiles: Vec<DisparityProfile> = self
            .pairs()
            .iter()
            .map(|l2| self.profiles.as_ref().expect("ensured")[l2].clone())
            .collect();
        let pooled = correlate_ig2_consistency(&profiles, &curves)?;
        let mut rows = Vec::new();
        let mut push = |ctx: &Self, l2: &str, c: &crate::stats::Ig2Correlation| -> Result<()> {
            for (metric, v) in [
                (Metric::RhoRankc, c.rankc.rho),
                (Metric::PRankc, c.rankc.p_value),
                (Metric::RhoTop1, c.top1.rho),
                (Metric::PTop1, c.top1.p_value),
            ] {
                rows.push(ctx.row(l2, metric, ReportLayer::All, v, Pairing::CmVsMono, NO_INTERVENTION)?);
            }
            Ok(())
        };
        push(self, POOLED_L2, &pooled)?;
        let mut undefined = BTreeMap::new();
        for p in &profiles {
            match correlate_ig2_consistency(std::slice::from_ref(p), &curves) {
                Ok(c) => push(self, &p.l2, &c)?,
                Err(e @ XcError::Undefined(_)) => {
                    log::warn!("{}-{}: {e}", p.l1, p.l2);
                    undefined.insert(p.l2.clone(), e.to_string());
                }
                Err(e) => return Err(e),
            }
        }
        for p in &profiles {
            for c in curves.iter().filter(|c| c.l2 == p.l2) {
                for (x, y) in p.values.iter().zip(&c.values) {
                    self.plot("correlation", x, *y, format!("{}/{}", p.l2, c.metric));
                }
            }
        }
        self.correlation = Some(CorrelationSummary {
            table_row: format_table_row(&self.cfg.model_id, &pooled.rankc, &pooled.top1),
            rho_rankc: pooled.rankc.rho,
            p_rankc: pooled.rankc.p_value,
            rho_top1: pooled.top1.rho,
            p_top1: pooled.top1.p_value,
            points: pooled.rankc.n,
            undefined_pairs: undefined,
        });
        Ok(rows)
    }

    /// Records computed by this run, in interchange form.
    fn export(&mut self, manifest: &TraceManifest) -> Result<TraceSet> {
        let mut traces = TraceSet::new(manifest.clone());
        let mut set = CandidateSet::new();
        if let Some(s) = &self.final_set {
            set.extend(s.clone())?;
        }
        if let Some(s) = &self.layer_set {
            set.extend(s.clone())?;
        }
        traces.candidates = set.to_records();
        traces.embeddings = self.embeddings.clone().unwrap_or_default();
        traces.gradients = self.gradients.clone().unwrap_or_default();
        Ok(traces)
    }
}
