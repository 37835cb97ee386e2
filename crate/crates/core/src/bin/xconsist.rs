// SPDX-License-Identifier: MIT OR Apache-2.0

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use xconsist::corpus::{build_probe_set, load_mlama, ProbeBuilder};
use xconsist::error::{Result, XcError};
use xconsist::evolution::Metric;
use xconsist::pipeline::{exit_code, run_experiment, Analysis, ExperimentConfig, ModelSource, RunOutcome};
use xconsist::stats::report::POOLED_L2;
use xconsist::stats::{correlate_ig2_consistency, format_table_row, ConsistencyReport, Correlation, ReportLayer};
use xconsist::toymodel::{checkpoint, fixture_vocabulary, train_fixture, FixtureSpec, Tokenizer};

#[derive(Parser)]
#[command(name = "xconsist", version, about = "Cross-lingual knowledge-consistency probing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every analysis of an experiment configuration file.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        max_probes: Option<usize>,
    },
    /// Probe construction.
    #[command(subcommand)]
    Probes(ProbesCmd),
    /// Consistency metrics.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Representation and neuron analyses.
    #[command(subcommand)]
    Analyze(AnalyzeCmd),
    /// Activation patching.
    #[command(subcommand)]
    Intervene(InterveneCmd),
    /// Statistics over an existing report.
    #[command(subcommand)]
    Stats(StatsCmd),
    /// Report conversion.
    #[command(subcommand)]
    Report(ReportCmd),
    /// Fixture model training.
    #[command(subcommand)]
    Fixture(FixtureCmd),
}

#[derive(Subcommand)]
enum ProbesCmd {
    /// Write the probe triples of every language pair as JSON lines.
    Build {
        #[command(flatten)]
        exp: ExpArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Final-layer RankC and Top@1.
    Consistency(ExpArgs),
    /// Per-layer RankC and Top@1 through readout lenses.
    Evolution(ExpArgs),
}

#[derive(Subcommand)]
enum AnalyzeCmd {
    /// Layer-wise CKA of subject representations.
    Cka(ExpArgs),
    /// IG² neuron attribution and per-layer disparity.
    Ig2(ExpArgs),
}

#[derive(Subcommand)]
enum InterveneCmd {
    /// Patch FFN activations of code-mixed inputs with mono activations.
    Patch {
        #[command(flatten)]
        exp: ExpArgs,
        /// Layers to patch, applied to every embedded language.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
    },
}

#[derive(Subcommand)]
enum StatsCmd {
    /// Spearman correlation of IG² disparity with layer-wise consistency.
    Correlate {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        model_id: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
    /// Correlation table rows.
    Table,
}

#[derive(Subcommand)]
enum ReportCmd {
    /// Re-emit a report in another format.
    Emit {
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum FixtureCmd {
    /// Train the fixture model of a configuration and save a checkpoint.
    Train {
        #[command(flatten)]
        exp: ExpArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Experiment settings: a configuration file, flags, or both (flags win).
#[derive(Args, Clone)]
struct ExpArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    languages: Option<PathBuf>,
    #[arg(long)]
    matrix_lang: Option<String>,
    #[arg(long, value_delimiter = ',')]
    embedded_langs: Vec<String>,
    /// Fixture specification (JSON).
    #[arg(long, conflicts_with_all = ["checkpoint", "traces"])]
    fixture: Option<PathBuf>,
    #[arg(long, conflicts_with = "traces")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    traces: Option<PathBuf>,
    #[arg(long)]
    model_id: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    max_object_tokens: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_probes: Option<usize>,
    #[arg(long)]
    export_traces: bool,
}

fn missing(flag: &str) -> XcError {
    XcError::Config(format!("--{flag} is required without --config"))
}

impl ExpArgs {
    fn model_source(&self) -> Result<Option<ModelSource>> {
        if let Some(p) = &self.fixture {
            let text = std::fs::read_to_string(p).map_err(|e| XcError::Config(format!("{}: {e}", p.display())))?;
            let spec: FixtureSpec =
                serde_json::from_str(&text).map_err(|e| XcError::Config(format!("{}: {e}", p.display())))?;
            return Ok(Some(ModelSource::Fixture(spec)));
        }
        Ok(self
            .checkpoint
            .clone()
            .map(ModelSource::Checkpoint)
            .or_else(|| self.traces.clone().map(ModelSource::Traces)))
    }

    fn build(&self, analyses: &[Analysis]) -> Result<ExperimentConfig> {
        let source = self.model_source()?;
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => {
                let value = serde_json::json!({
                    "corpus": self.corpus.clone().ok_or_else(|| missing("corpus"))?,
                    "matrix_lang": self.matrix_lang.clone().ok_or_else(|| missing("matrix-lang"))?,
                    "embedded_langs": self.embedded_langs,
                    "model": source.clone().ok_or_else(|| missing("fixture, --checkpoint or --traces"))?,
                    "model_id": self.model_id.clone().ok_or_else(|| missing("model-id"))?,
                    "output_dir": self.output_dir.clone().unwrap_or_else(|| PathBuf::from("xconsist-out")),
                });
                ExperimentConfig::from_json(&value.to_string())?
            }
        };
        if let Some(v) = &self.corpus {
            cfg.corpus = v.clone();
        }
        if let Some(v) = &self.languages {
            cfg.languages = Some(v.clone());
        }
        if let Some(v) = &self.matrix_lang {
            cfg.matrix_lang = v.clone();
        }
        if !self.embedded_langs.is_empty() {
            cfg.embedded_langs = self.embedded_langs.clone();
        }
        if let Some(v) = source {
            cfg.model = v;
        }
        if let Some(v) = &self.model_id {
            cfg.model_id = v.clone();
        }
        if let Some(v) = self.k {
            cfg.k = v;
        }
        if let Some(v) = self.m {
            cfg.m = v;
        }
        if let Some(v) = self.max_object_tokens {
            cfg.max_object_tokens = v;
        }
        if let Some(v) = &self.output_dir {
            cfg.output_dir = v.clone();
        }
        if self.seed.is_some() {
            cfg.seed = self.seed;
        }
        if self.max_probes.is_some() {
            cfg.max_probes = self.max_probes;
        }
        cfg.export_traces |= self.export_traces;
        cfg.analyses = analyses.to_vec();
        Ok(cfg)
    }
}

fn print_outcome(outcome: &RunOutcome) {
    for (name, status) in &outcome.manifest.analyses {
        match &status.error {
            Some(e) => println!("{name}: failed: {e}"),
            None => println!("{name}: {} rows", status.rows),
        }
    }
    if let Some(c) = &outcome.manifest.correlation {
        println!("{}", c.table_row);
    }
}

fn run(cfg: &ExperimentConfig) -> i32 {
    let result = run_experiment(cfg);
    match &result {
        Ok(outcome) => print_outcome(outcome),
        Err(e) => eprintln!("error: {e}"),
    }
    exit_code(&result)
}

fn write_out(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| XcError::Io {
            path: p.to_path_buf(),
            source: e,
        }),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| XcError::Io {
                path: PathBuf::from("<stdout>"),
                source: e,
            }),
    }
}

fn probes_build(exp: &ExpArgs, out: Option<&Path>) -> Result<()> {
    let cfg = exp.build(&[])?;
    cfg.validate()?;
    let table = cfg.language_table()?;
    let corpus = load_mlama(&cfg.corpus, &cfg.matrix_lang, &table)?;
    let builder = ProbeBuilder::new(cfg.wrapper.clone());
    let set = match &cfg.model {
        ModelSource::Fixture(spec) => {
            let vocab = fixture_vocabulary(&corpus, &cfg.embedded_langs, &builder)?;
            build_probe_set(&corpus, &cfg.embedded_langs, spec.config.arch, &builder, &vocab, cfg.max_object_tokens)?
        }
        ModelSource::Checkpoint(p) => {
            let model = checkpoint::load(p)?;
            build_probe_set(
                &corpus,
                &cfg.embedded_langs,
                model.arch(),
                &builder,
                model.vocab() as &dyn Tokenizer,
                cfg.max_object_tokens,
            )?
        }
        ModelSource::Traces(_) => return Err(XcError::Config("probes need a tokenizer; use a fixture or checkpoint".into())),
    };
    let mut text = String::new();
    for p in &set.probes {
        text.push_str(&serde_json::to_string(p)?);
        text.push('\n');
    }
    for (lang, n) in &set.skipped {
        if *n > 0 {
            log::warn!("{n} triples have no `{lang}` subject");
        }
    }
    write_out(out, &text)
}

fn fixture_train(exp: &ExpArgs, out: &Path) -> Result<()> {
    let cfg = exp.build(&[])?;
    cfg.validate()?;
    let ModelSource::Fixture(spec) = &cfg.model else {
        return Err(XcError::Config("fixture train needs a fixture model source".into()));
    };
    let mut spec = spec.clone();
    if let Some(seed) = cfg.seed {
        spec.config.seed = seed;
    }
    let corpus = load_mlama(&cfg.corpus, &cfg.matrix_lang, &cfg.language_table()?)?;
    let builder = ProbeBuilder::new(cfg.wrapper.clone());
    let fx = train_fixture(&spec, &corpus, &cfg.embedded_langs, &builder, cfg.max_object_tokens)?;
    checkpoint::save(&fx.model, out)?;
    if let Some(loss) = fx.report.final_loss() {
        println!("final loss {loss:.6} after {} steps", fx.report.losses.len());
    }
    Ok(())
}

fn stats_correlate(report: &Path, model_id: &str) -> Result<()> {
    let report = ConsistencyReport::read_csv(report)?;
    let (profiles, curves) = report.correlation_inputs(model_id)?;
    let pooled = correlate_ig2_consistency(&profiles, &curves)?;
    let show = |label: &str, c: &Correlation| println!("{label}\trho={:.6}\tp={:.6}\tn={}", c.rho, c.p_value, c.n);
    show("rankc", &pooled.rankc);
    show("top1", &pooled.top1);
    println!("{}", format_table_row(model_id, &pooled.rankc, &pooled.top1));
    Ok(())
}

fn table_rows(report: &ConsistencyReport) -> String {
    let mut out = String::new();
    let models: std::collections::BTreeSet<&str> = report.rows().iter().map(|r| r.model_id.as_str()).collect();
    for model in models {
        let find = |rho: Metric, p: Metric| -> Option<Correlation> {
            let get = |m: Metric| {
                report
                    .rows()
                    .iter()
                    .find(|r| r.model_id == model && r.l2 == POOLED_L2 && r.layer == ReportLayer::All && r.metric == m)
                    .map(|r| r.value)
            };
            Some(Correlation {
                rho: get(rho)?,
                p_value: get(p)?,
                n: 0,
            })
        };
        if let (Some(a), Some(b)) = (find(Metric::RhoRankc, Metric::PRankc), find(Metric::RhoTop1, Metric::PTop1)) {
            out.push_str(&format_table_row(model, &a, &b));
            out.push('\n');
        }
    }
    out
}

fn report_emit(path: &Path, format: Format, out: Option<&Path>) -> Result<()> {
    let report = ConsistencyReport::read_csv(path)?;
    let text = match format {
        Format::Csv => report.to_csv_string()?,
        Format::Json => report.to_json()? + "\n",
        Format::Table => table_rows(&report),
    };
    write_out(out, &text)
}

fn code_of(result: Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&Err(e))
        }
    }
}

fn single(exp: &ExpArgs, analysis: Analysis) -> i32 {
    match exp.build(&[analysis]) {
        Ok(cfg) => run(&cfg),
        Err(e) => code_of(Err(e)),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run {
            config,
            seed,
            output_dir,
            max_probes,
        } => match ExperimentConfig::load(&config) {
            Ok(mut cfg) => {
                if seed.is_some() {
                    cfg.seed = seed;
                }
                if let Some(dir) = output_dir {
                    cfg.output_dir = dir;
                }
                if max_probes.is_some() {
                    cfg.max_probes = max_probes;
                }
                run(&cfg)
            }
            Err(e) => code_of(Err(e)),
        },
        Command::Probes(ProbesCmd::Build { exp, out }) => code_of(probes_build(&exp, out.as_deref())),
        Command::Eval(EvalCmd::Consistency(exp)) => single(&exp, Analysis::Consistency),
        Command::Eval(EvalCmd::Evolution(exp)) => single(&exp, Analysis::Evolution),
        Command::Analyze(AnalyzeCmd::Cka(exp)) => single(&exp, Analysis::Cka),
        Command::Analyze(AnalyzeCmd::Ig2(exp)) => single(&exp, Analysis::Ig2),
        Command::Intervene(InterveneCmd::Patch { exp, layers }) => match exp.build(&[Analysis::Intervention]) {
            Ok(mut cfg) => {
                if !layers.is_empty() {
                    cfg.intervention_layers = cfg.embedded_langs.iter().map(|l| (l.clone(), layers.clone())).collect();
                }
                run(&cfg)
            }
            Err(e) => code_of(Err(e)),
        },
        Command::Stats(StatsCmd::Correlate { report, model_id }) => code_of(stats_correlate(&report, &model_id)),
        Command::Report(ReportCmd::Emit { report, format, out }) => code_of(report_emit(&report, format, out.as_deref())),
        Command::Fixture(FixtureCmd::Train { exp, out }) => code_of(fixture_train(&exp, &out)),
    };
    ExitCode::from(u8::try_from(code).unwrap_or(3))
}
