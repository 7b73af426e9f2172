//! Command-line front end. Each subcommand reads a corpus, runs one
//! library pipeline and writes JSON/CSV reports into `--out`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::corpus::{load_corpus, write_corpus, CorpusFormat, EmbeddingCorpus, LabeledSet};
use crate::metrics::{EvalReport, EvalSettings, Measure};
use crate::probes::{run_attribute_probe, ProbeTarget, TrainConfig};
use crate::subspace::{
    apply_selection, oracle_sweep, pca_eval, raw_eval, select_subspace, FitSource, SelectOptions, SubspaceSelection,
};
use crate::synth::{generate, SynthConfig};

/// Exit status for bad arguments or inconsistent inputs.
pub const EXIT_VALIDATION: u8 = 2;
/// Exit status for failures while running a command.
pub const EXIT_RUNTIME: u8 = 1;

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid arguments: {m}"),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

fn invalid<T>(message: impl Into<String>) -> Result<T, CliError> {
    Err(CliError::Validation(message.into()))
}

#[derive(Debug, Parser)]
#[command(name = "reidpc", version, about = "Re-id embedding evaluation, PCA subspace excision and attribute probes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Evaluate raw embeddings, or a stored subspace selection.
    Eval(EvalArgs),
    /// Evaluate in the full-rank PC space of the gallery.
    PcaEval(PcaEvalArgs),
    /// Evaluate every prefix excision k = 0..rank (uses probe labels).
    OracleSweep(SweepArgs),
    /// Choose k from the gallery alone, then evaluate the probes with it.
    Select(SelectArgs),
    /// Train and test a linear attribute probe on an identity-disjoint split.
    Probe(ProbeArgs),
    /// Generate a synthetic corpus with planted structure.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FormatArg {
    Auto,
    Csv,
    Bin,
}

impl FormatArg {
    fn resolve(self, path: &Path) -> CorpusFormat {
        match self {
            FormatArg::Auto => CorpusFormat::from_path(path),
            FormatArg::Csv => CorpusFormat::Csv,
            FormatArg::Bin => CorpusFormat::Bin,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MeasureArg {
    Cosine,
    Euclidean,
}

impl From<MeasureArg> for Measure {
    fn from(m: MeasureArg) -> Self {
        match m {
            MeasureArg::Cosine => Measure::Cosine,
            MeasureArg::Euclidean => Measure::NegativeEuclidean,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FitOnArg {
    Images,
    Templates,
}

impl From<FitOnArg> for FitSource {
    fn from(f: FitOnArg) -> Self {
        match f {
            FitOnArg::Images => FitSource::GalleryImages,
            FitOnArg::Templates => FitSource::Templates,
        }
    }
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Embedding corpus (CSV, or EMB1 with a .meta.jsonl sidecar).
    #[arg(long)]
    pub corpus: PathBuf,
    /// Corpus format; `auto` picks CSV for a .csv extension and EMB1 otherwise.
    #[arg(long, value_enum, default_value = "auto")]
    pub format: FormatArg,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MetricArgs {
    /// Similarity measure [default: cosine].
    #[arg(long, value_enum)]
    pub measure: Option<MeasureArg>,
    /// Compare probes against per-identity mean templates.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    pub templated: Option<bool>,
    /// CMC ranks to report, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,20")]
    pub ks: Vec<usize>,
    /// FAR target for TAR@FAR; repeatable [default: 1e-3].
    #[arg(long)]
    pub far: Vec<f64>,
    /// Ignore same-identity gallery entries from the probe's own dataset.
    #[arg(long)]
    pub exclude_same_dataset: bool,
}

impl MetricArgs {
    fn settings(&self, templated_default: bool, measure_default: Measure) -> Result<EvalSettings, CliError> {
        if self.ks.is_empty() {
            return invalid("--ks needs at least one rank");
        }
        if self.ks.contains(&0) {
            return invalid("--ks ranks start at 1");
        }
        let far_targets = if self.far.is_empty() { vec![1e-3] } else { self.far.clone() };
        if let Some(f) = far_targets.iter().find(|f| !(**f > 0.0 && **f < 1.0)) {
            return invalid(format!("--far {f} is not in (0, 1)"));
        }
        Ok(EvalSettings {
            measure: self.measure.map(Measure::from).unwrap_or(measure_default),
            templated: self.templated.unwrap_or(templated_default),
            ks: self.ks.clone(),
            far_targets,
            exclude_same_dataset: self.exclude_same_dataset,
        })
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub metrics: MetricArgs,
    /// Apply a selection written by `select` instead of scoring raw embeddings.
    #[arg(long)]
    pub selection: Option<PathBuf>,
    /// Corpus whose gallery the selection's basis was fitted on.
    #[arg(long)]
    pub aux_gallery: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PcaEvalArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub metrics: MetricArgs,
    /// Gallery rows PCA is fitted on.
    #[arg(long, value_enum, default_value = "templates")]
    pub fit_on: FitOnArg,
    /// Fit PCA on this corpus's gallery instead (combined-gallery fitting).
    #[arg(long)]
    pub aux_gallery: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub metrics: MetricArgs,
    /// Fit the basis on this corpus's gallery templates instead.
    #[arg(long)]
    pub aux_gallery: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub metrics: MetricArgs,
    /// Leave each image out of its own identity's template while selecting.
    #[arg(long)]
    pub leave_one_out: bool,
    /// Fit the basis on this corpus's gallery templates instead.
    #[arg(long)]
    pub aux_gallery: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Attribute to predict; `dataset` predicts the dataset of origin.
    #[arg(long)]
    pub attribute: String,
    /// Fraction of labelled identities used for training.
    #[arg(long, default_value_t = 0.5)]
    pub fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.1)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 500)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub l2: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Generator configuration as JSON; defaults to the planted-nuisance benchmark.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Corpus format to write.
    #[arg(long, value_enum, default_value = "bin")]
    pub format: FormatArg,
    #[arg(long)]
    pub out: PathBuf,
}

/// Everything a command resolved from its flags, embedded in its reports.
#[derive(Debug, Default, Serialize)]
pub struct RunConfig {
    pub command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format: Option<CorpusFormat>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub settings: Option<EvalSettings>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit_on: Option<FitSource>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aux_gallery: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selection: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub leave_one_out: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attribute: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
    pub out: String,
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    config: &'a RunConfig,
    #[serde(flatten)]
    body: T,
}

fn show(path: &Path) -> String {
    path.display().to_string()
}

fn require_file(path: &Path, flag: &str) -> Result<(), CliError> {
    if !path.is_file() {
        return invalid(format!("{flag} {} does not exist", path.display()));
    }
    Ok(())
}

fn read_corpus(path: &Path, format: CorpusFormat) -> Result<EmbeddingCorpus, CliError> {
    Ok(load_corpus(path, format).with_context(|| format!("reading corpus {}", path.display()))?)
}

fn read_aux(path: Option<&PathBuf>, format: FormatArg) -> Result<Option<LabeledSet>, CliError> {
    match path {
        None => Ok(None),
        Some(p) => {
            require_file(p, "--aux-gallery")?;
            let aux = read_corpus(p, format.resolve(p))?;
            let gallery = aux.gallery();
            if gallery.is_empty() {
                return invalid(format!("--aux-gallery {} has no gallery records", p.display()));
            }
            Ok(Some(gallery))
        }
    }
}

fn prepare(input: &InputArgs, command: &str) -> Result<(EmbeddingCorpus, RunConfig), CliError> {
    require_file(&input.corpus, "--corpus")?;
    let format = input.format.resolve(&input.corpus);
    let corpus = read_corpus(&input.corpus, format)?;
    fs::create_dir_all(&input.out).with_context(|| format!("creating {}", input.out.display()))?;
    let config = RunConfig {
        command: command.into(),
        corpus: Some(show(&input.corpus)),
        format: Some(format),
        out: show(&input.out),
        ..RunConfig::default()
    };
    Ok((corpus, config))
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, config: &RunConfig, body: T) -> Result<PathBuf, CliError> {
    let text = serde_json::to_string_pretty(&Envelope { config, body }).context("serializing report")?;
    write_text(dir, name, &(text + "\n"))
}

#[derive(Serialize)]
struct ReportBody<'a> {
    report: &'a EvalReport,
}

fn write_report(out: &Path, config: &RunConfig, report: &EvalReport) -> Result<PathBuf, CliError> {
    write_text(out, "report.csv", &report.to_csv())?;
    write_json(out, "report.json", config, ReportBody { report })
}

fn summarize(report: &EvalReport) -> String {
    let tar = report
        .tar_at_far
        .first()
        .map(|t| format!(" tar@far={}={:.4}", t.far_target, t.tar))
        .unwrap_or_default();
    format!(
        "rank1={:.4} map={:.4} auc={:.4}{tar}",
        report.rank1().unwrap_or(f64::NAN),
        report.map,
        report.auc
    )
}

/// Runs one parsed command and returns its one-line summary.
pub fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Eval(a) => cmd_eval(a),
        Command::PcaEval(a) => cmd_pca_eval(a),
        Command::OracleSweep(a) => cmd_oracle_sweep(a),
        Command::Select(a) => cmd_select(a),
        Command::Probe(a) => cmd_probe(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

pub fn cmd_eval(a: EvalArgs) -> Result<String, CliError> {
    if a.aux_gallery.is_some() && a.selection.is_none() {
        return invalid("--aux-gallery only applies together with --selection");
    }
    let selection = match &a.selection {
        None => None,
        Some(p) => {
            require_file(p, "--selection")?;
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let sel: SubspaceSelection = serde_json::from_str::<SelectionFile>(&text)
                .map(|f| f.selection)
                .with_context(|| format!("parsing selection {}", p.display()))?;
            Some(sel)
        }
    };
    let measure_default = selection.as_ref().map(|s| s.measure).unwrap_or_default();
    let settings = a.metrics.settings(false, measure_default)?;
    if let Some(sel) = &selection {
        if sel.measure != settings.measure {
            return invalid(format!(
                "--measure {:?} disagrees with the selection's measure {:?}",
                settings.measure, sel.measure
            ));
        }
    }
    let aux = read_aux(a.aux_gallery.as_ref(), a.input.format)?;
    let (corpus, mut config) = prepare(&a.input, "eval")?;
    config.settings = Some(settings.clone());
    config.aux_gallery = a.aux_gallery.as_deref().map(show);
    config.selection = a.selection.as_deref().map(show);
    let report = match &selection {
        Some(sel) => apply_selection(sel, &corpus, &settings, aux.as_ref()).context("applying selection")?,
        None => raw_eval(&corpus, &settings).context("evaluating")?,
    };
    let path = write_report(&a.input.out, &config, &report)?;
    Ok(format!("eval: {} -> {}", summarize(&report), path.display()))
}

pub fn cmd_pca_eval(a: PcaEvalArgs) -> Result<String, CliError> {
    let settings = a.metrics.settings(false, Measure::default())?;
    let aux = read_aux(a.aux_gallery.as_ref(), a.input.format)?;
    let (corpus, mut config) = prepare(&a.input, "pca-eval")?;
    config.settings = Some(settings.clone());
    config.fit_on = Some(a.fit_on.into());
    config.aux_gallery = a.aux_gallery.as_deref().map(show);
    let report = pca_eval(&corpus, &settings, a.fit_on.into(), aux.as_ref()).context("evaluating in PC space")?;
    let path = write_report(&a.input.out, &config, &report)?;
    Ok(format!("pca-eval: {} -> {}", summarize(&report), path.display()))
}

pub fn cmd_oracle_sweep(a: SweepArgs) -> Result<String, CliError> {
    let settings = a.metrics.settings(true, Measure::default())?;
    let aux = read_aux(a.aux_gallery.as_ref(), a.input.format)?;
    let (corpus, mut config) = prepare(&a.input, "oracle-sweep")?;
    config.settings = Some(settings.clone());
    config.aux_gallery = a.aux_gallery.as_deref().map(show);
    let sweep = oracle_sweep(&corpus, &settings, aux.as_ref()).context("sweeping excisions")?;
    write_text(&a.input.out, "sweep.csv", &sweep.to_csv())?;
    #[derive(Serialize)]
    struct Body<'a> {
        sweep: &'a crate::subspace::SweepResult,
    }
    let path = write_json(&a.input.out, "sweep.json", &config, Body { sweep: &sweep })?;
    let (k, best) = sweep.best_rank1();
    let first = sweep.rank1_curve().first().copied().unwrap_or(f64::NAN);
    Ok(format!(
        "oracle-sweep: rank={} rank1@k=0={first:.4} best rank1={best:.4} at k={k} -> {}",
        sweep.rank,
        path.display()
    ))
}

#[derive(Serialize, serde::Deserialize)]
struct SelectionFile {
    selection: SubspaceSelection,
}

pub fn cmd_select(a: SelectArgs) -> Result<String, CliError> {
    let settings = a.metrics.settings(true, Measure::default())?;
    let aux = read_aux(a.aux_gallery.as_ref(), a.input.format)?;
    let (corpus, mut config) = prepare(&a.input, "select")?;
    config.settings = Some(settings.clone());
    config.aux_gallery = a.aux_gallery.as_deref().map(show);
    config.leave_one_out = Some(a.leave_one_out);
    let options = SelectOptions {
        leave_one_out: a.leave_one_out,
    };
    let selection = select_subspace(&corpus.gallery(), settings.measure, options, aux.as_ref())
        .context("selecting a subspace")?;
    #[derive(Serialize)]
    struct Body<'a> {
        selection: &'a SubspaceSelection,
    }
    write_json(&a.input.out, "selection.json", &config, Body { selection: &selection })?;
    let report = apply_selection(&selection, &corpus, &settings, aux.as_ref()).context("applying selection")?;
    let path = write_report(&a.input.out, &config, &report)?;
    if let Some(w) = &selection.warning {
        eprintln!("warning: {w}");
    }
    Ok(format!(
        "select: k*={} of rank {} (gallery rank1={:.4}); {} -> {}",
        selection.excised,
        selection.rank,
        selection.self_rank1.get(selection.excised).copied().unwrap_or(f64::NAN),
        summarize(&report),
        path.display()
    ))
}

pub fn cmd_probe(a: ProbeArgs) -> Result<String, CliError> {
    if !(a.fraction > 0.0 && a.fraction < 1.0) {
        return invalid(format!("--fraction {} is not in (0, 1)", a.fraction));
    }
    if !(a.learning_rate.is_finite() && a.learning_rate > 0.0) {
        return invalid("--learning-rate must be positive");
    }
    if !(a.l2.is_finite() && a.l2 >= 0.0) || !(a.tolerance.is_finite() && a.tolerance >= 0.0) {
        return invalid("--l2 and --tolerance must be non-negative");
    }
    let train = TrainConfig {
        learning_rate: a.learning_rate,
        epochs: a.epochs,
        l2: a.l2,
        tolerance: a.tolerance,
        ..TrainConfig::default()
    };
    let (corpus, mut config) = prepare(&a.input, "probe")?;
    config.attribute = Some(a.attribute.clone());
    config.fraction = Some(a.fraction);
    config.seed = Some(a.seed);
    config.train = Some(train.clone());
    let target = ProbeTarget::parse(&a.attribute);
    let report = run_attribute_probe(&corpus, &target, a.fraction, a.seed, &train).context("running probe")?;
    #[derive(Serialize)]
    struct Body<'a> {
        report: &'a crate::probes::ProbeReport,
    }
    let path = write_json(&a.input.out, "probe_report.json", &config, Body { report: &report })?;
    let auc = report.auc.map(|v| format!(" auc={v:.4}")).unwrap_or_default();
    Ok(format!(
        "probe {}: accuracy={:.4}{auc} train={} test={} -> {}",
        a.attribute,
        report.accuracy,
        report.train_size,
        report.test_size,
        path.display()
    ))
}

pub fn cmd_synth(a: SynthArgs) -> Result<String, CliError> {
    let mut synth = match &a.config {
        None => SynthConfig::benchmark(0),
        Some(p) => {
            require_file(p, "--config")?;
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("--config {}: {e}", p.display())))?
        }
    };
    if let Some(seed) = a.seed {
        synth.seed = seed;
    }
    if let Err(e) = synth.validate() {
        return invalid(e.to_string());
    }
    let format = match a.format {
        FormatArg::Csv => CorpusFormat::Csv,
        _ => CorpusFormat::Bin,
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let (corpus, truth) = generate(&synth).context("generating corpus")?;
    let name = match format {
        CorpusFormat::Csv => "corpus.csv",
        CorpusFormat::Bin => "corpus.emb",
    };
    let corpus_path = a.out.join(name);
    write_corpus(&corpus, &corpus_path, format).with_context(|| format!("writing {}", corpus_path.display()))?;
    let config = RunConfig {
        command: "synth".into(),
        format: Some(format),
        seed: Some(synth.seed),
        synth: Some(synth),
        out: show(&a.out),
        ..RunConfig::default()
    };
    #[derive(Serialize)]
    struct Body<'a> {
        ground_truth: &'a crate::synth::GroundTruth,
    }
    write_json(&a.out, "ground_truth.json", &config, Body { ground_truth: &truth })?;
    Ok(format!(
        "synth: {} records, dimension {} -> {}",
        corpus.len(),
        corpus.dimension(),
        corpus_path.display()
    ))
}
