//! Batch command-line workflow.
//!
//! One TOML config drives every subcommand; flags override its fields and
//! every path resolves against `--workdir`. Each output records the
//! resolved config, its SHA-256, the seed, the tool version and digests of
//! the inputs, which is what `verify` needs to re-run the producing command
//! and compare the results byte for byte.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::budget::{optimize_budgets_prepared, OptimizerSettings, SizeMetric};
use crate::conformal::ThresholdMode;
use crate::data::{
    generate_synthetic, load_dataset, split_dataset, Assumption, Dataset, LoadOptions, SplitSizes,
    Splits, SyntheticConfig,
};
use crate::eval::{evaluate, run_trials_with_seeds, BudgetChoice, TrialConfig, TrialSource};
use crate::pipeline::{
    calibrate_prepared, BudgetSplit, CalibrationConfig, CoverageMode, PipelineThresholds,
    PreparedDataset, ThresholdsDocument,
};
use crate::semantic::{
    BackendKind, SimilarityBackend, SimilarityMatrix, DEFAULT_CLUSTER_THRESHOLD,
};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;
pub const EXIT_PROVENANCE: i32 = 4;

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) | Error::File { .. } => EXIT_IO,
        Error::PacInfeasible { .. } => EXIT_INFEASIBLE,
        Error::ProvenanceMismatch(_) => EXIT_PROVENANCE,
        _ => EXIT_VALIDATION,
    }
}

const PROVENANCE_PREFIX: &str = "# ragset-provenance ";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub threshold: f64,
    /// Similarity matrix file for the precomputed backend.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matrix: Option<String>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Rouge1,
            threshold: DEFAULT_CLUSTER_THRESHOLD,
            matrix: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoConfig {
    /// Optimize the budget split during `evaluate --sweep` trials.
    pub enabled: bool,
    #[serde(alias = "T")]
    pub iterations: usize,
    pub initial_points: usize,
}

impl Default for BoConfig {
    fn default() -> Self {
        let s = OptimizerSettings::default();
        Self {
            enabled: false,
            iterations: s.iterations,
            initial_points: s.initial_points,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data: String,
    pub thresholds: String,
    pub trace: String,
    pub predictions: String,
    /// Directory for evaluation reports.
    pub reports: String,
    /// Held-out records for `predict` and `evaluate`, used instead of the
    /// test split of `data`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<String>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data: "data.jsonl".into(),
            thresholds: "thresholds.json".into(),
            trace: "trace.jsonl".into(),
            predictions: "predictions.jsonl".into(),
            reports: "reports".into(),
            test: None,
        }
    }
}

/// Everything a run depends on. Paths are relative to the workdir.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub alpha: f64,
    pub mode: ThresholdMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    pub metric: SizeMetric,
    pub backend: BackendConfig,
    /// Explicit stage budgets; exclusive with `bo.enabled`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget: Option<BudgetSplit>,
    pub bo: BoConfig,
    pub splits: SplitSizes,
    /// The first seed drives splitting and optimization; sweeps use all.
    pub seeds: Vec<u64>,
    pub abstain: bool,
    /// Target coverage levels for `evaluate --sweep`.
    pub levels: Vec<f64>,
    pub sweep: bool,
    pub synthetic: SyntheticConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            mode: ThresholdMode::Conformal,
            delta: None,
            metric: SizeMetric::SemanticCount,
            backend: BackendConfig::default(),
            budget: None,
            bo: BoConfig::default(),
            splits: SplitSizes::default(),
            seeds: vec![0],
            abstain: false,
            levels: vec![0.5, 0.6, 0.7, 0.8, 0.9],
            sweep: false,
            synthetic: SyntheticConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: e
                .span()
                .map(|s| text[..s.start].matches('\n').count() + 1)
                .unwrap_or(0),
            message: e.message().to_owned(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        self.coverage_mode()?;
        if let Some(b) = &self.budget {
            if self.bo.enabled {
                return bad("an explicit budget and bo.enabled are mutually exclusive".into());
            }
            BudgetSplit::new(b.alpha_ret, b.alpha_llm)?.check_total(self.alpha)?;
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if let Some(l) = self.levels.iter().find(|l| !(**l > 0.0 && **l < 1.0)) {
            return bad(format!("coverage levels must lie in (0, 1), got {l}"));
        }
        if !(self.backend.threshold > 0.0 && self.backend.threshold < 1.0) {
            return bad(format!(
                "backend threshold must lie in (0, 1), got {}",
                self.backend.threshold
            ));
        }
        if self.backend.kind == BackendKind::Precomputed && self.backend.matrix.is_none() {
            return bad("the precomputed backend needs backend.matrix".into());
        }
        Ok(())
    }

    pub fn coverage_mode(&self) -> Result<CoverageMode> {
        CoverageMode::from_parts(self.mode, self.delta)
    }

    pub fn seed(&self) -> u64 {
        self.seeds[0]
    }

    fn optimizer_settings(&self) -> OptimizerSettings {
        OptimizerSettings {
            iterations: self.bo.iterations,
            initial_points: self.bo.initial_points,
            ..OptimizerSettings::default()
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn sha256(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

fn parse_mode(s: &str) -> std::result::Result<ThresholdMode, String> {
    match s {
        "conformal" => Ok(ThresholdMode::Conformal),
        "pac" => Ok(ThresholdMode::Pac),
        _ => Err(format!("expected conformal or pac, got {s:?}")),
    }
}

fn parse_metric(s: &str) -> std::result::Result<SizeMetric, String> {
    match s {
        "semantic_count" => Ok(SizeMetric::SemanticCount),
        "unique_answers" => Ok(SizeMetric::UniqueAnswers),
        _ => Err(format!(
            "expected semantic_count or unique_answers, got {s:?}"
        )),
    }
}

/// Flags shared by all run commands; each one overrides a config field.
#[derive(Debug, Clone, Args)]
pub struct Overrides {
    /// Config file, relative to the workdir. A missing default file means
    /// built-in defaults.
    #[arg(long, default_value = "ragset.toml")]
    pub config: String,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<ThresholdMode>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long, value_parser = parse_metric)]
    pub metric: Option<SizeMetric>,
    /// Replaces `seeds` and the synthetic generator seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_records: Option<usize>,
    #[arg(long)]
    pub abstain: bool,
    /// Bayesian optimization iterations.
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub thresholds: Option<String>,
    /// Held-out record file for `predict` and `evaluate`.
    #[arg(long)]
    pub test: Option<String>,
    /// Primary output of the command (dataset, thresholds, predictions or
    /// report directory).
    #[arg(long)]
    pub out: Option<String>,
    /// `evaluate`: sweep the configured coverage levels over all seeds.
    #[arg(long)]
    pub sweep: bool,
}

#[derive(Debug, Parser)]
#[command(
    name = "ragset",
    version,
    about = "Coverage-guaranteed prediction sets for retrieval-augmented QA"
)]
pub struct Cli {
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,
    /// Worker threads for record- and seed-level parallelism.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic score log.
    Simulate(Overrides),
    /// Calibrate stage thresholds on the calibration split.
    Calibrate(Overrides),
    /// Optimize the budget split, then calibrate with it.
    Optimize(Overrides),
    /// Write aggregated prediction sets for the test split.
    Predict(Overrides),
    /// Coverage and size reports for the test split.
    Evaluate(Overrides),
    /// Re-run the command that produced FILE and compare outputs.
    Verify {
        /// Output file, relative to the workdir.
        file: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommandKind {
    Simulate,
    Calibrate,
    Optimize,
    Predict,
    Evaluate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// What an output file records about how it was made.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: CommandKind,
    pub seed: u64,
    pub config_sha256: String,
    pub config: RunConfig,
    /// Primary output path (dataset, thresholds, predictions or report
    /// directory) as given on the command line.
    pub output: String,
    pub inputs: Vec<InputDigest>,
}

/// Reads inputs from one root, writes outputs under another, and keeps
/// digests of everything read.
struct Workspace {
    primary: String,
    input_root: PathBuf,
    output_root: PathBuf,
    inputs: Vec<InputDigest>,
    outputs: Vec<String>,
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::File {
        path: path.to_owned(),
        source,
    }
}

impl Workspace {
    fn new(primary: &str, input_root: &Path, output_root: &Path) -> Self {
        Self {
            primary: primary.to_owned(),
            input_root: input_root.to_owned(),
            output_root: output_root.to_owned(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Resolves an input path and records its digest.
    fn input(&mut self, rel: &str) -> Result<PathBuf> {
        let path = self.input_root.join(rel);
        let bytes = fs::read(&path).map_err(file_err(&path))?;
        self.inputs.push(InputDigest {
            path: rel.to_owned(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(path)
    }

    fn output(&mut self, rel: &str) -> Result<PathBuf> {
        let path = self.output_root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(file_err(parent))?;
        }
        self.outputs.push(rel.to_owned());
        Ok(path)
    }

    fn create(&mut self, rel: &str) -> Result<BufWriter<fs::File>> {
        let path = self.output(rel)?;
        Ok(BufWriter::new(
            fs::File::create(&path).map_err(file_err(&path))?,
        ))
    }

    fn provenance(&self, command: CommandKind, config: &RunConfig) -> Provenance {
        Provenance {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command,
            seed: config.seed(),
            config_sha256: config.sha256(),
            config: config.clone(),
            output: self.primary.clone(),
            inputs: self.inputs.clone(),
        }
    }
}

fn provenance_value(p: &Provenance) -> Value {
    serde_json::to_value(p).expect("provenance serializes")
}

fn provenance_comment(p: &Provenance) -> String {
    format!(
        "{PROVENANCE_PREFIX}{}",
        serde_json::to_string(p).expect("provenance serializes")
    )
}

fn write_json_line<W: Write, T: Serialize>(w: &mut W, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

fn resolve_config(workdir: &Path, o: &Overrides) -> Result<RunConfig> {
    let path = workdir.join(&o.config);
    let mut cfg = match fs::read_to_string(&path) {
        Ok(text) => RunConfig::from_toml(&text, &path)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound && o.config == "ragset.toml" => {
            RunConfig::default()
        }
        Err(e) => return Err(file_err(&path)(e)),
    };
    if let Some(a) = o.alpha {
        cfg.alpha = a;
    }
    if let Some(m) = o.mode {
        cfg.mode = m;
    }
    if o.delta.is_some() {
        cfg.delta = o.delta;
    }
    if let Some(m) = o.metric {
        cfg.metric = m;
    }
    if let Some(s) = o.seed {
        cfg.seeds = vec![s];
        cfg.synthetic.seed = s;
    }
    if let Some(n) = o.n_records {
        cfg.synthetic.n_records = n;
    }
    if let Some(t) = o.iterations {
        cfg.bo.iterations = t;
    }
    cfg.abstain |= o.abstain;
    cfg.sweep |= o.sweep;
    if let Some(d) = &o.data {
        cfg.paths.data = d.clone();
    }
    if let Some(t) = &o.thresholds {
        cfg.paths.thresholds = t.clone();
    }
    if o.test.is_some() {
        cfg.paths.test = o.test.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn backend(cfg: &RunConfig, ws: &mut Workspace) -> Result<SimilarityBackend> {
    let b = match cfg.backend.kind {
        BackendKind::Rouge1 => SimilarityBackend::rouge1(),
        BackendKind::Precomputed => {
            let rel = cfg.backend.matrix.as_deref().expect("validated");
            let path = ws.input(rel)?;
            SimilarityBackend::precomputed(Arc::new(SimilarityMatrix::load(&path)?))
        }
    };
    b.with_threshold(cfg.backend.threshold)
}

fn load_data(cfg: &RunConfig, ws: &mut Workspace, log: &mut String) -> Result<Dataset> {
    load_file(cfg, &cfg.paths.data, ws, log)
}

fn load_file(cfg: &RunConfig, rel: &str, ws: &mut Workspace, log: &mut String) -> Result<Dataset> {
    let path = ws.input(rel)?;
    let report = load_dataset(
        &path,
        LoadOptions {
            keep_unanswerable: cfg.abstain,
        },
    )?;
    let ret = report.rejected_count(Assumption::RetrieverCorrectness);
    let gen = report.rejected_count(Assumption::GeneratorCorrectness);
    let _ = writeln!(
        log,
        "loaded {} records from {} (rejected: {ret} without gold passage, {gen} without a correct response)",
        report.dataset.len(),
        rel
    );
    Ok(report.dataset)
}

fn splits(cfg: &RunConfig, data: &Dataset) -> Result<Splits> {
    split_dataset(data, cfg.splits, cfg.seed())
}

fn test_records(cfg: &RunConfig, ws: &mut Workspace, log: &mut String) -> Result<Dataset> {
    match &cfg.paths.test {
        Some(rel) => load_file(cfg, rel, ws, log),
        None => {
            let data = load_data(cfg, ws, log)?;
            Ok(splits(cfg, &data)?.test)
        }
    }
}

fn load_thresholds(cfg: &RunConfig, ws: &mut Workspace) -> Result<PipelineThresholds> {
    let path = ws.input(&cfg.paths.thresholds)?;
    let text = fs::read_to_string(&path).map_err(file_err(&path))?;
    let doc: ThresholdsDocument = serde_json::from_str(&text)?;
    doc.thresholds()
}

fn write_thresholds(
    ws: &mut Workspace,
    rel: &str,
    t: &PipelineThresholds,
    prov: &Provenance,
) -> Result<()> {
    let doc = ThresholdsDocument::new(t, Some(provenance_value(prov)));
    let mut w = ws.create(rel)?;
    serde_json::to_writer_pretty(&mut w, &doc)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn describe(t: &PipelineThresholds) -> String {
    let mut s = format!(
        "alpha_ret={:.6} alpha_llm={:.6} tau_ret={} tau_llm={}",
        t.budget.alpha_ret, t.budget.alpha_llm, t.tau_ret.tau, t.tau_llm.tau
    );
    if let Some(ign) = &t.tau_ign {
        let _ = write!(s, " tau_ign={}", ign.tau);
    }
    s
}

fn cmd_simulate(cfg: &RunConfig, ws: &mut Workspace, out: &str) -> Result<String> {
    let data = generate_synthetic(&cfg.synthetic)?;
    let prov = ws.provenance(CommandKind::Simulate, cfg);
    let mut log = String::new();
    if cfg.synthetic.precomputed_ids {
        let rel = cfg.backend.matrix.as_deref().ok_or_else(|| {
            Error::InvalidArgument("precomputed_ids needs backend.matrix to name the output".into())
        })?;
        let dim = cfg.synthetic.k_passages * cfg.synthetic.m_samples;
        let path = ws.output(rel)?;
        SimilarityMatrix::random(dim, cfg.synthetic.seed).save(
            &path,
            Some(provenance_comment(&prov).trim_start_matches("# ")),
        )?;
        let _ = writeln!(log, "wrote {dim}x{dim} similarity matrix to {rel}");
    }
    let mut w = ws.create(out)?;
    data.write_with_provenance(&mut w, Some(&provenance_value(&prov)))?;
    let unanswerable = data
        .records()
        .iter()
        .filter(|r| !r.gold_has_correct_response())
        .count();
    let _ = write!(
        log,
        "wrote {} records (K={}, M={}) to {out}; {} answerable, {unanswerable} without a correct response at the gold passage",
        data.len(),
        data.k_passages(),
        data.m_samples(),
        data.len() - unanswerable
    );
    Ok(log)
}

fn cmd_calibrate(cfg: &RunConfig, ws: &mut Workspace, out: &str) -> Result<String> {
    let mut log = String::new();
    let backend = backend(cfg, ws)?;
    let data = load_data(cfg, ws, &mut log)?;
    let s = splits(cfg, &data)?;
    let budget = match cfg.budget {
        Some(b) => b,
        None => BudgetSplit::even(cfg.alpha)?,
    };
    let t = calibrate_prepared(
        &PreparedDataset::new(&s.calibration, &backend)?,
        &CalibrationConfig {
            budget,
            mode: cfg.coverage_mode()?,
            abstain: cfg.abstain,
        },
    )?;
    let prov = ws.provenance(CommandKind::Calibrate, cfg);
    write_thresholds(ws, out, &t, &prov)?;
    let _ = write!(
        log,
        "calibrated on {} records: {}; wrote {out}",
        s.calibration.len(),
        describe(&t)
    );
    Ok(log)
}

fn cmd_optimize(cfg: &RunConfig, ws: &mut Workspace, out: &str) -> Result<String> {
    if cfg.budget.is_some() {
        return Err(Error::InvalidArgument(
            "optimize searches the budget split; remove the explicit budget".into(),
        ));
    }
    let mut log = String::new();
    let backend = backend(cfg, ws)?;
    let data = load_data(cfg, ws, &mut log)?;
    let s = splits(cfg, &data)?;
    let mode = cfg.coverage_mode()?;
    let report = optimize_budgets_prepared(
        &PreparedDataset::new(&s.optimization, &backend)?,
        cfg.alpha,
        &cfg.optimizer_settings(),
        cfg.metric,
        mode,
        cfg.abstain,
        cfg.seed(),
    )?;
    let t = calibrate_prepared(
        &PreparedDataset::new(&s.calibration, &backend)?,
        &CalibrationConfig {
            budget: report.best_budget,
            mode,
            abstain: cfg.abstain,
        },
    )?;
    let prov = ws.provenance(CommandKind::Optimize, cfg);
    write_thresholds(ws, out, &t, &prov)?;
    let trace = cfg.paths.trace.clone();
    let mut w = ws.create(&trace)?;
    report.write_trace_with_provenance(&mut w, Some(&provenance_value(&prov)))?;
    w.flush()?;
    let _ = write!(
        log,
        "best lambda {:.4} (objective {:.4} on {} optimization records); {}; wrote {out} and {trace}",
        report.best_lambda,
        report.best_objective,
        s.optimization.len(),
        describe(&t)
    );
    Ok(log)
}

#[derive(Serialize)]
struct PredictedCluster<'a> {
    representative: &'a str,
    count: usize,
    confidence: f64,
    members: Vec<&'a str>,
}

#[derive(Serialize)]
struct Prediction<'a> {
    question_id: &'a str,
    question: &'a str,
    semantic_count: usize,
    unique_answers: usize,
    contains_idk: bool,
    source_passages: &'a [String],
    clusters: Vec<PredictedCluster<'a>>,
}

fn cmd_predict(cfg: &RunConfig, ws: &mut Workspace, out: &str) -> Result<String> {
    let mut log = String::new();
    let backend = backend(cfg, ws)?;
    let t = load_thresholds(cfg, ws)?;
    t.check_backend(&backend)?;
    let test = test_records(cfg, ws, &mut log)?;
    t.check_disjoint(&test)?;
    let prepared = PreparedDataset::new(&test, &backend)?;
    let sets = prepared
        .records
        .par_iter()
        .map(|pr| pr.aggregate(&t, &backend))
        .collect::<Result<Vec<_>>>()?;
    let prov = ws.provenance(CommandKind::Predict, cfg);
    let mut w = ws.create(out)?;
    write_json_line(
        &mut w,
        &serde_json::json!({ "provenance": provenance_value(&prov) }),
    )?;
    for (pr, set) in prepared.records.iter().zip(&sets) {
        let clusters = set
            .clusters
            .iter()
            .map(|c| PredictedCluster {
                representative: &c.representative.text,
                count: c.count,
                confidence: c.confidence,
                members: c.members.iter().map(|m| m.text.as_str()).collect(),
            })
            .collect();
        write_json_line(
            &mut w,
            &Prediction {
                question_id: &pr.record.question_id,
                question: &pr.record.question,
                semantic_count: set.semantic_count(),
                unique_answers: set.unique_answers(),
                contains_idk: set.contains_idk,
                source_passages: &set.source_passages,
                clusters,
            },
        )?;
    }
    w.flush()?;
    let _ = write!(log, "wrote {} prediction sets to {out}", sets.len());
    Ok(log)
}

fn cmd_evaluate(cfg: &RunConfig, ws: &mut Workspace, out: &str) -> Result<String> {
    if cfg.sweep {
        return cmd_sweep(cfg, ws, out);
    }
    let mut log = String::new();
    let backend = backend(cfg, ws)?;
    let t = load_thresholds(cfg, ws)?;
    t.check_backend(&backend)?;
    let test = test_records(cfg, ws, &mut log)?;
    let (coverage, sizes) = evaluate(&test, &t, &backend)?;
    let prov = ws.provenance(CommandKind::Evaluate, cfg);

    let mut w = ws.create(&format!("{out}/coverage.json"))?;
    serde_json::to_writer_pretty(
        &mut w,
        &serde_json::json!({
            "coverage": coverage,
            "avg_semantic_count": sizes.avg_semantic_count,
            "avg_unique_answers": sizes.avg_unique_answers,
            "provenance": provenance_value(&prov),
        }),
    )?;
    w.write_all(b"\n")?;
    w.flush()?;

    let mut w = ws.create(&format!("{out}/sizes.jsonl"))?;
    write_json_line(
        &mut w,
        &serde_json::json!({ "provenance": provenance_value(&prov) }),
    )?;
    for r in &sizes.per_record {
        write_json_line(&mut w, r)?;
    }
    w.flush()?;

    let mut table = String::new();
    let _ = writeln!(table, "{}", provenance_comment(&prov));
    let _ = writeln!(table, "n_test             {}", coverage.n_test);
    let _ = writeln!(table, "alpha              {}", coverage.alpha);
    for (name, v) in [
        ("retriever_coverage", coverage.retriever_coverage),
        ("llm_coverage", coverage.llm_coverage),
        ("e2e_relevant_only", coverage.e2e_relevant_only),
        ("e2e_aggregated", coverage.e2e_aggregated),
        ("avg_semantic_count", sizes.avg_semantic_count),
        ("avg_unique_answers", sizes.avg_unique_answers),
    ] {
        let _ = writeln!(table, "{name:<18} {v:.4}");
    }
    if let Some(a) = coverage.abstain_coverage {
        let _ = writeln!(table, "{:<18} {a:.4}", "abstain_coverage");
    }
    let mut w = ws.create(&format!("{out}/table.txt"))?;
    w.write_all(table.as_bytes())?;
    w.flush()?;

    let _ = write!(
        log,
        "e2e coverage {:.4} (target {:.4}), avg clusters {:.3}; wrote {out}/",
        coverage.e2e_aggregated,
        1.0 - coverage.alpha,
        sizes.avg_semantic_count
    );
    Ok(log)
}

fn cmd_sweep(cfg: &RunConfig, ws: &mut Workspace, out: &str) -> Result<String> {
    let mut log = String::new();
    let backend = backend(cfg, ws)?;
    let data = load_data(cfg, ws, &mut log)?;
    let mode = cfg.coverage_mode()?;
    let prov = ws.provenance(CommandKind::Evaluate, cfg);

    let mut csv = String::new();
    let _ = writeln!(csv, "{}", provenance_comment(&prov));
    let cols = [
        "retriever_coverage",
        "llm_coverage",
        "e2e_relevant_only",
        "e2e_aggregated",
        "avg_semantic_count",
        "avg_unique_answers",
    ];
    let _ = write!(csv, "level,alpha,n_ok,n_failed");
    for c in cols {
        let _ = write!(csv, ",{c}_mean,{c}_std");
    }
    csv.push('\n');
    let mut trials = Vec::new();
    let mut table = format!("{}\n", provenance_comment(&prov));

    for &level in &cfg.levels {
        // Rounded so that e.g. level 0.8 reports alpha 0.2, not 0.19999999999999996.
        let alpha = ((1.0 - level) * 1e12).round() / 1e12;
        let budget = if cfg.bo.enabled {
            BudgetChoice::Optimize {
                settings: cfg.optimizer_settings(),
                metric: cfg.metric,
            }
        } else if let Some(b) = cfg.budget {
            BudgetChoice::Fixed(BudgetSplit::from_fraction(alpha, b.alpha_ret / b.total())?)
        } else {
            BudgetChoice::Even
        };
        let tc = TrialConfig {
            source: TrialSource::Dataset(data.clone()),
            splits: cfg.splits,
            alpha,
            mode,
            budget,
            backend: backend.clone(),
            abstain: cfg.abstain,
            base_seed: cfg.seed(),
        };
        let run = run_trials_with_seeds(&tc, &cfg.seeds);
        let s = &run.summary;
        let _ = write!(csv, "{level},{alpha},{},{}", s.n_ok, s.n_failed);
        for m in [
            s.retriever_coverage,
            s.llm_coverage,
            s.e2e_relevant_only,
            s.e2e_aggregated,
            s.avg_semantic_count,
            s.avg_unique_answers,
        ] {
            let _ = write!(csv, ",{},{}", m.mean, m.std);
        }
        csv.push('\n');
        let _ = write!(table, "level {level}\n{}\n", run.table());
        for (seed, r) in &run.per_seed {
            trials.push(match r {
                Ok(o) => serde_json::json!({ "level": level, "seed": seed, "outcome": {
                    "budget": o.budget, "coverage": o.coverage,
                    "avg_semantic_count": o.sizes.avg_semantic_count,
                    "avg_unique_answers": o.sizes.avg_unique_answers,
                }}),
                Err(e) => {
                    serde_json::json!({ "level": level, "seed": seed, "error": e.to_string() })
                }
            });
        }
        let _ = writeln!(
            log,
            "level {level}: e2e coverage {:.4} ± {:.4}, avg clusters {:.3} ({} ok, {} failed)",
            s.e2e_aggregated.mean,
            s.e2e_aggregated.std,
            s.avg_semantic_count.mean,
            s.n_ok,
            s.n_failed
        );
    }

    let mut w = ws.create(&format!("{out}/plot_data.csv"))?;
    w.write_all(csv.as_bytes())?;
    w.flush()?;
    let mut w = ws.create(&format!("{out}/sweep_table.txt"))?;
    w.write_all(table.as_bytes())?;
    w.flush()?;
    let mut w = ws.create(&format!("{out}/trials.jsonl"))?;
    write_json_line(
        &mut w,
        &serde_json::json!({ "provenance": provenance_value(&prov) }),
    )?;
    for t in &trials {
        write_json_line(&mut w, t)?;
    }
    w.flush()?;
    let _ = write!(
        log,
        "wrote {out}/plot_data.csv, {out}/sweep_table.txt and {out}/trials.jsonl"
    );
    Ok(log)
}

fn primary_output(kind: CommandKind, cfg: &RunConfig, out: Option<&str>) -> String {
    if let Some(o) = out {
        return o.to_owned();
    }
    match kind {
        CommandKind::Simulate => cfg.paths.data.clone(),
        CommandKind::Calibrate | CommandKind::Optimize => cfg.paths.thresholds.clone(),
        CommandKind::Predict => cfg.paths.predictions.clone(),
        CommandKind::Evaluate => cfg.paths.reports.clone(),
    }
}

/// Runs one command; returns the log and the relative paths written.
fn execute(
    kind: CommandKind,
    cfg: &RunConfig,
    out: &str,
    input_root: &Path,
    output_root: &Path,
) -> Result<(String, Vec<String>)> {
    let mut ws = Workspace::new(out, input_root, output_root);
    let log = match kind {
        CommandKind::Simulate => cmd_simulate(cfg, &mut ws, out),
        CommandKind::Calibrate => cmd_calibrate(cfg, &mut ws, out),
        CommandKind::Optimize => cmd_optimize(cfg, &mut ws, out),
        CommandKind::Predict => cmd_predict(cfg, &mut ws, out),
        CommandKind::Evaluate => cmd_evaluate(cfg, &mut ws, out),
    }?;
    Ok((log, ws.outputs))
}

/// Pulls the provenance record out of any file this tool writes.
pub fn read_provenance(path: &Path) -> Result<Provenance> {
    let bytes = fs::read(path).map_err(file_err(path))?;
    let first_line = bytes.split(|&b| b == b'\n').next().unwrap_or_default();
    let first_line = String::from_utf8_lossy(first_line);
    let value: Value = if let Some(rest) = first_line.strip_prefix(PROVENANCE_PREFIX) {
        serde_json::from_str(rest)?
    } else {
        let doc: Value = serde_json::from_str(&first_line)
            .or_else(|_| serde_json::from_slice(&bytes))
            .map_err(|_| {
                Error::ProvenanceMismatch(format!("{}: no provenance found", path.display()))
            })?;
        doc.get("provenance").cloned().ok_or_else(|| {
            Error::ProvenanceMismatch(format!("{}: no provenance found", path.display()))
        })?
    };
    Ok(serde_json::from_value(value)?)
}

fn cmd_verify(workdir: &Path, file: &str) -> Result<String> {
    let prov = read_provenance(&workdir.join(file))?;
    if prov.config.sha256() != prov.config_sha256 {
        return Err(Error::ProvenanceMismatch(format!(
            "{file}: recorded config does not match its hash"
        )));
    }
    if prov.version != env!("CARGO_PKG_VERSION") {
        return Err(Error::ProvenanceMismatch(format!(
            "{file} was written by version {}, this is {}",
            prov.version,
            env!("CARGO_PKG_VERSION")
        )));
    }
    for input in &prov.inputs {
        let path = workdir.join(&input.path);
        let bytes = fs::read(&path).map_err(file_err(&path))?;
        if hex::encode(Sha256::digest(&bytes)) != input.sha256 {
            return Err(Error::ProvenanceMismatch(format!(
                "input {} changed since {file} was written",
                input.path
            )));
        }
    }
    let scratch = tempfile::tempdir()?;
    let (_, outputs) = execute(
        prov.command,
        &prov.config,
        &prov.output,
        workdir,
        scratch.path(),
    )?;
    let mut differing = Vec::new();
    for rel in &outputs {
        let original = fs::read(workdir.join(rel)).ok();
        let rerun = fs::read(scratch.path().join(rel))?;
        if original.as_deref() != Some(&rerun[..]) {
            differing.push(rel.clone());
        }
    }
    if !differing.is_empty() {
        return Err(Error::ProvenanceMismatch(format!(
            "re-running {:?} changed: {}",
            prov.command,
            differing.join(", ")
        )));
    }
    Ok(format!(
        "verified {} file(s): {}",
        outputs.len(),
        outputs.join(", ")
    ))
}

/// Runs a parsed command line and returns its log.
pub fn run(cli: &Cli) -> Result<String> {
    let (kind, o) = match &cli.command {
        Command::Simulate(o) => (CommandKind::Simulate, o),
        Command::Calibrate(o) => (CommandKind::Calibrate, o),
        Command::Optimize(o) => (CommandKind::Optimize, o),
        Command::Predict(o) => (CommandKind::Predict, o),
        Command::Evaluate(o) => (CommandKind::Evaluate, o),
        Command::Verify { file } => return cmd_verify(&cli.workdir, file),
    };
    let cfg = resolve_config(&cli.workdir, o)?;
    let out = primary_output(kind, &cfg, o.out.as_deref());
    execute(kind, &cfg, &out, &cli.workdir, &cli.workdir).map(|(log, _)| log)
}

/// Entry point for the binary: parses `args`, runs, prints, and returns
/// the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                EXIT_VALIDATION
            } else {
                EXIT_OK
            };
        }
    };
    if let Some(jobs) = cli.jobs {
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    match run(&cli) {
        Ok(log) => {
            println!("{log}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
