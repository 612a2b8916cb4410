//! Correctness judgments, coverage and set-size reports, and repeated
//! split/calibrate/evaluate trials.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::budget::{optimize_budgets_prepared, OptimizerSettings, SizeMetric};
use crate::conformal::ThresholdMode;
use crate::data::{generate_synthetic, split_dataset, Dataset, SplitSizes, SyntheticConfig};
use crate::pipeline::{
    calibrate_prepared, BudgetSplit, CalibrationConfig, CoverageMode, PipelineThresholds,
    PreparedDataset,
};
use crate::semantic::{rouge1_f, SimilarityBackend};
use crate::{Error, Result};

/// A response counts as correct when its Rouge-1 F-measure against some
/// gold answer exceeds this value.
pub const CORRECTNESS_THRESHOLD: f64 = 0.3;

pub fn is_correct(response_text: &str, gold_answers: &[String]) -> bool {
    gold_answers
        .iter()
        .any(|g| rouge1_f(response_text, g) > CORRECTNESS_THRESHOLD)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    /// Fraction of records whose gold passage is in the retriever set.
    pub retriever_coverage: f64,
    /// Fraction of records with a correct cluster in the generator set of
    /// the gold passage.
    pub llm_coverage: f64,
    /// `retriever_coverage * llm_coverage`.
    pub e2e_relevant_only: f64,
    /// Fraction of records whose aggregated set holds the truth: a correct
    /// cluster, or "I do not know" for unanswerable records when
    /// abstention is configured.
    pub e2e_aggregated: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abstain_coverage: Option<f64>,
    pub n_test: usize,
    pub alpha: f64,
    pub mode: ThresholdMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordSize {
    pub question_id: String,
    pub semantic_count: usize,
    pub unique_answers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub avg_semantic_count: f64,
    pub avg_unique_answers: f64,
    pub per_record: Vec<RecordSize>,
}

impl SizeReport {
    pub fn average(&self, metric: SizeMetric) -> f64 {
        match metric {
            SizeMetric::SemanticCount => self.avg_semantic_count,
            SizeMetric::UniqueAnswers => self.avg_unique_answers,
        }
    }
}

struct RecordOutcome {
    answerable: bool,
    retriever: bool,
    llm: bool,
    truth: bool,
    idk: bool,
    size: RecordSize,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn rate(flags: impl Iterator<Item = bool>) -> f64 {
    mean(flags.map(|b| if b { 1.0 } else { 0.0 }))
}

/// Coverage and size reports for records that were clustered in advance.
///
/// No disjointness check is made here: budget optimization deliberately
/// scores thresholds on the set they were calibrated on. Use [`evaluate`]
/// for held-out evaluation.
pub fn evaluate_records(
    test: &PreparedDataset<'_>,
    thresholds: &PipelineThresholds,
) -> Result<(CoverageReport, SizeReport)> {
    let backend = &test.backend;
    let outcomes = test
        .records
        .par_iter()
        .map(|pr| {
            let agg = pr.aggregate(thresholds, backend)?;
            let answerable = pr.answerable();
            let retriever = thresholds.tau_ret.admits(pr.retriever_score());
            // An infinite score means no correct cluster exists to cover.
            let llm = pr.llm_score().is_finite() && thresholds.tau_llm.admits(pr.llm_score());
            let truth = if answerable || thresholds.tau_ign.is_none() {
                agg.has_correct_cluster(&pr.record.gold_answers)
            } else {
                agg.contains_idk
            };
            Ok(RecordOutcome {
                answerable,
                retriever,
                llm,
                truth,
                idk: agg.contains_idk,
                size: RecordSize {
                    question_id: pr.record.question_id.clone(),
                    semantic_count: agg.semantic_count(),
                    unique_answers: agg.unique_answers(),
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let abstaining = thresholds.tau_ign.is_some();
    let staged = || outcomes.iter().filter(move |o| o.answerable || !abstaining);
    let retriever_coverage = rate(staged().map(|o| o.retriever));
    let llm_coverage = rate(staged().map(|o| o.llm));
    let unanswerable: Vec<&RecordOutcome> = outcomes.iter().filter(|o| !o.answerable).collect();
    let coverage = CoverageReport {
        retriever_coverage,
        llm_coverage,
        e2e_relevant_only: retriever_coverage * llm_coverage,
        e2e_aggregated: rate(outcomes.iter().map(|o| o.truth)),
        abstain_coverage: (abstaining && !unanswerable.is_empty())
            .then(|| rate(unanswerable.iter().map(|o| o.idk))),
        n_test: outcomes.len(),
        alpha: thresholds.alpha(),
        mode: thresholds.mode.threshold_mode(),
    };
    let per_record: Vec<RecordSize> = outcomes.into_iter().map(|o| o.size).collect();
    let sizes = SizeReport {
        avg_semantic_count: mean(per_record.iter().map(|r| r.semantic_count as f64)),
        avg_unique_answers: mean(per_record.iter().map(|r| r.unique_answers as f64)),
        per_record,
    };
    Ok((coverage, sizes))
}

/// Held-out evaluation: refuses test questions seen during calibration and
/// thresholds calibrated under a different similarity backend.
pub fn evaluate(
    test: &Dataset,
    thresholds: &PipelineThresholds,
    backend: &SimilarityBackend,
) -> Result<(CoverageReport, SizeReport)> {
    thresholds.check_disjoint(test)?;
    thresholds.check_backend(backend)?;
    evaluate_records(&PreparedDataset::new(test, backend)?, thresholds)
}

pub fn coverage(
    test: &Dataset,
    thresholds: &PipelineThresholds,
    backend: &SimilarityBackend,
) -> Result<CoverageReport> {
    evaluate(test, thresholds, backend).map(|(c, _)| c)
}

pub fn sizes(
    test: &Dataset,
    thresholds: &PipelineThresholds,
    backend: &SimilarityBackend,
) -> Result<SizeReport> {
    evaluate(test, thresholds, backend).map(|(_, s)| s)
}

/// Where each trial's records come from.
#[derive(Debug, Clone)]
pub enum TrialSource {
    /// Fresh synthetic data per seed (the config's own seed is replaced).
    Synthetic(SyntheticConfig),
    /// One fixed dataset, re-split per seed.
    Dataset(Dataset),
}

#[derive(Debug, Clone)]
pub enum BudgetChoice {
    Even,
    Fixed(BudgetSplit),
    /// Bayesian optimization on the optimization split, then recalibration
    /// on the calibration split.
    Optimize {
        settings: OptimizerSettings,
        metric: SizeMetric,
    },
}

#[derive(Debug, Clone)]
pub struct TrialConfig {
    pub source: TrialSource,
    pub splits: SplitSizes,
    pub alpha: f64,
    pub mode: CoverageMode,
    pub budget: BudgetChoice,
    pub backend: SimilarityBackend,
    pub abstain: bool,
    pub base_seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrialOutcome {
    pub seed: u64,
    pub budget: BudgetSplit,
    pub coverage: CoverageReport,
    pub sizes: SizeReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample mean and (n-1) standard deviation; zero spread for one value.
    pub fn of(xs: &[f64]) -> Self {
        let m = mean(xs.iter().copied());
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean: m, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub n_ok: usize,
    pub n_failed: usize,
    pub alpha: f64,
    pub retriever_coverage: MeanStd,
    pub llm_coverage: MeanStd,
    pub e2e_relevant_only: MeanStd,
    pub e2e_aggregated: MeanStd,
    pub avg_semantic_count: MeanStd,
    pub avg_unique_answers: MeanStd,
}

#[derive(Debug)]
pub struct TrialRun {
    pub per_seed: Vec<(u64, Result<TrialOutcome>)>,
    pub summary: TrialSummary,
}

impl TrialRun {
    pub fn outcomes(&self) -> impl Iterator<Item = &TrialOutcome> {
        self.per_seed.iter().filter_map(|(_, r)| r.as_ref().ok())
    }

    /// Fixed-width table: one row per seed, then the mean ± std row.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>9} {:>9}",
            "seed", "a_ret", "ret", "llm", "rel", "agg", "clusters", "answers"
        );
        for (seed, r) in &self.per_seed {
            match r {
                Ok(o) => {
                    let _ = writeln!(
                        out,
                        "{:>8} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>9.3} {:>9.3}",
                        seed,
                        o.budget.alpha_ret,
                        o.coverage.retriever_coverage,
                        o.coverage.llm_coverage,
                        o.coverage.e2e_relevant_only,
                        o.coverage.e2e_aggregated,
                        o.sizes.avg_semantic_count,
                        o.sizes.avg_unique_answers
                    );
                }
                Err(e) => {
                    let _ = writeln!(out, "{seed:>8} failed: {e}");
                }
            }
        }
        let s = &self.summary;
        let f = |m: MeanStd| format!("{:.3}±{:.3}", m.mean, m.std);
        let _ = writeln!(
            out,
            "{:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>9} {:>9}",
            "mean",
            "",
            f(s.retriever_coverage),
            f(s.llm_coverage),
            f(s.e2e_relevant_only),
            f(s.e2e_aggregated),
            f(s.avg_semantic_count),
            f(s.avg_unique_answers)
        );
        out
    }
}

/// One split/calibrate/evaluate round on already-split data.
pub fn run_trial_on_splits(
    config: &TrialConfig,
    seed: u64,
    cal: &Dataset,
    opt: &Dataset,
    test: &Dataset,
) -> Result<TrialOutcome> {
    let backend = &config.backend;
    let cal_p = PreparedDataset::new(cal, backend)?;
    let budget = match &config.budget {
        BudgetChoice::Even => BudgetSplit::even(config.alpha)?,
        BudgetChoice::Fixed(b) => {
            b.check_total(config.alpha)?;
            *b
        }
        BudgetChoice::Optimize { settings, metric } => {
            let opt_p = PreparedDataset::new(opt, backend)?;
            optimize_budgets_prepared(
                &opt_p,
                config.alpha,
                settings,
                *metric,
                config.mode,
                config.abstain,
                seed,
            )?
            .best_budget
        }
    };
    let thresholds = calibrate_prepared(
        &cal_p,
        &CalibrationConfig {
            budget,
            mode: config.mode,
            abstain: config.abstain,
        },
    )?;
    let (coverage, sizes) = evaluate(test, &thresholds, backend)?;
    Ok(TrialOutcome {
        seed,
        budget,
        coverage,
        sizes,
    })
}

fn run_one(config: &TrialConfig, seed: u64) -> Result<TrialOutcome> {
    let splits = match &config.source {
        TrialSource::Dataset(d) => split_dataset(d, config.splits, seed)?,
        TrialSource::Synthetic(cfg) => {
            let total = config.splits.total();
            if cfg.n_records < total {
                return Err(Error::InvalidArgument(format!(
                    "synthetic n_records {} below split total {total}",
                    cfg.n_records
                )));
            }
            let d = generate_synthetic(&SyntheticConfig {
                seed,
                ..cfg.clone()
            })?;
            split_dataset(&d, config.splits, seed)?
        }
    };
    run_trial_on_splits(
        config,
        seed,
        &splits.calibration,
        &splits.optimization,
        &splits.test,
    )
}

/// Repeats split → calibrate → (optimize) → evaluate for seeds
/// `base_seed .. base_seed + n_seeds`. A failing seed is recorded and the
/// others still run.
pub fn run_trials(config: &TrialConfig, n_seeds: usize) -> TrialRun {
    let seeds: Vec<u64> = (0..n_seeds as u64).map(|i| config.base_seed + i).collect();
    run_trials_with_seeds(config, &seeds)
}

/// [`run_trials`] over an explicit seed list; `base_seed` is ignored.
pub fn run_trials_with_seeds(config: &TrialConfig, seeds: &[u64]) -> TrialRun {
    let per_seed: Vec<(u64, Result<TrialOutcome>)> = seeds
        .par_iter()
        .map(|&seed| (seed, run_one(config, seed)))
        .collect();
    let ok: Vec<&TrialOutcome> = per_seed
        .iter()
        .filter_map(|(_, r)| r.as_ref().ok())
        .collect();
    let col = |f: &dyn Fn(&TrialOutcome) -> f64| {
        MeanStd::of(&ok.iter().map(|o| f(o)).collect::<Vec<_>>())
    };
    let summary = TrialSummary {
        n_ok: ok.len(),
        n_failed: per_seed.len() - ok.len(),
        alpha: config.alpha,
        retriever_coverage: col(&|o| o.coverage.retriever_coverage),
        llm_coverage: col(&|o| o.coverage.llm_coverage),
        e2e_relevant_only: col(&|o| o.coverage.e2e_relevant_only),
        e2e_aggregated: col(&|o| o.coverage.e2e_aggregated),
        avg_semantic_count: col(&|o| o.sizes.avg_semantic_count),
        avg_unique_answers: col(&|o| o.sizes.avg_unique_answers),
    };
    TrialRun { per_seed, summary }
}
