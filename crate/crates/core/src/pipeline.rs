//! End-to-end prediction sets for retrieve-then-generate pipelines.
//!
//! The retriever stage keeps every passage whose negated retrieval score is
//! within `tau_ret`; the generator stage keeps, for one passage, every
//! semantic cluster whose negated confidence is within `tau_llm`. The
//! aggregated set is the union of generator sets over the retriever set,
//! re-clustered. With stage budgets summing to `alpha`, a union bound gives
//! end-to-end coverage of at least `1 - alpha`.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{
    conformal_threshold, pac_threshold, ConformalThreshold, NonconformityScore, ThresholdMode,
};
use crate::data::{CalibrationRecord, Dataset, PassageEntry, Response};
use crate::eval::is_correct;
use crate::semantic::{cluster_indices, BackendSpec, SemanticCluster, SimilarityBackend};
use crate::{Error, Result};

/// Text of the abstention answer injected into aggregated sets.
pub const IDK: &str = "I do not know";

const BUDGET_TOL: f64 = 1e-12;

/// How a total miscoverage budget is shared between the two stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetSplit {
    pub alpha_ret: f64,
    pub alpha_llm: f64,
}

impl BudgetSplit {
    pub fn new(alpha_ret: f64, alpha_llm: f64) -> Result<Self> {
        let ok = |a: f64| a > 0.0 && a < 1.0;
        if !ok(alpha_ret) || !ok(alpha_llm) || !ok(alpha_ret + alpha_llm) {
            return Err(Error::InvalidArgument(format!(
                "stage budgets ({alpha_ret}, {alpha_llm}) must be positive with a sum below 1"
            )));
        }
        Ok(Self {
            alpha_ret,
            alpha_llm,
        })
    }

    /// `alpha_ret = fraction * alpha`, `alpha_llm = alpha - alpha_ret`.
    pub fn from_fraction(alpha: f64, fraction: f64) -> Result<Self> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "retriever fraction must lie in (0, 1), got {fraction}"
            )));
        }
        let alpha_ret = fraction * alpha;
        Self::new(alpha_ret, alpha - alpha_ret)
    }

    pub fn even(alpha: f64) -> Result<Self> {
        Self::from_fraction(alpha, 0.5)
    }

    pub fn total(&self) -> f64 {
        self.alpha_ret + self.alpha_llm
    }

    /// Checks that the stages add up to `alpha`.
    pub fn check_total(&self, alpha: f64) -> Result<()> {
        if (self.total() - alpha).abs() > BUDGET_TOL {
            return Err(Error::InvalidArgument(format!(
                "stage budgets sum to {}, expected {alpha}",
                self.total()
            )));
        }
        Ok(())
    }
}

/// Marginal (conformal) or training-conditional (PAC) calibration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CoverageMode {
    Conformal,
    /// Each stage is calibrated at confidence `1 - delta / 2`.
    Pac {
        delta: f64,
    },
}

impl CoverageMode {
    pub fn threshold_mode(&self) -> ThresholdMode {
        match self {
            CoverageMode::Conformal => ThresholdMode::Conformal,
            CoverageMode::Pac { .. } => ThresholdMode::Pac,
        }
    }

    pub fn delta(&self) -> Option<f64> {
        match self {
            CoverageMode::Conformal => None,
            CoverageMode::Pac { delta } => Some(*delta),
        }
    }

    pub fn from_parts(mode: ThresholdMode, delta: Option<f64>) -> Result<Self> {
        match (mode, delta) {
            (ThresholdMode::Conformal, _) => Ok(CoverageMode::Conformal),
            (ThresholdMode::Pac, Some(delta)) if delta > 0.0 && delta < 1.0 => {
                Ok(CoverageMode::Pac { delta })
            }
            (ThresholdMode::Pac, d) => Err(Error::InvalidArgument(format!(
                "pac mode needs delta in (0, 1), got {d:?}"
            ))),
        }
    }

    fn stage_threshold(
        &self,
        scores: &[NonconformityScore],
        alpha: f64,
    ) -> Result<ConformalThreshold> {
        match self {
            CoverageMode::Conformal => conformal_threshold(scores, alpha),
            CoverageMode::Pac { delta } => pac_threshold(scores, alpha, delta / 2.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationConfig {
    pub budget: BudgetSplit,
    pub mode: CoverageMode,
    /// Calibrate an "I do not know" threshold on records the generator
    /// cannot answer.
    pub abstain: bool,
}

impl CalibrationConfig {
    pub fn conformal(budget: BudgetSplit) -> Self {
        Self {
            budget,
            mode: CoverageMode::Conformal,
            abstain: false,
        }
    }
}

/// Calibrated stage thresholds plus the settings that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineThresholds {
    pub tau_ret: ConformalThreshold,
    pub tau_llm: ConformalThreshold,
    pub tau_ign: Option<ConformalThreshold>,
    pub budget: BudgetSplit,
    pub mode: CoverageMode,
    pub backend: BackendSpec,
    /// Question ids of the calibration records, so evaluation can refuse
    /// overlapping test data.
    pub calibration_ids: Vec<String>,
}

impl PipelineThresholds {
    pub fn alpha(&self) -> f64 {
        self.budget.total()
    }

    pub fn n_calibration(&self) -> usize {
        self.tau_ret.n_calibration
    }

    /// Rejects a test set sharing any question with the calibration set.
    pub fn check_disjoint(&self, test: &Dataset) -> Result<()> {
        let cal: HashSet<&str> = self.calibration_ids.iter().map(String::as_str).collect();
        match test.question_ids().find(|id| cal.contains(id)) {
            Some(id) => Err(Error::SplitOverlap(id.to_owned())),
            None => Ok(()),
        }
    }

    pub fn check_backend(&self, backend: &SimilarityBackend) -> Result<()> {
        let spec = backend.spec();
        if spec != self.backend {
            return Err(Error::ProvenanceMismatch(format!(
                "thresholds were calibrated with backend {} (threshold {}), not {} (threshold {})",
                self.backend.kind, self.backend.threshold, spec.kind, spec.threshold
            )));
        }
        Ok(())
    }
}

/// Version of the serialized thresholds document.
pub const THRESHOLDS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageThresholds {
    pub retriever: ConformalThreshold,
    pub generator: ConformalThreshold,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abstain: Option<ConformalThreshold>,
}

/// On-disk form of [`PipelineThresholds`]. The flat `tau_*` fields are for
/// readers; `stages` carries the full per-stage detail used on reload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdsDocument {
    pub schema_version: u32,
    pub mode: ThresholdMode,
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    pub budget: BudgetSplit,
    #[serde(with = "crate::serde_ext::extended")]
    pub tau_ret: f64,
    #[serde(with = "crate::serde_ext::extended")]
    pub tau_llm: f64,
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        with = "crate::serde_ext::extended_option"
    )]
    pub tau_ign: Option<f64>,
    pub n_calibration: usize,
    pub backend: BackendSpec,
    pub calibration_question_ids: Vec<String>,
    pub stages: StageThresholds,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

impl ThresholdsDocument {
    pub fn new(t: &PipelineThresholds, provenance: Option<serde_json::Value>) -> Self {
        Self {
            schema_version: THRESHOLDS_SCHEMA_VERSION,
            mode: t.mode.threshold_mode(),
            alpha: t.alpha(),
            delta: t.mode.delta(),
            budget: t.budget,
            tau_ret: t.tau_ret.tau,
            tau_llm: t.tau_llm.tau,
            tau_ign: t.tau_ign.as_ref().map(|x| x.tau),
            n_calibration: t.n_calibration(),
            backend: t.backend,
            calibration_question_ids: t.calibration_ids.clone(),
            stages: StageThresholds {
                retriever: t.tau_ret.clone(),
                generator: t.tau_llm.clone(),
                abstain: t.tau_ign.clone(),
            },
            provenance,
        }
    }

    /// Rebuilds the thresholds, rejecting documents whose summary fields
    /// disagree with their stage detail.
    pub fn thresholds(&self) -> Result<PipelineThresholds> {
        if self.schema_version != THRESHOLDS_SCHEMA_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported thresholds schema_version {}",
                self.schema_version
            )));
        }
        let mode = CoverageMode::from_parts(self.mode, self.delta)?;
        self.budget.check_total(self.alpha)?;
        let st = &self.stages;
        let consistent = st.retriever.tau == self.tau_ret
            && st.generator.tau == self.tau_llm
            && st.abstain.as_ref().map(|a| a.tau) == self.tau_ign
            && st.retriever.alpha == self.budget.alpha_ret
            && st.generator.alpha == self.budget.alpha_llm;
        if !consistent {
            return Err(Error::InvalidArgument(
                "thresholds document: summary fields disagree with stage detail".into(),
            ));
        }
        Ok(PipelineThresholds {
            tau_ret: st.retriever.clone(),
            tau_llm: st.generator.clone(),
            tau_ign: st.abstain.clone(),
            budget: self.budget,
            mode,
            backend: self.backend,
            calibration_ids: self.calibration_question_ids.clone(),
        })
    }
}

/// Nonconformity of the gold passage: its negated retrieval score.
pub fn retriever_score(record: &CalibrationRecord) -> Result<NonconformityScore> {
    let gold = record
        .gold_passage()
        .ok_or_else(|| Error::GoldPassageMissing {
            question_id: record.question_id.clone(),
            gold_passage_id: record.gold_passage_id.clone(),
        })?;
    NonconformityScore::new(-gold.retrieval_score)
}

/// Clusters of one passage's samples, with a correctness flag per cluster
/// and the cluster index of every sample.
#[derive(Debug, Clone)]
pub struct PassageClusters {
    pub clusters: Vec<SemanticCluster>,
    pub correct: Vec<bool>,
    assignment: Vec<usize>,
}

impl PassageClusters {
    pub fn build(
        passage: &PassageEntry,
        gold_answers: &[String],
        backend: &SimilarityBackend,
    ) -> Result<Self> {
        let groups = cluster_indices(&passage.responses, backend)?;
        let total = passage.responses.len() as f64;
        let mut assignment = vec![0; passage.responses.len()];
        let mut clusters = Vec::with_capacity(groups.len());
        let mut correct = Vec::with_capacity(groups.len());
        for (c, g) in groups.iter().enumerate() {
            for &i in g {
                assignment[i] = c;
            }
            let members: Vec<Response> = g.iter().map(|&i| passage.responses[i].clone()).collect();
            correct.push(is_correct(&members[0].text, gold_answers));
            clusters.push(SemanticCluster {
                representative: members[0].clone(),
                count: members.len(),
                confidence: members.len() as f64 / total,
                members,
            });
        }
        Ok(Self {
            clusters,
            correct,
            assignment,
        })
    }

    /// Negated confidence of the most confident correct cluster, or `+inf`
    /// when no cluster is correct.
    pub fn correct_score(&self) -> NonconformityScore {
        self.clusters
            .iter()
            .zip(&self.correct)
            .find(|(_, &ok)| ok)
            .map(|(c, _)| NonconformityScore::new(-c.confidence).expect("finite"))
            .unwrap_or(NonconformityScore::INFINITY)
    }

    pub fn admitted(&self, tau_llm: &ConformalThreshold) -> Vec<bool> {
        self.clusters
            .iter()
            .map(|c| tau_llm.admits(NonconformityScore::new(-c.confidence).expect("finite")))
            .collect()
    }
}

/// Generator-stage scores for one passage: its clusters and the score of
/// the most confident correct cluster (`+inf` if none is correct).
pub fn llm_scores(
    record: &CalibrationRecord,
    passage: &PassageEntry,
    backend: &SimilarityBackend,
) -> Result<(Vec<SemanticCluster>, NonconformityScore)> {
    let pc = PassageClusters::build(passage, &record.gold_answers, backend)?;
    let score = pc.correct_score();
    Ok((pc.clusters, score))
}

/// A record with every passage clustered once. Thresholds only decide
/// which clusters are kept, so the clustering can be shared across
/// calibration, optimization and evaluation runs.
#[derive(Debug, Clone)]
pub struct PreparedRecord<'a> {
    pub record: &'a CalibrationRecord,
    pub passages: Vec<PassageClusters>,
    gold: usize,
    answerable: bool,
}

impl<'a> PreparedRecord<'a> {
    pub fn new(record: &'a CalibrationRecord, backend: &SimilarityBackend) -> Result<Self> {
        let gold = record
            .gold_index()
            .ok_or_else(|| Error::GoldPassageMissing {
                question_id: record.question_id.clone(),
                gold_passage_id: record.gold_passage_id.clone(),
            })?;
        let passages = record
            .passages
            .iter()
            .map(|p| PassageClusters::build(p, &record.gold_answers, backend))
            .collect::<Result<_>>()?;
        Ok(Self {
            answerable: record.gold_has_correct_response(),
            record,
            passages,
            gold,
        })
    }

    pub fn gold_index(&self) -> usize {
        self.gold
    }

    pub fn retriever_score(&self) -> NonconformityScore {
        NonconformityScore::new(-self.record.passages[self.gold].retrieval_score)
            .expect("validated finite")
    }

    pub fn llm_score(&self) -> NonconformityScore {
        self.passages[self.gold].correct_score()
    }

    /// Whether any sample at the gold passage is correct. A clustering can
    /// still bury every correct sample under an incorrect representative,
    /// in which case the record is answerable with an infinite LLM score.
    pub fn answerable(&self) -> bool {
        self.answerable
    }

    /// Indices of passages in the retriever set, by descending score.
    pub fn retriever_set(&self, tau_ret: &ConformalThreshold) -> Vec<usize> {
        let mut kept: Vec<usize> = (0..self.record.passages.len())
            .filter(|&j| {
                let s = -self.record.passages[j].retrieval_score;
                tau_ret.admits(NonconformityScore::new(s).expect("validated finite"))
            })
            .collect();
        kept.sort_by(|&a, &b| {
            let (pa, pb) = (&self.record.passages[a], &self.record.passages[b]);
            pb.retrieval_score
                .total_cmp(&pa.retrieval_score)
                .then(a.cmp(&b))
        });
        kept
    }

    /// Pooled members of the admitted clusters, ordered by passage rank and
    /// then by arrival within the passage.
    pub fn pooled_members(&self, thresholds: &PipelineThresholds) -> (Vec<usize>, Vec<Response>) {
        let passages = self.retriever_set(&thresholds.tau_ret);
        let mut pool = Vec::new();
        for &j in &passages {
            let pc = &self.passages[j];
            let keep = pc.admitted(&thresholds.tau_llm);
            for (i, r) in self.record.passages[j].responses.iter().enumerate() {
                if keep[pc.assignment[i]] {
                    pool.push(r.clone());
                }
            }
        }
        (passages, pool)
    }

    pub fn aggregate(
        &self,
        thresholds: &PipelineThresholds,
        backend: &SimilarityBackend,
    ) -> Result<AggregatedSet> {
        let (passages, pool) = self.pooled_members(thresholds);
        let groups = cluster_indices(&pool, backend)?;
        let total = pool.len() as f64;
        let clusters = groups
            .into_iter()
            .map(|g| {
                let members: Vec<Response> = g.iter().map(|&i| pool[i].clone()).collect();
                SemanticCluster {
                    representative: members[0].clone(),
                    count: members.len(),
                    confidence: members.len() as f64 / total,
                    members,
                }
            })
            .collect();
        Ok(AggregatedSet {
            clusters,
            source_passages: passages
                .iter()
                .map(|&j| self.record.passages[j].passage_id.clone())
                .collect(),
            contains_idk: abstains(self.record, thresholds)?,
        })
    }
}

/// A dataset with all records clustered under one backend.
#[derive(Debug, Clone)]
pub struct PreparedDataset<'a> {
    pub dataset: &'a Dataset,
    pub records: Vec<PreparedRecord<'a>>,
    pub backend: SimilarityBackend,
}

impl<'a> PreparedDataset<'a> {
    /// Clusters every (question, passage) pair, in parallel across records.
    pub fn new(dataset: &'a Dataset, backend: &SimilarityBackend) -> Result<Self> {
        let records = dataset
            .records()
            .par_iter()
            .map(|r| PreparedRecord::new(r, backend))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dataset,
            records,
            backend: backend.clone(),
        })
    }
}

/// Abstention threshold from answerability confidences of records the
/// generator failed on: `-confidence` is the nonconformity, so "I do not
/// know" is included whenever `confidence >= -tau`.
pub fn calibrate_abstain(failure_confidences: &[f64], alpha: f64) -> Result<ConformalThreshold> {
    conformal_threshold(&abstain_scores(failure_confidences)?, alpha)
}

fn abstain_scores(confidences: &[f64]) -> Result<Vec<NonconformityScore>> {
    confidences
        .iter()
        .map(|&c| {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::InvalidArgument(format!(
                    "abstain confidence {c} outside [0, 1]"
                )));
            }
            NonconformityScore::new(-c)
        })
        .collect()
}

fn abstains(record: &CalibrationRecord, thresholds: &PipelineThresholds) -> Result<bool> {
    let Some(tau) = &thresholds.tau_ign else {
        return Ok(false);
    };
    let c = record
        .abstain_confidence
        .ok_or_else(|| Error::InvalidRecord {
            question_id: record.question_id.clone(),
            field: "abstain_confidence".into(),
            message: "required when an abstention threshold is configured".into(),
        })?;
    Ok(tau.admits(NonconformityScore::new(-c)?))
}

/// Calibrates both stage thresholds on already-clustered records.
///
/// One score per record and stage: the gold passage's negated retrieval
/// score, and the negated confidence of the most confident correct cluster
/// at the gold passage (`+inf` when no representative is correct). Records
/// with no correct sample at the gold passage violate the data assumptions
/// and are rejected, unless abstention is enabled, in which case they
/// calibrate the abstention threshold instead.
pub fn calibrate_prepared(
    cal: &PreparedDataset<'_>,
    config: &CalibrationConfig,
) -> Result<PipelineThresholds> {
    if cal.records.is_empty() {
        return Err(Error::InvalidArgument("empty calibration set".into()));
    }
    let mut ret_scores = Vec::with_capacity(cal.records.len());
    let mut llm_scores = Vec::with_capacity(cal.records.len());
    let mut failures = Vec::new();
    for pr in &cal.records {
        if pr.answerable() {
            ret_scores.push(pr.retriever_score());
            llm_scores.push(pr.llm_score());
        } else if config.abstain {
            failures.push(
                pr.record
                    .abstain_confidence
                    .ok_or_else(|| Error::InvalidRecord {
                        question_id: pr.record.question_id.clone(),
                        field: "abstain_confidence".into(),
                        message: "required for abstention calibration".into(),
                    })?,
            );
        } else {
            return Err(Error::NoCorrectResponse {
                question_id: pr.record.question_id.clone(),
                passage_id: pr.record.gold_passage_id.clone(),
            });
        }
    }
    if ret_scores.is_empty() {
        return Err(Error::InvalidArgument(
            "no answerable records in the calibration set".into(),
        ));
    }
    let budget = config.budget;
    let tau_ret = config.mode.stage_threshold(&ret_scores, budget.alpha_ret)?;
    let tau_llm = config.mode.stage_threshold(&llm_scores, budget.alpha_llm)?;
    let tau_ign = if config.abstain {
        if failures.is_empty() {
            return Err(Error::InvalidArgument(
                "abstention needs unanswerable records in the calibration set".into(),
            ));
        }
        let scores = abstain_scores(&failures)?;
        Some(match config.mode {
            CoverageMode::Conformal => conformal_threshold(&scores, budget.total())?,
            CoverageMode::Pac { delta } => pac_threshold(&scores, budget.total(), delta)?,
        })
    } else {
        None
    };
    Ok(PipelineThresholds {
        tau_ret,
        tau_llm,
        tau_ign,
        budget,
        mode: config.mode,
        backend: cal.backend.spec(),
        calibration_ids: cal.dataset.question_ids().map(String::from).collect(),
    })
}

/// Clusters the calibration set and calibrates both stages.
pub fn calibrate(
    cal: &Dataset,
    config: &CalibrationConfig,
    backend: &SimilarityBackend,
) -> Result<PipelineThresholds> {
    calibrate_prepared(&PreparedDataset::new(cal, backend)?, config)
}

/// Passage ids with `-score <= tau_ret`, by descending retrieval score.
pub fn predict_retriever_set<'r>(
    record: &'r CalibrationRecord,
    thresholds: &PipelineThresholds,
) -> Vec<&'r str> {
    let mut kept: Vec<&PassageEntry> = record
        .passages
        .iter()
        .filter(|p| {
            NonconformityScore::new(-p.retrieval_score)
                .map(|s| thresholds.tau_ret.admits(s))
                .unwrap_or(false)
        })
        .collect();
    kept.sort_by(|a, b| b.retrieval_score.total_cmp(&a.retrieval_score));
    kept.into_iter().map(|p| p.passage_id.as_str()).collect()
}

/// Clusters of one passage with `-confidence <= tau_llm`.
pub fn predict_llm_set(
    passage: &PassageEntry,
    thresholds: &PipelineThresholds,
    backend: &SimilarityBackend,
) -> Result<Vec<SemanticCluster>> {
    let groups = cluster_indices(&passage.responses, backend)?;
    let total = passage.responses.len() as f64;
    Ok(groups
        .into_iter()
        .filter(|g| {
            let conf = g.len() as f64 / total;
            thresholds
                .tau_llm
                .admits(NonconformityScore::new(-conf).expect("finite"))
        })
        .map(|g| {
            let members: Vec<Response> = g.iter().map(|&i| passage.responses[i].clone()).collect();
            SemanticCluster {
                representative: members[0].clone(),
                count: members.len(),
                confidence: members.len() as f64 / total,
                members,
            }
        })
        .collect())
}

/// Union of generator sets over the retriever set, re-clustered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedSet {
    pub clusters: Vec<SemanticCluster>,
    pub source_passages: Vec<String>,
    pub contains_idk: bool,
}

impl AggregatedSet {
    /// Semantic clusters, counting "I do not know" as one more.
    pub fn semantic_count(&self) -> usize {
        self.clusters.len() + usize::from(self.contains_idk)
    }

    /// Distinct member texts after whitespace normalization.
    pub fn unique_answers(&self) -> usize {
        let mut seen = HashSet::new();
        for c in &self.clusters {
            for m in &c.members {
                seen.insert(m.text.split_whitespace().collect::<Vec<_>>().join(" "));
            }
        }
        seen.len()
    }

    pub fn has_correct_cluster(&self, gold_answers: &[String]) -> bool {
        self.clusters
            .iter()
            .any(|c| is_correct(&c.representative.text, gold_answers))
    }
}

/// Builds the aggregated set for one record.
pub fn aggregate(
    record: &CalibrationRecord,
    thresholds: &PipelineThresholds,
    backend: &SimilarityBackend,
) -> Result<AggregatedSet> {
    PreparedRecord::new(record, backend)?.aggregate(thresholds, backend)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use proptest::prelude::*;

    fn threshold(tau: f64) -> ConformalThreshold {
        ConformalThreshold {
            tau,
            alpha: 0.1,
            n_calibration: 10,
            mode: ThresholdMode::Conformal,
            delta: None,
            k_star: None,
        }
    }

    fn thresholds(tau_ret: f64, tau_llm: f64) -> PipelineThresholds {
        PipelineThresholds {
            tau_ret: threshold(tau_ret),
            tau_llm: threshold(tau_llm),
            tau_ign: None,
            budget: BudgetSplit::even(0.2).unwrap(),
            mode: CoverageMode::Conformal,
            backend: SimilarityBackend::rouge1().spec(),
            calibration_ids: Vec::new(),
        }
    }

    fn passage(id: &str, score: f64, answers: &[(&str, usize)]) -> PassageEntry {
        PassageEntry {
            passage_id: id.into(),
            retrieval_score: score,
            responses: answers
                .iter()
                .flat_map(|&(t, n)| std::iter::repeat_n(Response::new(t), n))
                .collect(),
        }
    }

    fn record(gold_score: f64) -> CalibrationRecord {
        CalibrationRecord {
            question_id: "q".into(),
            question: "who?".into(),
            gold_passage_id: "gold".into(),
            gold_answers: vec!["James Mason".into()],
            abstain_confidence: None,
            passages: vec![
                passage(
                    "gold",
                    gold_score,
                    &[("james mason", 6), ("judy garland", 4)],
                ),
                passage("other", 1.0, &[("judy garland", 10)]),
            ],
        }
    }

    #[test]
    fn budget_split_validation() {
        let b = BudgetSplit::from_fraction(0.2, 0.9).unwrap();
        assert!((b.total() - 0.2).abs() < 1e-15);
        b.check_total(0.2).unwrap();
        assert!(b.check_total(0.3).is_err());
        assert!(BudgetSplit::new(0.0, 0.1).is_err());
        assert!(BudgetSplit::new(0.6, 0.5).is_err());
        assert!(BudgetSplit::from_fraction(0.2, 1.0).is_err());
    }

    #[test]
    fn retriever_score_negates() {
        for (s, e) in [(12.5, -12.5), (0.0, 0.0), (-3.2, 3.2)] {
            assert_eq!(retriever_score(&record(s)).unwrap().value(), e);
        }
        let mut r = record(1.0);
        r.gold_passage_id = "missing".into();
        assert!(retriever_score(&r).is_err());
    }

    #[test]
    fn llm_scores_pick_most_confident_correct_cluster() {
        let mut r = record(2.0);
        r.passages[0] = passage("gold", 2.0, &[("James Mason!", 18), ("judy garland", 12)]);
        let b = SimilarityBackend::rouge1();
        let (clusters, s) = llm_scores(&r, &r.passages[0], &b).unwrap();
        assert_eq!(clusters.len(), 2);
        assert!((s.value() + 0.6).abs() < 1e-12);

        r.passages[0] = passage("gold", 2.0, &[("james mason", 30)]);
        assert_eq!(llm_scores(&r, &r.passages[0], &b).unwrap().1.value(), -1.0);

        r.passages[0] = passage("gold", 2.0, &[("judy garland", 30)]);
        assert!(!llm_scores(&r, &r.passages[0], &b).unwrap().1.is_finite());
    }

    #[test]
    fn calibrate_errors_on_unanswerable_record() {
        let mut r = record(2.0);
        r.passages[0] = passage("gold", 2.0, &[("judy garland", 10)]);
        let d = Dataset::new(10, 2, vec![r]).unwrap();
        let cfg = CalibrationConfig::conformal(BudgetSplit::even(0.2).unwrap());
        assert!(matches!(
            calibrate(&d, &cfg, &SimilarityBackend::rouge1()),
            Err(Error::NoCorrectResponse { .. })
        ));
    }

    #[test]
    fn calibrate_uses_ranked_scores() {
        let d = generate_synthetic(&SyntheticConfig {
            n_records: 300,
            k_passages: 3,
            m_samples: 10,
            seed: 5,
            ..Default::default()
        })
        .unwrap();
        let b = SimilarityBackend::rouge1();
        let cfg = CalibrationConfig::conformal(BudgetSplit::new(0.05, 0.05).unwrap());
        let t = calibrate(&d, &cfg, &b).unwrap();

        // rank ceil(0.95 * 301) = 286
        let mut ret: Vec<f64> = d
            .records()
            .iter()
            .map(|r| -r.gold_passage().unwrap().retrieval_score)
            .collect();
        ret.sort_by(f64::total_cmp);
        assert_eq!(t.tau_ret.tau, ret[285]);
        let mut llm: Vec<f64> = d
            .records()
            .iter()
            .map(|r| {
                llm_scores(r, r.gold_passage().unwrap(), &b)
                    .unwrap()
                    .1
                    .value()
            })
            .collect();
        llm.sort_by(f64::total_cmp);
        assert_eq!(t.tau_llm.tau, llm[285]);
        assert_eq!(t.calibration_ids.len(), 300);

        // nearly all budget on the retriever: the smallest threshold possible
        let skew = CalibrationConfig::conformal(BudgetSplit::new(0.997, 0.001).unwrap());
        let ts = calibrate(&d, &skew, &b).unwrap();
        assert_eq!(ts.tau_ret.tau, ret[0]);
    }

    #[test]
    fn pac_stages_use_half_delta() {
        let d = generate_synthetic(&SyntheticConfig {
            n_records: 300,
            k_passages: 3,
            m_samples: 10,
            seed: 6,
            ..Default::default()
        })
        .unwrap();
        let cfg = CalibrationConfig {
            budget: BudgetSplit::even(0.2).unwrap(),
            mode: CoverageMode::Pac { delta: 0.1 },
            abstain: false,
        };
        let t = calibrate(&d, &cfg, &SimilarityBackend::rouge1()).unwrap();
        assert_eq!(t.tau_ret.delta, Some(0.05));
        assert_eq!(t.tau_llm.delta, Some(0.05));
        assert_eq!(t.tau_ret.mode, ThresholdMode::Pac);

        let tiny = CalibrationConfig {
            budget: BudgetSplit::new(0.001, 0.199).unwrap(),
            ..cfg
        };
        match calibrate(&d, &tiny, &SimilarityBackend::rouge1()) {
            Err(Error::PacInfeasible { min_n: Some(m), .. }) => assert!(m > 300),
            other => panic!("expected pac infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn retriever_set_examples() {
        let mut r = record(5.0);
        r.passages.push(passage("third", 3.0, &[("x", 10)]));
        r.passages[1].retrieval_score = 1.0;
        assert_eq!(
            predict_retriever_set(&r, &thresholds(f64::INFINITY, 0.0)),
            vec!["gold", "third", "other"]
        );
        assert!(predict_retriever_set(&r, &thresholds(-6.0, 0.0)).is_empty());
        assert_eq!(
            predict_retriever_set(&r, &thresholds(-2.0, 0.0)),
            vec!["gold", "third"]
        );
    }

    #[test]
    fn llm_set_examples() {
        let p = passage(
            "p",
            0.0,
            &[("alpha beta", 6), ("gamma delta", 3), ("eps zeta", 1)],
        );
        let b = SimilarityBackend::rouge1();
        let got = predict_llm_set(&p, &thresholds(0.0, -0.5), &b).unwrap();
        assert_eq!(got.len(), 1);
        assert!((got[0].confidence - 0.6).abs() < 1e-12);
        assert_eq!(
            predict_llm_set(&p, &thresholds(0.0, 0.0), &b)
                .unwrap()
                .len(),
            3
        );
        let single = passage("p", 0.0, &[("alpha", 10)]);
        assert_eq!(
            predict_llm_set(&single, &thresholds(0.0, -1.0), &b)
                .unwrap()
                .len(),
            1
        );
    }

    #[test]
    fn aggregate_examples() {
        let b = SimilarityBackend::rouge1();
        let r = record(5.0);

        let empty = aggregate(&r, &thresholds(-10.0, 0.0), &b).unwrap();
        assert!(empty.clusters.is_empty() && empty.source_passages.is_empty());
        assert_eq!((empty.semantic_count(), empty.unique_answers()), (0, 0));

        // "judy garland" appears at both passages and collapses to one cluster
        let both = aggregate(&r, &thresholds(f64::INFINITY, 0.0), &b).unwrap();
        assert_eq!(both.source_passages, vec!["gold", "other"]);
        assert_eq!(both.clusters.len(), 2);
        assert!(both.has_correct_cluster(&r.gold_answers));

        let mut disjoint = record(5.0);
        disjoint.passages[1] = passage("other", 1.0, &[("orson welles", 5), ("cary grant", 5)]);
        let agg = aggregate(&disjoint, &thresholds(f64::INFINITY, 0.0), &b).unwrap();
        assert_eq!(agg.clusters.len(), 4);
    }

    #[test]
    fn abstain_examples() {
        let conf: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
        let t = calibrate_abstain(&conf, 0.2).unwrap();
        assert!((t.tau + 0.2).abs() < 1e-12);
        let t = calibrate_abstain(&conf, 0.01).unwrap();
        assert!(t.is_all_inclusive());
        let t = calibrate_abstain(&[1.0; 5], 0.3).unwrap();
        assert!(t.admits(NonconformityScore::new(-1.0).unwrap()));
        assert!(!t.admits(NonconformityScore::new(-0.99).unwrap()));
        assert!(calibrate_abstain(&[], 0.2).is_err());
        assert!(calibrate_abstain(&[1.2], 0.2).is_err());
    }

    #[test]
    fn aggregate_requires_abstain_confidence_when_configured() {
        let b = SimilarityBackend::rouge1();
        let mut t = thresholds(f64::INFINITY, 0.0);
        t.tau_ign = Some(threshold(-0.5));
        let mut r = record(5.0);
        assert!(aggregate(&r, &t, &b).is_err());
        r.abstain_confidence = Some(0.7);
        assert!(aggregate(&r, &t, &b).unwrap().contains_idk);
        r.abstain_confidence = Some(0.3);
        assert!(!aggregate(&r, &t, &b).unwrap().contains_idk);
    }

    #[test]
    fn thresholds_document_round_trip() {
        let d = generate_synthetic(&SyntheticConfig {
            n_records: 50,
            k_passages: 3,
            m_samples: 10,
            seed: 9,
            ..Default::default()
        })
        .unwrap();
        let b = SimilarityBackend::rouge1();
        let cfg = CalibrationConfig {
            budget: BudgetSplit::even(0.02).unwrap(),
            mode: CoverageMode::Conformal,
            abstain: false,
        };
        let t = calibrate(&d, &cfg, &b).unwrap();
        assert!(t.tau_ret.is_all_inclusive());
        let doc = ThresholdsDocument::new(&t, None);
        let text = serde_json::to_string(&doc).unwrap();
        assert!(text.contains("\"tau_ret\":\"inf\""));
        let back: ThresholdsDocument = serde_json::from_str(&text).unwrap();
        assert_eq!(back.thresholds().unwrap(), t);

        let mut tampered = back.clone();
        tampered.tau_llm = -0.99;
        assert!(tampered.thresholds().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn enlarging_thresholds_only_adds_members(
            seed in 0u64..1000,
            ret in -4.0f64..2.0,
            llm in -1.0f64..0.0,
            d_ret in 0.0f64..3.0,
            d_llm in 0.0f64..0.5,
        ) {
            let d = generate_synthetic(&SyntheticConfig {
                n_records: 3, k_passages: 6, m_samples: 10, seed, ..Default::default()
            }).unwrap();
            let b = SimilarityBackend::rouge1();
            let small = thresholds(ret, llm);
            let large = thresholds(ret + d_ret, llm + d_llm);
            for r in d.records() {
                let pr = PreparedRecord::new(r, &b).unwrap();
                let (ps, pool_s) = pr.pooled_members(&small);
                let (pl, pool_l) = pr.pooled_members(&large);
                prop_assert!(ps.iter().all(|j| pl.contains(j)));
                // multiset inclusion on pooled members
                let mut rest = pool_l.clone();
                for m in &pool_s {
                    let pos = rest.iter().position(|x| x == m);
                    prop_assert!(pos.is_some());
                    rest.swap_remove(pos.unwrap());
                }
            }
        }
    }
}
