//! Score-log datasets: the line-delimited file format, validation, seeded
//! splits and a synthetic generator.
//!
//! A dataset file starts with a header line
//! `{"m_samples":M,"k_passages":K,"schema_version":1}` followed by one
//! [`CalibrationRecord`] per line.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::eval::is_correct;
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Response {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precomputed_id: Option<usize>,
}

impl Response {
    pub fn new(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            precomputed_id: None,
        }
    }

    pub fn with_id(text: impl Into<String>, id: usize) -> Self {
        Self {
            text: text.into(),
            precomputed_id: Some(id),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassageEntry {
    pub passage_id: String,
    pub retrieval_score: f64,
    pub responses: Vec<Response>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub question_id: String,
    pub question: String,
    pub gold_passage_id: String,
    pub gold_answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abstain_confidence: Option<f64>,
    pub passages: Vec<PassageEntry>,
}

impl CalibrationRecord {
    /// Index of the gold passage among the candidates.
    pub fn gold_index(&self) -> Option<usize> {
        self.passages
            .iter()
            .position(|p| p.passage_id == self.gold_passage_id)
    }

    pub fn gold_passage(&self) -> Option<&PassageEntry> {
        self.gold_index().map(|i| &self.passages[i])
    }

    /// Whether some sampled response at the gold passage is correct.
    pub fn gold_has_correct_response(&self) -> bool {
        self.gold_passage().is_some_and(|p| {
            p.responses
                .iter()
                .any(|r| is_correct(&r.text, &self.gold_answers))
        })
    }

    fn invalid(&self, field: &str, message: impl Into<String>) -> Error {
        Error::InvalidRecord {
            question_id: self.question_id.clone(),
            field: field.to_owned(),
            message: message.into(),
        }
    }

    /// Structural checks against the dataset's `(M, K)`. The gold-passage
    /// check is separate, see [`Assumption`].
    fn validate(&self, m_samples: usize, k_passages: usize) -> Result<()> {
        if self.question_id.is_empty() {
            return Err(self.invalid("question_id", "empty"));
        }
        if self.gold_answers.is_empty() {
            return Err(self.invalid("gold_answers", "at least one gold answer required"));
        }
        if self.passages.len() != k_passages {
            return Err(self.invalid(
                "passages",
                format!(
                    "expected {k_passages} passages, found {}",
                    self.passages.len()
                ),
            ));
        }
        if let Some(c) = self.abstain_confidence {
            if !(0.0..=1.0).contains(&c) {
                return Err(self.invalid("abstain_confidence", format!("{c} outside [0, 1]")));
            }
        }
        let mut seen = HashSet::new();
        for p in &self.passages {
            if !seen.insert(p.passage_id.as_str()) {
                return Err(self.invalid(
                    "passages.passage_id",
                    format!("duplicate passage id {}", p.passage_id),
                ));
            }
            if !p.retrieval_score.is_finite() {
                return Err(self.invalid(
                    "passages.retrieval_score",
                    format!("passage {}: non-finite score", p.passage_id),
                ));
            }
            if p.responses.len() != m_samples {
                return Err(self.invalid(
                    "passages.responses",
                    format!(
                        "passage {}: expected {m_samples} responses, found {}",
                        p.passage_id,
                        p.responses.len()
                    ),
                ));
            }
            if p.responses.iter().any(|r| r.text.trim().is_empty()) {
                return Err(self.invalid(
                    "passages.responses.text",
                    format!("passage {}: empty response text", p.passage_id),
                ));
            }
        }
        Ok(())
    }
}

/// Assumptions a record has to meet to be usable for calibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assumption {
    /// The gold passage is among the retrieved candidates.
    RetrieverCorrectness,
    /// Some sampled response at the gold passage is correct.
    GeneratorCorrectness,
}

/// An immutable collection of records sharing `(M, K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<CalibrationRecord>,
    m_samples: usize,
    k_passages: usize,
}

impl Dataset {
    /// Validates every record against `(M, K)`, the gold-passage assumption
    /// and question-id uniqueness. An empty record list is allowed (splits
    /// may be empty); [`load_dataset`] rejects empty files.
    pub fn new(
        m_samples: usize,
        k_passages: usize,
        records: Vec<CalibrationRecord>,
    ) -> Result<Self> {
        if m_samples == 0 || k_passages == 0 {
            return Err(Error::InvalidArgument("M and K must be positive".into()));
        }
        let mut ids = HashSet::new();
        for r in &records {
            r.validate(m_samples, k_passages)?;
            if r.gold_index().is_none() {
                return Err(Error::GoldPassageMissing {
                    question_id: r.question_id.clone(),
                    gold_passage_id: r.gold_passage_id.clone(),
                });
            }
            if !ids.insert(r.question_id.as_str()) {
                return Err(r.invalid("question_id", "duplicate question id in dataset"));
            }
        }
        Ok(Self {
            records,
            m_samples,
            k_passages,
        })
    }

    pub fn records(&self) -> &[CalibrationRecord] {
        &self.records
    }

    pub fn m_samples(&self) -> usize {
        self.m_samples
    }

    pub fn k_passages(&self) -> usize {
        self.k_passages
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn question_ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.question_id.as_str())
    }

    fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            m_samples: self.m_samples,
            k_passages: self.k_passages,
        }
    }

    /// Canonical line-delimited serialization.
    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        self.write_with_provenance(w, None)
    }

    /// Like [`Dataset::write_to`], recording `provenance` in the header line.
    pub fn write_with_provenance<W: Write>(
        &self,
        w: W,
        provenance: Option<&serde_json::Value>,
    ) -> Result<()> {
        let mut w = BufWriter::new(w);
        serde_json::to_writer(
            &mut w,
            &Header {
                m_samples: self.m_samples,
                k_passages: self.k_passages,
                schema_version: SCHEMA_VERSION,
                provenance: provenance.cloned(),
            },
        )?;
        w.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(fs::File::create(path)?)
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    m_samples: usize,
    k_passages: usize,
    schema_version: u32,
    /// Free-form description of how the file was produced; ignored on load.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Keep records with no correct response at the gold passage. Needed
    /// when calibrating the abstention threshold, which learns from exactly
    /// those records.
    pub keep_unanswerable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rejection {
    pub line: usize,
    pub question_id: String,
    pub assumption: Assumption,
}

#[derive(Debug, Clone)]
pub struct LoadReport {
    pub dataset: Dataset,
    pub rejected: Vec<Rejection>,
}

impl LoadReport {
    pub fn rejected_count(&self, assumption: Assumption) -> usize {
        self.rejected
            .iter()
            .filter(|r| r.assumption == assumption)
            .count()
    }
}

/// Reads and validates a dataset file.
///
/// Malformed lines and structural violations are hard errors. Records that
/// only fail an [`Assumption`] are dropped and listed in the report.
pub fn load_dataset(path: &Path, options: LoadOptions) -> Result<LoadReport> {
    let file = fs::File::open(path)?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_owned(),
        line,
        message,
    };
    let mut lines = BufReader::new(file).lines().enumerate();
    let header: Header = loop {
        match lines.next() {
            None => return Err(parse_err(1, "missing dataset header".into())),
            Some((i, line)) => {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line)
                    .map_err(|e| parse_err(i + 1, format!("bad header: {e}")))?;
            }
        }
    };
    if header.schema_version != SCHEMA_VERSION {
        return Err(parse_err(
            1,
            format!("unsupported schema_version {}", header.schema_version),
        ));
    }

    let mut records = Vec::new();
    let mut rejected = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CalibrationRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e.to_string()))?;
        record.validate(header.m_samples, header.k_passages)?;
        if !ids.insert(record.question_id.clone()) {
            return Err(record.invalid("question_id", "duplicate question id in dataset"));
        }
        let failed = if record.gold_index().is_none() {
            Some(Assumption::RetrieverCorrectness)
        } else if !options.keep_unanswerable && !record.gold_has_correct_response() {
            Some(Assumption::GeneratorCorrectness)
        } else {
            None
        };
        match failed {
            Some(assumption) => rejected.push(Rejection {
                line: i + 1,
                question_id: record.question_id,
                assumption,
            }),
            None => records.push(record),
        }
    }
    if records.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{}: no usable records ({} rejected)",
            path.display(),
            rejected.len()
        )));
    }
    Ok(LoadReport {
        dataset: Dataset::new(header.m_samples, header.k_passages, records)?,
        rejected,
    })
}

/// Sizes of the calibration, optimization and test splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub calibration: usize,
    pub optimization: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn new(calibration: usize, optimization: usize, test: usize) -> Self {
        Self {
            calibration,
            optimization,
            test,
        }
    }

    pub fn total(&self) -> usize {
        self.calibration + self.optimization + self.test
    }
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self::new(300, 300, 400)
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub calibration: Dataset,
    pub optimization: Dataset,
    pub test: Dataset,
}

/// Seeded disjoint split: permute record indices, then cut consecutive
/// blocks for calibration, optimization and test.
pub fn split_dataset(d: &Dataset, sizes: SplitSizes, seed: u64) -> Result<Splits> {
    if sizes.total() > d.len() {
        return Err(Error::InvalidArgument(format!(
            "split sizes {}+{}+{} exceed dataset of {} records",
            sizes.calibration,
            sizes.optimization,
            sizes.test,
            d.len()
        )));
    }
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (cal, rest) = order.split_at(sizes.calibration);
    let (opt, rest) = rest.split_at(sizes.optimization);
    Ok(Splits {
        calibration: d.subset(cal),
        optimization: d.subset(opt),
        test: d.subset(&rest[..sizes.test]),
    })
}

/// Knobs of the synthetic score-log generator.
///
/// Gold retrieval scores are drawn from `Normal(retriever_separation, 1)`,
/// distractors from `Normal(0, 1)`. Each record draws its own fidelity from
/// a Beta distribution with mean `generator_fidelity`. At an informative
/// passage (the gold one, and each distractor with probability
/// `distractor_leak`) a response is a surface variant of the correct answer
/// with that probability; otherwise it is one of the passage's wrong
/// answers, picked with passage-specific random weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_records: usize,
    pub k_passages: usize,
    pub m_samples: usize,
    pub retriever_separation: f64,
    /// Mean per-record probability that a sample from an informative
    /// passage is correct.
    pub generator_fidelity: f64,
    /// Per-record fidelities are drawn from a Beta distribution with this
    /// concentration around `generator_fidelity`; larger is more uniform.
    pub fidelity_concentration: f64,
    pub vocabulary_size: usize,
    pub seed: u64,
    /// Probability that a non-gold passage is still informative, i.e. the
    /// generator answers from it as well as from the gold passage.
    pub distractor_leak: f64,
    /// Wrong answers available at each passage.
    pub wrong_answers: usize,
    /// Fraction of records the generator cannot answer at all.
    pub unanswerable_fraction: f64,
    /// Emit an answerability confidence on every record.
    pub abstain_signal: bool,
    /// Give every response a row index `passage_rank * M + sample` into a
    /// `(K*M) x (K*M)` similarity matrix.
    pub precomputed_ids: bool,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_records: 1000,
            k_passages: 20,
            m_samples: 30,
            retriever_separation: 2.0,
            generator_fidelity: 0.7,
            fidelity_concentration: 8.0,
            vocabulary_size: 2000,
            seed: 0,
            distractor_leak: 0.5,
            wrong_answers: 4,
            unanswerable_fraction: 0.0,
            abstain_signal: false,
            precomputed_ids: false,
        }
    }
}

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ra", "tu", "se", "vo", "ne", "pa", "di", "gu", "fe", "zo", "bi", "xa", "wu",
];
const MAX_VOCABULARY: usize = 16 * 16 * 16;

fn vocabulary_word(i: usize) -> String {
    let mut w = String::with_capacity(6);
    for shift in [8, 4, 0] {
        w.push_str(SYLLABLES[(i >> shift) & 0xf]);
    }
    w
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_records == 0 || self.k_passages == 0 || self.m_samples == 0 {
            return bad("n_records, k_passages and m_samples must be positive".into());
        }
        if !(self.retriever_separation.is_finite() && self.retriever_separation >= 0.0) {
            return bad(format!(
                "retriever_separation must be finite and >= 0, got {}",
                self.retriever_separation
            ));
        }
        if !(self.generator_fidelity > 0.0 && self.generator_fidelity <= 1.0) {
            return bad(format!(
                "generator_fidelity must lie in (0, 1], got {}",
                self.generator_fidelity
            ));
        }
        if !(self.fidelity_concentration > 0.0 && self.fidelity_concentration.is_finite()) {
            return bad(format!(
                "fidelity_concentration must be finite and > 0, got {}",
                self.fidelity_concentration
            ));
        }
        if !(8..=MAX_VOCABULARY).contains(&self.vocabulary_size) {
            return bad(format!(
                "vocabulary_size must lie in [8, {MAX_VOCABULARY}], got {}",
                self.vocabulary_size
            ));
        }
        if !(0.0..=1.0).contains(&self.distractor_leak) {
            return bad(format!(
                "distractor_leak must lie in [0, 1], got {}",
                self.distractor_leak
            ));
        }
        if self.wrong_answers == 0 || 2 * (self.wrong_answers + 1) > self.vocabulary_size {
            return bad("wrong_answers must be positive and fit the vocabulary".into());
        }
        if !(0.0..1.0).contains(&self.unanswerable_fraction) {
            return bad(format!(
                "unanswerable_fraction must lie in [0, 1), got {}",
                self.unanswerable_fraction
            ));
        }
        Ok(())
    }
}

struct AnswerPhrase([usize; 2]);

impl AnswerPhrase {
    fn words(&self) -> [String; 2] {
        self.0.map(vocabulary_word)
    }

    /// A casing/punctuation variant; all variants tokenize identically.
    fn render<R: Rng>(&self, rng: &mut R) -> String {
        let [a, b] = self.words();
        let base = match rng.random_range(0..3) {
            0 => format!("{a} {b}"),
            1 => format!("{} {}", capitalize(&a), capitalize(&b)),
            _ => format!("{} {}", a.to_uppercase(), b.to_uppercase()),
        };
        let suffix = ["", ".", "!"].choose(rng).expect("non-empty");
        format!("{base}{suffix}")
    }

    fn canonical(&self) -> String {
        let [a, b] = self.words();
        format!("{} {}", capitalize(&a), capitalize(&b))
    }
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn draw_phrase<R: Rng>(rng: &mut R, vocab: usize, used: &mut HashSet<usize>) -> AnswerPhrase {
    let mut pick = || loop {
        let w = rng.random_range(0..vocab);
        if used.insert(w) {
            return w;
        }
    };
    AnswerPhrase([pick(), pick()])
}

/// Random weights on the simplex (flat Dirichlet).
fn simplex_weights<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

fn pick_weighted<R: Rng>(rng: &mut R, weights: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

fn record_fidelity<R: Rng>(rng: &mut R, cfg: &SyntheticConfig) -> f64 {
    let mu = cfg.generator_fidelity;
    if mu >= 1.0 {
        return 1.0;
    }
    let kappa = cfg.fidelity_concentration;
    // Floor keeps the redraw loop for the gold passage short.
    Beta::new(mu * kappa, (1.0 - mu) * kappa)
        .expect("validated parameters")
        .sample(rng)
        .max(0.01)
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Draws an i.i.d. synthetic dataset; deterministic given the config.
///
/// Answerable records always contain at least one correct response at the
/// gold passage: a gold passage whose samples all missed is redrawn.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (k, m) = (cfg.k_passages, cfg.m_samples);
    let mut records = Vec::with_capacity(cfg.n_records);

    for i in 0..cfg.n_records {
        let question_id = format!("s{}-q{:06}", cfg.seed, i);
        let answerable = rng.random::<f64>() >= cfg.unanswerable_fraction;

        let mut used = HashSet::new();
        let correct = draw_phrase(&mut rng, cfg.vocabulary_size, &mut used);
        // Wrong answers are disjoint from the correct words, so they never
        // pass the correctness check.
        let pool: Vec<AnswerPhrase> = (0..2 * cfg.wrong_answers)
            .map(|_| {
                let mut local = used.clone();
                draw_phrase(&mut rng, cfg.vocabulary_size, &mut local)
            })
            .collect();
        let topic = vocabulary_word(rng.random_range(0..cfg.vocabulary_size));
        let fidelity = record_fidelity(&mut rng, cfg);

        let mut passages: Vec<(f64, bool, Vec<String>)> = Vec::with_capacity(k);
        for j in 0..k {
            let gold = j == 0;
            let z: f64 = StandardNormal.sample(&mut rng);
            let score = if gold {
                z + cfg.retriever_separation
            } else {
                z
            };
            let informative = gold || rng.random::<f64>() < cfg.distractor_leak;
            let p_correct = if answerable && informative {
                fidelity
            } else {
                0.0
            };
            let mut wrong: Vec<usize> = (0..pool.len()).collect();
            wrong.shuffle(&mut rng);
            wrong.truncate(cfg.wrong_answers);
            let weights = simplex_weights(&mut rng, wrong.len());
            let texts = loop {
                let mut any_correct = false;
                let texts: Vec<String> = (0..m)
                    .map(|_| {
                        if rng.random::<f64>() < p_correct {
                            any_correct = true;
                            correct.render(&mut rng)
                        } else {
                            pool[wrong[pick_weighted(&mut rng, &weights)]].render(&mut rng)
                        }
                    })
                    .collect();
                if any_correct || !(gold && answerable) {
                    break texts;
                }
            };
            passages.push((score, gold, texts));
        }
        passages.sort_by(|a, b| b.0.total_cmp(&a.0));

        let mut gold_passage_id = String::new();
        let entries = passages
            .into_iter()
            .enumerate()
            .map(|(rank, (score, gold, texts))| {
                let passage_id = format!("{question_id}-d{rank:02}");
                if gold {
                    gold_passage_id = passage_id.clone();
                }
                PassageEntry {
                    passage_id,
                    retrieval_score: score,
                    responses: texts
                        .into_iter()
                        .enumerate()
                        .map(|(s, text)| Response {
                            text,
                            precomputed_id: cfg.precomputed_ids.then_some(rank * m + s),
                        })
                        .collect(),
                }
            })
            .collect();

        let abstain_confidence = cfg.abstain_signal.then(|| {
            let z: f64 = StandardNormal.sample(&mut rng);
            logistic(if answerable { z - 1.5 } else { z + 1.5 })
        });

        records.push(CalibrationRecord {
            question: format!("Which name is linked to {topic} in record {i}?"),
            question_id,
            gold_passage_id,
            gold_answers: vec![correct.canonical()],
            abstain_confidence,
            passages: entries,
        });
    }
    Dataset::new(m, k, records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semantic::{cluster_responses, SimilarityBackend};

    fn small(seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            n_records: 40,
            k_passages: 5,
            m_samples: 8,
            seed,
            ..Default::default()
        }
    }

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_round_trips_writer_output() {
        let d = generate_synthetic(&SyntheticConfig {
            n_records: 3,
            ..small(1)
        })
        .unwrap();
        let f = write_tmp(&d.to_jsonl());
        let loaded = load_dataset(f.path(), LoadOptions::default()).unwrap();
        assert_eq!(loaded.dataset.len(), 3);
        assert!(loaded.rejected.is_empty());
        assert_eq!(loaded.dataset.to_jsonl(), d.to_jsonl());
    }

    #[test]
    fn header_is_first_line() {
        let d = generate_synthetic(&SyntheticConfig {
            n_records: 1,
            ..Default::default()
        })
        .unwrap();
        let text = d.to_jsonl();
        assert_eq!(
            text.lines().next().unwrap(),
            r#"{"m_samples":30,"k_passages":20,"schema_version":1}"#
        );
    }

    #[test]
    fn missing_gold_passage_is_rejected_and_counted() {
        let d = generate_synthetic(&SyntheticConfig {
            n_records: 3,
            ..small(2)
        })
        .unwrap();
        let mut text = String::new();
        for (i, line) in d.to_jsonl().lines().enumerate() {
            if i == 2 {
                let mut r: CalibrationRecord = serde_json::from_str(line).unwrap();
                r.gold_passage_id = "elsewhere".into();
                text.push_str(&serde_json::to_string(&r).unwrap());
            } else {
                text.push_str(line);
            }
            text.push('\n');
        }
        let f = write_tmp(&text);
        let loaded = load_dataset(f.path(), LoadOptions::default()).unwrap();
        assert_eq!(loaded.dataset.len(), 2);
        assert_eq!(loaded.rejected.len(), 1);
        assert_eq!(loaded.rejected[0].line, 3);
        assert_eq!(
            loaded.rejected[0].assumption,
            Assumption::RetrieverCorrectness
        );
    }

    #[test]
    fn wrong_response_count_names_the_passage() {
        let d = generate_synthetic(&SyntheticConfig {
            n_records: 2,
            ..Default::default()
        })
        .unwrap();
        let mut lines: Vec<String> = d.to_jsonl().lines().map(String::from).collect();
        let mut r: CalibrationRecord = serde_json::from_str(&lines[1]).unwrap();
        r.passages[4].responses.pop();
        let pid = r.passages[4].passage_id.clone();
        lines[1] = serde_json::to_string(&r).unwrap();
        let f = write_tmp(&(lines.join("\n") + "\n"));
        match load_dataset(f.path(), LoadOptions::default()) {
            Err(Error::InvalidRecord { field, message, .. }) => {
                assert_eq!(field, "passages.responses");
                assert!(message.contains(&pid), "{message}");
                assert!(message.contains("29"), "{message}");
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn parse_error_reports_line() {
        let d = generate_synthetic(&SyntheticConfig {
            n_records: 2,
            ..small(3)
        })
        .unwrap();
        let text = d.to_jsonl() + "{not json\n";
        let f = write_tmp(&text);
        match load_dataset(f.path(), LoadOptions::default()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unanswerable_records_filtered_unless_kept() {
        let cfg = SyntheticConfig {
            unanswerable_fraction: 0.5,
            abstain_signal: true,
            ..small(4)
        };
        let d = generate_synthetic(&cfg).unwrap();
        let unanswerable = d
            .records()
            .iter()
            .filter(|r| !r.gold_has_correct_response())
            .count();
        assert!(unanswerable > 0);
        let f = write_tmp(&d.to_jsonl());
        let strict = load_dataset(f.path(), LoadOptions::default()).unwrap();
        assert_eq!(
            strict.rejected_count(Assumption::GeneratorCorrectness),
            unanswerable
        );
        let kept = load_dataset(
            f.path(),
            LoadOptions {
                keep_unanswerable: true,
            },
        )
        .unwrap();
        assert_eq!(kept.dataset.len(), d.len());
    }

    #[test]
    fn duplicate_question_ids_rejected() {
        let d = generate_synthetic(&SyntheticConfig {
            n_records: 1,
            ..small(5)
        })
        .unwrap();
        let r = d.records()[0].clone();
        assert!(Dataset::new(8, 5, vec![r.clone(), r]).is_err());
    }

    #[test]
    fn split_sizes_disjoint_and_deterministic() {
        let d = generate_synthetic(&SyntheticConfig {
            n_records: 1000,
            k_passages: 2,
            m_samples: 2,
            ..Default::default()
        })
        .unwrap();
        let s = split_dataset(&d, SplitSizes::new(300, 300, 400), 7).unwrap();
        assert_eq!(
            (s.calibration.len(), s.optimization.len(), s.test.len()),
            (300, 300, 400)
        );
        let mut all: HashSet<&str> = HashSet::new();
        for part in [&s.calibration, &s.optimization, &s.test] {
            for id in part.question_ids() {
                assert!(all.insert(id));
            }
        }
        let again = split_dataset(&d, SplitSizes::new(300, 300, 400), 7).unwrap();
        assert_eq!(again.test, s.test);
        let other = split_dataset(&d, SplitSizes::new(300, 300, 400), 8).unwrap();
        assert_ne!(other.test, s.test);

        let degenerate = split_dataset(&d, SplitSizes::new(0, 0, 10), 7).unwrap();
        assert!(degenerate.calibration.is_empty() && degenerate.optimization.is_empty());
        assert!(split_dataset(&d, SplitSizes::new(500, 500, 1), 7).is_err());
    }

    #[test]
    fn perfect_fidelity_yields_pure_matching_clusters() {
        let cfg = SyntheticConfig {
            generator_fidelity: 1.0,
            distractor_leak: 1.0,
            n_records: 10,
            ..Default::default()
        };
        let d = generate_synthetic(&cfg).unwrap();
        let backend = SimilarityBackend::rouge1();
        for r in d.records() {
            for p in &r.passages {
                let c = cluster_responses(&p.responses, &backend).unwrap();
                assert_eq!(c.len(), 1);
                assert_eq!(c[0].count, 30);
                assert!(is_correct(&c[0].representative.text, &r.gold_answers));
            }
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(&small(9)).unwrap().to_jsonl();
        let b = generate_synthetic(&small(9)).unwrap().to_jsonl();
        assert_eq!(a, b);
        assert_ne!(a, generate_synthetic(&small(10)).unwrap().to_jsonl());
    }

    #[test]
    fn synthetic_satisfies_assumptions() {
        let d = generate_synthetic(&SyntheticConfig {
            generator_fidelity: 0.05,
            ..small(11)
        })
        .unwrap();
        assert!(d.records().iter().all(|r| r.gold_has_correct_response()));
    }

    #[test]
    fn wrong_answers_never_judged_correct() {
        let d = generate_synthetic(&small(12)).unwrap();
        for r in d.records() {
            let gold = r.gold_index().unwrap();
            for (j, p) in r.passages.iter().enumerate() {
                if j == gold {
                    continue;
                }
                for resp in &p.responses {
                    let ok = is_correct(&resp.text, &r.gold_answers);
                    let exact = crate::semantic::rouge1_f(&resp.text, &r.gold_answers[0]) == 1.0;
                    assert_eq!(ok, exact);
                }
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(SyntheticConfig {
            n_records: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SyntheticConfig {
            generator_fidelity: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SyntheticConfig {
            fidelity_concentration: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SyntheticConfig {
            vocabulary_size: 5,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SyntheticConfig {
            retriever_separation: 0.0,
            ..Default::default()
        }
        .validate()
        .is_ok());
    }

    #[test]
    fn vocabulary_words_are_distinct() {
        let words: HashSet<String> = (0..MAX_VOCABULARY).map(vocabulary_word).collect();
        assert_eq!(words.len(), MAX_VOCABULARY);
    }
}
