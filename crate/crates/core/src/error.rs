use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid record {question_id}: {field}: {message}")]
    InvalidRecord {
        question_id: String,
        field: String,
        message: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// No violation count satisfies the binomial tail bound for this
    /// calibration size.
    #[error(
        "calibration set too small for PAC (alpha={alpha}, delta={delta}): n={n}{}",
        match .min_n { Some(m) => format!(", need n >= {m}"), None => String::new() }
    )]
    PacInfeasible {
        n: usize,
        alpha: f64,
        delta: f64,
        min_n: Option<usize>,
    },

    #[error("record {question_id}: gold passage {gold_passage_id} is not among the retrieved candidates")]
    GoldPassageMissing {
        question_id: String,
        gold_passage_id: String,
    },

    #[error("record {question_id}: no correct response at gold passage {passage_id}")]
    NoCorrectResponse {
        question_id: String,
        passage_id: String,
    },

    #[error("response has no precomputed similarity id")]
    MissingPrecomputedId,

    #[error("precomputed similarity id {id} outside matrix of dimension {dim}")]
    PrecomputedIdOutOfRange { id: usize, dim: usize },

    #[error("question {0} appears in both the calibration and the evaluation split")]
    SplitOverlap(String),

    #[error("provenance mismatch: {0}")]
    ProvenanceMismatch(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
