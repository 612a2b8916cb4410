//! Conformal and PAC thresholds over nonconformity scores.
//!
//! Scores follow the nonconformity convention throughout: lower means a
//! candidate agrees better with the input, and a prediction set keeps every
//! candidate whose score is `<= tau`. Scoring functions where higher is
//! better (as in the usual PAC formulation) are handled by negating them
//! before they reach this module.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A nonconformity score: finite, or `+inf` for "never admitted unless the
/// set is all-inclusive". NaN and `-inf` are rejected.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct NonconformityScore(f64);

impl NonconformityScore {
    pub const INFINITY: Self = Self(f64::INFINITY);

    pub fn new(value: f64) -> Result<Self> {
        if value.is_nan() || value == f64::NEG_INFINITY {
            return Err(Error::InvalidArgument(format!(
                "nonconformity score must be finite or +inf, got {value}"
            )));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_finite(self) -> bool {
        self.0.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    Conformal,
    Pac,
}

/// A calibrated cut on nonconformity scores, together with the inputs that
/// produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalThreshold {
    #[serde(with = "crate::serde_ext::extended")]
    pub tau: f64,
    pub alpha: f64,
    pub n_calibration: usize,
    pub mode: ThresholdMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_star: Option<usize>,
}

impl ConformalThreshold {
    /// Whether a candidate with this score belongs in the prediction set.
    pub fn admits(&self, score: NonconformityScore) -> bool {
        score.0 <= self.tau
    }

    pub fn is_all_inclusive(&self) -> bool {
        self.tau == f64::INFINITY
    }
}

fn check_unit_open(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "{name} must lie in (0, 1), got {v}"
        )))
    }
}

/// Sorted score values. `+inf` entries are kept: they sort last, and a
/// rank landing on one yields the all-inclusive threshold.
fn sorted_scores(scores: &[NonconformityScore]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument(
            "empty calibration score list".into(),
        ));
    }
    let mut values: Vec<f64> = scores.iter().map(|s| s.0).collect();
    values.sort_by(f64::total_cmp);
    Ok(values)
}

/// Rank (1-indexed) of the calibration score used as the conformal
/// threshold: `ceil((1 - alpha) * (n + 1))`.
///
/// Products that land within rounding error of an integer are treated as
/// that integer, so `alpha = 0.2, n = 9` gives rank 8 rather than 9.
pub fn conformal_rank(n: usize, alpha: f64) -> usize {
    let x = (1.0 - alpha) * (n as f64 + 1.0);
    let nearest = x.round();
    if (x - nearest).abs() <= 1e-9 * x.max(1.0) {
        nearest as usize
    } else {
        x.ceil() as usize
    }
}

/// Split-conformal threshold: the `ceil((1-alpha)(n+1))`-th smallest score,
/// or `+inf` when that rank exceeds `n`.
pub fn conformal_threshold(
    scores: &[NonconformityScore],
    alpha: f64,
) -> Result<ConformalThreshold> {
    check_unit_open("alpha", alpha)?;
    let sorted = sorted_scores(scores)?;
    let n = sorted.len();
    let rank = conformal_rank(n, alpha);
    let tau = if rank > n {
        f64::INFINITY
    } else {
        sorted[rank.max(1) - 1]
    };
    Ok(ConformalThreshold {
        tau,
        alpha,
        n_calibration: n,
        mode: ThresholdMode::Conformal,
        delta: None,
        k_star: None,
    })
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Running binomial CDF `F(0), F(1), ...` accumulated in log space.
struct BinomialCdfScan {
    n: usize,
    k: usize,
    log_pmf: f64,
    log_cdf: f64,
    log_odds: f64,
}

impl BinomialCdfScan {
    /// Requires `0 < p < 1`.
    fn new(n: usize, p: f64) -> Self {
        let log_pmf = n as f64 * (-p).ln_1p();
        Self {
            n,
            k: 0,
            log_pmf,
            log_cdf: log_pmf,
            log_odds: p.ln() - (-p).ln_1p(),
        }
    }

    fn cdf(&self) -> f64 {
        self.log_cdf.exp().min(1.0)
    }

    fn advance(&mut self) -> bool {
        if self.k >= self.n {
            return false;
        }
        self.k += 1;
        let k = self.k as f64;
        self.log_pmf += ((self.n as f64 - k + 1.0) / k).ln() + self.log_odds;
        self.log_cdf = log_add_exp(self.log_cdf, self.log_pmf);
        true
    }
}

/// `P[Binomial(n, p) <= k]`, summed exactly in log space.
pub fn binomial_cdf(k: usize, n: usize, p: f64) -> Result<f64> {
    if k > n {
        return Err(Error::InvalidArgument(format!("k={k} exceeds n={n}")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "p must lie in [0, 1], got {p}"
        )));
    }
    if k == n || p == 0.0 {
        return Ok(1.0);
    }
    if p == 1.0 {
        return Ok(0.0);
    }
    let mut scan = BinomialCdfScan::new(n, p);
    while scan.k < k {
        scan.advance();
    }
    Ok(scan.cdf())
}

/// Largest violation count `k` with `F(k; n, alpha) <= delta`.
///
/// Fails with [`Error::PacInfeasible`] when even `k = 0` exceeds the bound;
/// the error carries the smallest `n` for which `k = 0` would be admissible.
pub fn pac_k_star(n: usize, alpha: f64, delta: f64) -> Result<usize> {
    check_unit_open("alpha", alpha)?;
    check_unit_open("delta", delta)?;
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    let mut scan = BinomialCdfScan::new(n, alpha);
    if scan.cdf() > delta {
        let min_n = (delta.ln() / (-alpha).ln_1p()).ceil();
        return Err(Error::PacInfeasible {
            n,
            alpha,
            delta,
            min_n: min_n.is_finite().then_some(min_n as usize),
        });
    }
    let mut best = 0;
    while scan.advance() {
        if scan.cdf() > delta {
            break;
        }
        best = scan.k;
    }
    Ok(best)
}

/// PAC threshold: the smallest `tau` leaving at most `k*` calibration
/// scores strictly above it, i.e. the `(n - k*)`-th smallest score.
pub fn pac_threshold(
    scores: &[NonconformityScore],
    alpha: f64,
    delta: f64,
) -> Result<ConformalThreshold> {
    check_unit_open("alpha", alpha)?;
    check_unit_open("delta", delta)?;
    let sorted = sorted_scores(scores)?;
    let n = sorted.len();
    let k_star = pac_k_star(n, alpha, delta)?;
    // F(n; n, alpha) = 1 > delta, so k* < n.
    debug_assert!(k_star < n);
    Ok(ConformalThreshold {
        tau: sorted[n - k_star - 1],
        alpha,
        n_calibration: n,
        mode: ThresholdMode::Pac,
        delta: Some(delta),
        k_star: Some(k_star),
    })
}

/// Keeps the items whose score is `<= tau`, in input order.
pub fn construct_set<T>(
    candidates: impl IntoIterator<Item = (T, NonconformityScore)>,
    threshold: &ConformalThreshold,
) -> Vec<T> {
    candidates
        .into_iter()
        .filter(|(_, s)| threshold.admits(*s))
        .map(|(item, _)| item)
        .collect()
}
