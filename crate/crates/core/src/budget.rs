//! Bayesian optimization of the retriever/generator budget split.
//!
//! The search runs over a single variable `lambda = alpha_ret / alpha`, so
//! every candidate split sums to `alpha` exactly and the end-to-end
//! guarantee holds whichever split is returned. Each candidate is scored by
//! calibrating on the optimization set and measuring the average aggregated
//! set size on that same set.
//!
//! The surrogate is an exact Gaussian process with a squared-exponential
//! kernel; the next candidate maximizes expected improvement over a dense
//! grid of `lambda` values plus a few seeded random points.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::data::Dataset;
use crate::eval::evaluate_records;
use crate::pipeline::{
    calibrate_prepared, BudgetSplit, CalibrationConfig, CoverageMode, PreparedDataset,
};
use crate::semantic::SimilarityBackend;
use crate::{Error, Result};

/// Which aggregated-set size to minimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SizeMetric {
    #[default]
    SemanticCount,
    UniqueAnswers,
}

/// GP regression state over `lambda`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSurrogate {
    observed: Vec<(f64, f64)>,
    counts: Vec<usize>,
    pub kernel_lengthscale: f64,
    pub kernel_variance: f64,
    pub noise_variance: f64,
}

impl GaussianSurrogate {
    pub fn new(kernel_lengthscale: f64, kernel_variance: f64, noise_variance: f64) -> Result<Self> {
        if !(kernel_lengthscale > 0.0 && kernel_variance > 0.0 && noise_variance >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "bad GP hyperparameters: lengthscale {kernel_lengthscale}, \
                 variance {kernel_variance}, noise {noise_variance}"
            )));
        }
        Ok(Self {
            observed: Vec::new(),
            counts: Vec::new(),
            kernel_lengthscale,
            kernel_variance,
            noise_variance,
        })
    }

    /// Adds an observation; a repeated `lambda` is merged into the running
    /// average of its objective.
    pub fn observe(&mut self, lambda: f64, objective: f64) {
        match self.observed.iter().position(|(l, _)| *l == lambda) {
            Some(i) => {
                let n = self.counts[i] as f64;
                self.observed[i].1 = (self.observed[i].1 * n + objective) / (n + 1.0);
                self.counts[i] += 1;
            }
            None => {
                self.observed.push((lambda, objective));
                self.counts.push(1);
            }
        }
    }

    pub fn observed(&self) -> &[(f64, f64)] {
        &self.observed
    }

    fn kernel(&self, a: f64, b: f64) -> f64 {
        let d = (a - b) / self.kernel_lengthscale;
        self.kernel_variance * (-0.5 * d * d).exp()
    }
}

fn cholesky_with_jitter(
    k: &DMatrix<f64>,
    scale: f64,
) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    for jitter in [0.0, 1e-12, 1e-10, 1e-8, 1e-6, 1e-4] {
        let mut kj = k.clone();
        for i in 0..kj.nrows() {
            kj[(i, i)] += jitter * scale;
        }
        if let Some(c) = kj.cholesky() {
            return Ok(c);
        }
    }
    Err(Error::Numerical(
        "kernel matrix not positive definite after jitter escalation".into(),
    ))
}

/// Posterior mean and variance at each query point.
///
/// The prior mean is the average observed objective, so the posterior
/// reverts to it away from the data.
pub fn gp_fit_predict(surrogate: &GaussianSurrogate, query: &[f64]) -> Result<Vec<(f64, f64)>> {
    let obs = &surrogate.observed;
    if obs.is_empty() {
        return Err(Error::InvalidArgument(
            "GP needs at least one observation".into(),
        ));
    }
    let n = obs.len();
    let prior_mean = obs.iter().map(|(_, y)| y).sum::<f64>() / n as f64;
    let k = DMatrix::from_fn(n, n, |i, j| {
        surrogate.kernel(obs[i].0, obs[j].0)
            + if i == j {
                surrogate.noise_variance
            } else {
                0.0
            }
    });
    let chol = cholesky_with_jitter(&k, surrogate.kernel_variance)?;
    let resid = DVector::from_iterator(n, obs.iter().map(|(_, y)| y - prior_mean));
    let weights = chol.solve(&resid);
    Ok(query
        .iter()
        .map(|&q| {
            let ks = DVector::from_iterator(n, obs.iter().map(|(x, _)| surrogate.kernel(*x, q)));
            let mean = prior_mean + ks.dot(&weights);
            let v = chol.solve(&ks);
            let var = (surrogate.kernel(q, q) - ks.dot(&v)).max(0.0);
            (mean, var)
        })
        .collect())
}

/// Expected improvement below `best_so_far` for a Gaussian prediction.
pub fn expected_improvement(mean: f64, variance: f64, best_so_far: f64) -> f64 {
    let gain = best_so_far - mean;
    let sigma = variance.max(0.0).sqrt();
    if sigma <= 0.0 {
        return gain.max(0.0);
    }
    let z = gain / sigma;
    let std = Normal::standard();
    (gain * std.cdf(z) + sigma * std.pdf(z)).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSettings {
    /// Guided iterations after the initial design.
    pub iterations: usize,
    pub initial_points: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub lengthscale: f64,
    pub noise_variance: f64,
    /// Evenly spaced acquisition candidates over `[lambda_min, lambda_max]`.
    pub grid_points: usize,
    /// Extra seeded uniform candidates per iteration.
    pub random_candidates: usize,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            iterations: 25,
            initial_points: 5,
            lambda_min: 0.05,
            lambda_max: 0.95,
            lengthscale: 0.2,
            noise_variance: 1e-6,
            grid_points: 181,
            random_candidates: 16,
        }
    }
}

impl OptimizerSettings {
    fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.initial_points == 0 || self.grid_points < 2 {
            return Err(Error::InvalidArgument(
                "iterations, initial_points must be >= 1 and grid_points >= 2".into(),
            ));
        }
        if !(0.0 < self.lambda_min && self.lambda_min < self.lambda_max && self.lambda_max < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "lambda range [{}, {}] must lie inside (0, 1)",
                self.lambda_min, self.lambda_max
            )));
        }
        Ok(())
    }

    fn spaced(&self, n: usize) -> Vec<f64> {
        if n == 1 {
            return vec![0.5 * (self.lambda_min + self.lambda_max)];
        }
        let step = (self.lambda_max - self.lambda_min) / (n - 1) as f64;
        (0..n).map(|i| self.lambda_min + step * i as f64).collect()
    }

    /// The initial space-filling design: evenly spaced `lambda` values.
    pub fn initial_design(&self) -> Vec<f64> {
        self.spaced(self.initial_points)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub lambda: f64,
    pub alpha_ret: f64,
    pub alpha_llm: f64,
    #[serde(with = "crate::serde_ext::extended")]
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationReport {
    pub best_budget: BudgetSplit,
    pub best_lambda: f64,
    #[serde(with = "crate::serde_ext::extended")]
    pub best_objective: f64,
    pub t_iterations: usize,
    pub trace: Vec<TraceEntry>,
}

#[derive(Serialize, Deserialize)]
struct TraceHeader {
    best_budget: BudgetSplit,
    best_lambda: f64,
    #[serde(with = "crate::serde_ext::extended")]
    best_objective: f64,
    t_iterations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
}

impl OptimizationReport {
    /// One summary line, then one line per evaluated candidate.
    pub fn write_trace<W: Write>(&self, w: W) -> Result<()> {
        self.write_trace_with_provenance(w, None)
    }

    pub fn write_trace_with_provenance<W: Write>(
        &self,
        mut w: W,
        provenance: Option<&serde_json::Value>,
    ) -> Result<()> {
        serde_json::to_writer(
            &mut w,
            &TraceHeader {
                best_budget: self.best_budget,
                best_lambda: self.best_lambda,
                best_objective: self.best_objective,
                t_iterations: self.t_iterations,
                provenance: provenance.cloned(),
            },
        )?;
        w.write_all(b"\n")?;
        for e in &self.trace {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_trace(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: TraceHeader = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::InvalidArgument("empty trace".into()))?,
        )?;
        let trace = lines
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect::<Result<Vec<TraceEntry>>>()?;
        Ok(Self {
            best_budget: header.best_budget,
            best_lambda: header.best_lambda,
            best_objective: header.best_objective,
            t_iterations: header.t_iterations,
            trace,
        })
    }
}

/// Average aggregated-set size as a function of `lambda`, with thresholds
/// calibrated and scored on the same records.
pub struct BudgetObjective<'p, 'a> {
    data: &'p PreparedDataset<'a>,
    alpha: f64,
    metric: SizeMetric,
    mode: CoverageMode,
    abstain: bool,
}

impl<'p, 'a> BudgetObjective<'p, 'a> {
    pub fn new(
        data: &'p PreparedDataset<'a>,
        alpha: f64,
        metric: SizeMetric,
        mode: CoverageMode,
        abstain: bool,
    ) -> Self {
        Self {
            data,
            alpha,
            metric,
            mode,
            abstain,
        }
    }

    /// Objective at `lambda`; `+inf` when PAC calibration is infeasible.
    pub fn evaluate(&self, lambda: f64) -> Result<f64> {
        let budget = BudgetSplit::from_fraction(self.alpha, lambda)?;
        let config = CalibrationConfig {
            budget,
            mode: self.mode,
            abstain: self.abstain,
        };
        let thresholds = match calibrate_prepared(self.data, &config) {
            Ok(t) => t,
            Err(Error::PacInfeasible { .. }) => return Ok(f64::INFINITY),
            Err(e) => return Err(e),
        };
        let (_, sizes) = evaluate_records(self.data, &thresholds)?;
        Ok(sizes.average(self.metric))
    }
}

fn better(a: &TraceEntry, b: &TraceEntry) -> bool {
    a.objective < b.objective || (a.objective == b.objective && a.lambda < b.lambda)
}

/// Stand-in value for infeasible points so the GP can still be fitted.
fn surrogate_targets(trace: &[TraceEntry]) -> Vec<(f64, f64)> {
    let finite: Vec<f64> = trace
        .iter()
        .map(|e| e.objective)
        .filter(|o| o.is_finite())
        .collect();
    let (lo, hi) = finite
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    let penalty = if finite.is_empty() {
        0.0
    } else {
        hi + (hi - lo).max(1.0)
    };
    trace
        .iter()
        .map(|e| {
            (
                e.lambda,
                if e.objective.is_finite() {
                    e.objective
                } else {
                    penalty
                },
            )
        })
        .collect()
}

/// Runs the optimization loop on clustered optimization records.
pub fn optimize_budgets_prepared(
    opt: &PreparedDataset<'_>,
    alpha: f64,
    settings: &OptimizerSettings,
    metric: SizeMetric,
    mode: CoverageMode,
    abstain: bool,
    seed: u64,
) -> Result<OptimizationReport> {
    settings.validate()?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    if opt.records.is_empty() {
        return Err(Error::InvalidArgument("empty optimization set".into()));
    }
    let objective = BudgetObjective::new(opt, alpha, metric, mode, abstain);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trace: Vec<TraceEntry> = Vec::new();
    let record = |iteration: usize, lambda: f64, trace: &mut Vec<TraceEntry>| -> Result<()> {
        let budget = BudgetSplit::from_fraction(alpha, lambda)?;
        trace.push(TraceEntry {
            iteration,
            lambda,
            alpha_ret: budget.alpha_ret,
            alpha_llm: budget.alpha_llm,
            objective: objective.evaluate(lambda)?,
        });
        Ok(())
    };

    for lambda in settings.initial_design() {
        record(0, lambda, &mut trace)?;
    }

    let grid = settings.spaced(settings.grid_points);
    for iteration in 1..=settings.iterations {
        let mut candidates = grid.clone();
        candidates.extend(
            (0..settings.random_candidates)
                .map(|_| rng.random_range(settings.lambda_min..=settings.lambda_max)),
        );
        candidates.retain(|c| trace.iter().all(|e| (e.lambda - c).abs() > 1e-9));
        if candidates.is_empty() {
            break;
        }

        let targets = surrogate_targets(&trace);
        let ys: Vec<f64> = targets.iter().map(|t| t.1).collect();
        let m = ys.iter().sum::<f64>() / ys.len() as f64;
        let var = ys.iter().map(|y| (y - m).powi(2)).sum::<f64>() / ys.len() as f64;
        let mut gp = GaussianSurrogate::new(
            settings.lengthscale,
            if var > 1e-12 { var } else { 1.0 },
            settings.noise_variance,
        )?;
        for (l, y) in targets {
            gp.observe(l, y);
        }
        let best = ys.iter().copied().fold(f64::INFINITY, f64::min);
        let post = gp_fit_predict(&gp, &candidates)?;

        let pick = |score: &dyn Fn(f64, f64) -> f64| {
            candidates
                .iter()
                .zip(&post)
                .map(|(&c, &(mu, v))| (c, score(mu, v)))
                .fold((f64::NAN, f64::NEG_INFINITY), |acc, (c, s)| {
                    if s > acc.1 || (s == acc.1 && c < acc.0) {
                        (c, s)
                    } else {
                        acc
                    }
                })
        };
        let (mut next, ei) = pick(&|mu, v| expected_improvement(mu, v, best));
        if ei.is_nan() || ei <= 1e-12 {
            // No expected gain anywhere: explore where the surrogate knows least.
            next = pick(&|_, v| v).0;
        }
        record(iteration, next, &mut trace)?;
    }

    let best = trace
        .iter()
        .fold(None::<&TraceEntry>, |acc, e| match acc {
            Some(b) if !better(e, b) => Some(b),
            _ => Some(e),
        })
        .copied()
        .expect("initial design is non-empty");
    Ok(OptimizationReport {
        best_budget: BudgetSplit::from_fraction(alpha, best.lambda)?,
        best_lambda: best.lambda,
        best_objective: best.objective,
        t_iterations: settings.iterations,
        trace,
    })
}

/// Clusters the optimization set and runs [`optimize_budgets_prepared`].
#[allow(clippy::too_many_arguments)]
pub fn optimize_budgets(
    opt: &Dataset,
    alpha: f64,
    settings: &OptimizerSettings,
    metric: SizeMetric,
    mode: CoverageMode,
    abstain: bool,
    backend: &SimilarityBackend,
    seed: u64,
) -> Result<OptimizationReport> {
    let prepared = PreparedDataset::new(opt, backend)?;
    optimize_budgets_prepared(&prepared, alpha, settings, metric, mode, abstain, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gp(points: &[(f64, f64)], variance: f64) -> GaussianSurrogate {
        let mut g = GaussianSurrogate::new(0.2, variance, 0.0).unwrap();
        for &(l, y) in points {
            g.observe(l, y);
        }
        g
    }

    #[test]
    fn interpolates_single_datum() {
        let p = gp_fit_predict(&gp(&[(0.5, 3.0)], 1.0), &[0.5]).unwrap();
        assert!((p[0].0 - 3.0).abs() < 1e-9);
        assert!(p[0].1 < 1e-9);
    }

    #[test]
    fn reverts_to_prior_far_away() {
        let p = gp_fit_predict(&gp(&[(0.5, 3.0), (0.6, 5.0)], 2.0), &[50.0]).unwrap();
        assert!((p[0].0 - 4.0).abs() < 1e-9);
        assert!((p[0].1 - 2.0).abs() < 1e-9);
    }

    #[test]
    fn symmetric_pair_midpoint_is_average() {
        // closed form: mean = m + k* (y1 - m + y2 - m) / (k0 + k12) = m
        let p = gp_fit_predict(&gp(&[(0.3, 1.0), (0.7, 5.0)], 1.0), &[0.5]).unwrap();
        assert!((p[0].0 - 3.0).abs() < 1e-9);
        // variance: k0 - 2 k*^2 / (k0 + k12)
        let k = |d: f64| (-0.5 * (d / 0.2f64).powi(2)).exp();
        let expected = 1.0 - 2.0 * k(0.2).powi(2) / (1.0 + k(0.4));
        assert!((p[0].1 - expected).abs() < 1e-9);
    }

    #[test]
    fn duplicates_are_averaged() {
        let g = gp(&[(0.4, 1.0), (0.4, 3.0), (0.6, 2.0)], 1.0);
        assert_eq!(g.observed(), &[(0.4, 2.0), (0.6, 2.0)]);
    }

    #[test]
    fn empty_surrogate_is_an_error() {
        assert!(gp_fit_predict(&gp(&[], 1.0), &[0.5]).is_err());
        assert!(GaussianSurrogate::new(0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn near_duplicate_points_need_jitter() {
        let g = gp(&[(0.5, 1.0), (0.5 + 1e-12, 1.1)], 1.0);
        let p = gp_fit_predict(&g, &[0.5]).unwrap();
        assert!(p[0].0.is_finite());
    }

    #[test]
    fn expected_improvement_examples() {
        assert_eq!(expected_improvement(2.0, 0.0, 3.0), 1.0);
        assert_eq!(expected_improvement(3.0, 0.0, 3.0), 0.0);
        assert_eq!(expected_improvement(4.0, 0.0, 3.0), 0.0);
        let phi0 = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!((expected_improvement(3.0, 1.0, 3.0) - phi0).abs() < 1e-12);
        assert!((phi0 - 0.398942).abs() < 1e-6);
        assert!(expected_improvement(10.0, 1.0, 0.0) >= 0.0);
    }

    #[test]
    fn initial_design_is_evenly_spaced() {
        let d = OptimizerSettings::default().initial_design();
        let want = [0.05, 0.275, 0.5, 0.725, 0.95];
        assert_eq!(d.len(), 5);
        for (a, b) in d.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn trace_round_trip() {
        let report = OptimizationReport {
            best_budget: BudgetSplit::from_fraction(0.2, 0.3).unwrap(),
            best_lambda: 0.3,
            best_objective: 2.5,
            t_iterations: 1,
            trace: vec![
                TraceEntry {
                    iteration: 0,
                    lambda: 0.3,
                    alpha_ret: 0.06,
                    alpha_llm: 0.14,
                    objective: 2.5,
                },
                TraceEntry {
                    iteration: 1,
                    lambda: 0.05,
                    alpha_ret: 0.01,
                    alpha_llm: 0.19,
                    objective: f64::INFINITY,
                },
            ],
        };
        let mut buf = Vec::new();
        report.write_trace(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains("\"inf\""));
        assert_eq!(OptimizationReport::read_trace(&text).unwrap(), report);
    }
}
