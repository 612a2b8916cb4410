//! Budget optimization against a 19-point grid search on the same objective.

use ragset::budget::{
    optimize_budgets_prepared, BudgetObjective, OptimizationReport, OptimizerSettings, SizeMetric,
};
use ragset::data::{generate_synthetic, split_dataset, SplitSizes, SyntheticConfig};
use ragset::eval::evaluate_records;
use ragset::pipeline::{
    calibrate_prepared, BudgetSplit, CalibrationConfig, CoverageMode, PreparedDataset,
};
use ragset::semantic::SimilarityBackend;

/// `(lambda, objective)` at 0.05, 0.10, ..., 0.95; argmin takes the
/// smallest lambda on ties.
fn grid(objective: &BudgetObjective<'_, '_>) -> Vec<(f64, f64)> {
    (0..19)
        .map(|i| {
            let lambda = 0.05 + 0.05 * i as f64;
            (lambda, objective.evaluate(lambda).unwrap())
        })
        .collect()
}

fn argmin(grid: &[(f64, f64)]) -> (f64, f64) {
    grid.iter()
        .copied()
        .fold((f64::NAN, f64::INFINITY), |best, g| {
            if g.1 < best.1 {
                g
            } else {
                best
            }
        })
}

fn optimize(
    opt: &PreparedDataset<'_>,
    alpha: f64,
    settings: &OptimizerSettings,
    seed: u64,
) -> OptimizationReport {
    optimize_budgets_prepared(
        opt,
        alpha,
        settings,
        SizeMetric::SemanticCount,
        CoverageMode::Conformal,
        false,
        seed,
    )
    .unwrap()
}

#[test]
fn symmetric_stages_split_evenly() {
    let backend = SimilarityBackend::rouge1();
    let alpha = 0.2;
    for seed in [0, 1] {
        let data = generate_synthetic(&SyntheticConfig {
            n_records: 2000,
            retriever_separation: 4.0,
            generator_fidelity: 0.7,
            seed,
            ..Default::default()
        })
        .unwrap();
        let opt = PreparedDataset::new(&data, &backend).unwrap();
        let objective = BudgetObjective::new(
            &opt,
            alpha,
            SizeMetric::SemanticCount,
            CoverageMode::Conformal,
            false,
        );
        let (grid_lambda, _) = argmin(&grid(&objective));
        let report = optimize(&opt, alpha, &OptimizerSettings::default(), seed);
        assert!(
            (grid_lambda - 0.5).abs() <= 0.15 + 1e-9,
            "seed {seed}: grid argmin {grid_lambda}"
        );
        assert!(
            (report.best_lambda - 0.5).abs() <= 0.15 + 1e-9,
            "seed {seed}: lambda {}",
            report.best_lambda
        );
    }
}

#[test]
fn easy_retrieval_gets_the_smaller_budget() {
    let backend = SimilarityBackend::rouge1();
    for seed in 0..3 {
        let data = generate_synthetic(&SyntheticConfig {
            retriever_separation: 6.0,
            generator_fidelity: 0.55,
            seed,
            ..Default::default()
        })
        .unwrap();
        let splits = split_dataset(&data, SplitSizes::new(300, 300, 400), seed).unwrap();
        let opt = PreparedDataset::new(&splits.optimization, &backend).unwrap();
        let cal = PreparedDataset::new(&splits.calibration, &backend).unwrap();
        let test = PreparedDataset::new(&splits.test, &backend).unwrap();
        let alpha = 0.1;
        let objective = BudgetObjective::new(
            &opt,
            alpha,
            SizeMetric::SemanticCount,
            CoverageMode::Conformal,
            false,
        );
        let (_, grid_min) = argmin(&grid(&objective));
        let report = optimize(&opt, alpha, &OptimizerSettings::default(), seed);
        assert!(
            report.best_lambda < 0.5,
            "seed {seed}: lambda {}",
            report.best_lambda
        );
        assert!(report.best_objective <= 1.05 * grid_min);

        let size = |budget: BudgetSplit| {
            let t = calibrate_prepared(&cal, &CalibrationConfig::conformal(budget)).unwrap();
            t.check_disjoint(&splits.test).unwrap();
            evaluate_records(&test, &t).unwrap().1.avg_semantic_count
        };
        assert!(size(report.best_budget) <= size(BudgetSplit::even(alpha).unwrap()));
    }
}

#[test]
fn report_is_the_best_trace_entry() {
    let backend = SimilarityBackend::rouge1();
    let data = generate_synthetic(&SyntheticConfig {
        n_records: 300,
        seed: 9,
        ..Default::default()
    })
    .unwrap();
    let opt = PreparedDataset::new(&data, &backend).unwrap();
    let settings = OptimizerSettings {
        iterations: 10,
        ..Default::default()
    };
    let report = optimize(&opt, 0.2, &settings, 9);
    // the initial design comes first, then one entry per iteration
    assert_eq!(report.trace.len(), settings.initial_points + 10);
    assert_eq!(report.t_iterations, 10);
    let best = report
        .trace
        .iter()
        .map(|e| e.objective)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(report.best_objective, best);
    let budget = report.best_budget;
    assert!((budget.total() - 0.2).abs() < 1e-12);
    assert!((budget.alpha_ret - 0.2 * report.best_lambda).abs() < 1e-12);
    for e in &report.trace {
        assert!((0.05..=0.95).contains(&e.lambda));
    }
}

#[test]
fn single_iteration_is_deterministic() {
    let backend = SimilarityBackend::rouge1();
    let data = generate_synthetic(&SyntheticConfig {
        n_records: 200,
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let opt = PreparedDataset::new(&data, &backend).unwrap();
    let settings = OptimizerSettings {
        iterations: 1,
        ..Default::default()
    };
    let a = optimize(&opt, 0.2, &settings, 42);
    let b = optimize(&opt, 0.2, &settings, 42);
    assert_eq!(a, b);
    assert_eq!(a.trace.len(), settings.initial_points + 1);
}
