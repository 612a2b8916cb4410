//! Splitting the miscoverage budget between retriever and generator.
//!
//! On a scenario where retrieval is easy and generation is noisy, Bayesian
//! optimization over `lambda = alpha_ret / alpha` finds a split with smaller
//! sets than the even split. Thresholds are then recalibrated on a separate
//! split and compared on held-out data.
//!
//! ```text
//! cargo run --release --example budget_optimization
//! ```

use ragset::budget::{optimize_budgets_prepared, OptimizerSettings, SizeMetric};
use ragset::data::{generate_synthetic, split_dataset, SplitSizes, SyntheticConfig};
use ragset::eval::evaluate_records;
use ragset::pipeline::{
    calibrate_prepared, BudgetSplit, CalibrationConfig, CoverageMode, PreparedDataset,
};
use ragset::semantic::SimilarityBackend;

fn main() -> ragset::Result<()> {
    let backend = SimilarityBackend::rouge1();
    let data = generate_synthetic(&SyntheticConfig {
        retriever_separation: 6.0,
        generator_fidelity: 0.55,
        seed: 1,
        ..Default::default()
    })?;
    let splits = split_dataset(&data, SplitSizes::new(300, 300, 400), 1)?;
    let opt = PreparedDataset::new(&splits.optimization, &backend)?;
    let cal = PreparedDataset::new(&splits.calibration, &backend)?;
    let test = PreparedDataset::new(&splits.test, &backend)?;

    let alpha = 0.1;
    let report = optimize_budgets_prepared(
        &opt,
        alpha,
        &OptimizerSettings::default(),
        SizeMetric::SemanticCount,
        CoverageMode::Conformal,
        false,
        1,
    )?;
    println!("iter  lambda  objective");
    for e in &report.trace {
        println!("{:>4}  {:.4}  {:.4}", e.iteration, e.lambda, e.objective);
    }
    println!(
        "best lambda {:.4}: alpha_ret {:.4}, alpha_llm {:.4}",
        report.best_lambda, report.best_budget.alpha_ret, report.best_budget.alpha_llm
    );

    for (name, budget) in [
        ("even", BudgetSplit::even(alpha)?),
        ("optimized", report.best_budget),
    ] {
        let t = calibrate_prepared(&cal, &CalibrationConfig::conformal(budget))?;
        let (coverage, sizes) = evaluate_records(&test, &t)?;
        println!(
            "{name:<9}  test coverage {:.3}  average set size {:.3}",
            coverage.e2e_aggregated, sizes.avg_semantic_count
        );
    }
    Ok(())
}
