//! Letting the set say "I do not know".
//!
//! A third of the questions cannot be answered by the generator. An extra
//! threshold on an answerability confidence adds "I do not know" to the
//! set, so that truth coverage holds over the whole population.
//!
//! ```text
//! cargo run --release --example abstention
//! ```

use ragset::data::{generate_synthetic, split_dataset, SplitSizes, SyntheticConfig};
use ragset::eval::evaluate_records;
use ragset::pipeline::{
    calibrate_prepared, BudgetSplit, CalibrationConfig, CoverageMode, PreparedDataset,
};
use ragset::semantic::SimilarityBackend;

fn main() -> ragset::Result<()> {
    let backend = SimilarityBackend::rouge1();
    let data = generate_synthetic(&SyntheticConfig {
        n_records: 700,
        unanswerable_fraction: 0.3,
        abstain_signal: true,
        seed: 8,
        ..Default::default()
    })?;
    let splits = split_dataset(&data, SplitSizes::new(300, 0, 400), 8)?;
    let cal = PreparedDataset::new(&splits.calibration, &backend)?;
    let test = PreparedDataset::new(&splits.test, &backend)?;

    for alpha in [0.1, 0.2] {
        let t = calibrate_prepared(
            &cal,
            &CalibrationConfig {
                budget: BudgetSplit::even(alpha)?,
                mode: CoverageMode::Conformal,
                abstain: true,
            },
        )?;
        let tau_ign = t.tau_ign.as_ref().map_or(f64::NAN, |t| t.tau);
        let (coverage, sizes) = evaluate_records(&test, &t)?;
        println!(
            "alpha={alpha}: tau_ign {tau_ign:.4}, coverage {:.3}, abstain coverage {:.3}, set size {:.3}",
            coverage.e2e_aggregated,
            coverage.abstain_coverage.unwrap_or(f64::NAN),
            sizes.avg_semantic_count
        );
    }
    Ok(())
}
