//! Coverage and set size across target levels, averaged over seeds.
//!
//! ```text
//! cargo run --release --example coverage_sweep
//! ```

use ragset::data::{SplitSizes, SyntheticConfig};
use ragset::eval::{run_trials, BudgetChoice, TrialConfig, TrialSource};
use ragset::pipeline::CoverageMode;
use ragset::semantic::SimilarityBackend;

fn main() {
    println!("target  seeds  retriever  generator  decomposed  aggregated  size");
    for alpha in [0.1, 0.2, 0.3, 0.4, 0.5] {
        let run = run_trials(
            &TrialConfig {
                source: TrialSource::Synthetic(SyntheticConfig {
                    n_records: 700,
                    ..Default::default()
                }),
                splits: SplitSizes::new(300, 0, 400),
                alpha,
                mode: CoverageMode::Conformal,
                budget: BudgetChoice::Even,
                backend: SimilarityBackend::rouge1(),
                abstain: false,
                base_seed: 0,
            },
            5,
        );
        let s = &run.summary;
        println!(
            "{:<6.2}  {:<5}  {:<9.3}  {:<9.3}  {:<10.3}  {:<10.3}  {:.2}",
            1.0 - alpha,
            s.n_ok,
            s.retriever_coverage.mean,
            s.llm_coverage.mean,
            s.e2e_relevant_only.mean,
            s.e2e_aggregated.mean,
            s.avg_semantic_count.mean
        );
    }
}
