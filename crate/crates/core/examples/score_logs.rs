//! Writing, loading and splitting score logs.
//!
//! Generates a synthetic log, saves it, reloads it with validation, and
//! cuts seeded disjoint splits. Records that violate the data assumptions
//! are dropped at load time and reported.
//!
//! ```text
//! cargo run --example score_logs
//! ```

use ragset::data::{
    generate_synthetic, load_dataset, split_dataset, Assumption, LoadOptions, SplitSizes,
    SyntheticConfig,
};

fn main() -> ragset::Result<()> {
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("scores.jsonl");

    let synthetic = SyntheticConfig {
        n_records: 200,
        k_passages: 10,
        m_samples: 20,
        unanswerable_fraction: 0.1,
        seed: 4,
        ..Default::default()
    };
    generate_synthetic(&synthetic)?.save(&path)?;

    let first = std::fs::read_to_string(&path)?;
    let header = first.lines().next().unwrap_or_default();
    println!("header: {header}");

    let report = load_dataset(&path, LoadOptions::default())?;
    println!(
        "loaded {} records, dropped {} with no correct response at the gold passage",
        report.dataset.len(),
        report.rejected_count(Assumption::GeneratorCorrectness)
    );
    let kept = load_dataset(
        &path,
        LoadOptions {
            keep_unanswerable: true,
        },
    )?;
    println!(
        "keeping unanswerable records: {} records",
        kept.dataset.len()
    );

    let splits = split_dataset(&report.dataset, SplitSizes::new(80, 40, 50), 0)?;
    println!(
        "splits: calibration {}, optimization {}, test {}",
        splits.calibration.len(),
        splits.optimization.len(),
        splits.test.len()
    );
    let record = &splits.test.records()[0];
    println!(
        "test record {}: {:?} gold {:?}, {} passages",
        record.question_id,
        record.question,
        record.gold_answers,
        record.passages.len()
    );
    Ok(())
}
