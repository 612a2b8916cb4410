//! The full retrieve-then-generate pipeline on one worked question.
//!
//! Calibrates both stages on a synthetic log shaped like the example
//! (4 passages, 10 samples each), then builds the retriever set, the
//! per-passage generator sets and the aggregated set for
//! `tests/fixtures/star_is_born.jsonl`.
//!
//! ```text
//! cargo run --example pipeline_end_to_end
//! ```

use std::path::Path;

use ragset::data::{generate_synthetic, load_dataset, LoadOptions, SyntheticConfig};
use ragset::pipeline::{
    aggregate, calibrate, predict_llm_set, predict_retriever_set, BudgetSplit, CalibrationConfig,
};
use ragset::semantic::SimilarityBackend;

fn main() -> ragset::Result<()> {
    let backend = SimilarityBackend::rouge1();
    let calibration = generate_synthetic(&SyntheticConfig {
        n_records: 300,
        k_passages: 4,
        m_samples: 10,
        seed: 11,
        ..Default::default()
    })?;
    let alpha = 0.2;
    let t = calibrate(
        &calibration,
        &CalibrationConfig::conformal(BudgetSplit::even(alpha)?),
        &backend,
    )?;
    println!(
        "alpha={alpha}: tau_ret {:.4} (keep passages scoring >= {:.4}), tau_llm {:.4} (keep clusters with confidence >= {:.4})",
        t.tau_ret.tau, -t.tau_ret.tau, t.tau_llm.tau, -t.tau_llm.tau
    );

    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/star_is_born.jsonl");
    let test = load_dataset(&fixture, LoadOptions::default())?.dataset;
    t.check_disjoint(&test)?;
    let record = &test.records()[0];
    println!("\nQ: {}", record.question);

    let kept = predict_retriever_set(record, &t);
    println!("retriever set: {kept:?}");
    for passage in record
        .passages
        .iter()
        .filter(|p| kept.contains(&p.passage_id.as_str()))
    {
        let clusters = predict_llm_set(passage, &t, &backend)?;
        let labels: Vec<String> = clusters
            .iter()
            .map(|c| format!("{} ({:.1})", c.representative.text, c.confidence))
            .collect();
        println!("  {}: {}", passage.passage_id, labels.join(", "));
    }

    let set = aggregate(record, &t, &backend)?;
    println!(
        "aggregated set, {} semantic clusters:",
        set.semantic_count()
    );
    for c in &set.clusters {
        println!(
            "  {:<16} count {:>2}  confidence {:.3}",
            c.representative.text, c.count, c.confidence
        );
    }
    println!(
        "contains a correct answer: {}",
        set.has_correct_cluster(&record.gold_answers)
    );
    Ok(())
}
