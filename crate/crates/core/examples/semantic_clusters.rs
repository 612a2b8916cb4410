//! Rouge-1 similarity and greedy semantic clustering of sampled responses.
//!
//! ```text
//! cargo run --example semantic_clusters
//! ```

use std::sync::Arc;

use ragset::data::Response;
use ragset::semantic::{cluster_responses, rouge1_f, SimilarityBackend, SimilarityMatrix};

fn main() -> ragset::Result<()> {
    for (a, b) in [
        (
            "the capital of france is paris",
            "paris is the capital of france",
        ),
        ("the capital is paris", "paris capital"),
        ("paris", "london"),
    ] {
        println!("rouge1({a:?}, {b:?}) = {:.4}", rouge1_f(a, b));
    }

    let responses: Vec<Response> = [
        "James Mason",
        "Judy Garland",
        "james mason.",
        "It was James Mason",
        "Charles Bickford",
        "JAMES MASON!",
        "Judy Garland and James Mason",
        "Charles Bickford",
    ]
    .into_iter()
    .map(Response::new)
    .collect();

    println!("\nrouge-1 backend, threshold 0.7:");
    for c in cluster_responses(&responses, &SimilarityBackend::rouge1())? {
        println!(
            "  {:<30} count {} confidence {:.3}",
            c.representative.text, c.count, c.confidence
        );
    }

    // Any similarity source works as long as it can be looked up by id.
    // Here a random matrix stands in for a learned embedding similarity.
    let matrix = Arc::new(SimilarityMatrix::random(responses.len(), 5));
    let with_ids: Vec<Response> = responses
        .iter()
        .enumerate()
        .map(|(i, r)| Response::with_id(r.text.clone(), i))
        .collect();
    let backend = SimilarityBackend::precomputed(matrix).with_threshold(0.5)?;
    println!("\nrandom precomputed backend, threshold 0.5:");
    for c in cluster_responses(&with_ids, &backend)? {
        let members: Vec<&str> = c.members.iter().map(|m| m.text.as_str()).collect();
        println!("  {:.3} {members:?}", c.confidence);
    }
    Ok(())
}
