//! PAC thresholds: coverage at least `1 - alpha` with probability at least
//! `1 - delta` over the calibration draw.
//!
//! Prints the admissible violation count `k*` for a few calibration sizes,
//! compares PAC and conformal thresholds on the same scores and shows the
//! error raised when the calibration set is too small.
//!
//! ```text
//! cargo run --example pac_sets
//! ```

use ragset::conformal::{conformal_threshold, pac_k_star, pac_threshold, NonconformityScore};
use ragset::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> ragset::Result<()> {
    let (alpha, delta) = (0.2, 0.1);
    println!("k* at alpha={alpha}, delta={delta}");
    for n in [10, 50, 100, 300, 1000] {
        match pac_k_star(n, alpha, delta) {
            Ok(k) => println!("  n={n:<5} k*={k}"),
            Err(e) => println!("  n={n:<5} {e}"),
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let scores = (0..300)
        .map(|_| NonconformityScore::new(StandardNormal.sample(&mut rng)))
        .collect::<ragset::Result<Vec<_>>>()?;
    let pac = pac_threshold(&scores, alpha, delta)?;
    let conformal = conformal_threshold(&scores, alpha)?;
    println!(
        "n=300: PAC tau {:.4} (k*={}), conformal tau {:.4}",
        pac.tau,
        pac.k_star.unwrap_or_default(),
        conformal.tau
    );

    // The PAC bound needs (1 - alpha)^n <= delta at the very least.
    match pac_threshold(&scores[..5], 0.05, 0.05) {
        Err(Error::PacInfeasible {
            n, min_n: Some(m), ..
        }) => println!("n={n} at alpha=0.05, delta=0.05 is infeasible, need n >= {m}"),
        other => println!("unexpected: {other:?}"),
    }
    Ok(())
}
