//! Split conformal calibration on raw nonconformity scores.
//!
//! Calibrates a threshold on 300 draws, then checks the empirical coverage
//! on fresh draws and builds a prediction set over labelled candidates.
//!
//! ```text
//! cargo run --example conformal_threshold
//! ```

use ragset::conformal::{conformal_rank, conformal_threshold, construct_set, NonconformityScore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn draw(rng: &mut ChaCha8Rng, n: usize) -> ragset::Result<Vec<NonconformityScore>> {
    (0..n)
        .map(|_| NonconformityScore::new(StandardNormal.sample(rng)))
        .collect()
}

fn main() -> ragset::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let calibration = draw(&mut rng, 300)?;
    let test = draw(&mut rng, 100_000)?;

    println!("alpha  rank  tau      coverage");
    for alpha in [0.05, 0.1, 0.2, 0.5] {
        let t = conformal_threshold(&calibration, alpha)?;
        let covered = test.iter().filter(|&&s| t.admits(s)).count();
        println!(
            "{alpha:<5}  {:<4}  {:<7.4}  {:.4}",
            conformal_rank(calibration.len(), alpha),
            t.tau,
            covered as f64 / test.len() as f64
        );
    }

    // A set keeps every candidate whose score clears the threshold.
    let t = conformal_threshold(&calibration, 0.1)?;
    let candidates = [("paris", -0.4), ("lyon", 0.9), ("marseille", 2.7)]
        .into_iter()
        .map(|(label, s)| Ok((label, NonconformityScore::new(s)?)))
        .collect::<ragset::Result<Vec<_>>>()?;
    println!("set at alpha=0.1: {:?}", construct_set(candidates, &t));

    // Too few calibration points for the requested level: every candidate
    // is kept.
    let tiny = conformal_threshold(&calibration[..5], 0.1)?;
    println!(
        "n=5, alpha=0.1 keeps everything: {}",
        tiny.is_all_inclusive()
    );
    Ok(())
}
