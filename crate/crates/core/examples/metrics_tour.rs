//! Image and mask metrics on hand-made inputs.
//!
//! ```text
//! cargo run --release -p gradleak --example metrics_tour
//! ```

use gradleak::masks::{mmd, trd, MaskKind, MaskLayer, MaskSet};
use gradleak::metrics::{MetricReport, SampleMetrics};

fn main() -> gradleak::Result<()> {
    let shape = [1, 16, 16];
    let clean: Vec<f64> = (0..256).map(|i| ((i / 16 + i % 16) % 8) as f64 / 7.0).collect();
    let mut samples = Vec::new();
    for (id, level) in [0.0, 0.05, 0.2, 0.5].into_iter().enumerate() {
        let noisy: Vec<f64> = clean
            .iter()
            .enumerate()
            .map(|(i, v)| (v + level * ((i * 37 % 11) as f64 / 5.0 - 1.0)).clamp(0.0, 1.0))
            .collect();
        samples.push(SampleMetrics::compare(id, &clean, &noisy, shape)?);
    }
    print!("{}", MetricReport::new(samples).to_csv());

    let client = MaskSet::new(vec![MaskLayer::new(1, 4, vec![1.0, 0.0, 1.0, 1.0])?], MaskKind::Binary, 0.25)?;
    let guess = MaskSet::new(vec![MaskLayer::new(1, 4, vec![0.9, 0.2, 0.7, 1.0])?], MaskKind::Fuzzy, 0.25)?;
    println!("MMD(guess, client) = {:.4}", mmd(&guess, &client)?);
    println!("TRD(guess, p = 0.25) = {:.4}", trd(&guess, 0.25));
    Ok(())
}
