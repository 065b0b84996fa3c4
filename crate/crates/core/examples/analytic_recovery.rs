//! Closed-form leakage from a single-sample gradient: the label from the output
//! bias gradient, and every dropout mask from the weight gradient that follows it.
//!
//! ```text
//! cargo run --release -p gradleak --example analytic_recovery
//! ```

use gradleak::attacks::reconstruct_labels;
use gradleak::masks::analytic_mask_reconstruction;
use gradleak::nn::{build_mlp, client_gradient, ParameterSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> gradleak::Result<()> {
    let spec = build_mlp(16, 24, 2, 5, 0.5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = ParameterSet::init(&spec, &mut rng);
    let x: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();

    let (grad, masks) = client_gradient(&spec, &params, &x, &[2], &mut rng)?;
    println!("true label 2, recovered {:?}", reconstruct_labels(&grad, &spec, 1)?);

    for (i, layer) in masks.layers().iter().enumerate() {
        let recovered = analytic_mask_reconstruction(&grad, &spec, i + 1, 1)?;
        let show = |v: &[f64]| v.iter().map(|&b| if b > 0.5 { '1' } else { '.' }).collect::<String>();
        println!("layer {} client    {}", i + 1, show(layer.values()));
        println!("layer {} recovered {}", i + 1, show(&recovered));
    }
    Ok(())
}
