//! What a client shares: one gradient computed under freshly sampled dropout masks.
//!
//! ```text
//! cargo run --release -p gradleak --example client_gradient
//! ```

use gradleak::nn::{build_mlp, client_gradient, ParamKind, ParameterSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> gradleak::Result<()> {
    let spec = build_mlp(784, 64, 2, 10, 0.25)?;
    println!("model: {spec}");
    println!("parameters: {}", spec.parameter_count());

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = ParameterSet::init(&spec, &mut rng);
    let x: Vec<f64> = (0..784).map(|i| ((i % 28) as f64 / 27.0) - 0.5).collect();
    let (grad, masks) = client_gradient(&spec, &params, &x, &[3], &mut rng)?;

    for e in grad.layout().entries() {
        let block = &grad.values()[e.range()];
        let norm = block.iter().map(|v| v * v).sum::<f64>().sqrt();
        let kind = if e.kind == ParamKind::Weight { "weight" } else { "bias" };
        println!("layer {:>2} {kind:<6} {:>6} values, norm {norm:.4}", e.layer, e.len());
    }
    for (i, layer) in masks.layers().iter().enumerate() {
        println!("dropout {} kept {:.1}% of {} units", i + 1, 100.0 * layer.throughput(), layer.width());
    }
    Ok(())
}
