//! The dropout inversion attack on a small convolutional network: two strided
//! sigmoid convolutions, then dropout at rate 0.75 before the classifier.
//!
//! ```text
//! cargo run --release -p gradleak --example lenet_dia
//! ```

use gradleak::attacks::{parameter_count, run_attack, AttackConfig, Variant};
use gradleak::data::{data_dir, load_mnist, synthetic, Normalization, Split};
use gradleak::experiment::Architecture;
use gradleak::masks::{mmd, trd};
use gradleak::metrics::ssim;
use gradleak::nn::{build_lenet_lite, client_gradient, ParameterSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> gradleak::Result<()> {
    let ds = load_mnist(&data_dir(), Split::Test).or_else(|_| synthetic(10, 100, 28, 28, 0))?;
    let norm = Normalization::from_dataset(&ds)?;
    let spec = build_lenet_lite([1, 28, 28], ds.num_classes(), 0.75)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = ParameterSet::init(&spec, &mut rng);
    let (x, y) = ds.gather(&[4]);
    let (grad, masks) = client_gradient(&spec, &params, &norm.normalize(&x), &y, &mut rng)?;

    let config = AttackConfig {
        variant: Variant::Dia,
        tv_weight: Architecture::LenetLite.default_tv_weight([1, 28, 28]),
        max_iterations: 3000,
        ..AttackConfig::default()
    };
    println!("{spec}");
    println!("attacker optimizes {} values", parameter_count(&config, &spec, 1));
    let r = run_attack(&config, &spec, &params, &grad, None, 1, &mut rng)?;
    let m = r.masks.as_ref().expect("dia returns masks");
    println!(
        "SSIM {:.4}, MMD {:.4}, TRD {:.4}, final distance {:.2e}",
        ssim(&x, &norm.denormalize(&r.x), [1, 28, 28])?,
        mmd(m, &masks)?,
        trd(m, 0.75),
        r.loss_trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}
