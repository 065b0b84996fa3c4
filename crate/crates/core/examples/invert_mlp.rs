//! Inverting gradients on a network without dropout. Uses MNIST from
//! `GRADLEAK_DATA` (or `data/mnist`) when present, synthetic digits otherwise, and
//! writes `invert_mlp.ppm`.
//!
//! ```text
//! cargo run --release -p gradleak --example invert_mlp
//! ```

use gradleak::attacks::{run_attack, AttackConfig, Variant};
use gradleak::data::{data_dir, load_mnist, synthetic, Dataset, Normalization, Split};
use gradleak::experiment::render_grid;
use gradleak::metrics::SampleMetrics;
use gradleak::nn::{build_mlp, client_gradient, ParameterSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dataset() -> gradleak::Result<Dataset> {
    load_mnist(&data_dir(), Split::Test).or_else(|e| {
        eprintln!("MNIST unavailable ({e}); using synthetic images");
        synthetic(10, 100, 28, 28, 0)
    })
}

fn main() -> gradleak::Result<()> {
    let ds = dataset()?;
    let norm = Normalization::from_dataset(&ds)?;
    let spec = build_mlp(784, 64, 2, ds.num_classes(), 0.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = ParameterSet::init(&spec, &mut rng);

    let (x, y) = ds.gather(&[0]);
    let (grad, _) = client_gradient(&spec, &params, &norm.normalize(&x), &y, &mut rng)?;
    let config = AttackConfig {
        variant: Variant::IgEval,
        max_iterations: 2000,
        ..AttackConfig::default()
    };
    let result = run_attack(&config, &spec, &params, &grad, None, 1, &mut rng)?;
    let recon = norm.denormalize(&result.x);
    let m = SampleMetrics::compare(0, &x, &recon, [1, 28, 28])?;
    println!(
        "label {:?}, {} iterations ({}), SSIM {:.4}, PSNR {:.2} dB",
        result.labels,
        result.iterations_run,
        result.stop_reason.name(),
        m.ssim,
        m.psnr
    );
    render_grid(&[x], &[recon], [1, 28, 28], "invert_mlp.ppm".as_ref())
}
