//! One victim, dropout rate 0.25, four attackers: inverting gradients with and
//! without dropout at attack time, with the client's masks handed over, and the
//! joint data-and-mask attack. Writes `dropout_inversion.ppm` (one column each).
//!
//! ```text
//! cargo run --release -p gradleak --example dropout_inversion
//! ```

use gradleak::attacks::{run_attack, AttackConfig, Variant};
use gradleak::data::{data_dir, load_mnist, synthetic, Normalization, Split};
use gradleak::experiment::render_grid;
use gradleak::masks::mmd;
use gradleak::metrics::ssim;
use gradleak::nn::{build_mlp, client_gradient, ParameterSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> gradleak::Result<()> {
    let ds = load_mnist(&data_dir(), Split::Test).or_else(|_| synthetic(10, 100, 28, 28, 0))?;
    let norm = Normalization::from_dataset(&ds)?;
    let spec = build_mlp(784, 64, 2, ds.num_classes(), 0.25)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = ParameterSet::init(&spec, &mut rng);
    let (x, y) = ds.gather(&[1]);
    let (grad, masks) = client_gradient(&spec, &params, &norm.normalize(&x), &y, &mut rng)?;

    let mut originals = Vec::new();
    let mut recons = Vec::new();
    for variant in Variant::ALL {
        let config = AttackConfig {
            variant,
            max_iterations: 2000,
            ..AttackConfig::default()
        };
        let r = run_attack(&config, &spec, &params, &grad, Some(&masks), 1, &mut ChaCha8Rng::seed_from_u64(9))?;
        let recon = norm.denormalize(&r.x);
        let mask_fit = match &r.masks {
            Some(m) => format!(", MMD {:.4}", mmd(m, &masks)?),
            None => String::new(),
        };
        println!("{:<8} SSIM {:.4}{mask_fit}", variant.name(), ssim(&x, &recon, [1, 28, 28])?);
        originals.push(x.clone());
        recons.push(recon);
    }
    render_grid(&originals, &recons, [1, 28, 28], "dropout_inversion.ppm".as_ref())
}
