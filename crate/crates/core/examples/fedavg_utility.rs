//! Dropout costs utility: a short FedAvg run with and without it.
//!
//! ```text
//! cargo run --release -p gradleak --example fedavg_utility
//! ```

use gradleak::data::{data_dir, load_mnist, synthetic, Normalization, Split};
use gradleak::fedsim::{fed_train, FedConfig};
use gradleak::nn::{build_mlp, ParameterSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> gradleak::Result<()> {
    let dir = data_dir();
    let (train, test) = match (load_mnist(&dir, Split::Train), load_mnist(&dir, Split::Test)) {
        (Ok(a), Ok(b)) => (a.subset(&(0..5000).collect::<Vec<_>>()), b),
        _ => (synthetic(10, 2000, 28, 28, 1)?, synthetic(10, 500, 28, 28, 2)?),
    };
    let norm = Normalization::from_dataset(&train)?;
    let config = FedConfig {
        rounds: 150,
        ..FedConfig::default()
    };
    for p in [0.0, 0.5, 0.75] {
        let spec = build_mlp(784, 64, 2, 10, p)?;
        let init = ParameterSet::init(&spec, &mut ChaCha8Rng::seed_from_u64(1));
        let out = fed_train(&spec, &config, init, &train, &test, &norm, &mut ChaCha8Rng::seed_from_u64(2))?;
        let last = out.rounds.last().expect("at least one round");
        println!("p = {p:<4} accuracy {:.3} after {} rounds", last.accuracy, last.round);
    }
    Ok(())
}
