use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{run_attack, AttackConfig, AttackResult};
use crate::error::{Error, Result};
use crate::masks::MaskSet;
use crate::nn::{client_gradient, GradientVector, ModelSpec, ParameterSet};

/// Mixes `parts` into `base` (splitmix64 finalizer per part).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut s = base;
    for &p in parts {
        s = s.wrapping_add(p.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut z = s;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        s = z ^ (z >> 31);
    }
    s
}

/// One (victim batch, attack configuration) pair.
#[derive(Debug, Clone)]
pub struct SweepCase {
    pub victim: usize,
    pub config_id: usize,
    pub spec: ModelSpec,
    pub params: Arc<ParameterSet>,
    /// Victim batch in the model's input space.
    pub x: Vec<f64>,
    pub labels: Vec<usize>,
    /// Seeds the client's dropout masks; share it across configs to attack the
    /// same gradient.
    pub client_seed: u64,
    pub config: AttackConfig,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub victim: usize,
    pub config_id: usize,
    pub client_grad: GradientVector,
    pub client_masks: MaskSet,
    pub result: AttackResult,
}

/// Runs every case on a pool of `jobs` workers and returns the outcomes ordered
/// by `(victim, config_id)`, independent of scheduling.
pub fn run_sweep(cases: Vec<SweepCase>, jobs: usize) -> Result<Vec<SweepOutcome>> {
    run_sweep_with(cases, jobs, |_| Ok(()))
}

/// [`run_sweep`] that also calls `on_done` on the worker that finished each case.
pub fn run_sweep_with<F>(cases: Vec<SweepCase>, jobs: usize, on_done: F) -> Result<Vec<SweepOutcome>>
where
    F: Fn(&SweepOutcome) -> Result<()> + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let mut out = pool.install(|| {
        cases
            .into_par_iter()
            .map(|case| {
                let outcome = run_case(case)?;
                on_done(&outcome)?;
                Ok(outcome)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    out.sort_by_key(|o| (o.victim, o.config_id));
    Ok(out)
}

fn run_case(case: SweepCase) -> Result<SweepOutcome> {
    let batch = case.labels.len();
    let mut client_rng = ChaCha8Rng::seed_from_u64(case.client_seed);
    let (client_grad, client_masks) = client_gradient(&case.spec, &case.params, &case.x, &case.labels, &mut client_rng)?;
    let mut rng = ChaCha8Rng::seed_from_u64(case.config.seed);
    let result = run_attack(
        &case.config,
        &case.spec,
        &case.params,
        &client_grad,
        Some(&client_masks),
        batch,
        &mut rng,
    )?;
    Ok(SweepOutcome {
        victim: case.victim,
        config_id: case.config_id,
        client_grad,
        client_masks,
        result,
    })
}
