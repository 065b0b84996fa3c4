//! Single-process FedAvg over an IID split.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{Dataset, Normalization};
use crate::error::{Error, Result};
use crate::masks::MaskSet;
use crate::nn::{forward, loss_and_gradient, one_hot, Mode, ModelSpec, ParameterSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedConfig {
    pub num_clients: usize,
    pub rounds: usize,
    pub local_steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Test images scored after every round (first `eval_size` of the test set).
    pub eval_size: usize,
    /// Keep a parameter snapshot every this many rounds (0: initial and final only).
    pub snapshot_every: usize,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            num_clients: 10,
            rounds: 600,
            local_steps: 1,
            lr: 0.1,
            batch_size: 32,
            eval_size: 1000,
            snapshot_every: 0,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 || self.local_steps == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "fed: num_clients, local_steps and batch_size must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("fed: lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub accuracy: f64,
    pub mean_client_loss: f64,
}

#[derive(Debug, Clone)]
pub struct FedOutcome {
    /// `(round, global parameters)`: round 0, every `snapshot_every`-th round, and
    /// the final round.
    pub history: Vec<(usize, ParameterSet)>,
    pub rounds: Vec<RoundRecord>,
}

impl FedOutcome {
    pub fn final_params(&self) -> &ParameterSet {
        &self.history.last().expect("history holds the initial parameters").1
    }

    /// `round,accuracy,mean_client_loss`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,accuracy,mean_client_loss\n");
        for r in &self.rounds {
            let _ = writeln!(out, "{},{},{}", r.round, r.accuracy, r.mean_client_loss);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::experiment::write_atomic(path, self.to_csv().as_bytes())
    }
}

/// Eval-mode top-1 accuracy on `ds` (normalized with `norm`).
pub fn evaluate(spec: &ModelSpec, params: &ParameterSet, ds: &Dataset, norm: &Normalization) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let classes = spec.num_classes();
    let mut correct = 0usize;
    let chunk = 256;
    let all: Vec<usize> = (0..ds.len()).collect();
    for idx in all.chunks(chunk) {
        let (x, y) = ds.gather(idx);
        let mut g = Graph::new();
        let p = params.to_graph(&mut g, false)?;
        let xn = g.constant(&[idx.len(), spec.input_numel()], norm.normalize(&x))?;
        let logits = forward(&mut g, spec, &p, xn, Mode::Eval, None)?;
        for (row, &label) in g.values(logits).chunks(classes).zip(&y) {
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .map_or(0, |(i, _)| i);
            correct += usize::from(pred == label);
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Federated training from `init`.
///
/// Each round, every client starts from the global parameters and runs
/// `local_steps` SGD steps on minibatches from its IID shard, with fresh dropout
/// masks per step. The server adds the uniform average of the client deltas and
/// records eval-mode accuracy on the first `eval_size` test images.
pub fn fed_train<R: Rng + ?Sized>(
    spec: &ModelSpec,
    config: &FedConfig,
    init: ParameterSet,
    train: &Dataset,
    test: &Dataset,
    norm: &Normalization,
    rng: &mut R,
) -> Result<FedOutcome> {
    config.validate()?;
    if train.len() < config.num_clients {
        return Err(Error::Config(format!(
            "fed: {} training images cannot cover {} clients",
            train.len(),
            config.num_clients
        )));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(rng);
    let shards: Vec<Vec<usize>> = (0..config.num_clients)
        .map(|c| order.iter().skip(c).step_by(config.num_clients).copied().collect())
        .collect();
    let mut client_rngs: Vec<ChaCha8Rng> = (0..config.num_clients)
        .map(|_| ChaCha8Rng::seed_from_u64(rng.random()))
        .collect();
    let eval_set = test.subset(&(0..config.eval_size.min(test.len())).collect::<Vec<_>>());
    let classes = spec.num_classes();

    let mut global = init;
    let mut history = vec![(0, global.clone())];
    let mut rounds = Vec::with_capacity(config.rounds);
    for round in 1..=config.rounds {
        let base = global.flatten();
        let mut delta_sum = vec![0.0; base.len()];
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for (shard, crng) in shards.iter().zip(&mut client_rngs) {
            let mut local = global.clone();
            for _ in 0..config.local_steps {
                let batch: Vec<usize> = shard
                    .choose_multiple(crng, config.batch_size.min(shard.len()))
                    .copied()
                    .collect();
                let (x, y) = train.gather(&batch);
                let masks = MaskSet::sample_client(spec, batch.len(), crng)?;
                let (loss, grad) = loss_and_gradient(
                    spec,
                    &local,
                    &norm.normalize(&x),
                    &one_hot(&y, classes),
                    Mode::Train,
                    Some(&masks),
                )?;
                if !loss.is_finite() {
                    return Err(Error::Divergence(format!("round {round}: non-finite client loss")));
                }
                loss_sum += loss;
                loss_count += 1;
                local = local.add_scaled(grad.values(), -config.lr)?;
            }
            for ((d, l), b) in delta_sum.iter_mut().zip(local.flatten()).zip(&base) {
                *d += l - b;
            }
        }
        global = global.add_scaled(&delta_sum, 1.0 / config.num_clients as f64)?;
        let accuracy = evaluate(spec, &global, &eval_set, norm)?;
        rounds.push(RoundRecord {
            round,
            accuracy,
            mean_client_loss: loss_sum / loss_count as f64,
        });
        let snapshot = config.snapshot_every > 0 && round % config.snapshot_every == 0;
        if snapshot || round == config.rounds {
            history.push((round, global.clone()));
        }
    }
    Ok(FedOutcome { history, rounds })
}
