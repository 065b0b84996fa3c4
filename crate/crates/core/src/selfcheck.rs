//! Built-in verification suites: derivatives against central finite differences,
//! and exact label and mask recovery on toy MLPs.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attacks::{cosine_distance, derive_seed, reconstruct_labels, total_variation};
use crate::autodiff::{Graph, NodeId};
use crate::error::Result;
use crate::masks::{analytic_mask_reconstruction, MaskSet};
use crate::nn::{build_mlp, client_gradient, cross_entropy, forward, one_hot, Activation, Layer, Mode, ModelSpec, ParameterSet};

/// Step of the central differences.
pub const FD_STEP: f64 = 1e-5;
pub const FIRST_ORDER_TOL: f64 = 1e-6;
pub const SECOND_ORDER_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: usize,
    pub trials: usize,
    /// Largest error seen (relative error for derivative checks, 0/1 otherwise).
    pub worst: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn ok(&self) -> bool {
        self.passed == self.trials
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {}/{} trials, worst {:.3e} (tolerance {:.0e})",
            if self.ok() { "PASS" } else { "FAIL" },
            self.name,
            self.passed,
            self.trials,
            self.worst,
            self.tolerance
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub checks: Vec<CheckResult>,
}

impl Report {
    pub fn ok(&self) -> bool {
        self.checks.iter().all(CheckResult::ok)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        Ok(())
    }
}

/// All four suites at their default sizes.
pub fn run_all(seed: u64) -> Result<Report> {
    Ok(Report {
        checks: vec![
            first_order(60, derive_seed(seed, &[1]))?,
            second_order(24, derive_seed(seed, &[2]))?,
            label_recovery(100, derive_seed(seed, &[3]))?,
            mask_recovery(100, derive_seed(seed, &[4]))?,
        ],
    })
}

/// `||a - b|| / max(||a||, ||b||)`, 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scalar functional of some leaves. `create_graph` tells functionals that take an
/// inner gradient whether that gradient must stay differentiable.
type Build<'a> = dyn Fn(&mut Graph, &[NodeId], bool) -> Result<NodeId> + 'a;

/// Relative error between the reverse-mode gradient of `build` and central
/// differences, over all entries of all leaves.
fn fd_check(leaves: &[(Vec<usize>, Vec<f64>)], build: &Build<'_>) -> Result<f64> {
    let eval = |values: &[Vec<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids = leaves
            .iter()
            .zip(values)
            .map(|((s, _), v)| g.leaf(s, v.clone(), true))
            .collect::<Result<Vec<_>>>()?;
        let f = build(&mut g, &ids, false)?;
        Ok(g.scalar(f))
    };

    let mut g = Graph::new();
    let ids = leaves
        .iter()
        .map(|(s, v)| g.leaf(s, v.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let f = build(&mut g, &ids, true)?;
    let analytic: Vec<f64> = g
        .backward(f, &ids, false)?
        .into_iter()
        .flat_map(|id| g.values(id).to_vec())
        .collect();

    let mut values: Vec<Vec<f64>> = leaves.iter().map(|(_, v)| v.clone()).collect();
    let mut numeric = Vec::with_capacity(analytic.len());
    for l in 0..values.len() {
        for i in 0..values[l].len() {
            let orig = values[l][i];
            values[l][i] = orig + FD_STEP;
            let up = eval(&values)?;
            values[l][i] = orig - FD_STEP;
            let down = eval(&values)?;
            values[l][i] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

#[derive(Debug, Clone)]
enum Step {
    Unary(usize, u8),
    Binary(usize, usize, u8),
    MatMul(usize),
    Transpose(usize),
    Gather(usize, Arc<Vec<Option<usize>>>),
    Splice(usize, usize),
}

fn random_plan(rng: &mut ChaCha8Rng) -> Vec<Step> {
    let steps = rng.random_range(3..8);
    let mut plan = Vec::with_capacity(steps);
    for k in 0..steps {
        let pool = 2 + k;
        let pick = |rng: &mut ChaCha8Rng| rng.random_range(0..pool);
        let s = match rng.random_range(0..6) {
            0 | 1 => Step::Unary(pick(rng), rng.random_range(0..9)),
            2 => Step::Binary(pick(rng), pick(rng), rng.random_range(0..4)),
            3 => Step::MatMul(pick(rng)),
            4 => {
                if rng.random() {
                    Step::Transpose(pick(rng))
                } else {
                    let map = (0..6)
                        .map(|_| (rng.random::<f64>() < 0.85).then(|| rng.random_range(0..6)))
                        .collect();
                    Step::Gather(pick(rng), Arc::new(map))
                }
            }
            _ => Step::Splice(pick(rng), pick(rng)),
        };
        plan.push(s);
    }
    plan
}

/// Builds a plan over leaves `a, b: [2, 3]` and `w: [3, 3]`; every pool node is
/// `[2, 3]`. The output mixes the last node with a random weighting and one
/// earlier node.
fn build_plan(g: &mut Graph, leaves: &[NodeId], plan: &[Step], weights: &[f64]) -> Result<NodeId> {
    let (w, mut pool) = (leaves[2], vec![leaves[0], leaves[1]]);
    for step in plan {
        let out = match step {
            &Step::Unary(i, kind) => {
                let x = pool[i];
                match kind {
                    0 => g.tanh(x)?,
                    1 => g.sigmoid(x)?,
                    2 => g.gelu(x)?,
                    3 => {
                        let t = g.tanh(x)?;
                        let t = g.scale(t, 0.5)?;
                        g.exp(t)?
                    }
                    4 => g.square(x)?,
                    5 => {
                        let s = g.square(x)?;
                        let s = g.add_scalar(s, 1.0)?;
                        g.log(s)?
                    }
                    6 => {
                        let s = g.square(x)?;
                        let s = g.add_scalar(s, 1.0)?;
                        g.sqrt(s)?
                    }
                    7 => g.scale(x, -0.7)?,
                    _ => g.add_scalar(x, 0.3)?,
                }
            }
            &Step::Binary(i, j, kind) => {
                let (x, y) = (pool[i], pool[j]);
                match kind {
                    0 => g.add(x, y)?,
                    1 => g.sub(x, y)?,
                    2 => g.mul(x, y)?,
                    _ => {
                        let d = g.square(y)?;
                        let d = g.add_scalar(d, 1.0)?;
                        g.div(x, d)?
                    }
                }
            }
            &Step::MatMul(i) => g.matmul(pool[i], w)?,
            &Step::Transpose(i) => {
                let t = g.transpose(pool[i])?;
                g.reshape(t, &[2, 3])?
            }
            Step::Gather(i, map) => g.gather(pool[*i], Arc::clone(map), &[2, 3])?,
            &Step::Splice(i, j) => {
                let top = g.slice(pool[i], 0, 1)?;
                let bottom = g.slice(pool[j], 1, 2)?;
                g.concat(&[bottom, top])?
            }
        };
        pool.push(out);
    }
    let last = *pool.last().expect("nonempty pool");
    let c = g.constant(&[2, 3], weights.to_vec())?;
    let weighted = g.dot(last, c)?;
    let earlier = g.square(pool[pool.len() / 2])?;
    let earlier = g.mean(earlier)?;
    let earlier = g.scale(earlier, 0.3)?;
    g.add(weighted, earlier)
}

/// First-order gradients of random graphs against central differences.
pub fn first_order(trials: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut passed = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let plan = random_plan(&mut rng);
        let weights = uniform(&mut rng, 6, -1.0, 1.0);
        let leaves = vec![
            (vec![2, 3], uniform(&mut rng, 6, -1.0, 1.0)),
            (vec![2, 3], uniform(&mut rng, 6, -1.0, 1.0)),
            (vec![3, 3], uniform(&mut rng, 9, -1.0, 1.0)),
        ];
        let err = fd_check(&leaves, &|g, ids, _| build_plan(g, ids, &plan, &weights))?;
        worst = worst.max(err);
        passed += usize::from(err <= FIRST_ORDER_TOL);
    }
    Ok(CheckResult {
        name: "first-order gradients",
        passed,
        trials,
        worst,
        tolerance: FIRST_ORDER_TOL,
    })
}

fn flat_concat(g: &mut Graph, nodes: &[NodeId]) -> Result<NodeId> {
    let flat = nodes.iter().map(|&n| g.flatten(n)).collect::<Result<Vec<_>>>()?;
    g.concat(&flat)
}

/// Gradient-of-gradient functionals: the derivative of a function of `dL/dθ`
/// with respect to the inputs, by double backward, against central differences
/// of the same function evaluated from the first-order gradient.
pub fn second_order(trials: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut passed = 0;
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let err = match t % 4 {
            0 | 1 => dense_functional(&mut rng, t % 4 == 1)?,
            2 => mlp_cosine(&mut rng)?,
            _ => conv_cosine(&mut rng)?,
        };
        worst = worst.max(err);
        passed += usize::from(err <= SECOND_ORDER_TOL);
    }
    Ok(CheckResult {
        name: "second-order gradients",
        passed,
        trials,
        worst,
        tolerance: SECOND_ORDER_TOL,
    })
}

/// `h = act(x W)`, `L = <h, c> + 0.1 |h|^2`. The functional is `|dL/dW|^2`, or
/// `<dL/dW, r>` differentiated jointly in `x` and `W` (a Hessian-vector product).
fn dense_functional(rng: &mut ChaCha8Rng, hvp: bool) -> Result<f64> {
    let act = rng.random_range(0..3);
    let c = uniform(rng, 8, -1.0, 1.0);
    let r = uniform(rng, 12, -1.0, 1.0);
    let leaves = vec![
        (vec![2, 3], uniform(rng, 6, -1.0, 1.0)),
        (vec![3, 4], uniform(rng, 12, -1.0, 1.0)),
    ];
    let build = |g: &mut Graph, ids: &[NodeId], create: bool| -> Result<NodeId> {
        let (x, w) = (ids[0], ids[1]);
        let z = g.matmul(x, w)?;
        let h = match act {
            0 => g.tanh(z)?,
            1 => g.sigmoid(z)?,
            _ => g.gelu(z)?,
        };
        let cc = g.constant(&[2, 4], c.clone())?;
        let lin = g.dot(h, cc)?;
        let sq = g.square(h)?;
        let sq = g.sum(sq)?;
        let sq = g.scale(sq, 0.1)?;
        let l = g.add(lin, sq)?;
        let gw = g.backward(l, &[w], create)?[0];
        if hvp {
            let rr = g.constant(&[3, 4], r.clone())?;
            g.dot(gw, rr)
        } else {
            let s = g.square(gw)?;
            g.sum(s)
        }
    };
    fd_check(&leaves, &build)
}

/// Cosine gradient distance of a dropout MLP, differentiated in the input and the
/// (fuzzy) masks.
fn mlp_cosine(rng: &mut ChaCha8Rng) -> Result<f64> {
    let depth = rng.random_range(1..3);
    let spec = build_mlp(6, 5, depth, 3, 0.25)?;
    let params = ParameterSet::init(&spec, rng);
    let label = rng.random_range(0..3);
    let target = uniform(rng, params.len(), -0.2, 0.2);
    let mut leaves = vec![(vec![1, 6], uniform(rng, 6, -1.0, 1.0))];
    for n in spec.dropout_widths() {
        leaves.push((vec![1, n], uniform(rng, n, 0.1, 0.9)));
    }
    let build = |g: &mut Graph, ids: &[NodeId], create: bool| -> Result<NodeId> {
        let p = params.to_graph(g, true)?;
        let logits = forward(g, &spec, &p, ids[0], Mode::Train, Some(&ids[1..]))?;
        let y = g.constant(&[1, 3], one_hot(&[label], 3))?;
        let loss = cross_entropy(g, logits, y)?;
        let grads = g.backward(loss, &p, create)?;
        let flat = flat_concat(g, &grads)?;
        let t = g.constant(&[target.len()], target.clone())?;
        cosine_distance(g, flat, t)
    };
    fd_check(&leaves, &build)
}

/// Cosine distance plus total variation for a one-convolution network on a 6x6
/// image, differentiated in the image.
fn conv_cosine(rng: &mut ChaCha8Rng) -> Result<f64> {
    let spec = ModelSpec::new(
        [1, 6, 6],
        3,
        vec![
            Layer::Conv {
                in_channels: 1,
                out_channels: 2,
                kernel: 3,
                stride: 2,
                pad: 1,
            },
            Layer::Activation(Activation::Sigmoid),
            Layer::Flatten,
            Layer::Dense {
                inputs: 18,
                outputs: 3,
                bias: true,
            },
        ],
    )?;
    let params = ParameterSet::init(&spec, rng);
    let label = rng.random_range(0..3);
    let target = uniform(rng, params.len(), -0.2, 0.2);
    let leaves = vec![(vec![1, 1, 6, 6], uniform(rng, 36, -1.0, 1.0))];
    let build = |g: &mut Graph, ids: &[NodeId], create: bool| -> Result<NodeId> {
        let p = params.to_graph(g, true)?;
        let logits = forward(g, &spec, &p, ids[0], Mode::Eval, None)?;
        let y = g.constant(&[1, 3], one_hot(&[label], 3))?;
        let loss = cross_entropy(g, logits, y)?;
        let grads = g.backward(loss, &p, create)?;
        let flat = flat_concat(g, &grads)?;
        let t = g.constant(&[target.len()], target.clone())?;
        let d = cosine_distance(g, flat, t)?;
        let tv = total_variation(g, ids[0])?;
        let tv = g.scale(tv, 0.01)?;
        g.add(d, tv)
    };
    fd_check(&leaves, &build)
}

/// A random toy dropout MLP: input 4..16, hidden width 16..32, one or two hidden
/// layers, 2..10 classes, p in {0, 0.25, 0.5}.
fn toy_mlp(rng: &mut ChaCha8Rng) -> Result<(ModelSpec, ParameterSet)> {
    let input = rng.random_range(4..=16);
    let width = rng.random_range(16..=32);
    let depth = rng.random_range(1..=2);
    let classes = rng.random_range(2..=10);
    let p = [0.0, 0.25, 0.5][rng.random_range(0..3)];
    let spec = build_mlp(input, width, depth, classes, p)?;
    let params = ParameterSet::init(&spec, rng);
    Ok((spec, params))
}

/// Batch-size-1 labels read off the output bias gradient.
pub fn label_recovery(trials: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut passed = 0;
    for _ in 0..trials {
        let (spec, params) = toy_mlp(&mut rng)?;
        let x = uniform(&mut rng, spec.input_numel(), -1.0, 1.0);
        let y = rng.random_range(0..spec.num_classes());
        let (grad, _) = client_gradient(&spec, &params, &x, &[y], &mut rng)?;
        passed += usize::from(reconstruct_labels(&grad, &spec, 1)? == [y]);
    }
    Ok(CheckResult {
        name: "label recovery",
        passed,
        trials,
        worst: (trials - passed) as f64,
        tolerance: 0.0,
    })
}

/// Batch-size-1 client masks read off the weight gradient after each dropout layer.
pub fn mask_recovery(trials: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut passed = 0;
    for _ in 0..trials {
        let (spec, params) = toy_mlp(&mut rng)?;
        let x = uniform(&mut rng, spec.input_numel(), -1.0, 1.0);
        let y = rng.random_range(0..spec.num_classes());
        let (grad, masks): (_, MaskSet) = client_gradient(&spec, &params, &x, &[y], &mut rng)?;
        let mut exact = true;
        for (i, layer) in masks.layers().iter().enumerate() {
            exact &= analytic_mask_reconstruction(&grad, &spec, i + 1, 1)? == layer.values();
        }
        passed += usize::from(exact);
    }
    Ok(CheckResult {
        name: "mask recovery",
        passed,
        trials,
        worst: (trials - passed) as f64,
        tolerance: 0.0,
    })
}
