//! Gradient inversion: IG in train and eval mode, WIIG with the client's masks,
//! and DIA, which optimizes fuzzy dropout masks jointly with the dummy data.

mod labels;
mod objective;
mod optim;
mod sweep;

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use labels::reconstruct_labels;
pub use objective::{cosine_distance, total_variation, COSINE_EPS};
pub use optim::{Adam, BestTracker, PlateauSchedule};
pub use sweep::{derive_seed, run_sweep, run_sweep_with, SweepCase, SweepOutcome};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::masks::{init_attacker_masks, mask_regularizer, MaskInitScheme, MaskSet};
use crate::nn::{cross_entropy, forward, one_hot, GradientVector, Mode, ModelSpec, ParameterSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Train-mode model with freshly sampled masks every iteration.
    IgTrain,
    /// Eval-mode model; dropout is the identity.
    IgEval,
    /// Train-mode model with the client's own masks.
    Wiig,
    /// Train-mode model with optimized fuzzy masks.
    Dia,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::IgTrain, Variant::IgEval, Variant::Wiig, Variant::Dia];

    pub fn name(self) -> &'static str {
        match self {
            Variant::IgTrain => "ig_train",
            Variant::IgEval => "ig_eval",
            Variant::Wiig => "wiig",
            Variant::Dia => "dia",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown attack variant '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Labels read off the output bias gradient and held fixed.
    Analytic,
    /// Label logits optimized with the data; targets are their softmax.
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    /// One cosine over the concatenated gradient.
    Global,
    /// Sum of cosines over the individual parameter tensors.
    PerLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub variant: Variant,
    pub tv_weight: f64,
    /// Weight of the throughput regularizer; only read by [`Variant::Dia`].
    pub mask_weight: f64,
    pub mask_init: MaskInitScheme,
    pub lr: f64,
    pub lr_decay: f64,
    pub plateau_window: usize,
    pub loss_floor: f64,
    pub stall_window: usize,
    pub max_iterations: usize,
    pub label_mode: LabelMode,
    pub distance: Distance,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Dia,
            tv_weight: 1e-5,
            mask_weight: 1e-4,
            mask_init: MaskInitScheme::BernoulliKeep,
            lr: 0.1,
            lr_decay: 0.1,
            plateau_window: 800,
            loss_floor: 1e-5,
            stall_window: 4000,
            max_iterations: 20_000,
            label_mode: LabelMode::Analytic,
            distance: Distance::Global,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("attack: {what}")));
        if !(self.tv_weight >= 0.0 && self.tv_weight.is_finite()) {
            return bad("tv_weight must be a finite nonnegative number");
        }
        if !(self.mask_weight >= 0.0 && self.mask_weight.is_finite()) {
            return bad("mask_weight must be a finite nonnegative number");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be positive");
        }
        if self.loss_floor.is_nan() || self.loss_floor < 0.0 {
            return bad("loss_floor must be nonnegative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// Gradient distance fell below the loss floor.
    Floor,
    /// No new minimum within the stall window.
    Stall,
    /// Iteration budget exhausted.
    Max,
    /// A non-finite loss or gradient appeared.
    Diverged,
}

impl StopReason {
    pub fn name(self) -> &'static str {
        match self {
            StopReason::Floor => "floor",
            StopReason::Stall => "stall",
            StopReason::Max => "max",
            StopReason::Diverged => "diverged",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    /// Reconstructed batch in the model's (normalized) input space, `B x input_numel`.
    pub x: Vec<f64>,
    /// Label per reconstructed sample: analytic, or the argmax of the learned targets.
    pub labels: Vec<usize>,
    /// Learned soft targets, `B x C`, in joint label mode.
    pub soft_labels: Option<Vec<f64>>,
    /// Final fuzzy masks (DIA only).
    pub masks: Option<MaskSet>,
    /// Gradient distance at every iteration.
    pub loss_trace: Vec<f64>,
    /// Learning rate used at every iteration.
    pub lr_trace: Vec<f64>,
    pub iterations_run: usize,
    pub stop_reason: StopReason,
}

impl AttackResult {
    /// Writes `iteration,loss,lr`.
    pub fn write_trace_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("iteration,loss,lr\n");
        for (i, (l, r)) in self.loss_trace.iter().zip(&self.lr_trace).enumerate() {
            let _ = writeln!(out, "{i},{l},{r}");
        }
        crate::experiment::write_atomic(path, out.as_bytes())
    }
}

/// Number of scalars the attacker optimizes.
pub fn parameter_count(config: &AttackConfig, spec: &ModelSpec, batch: usize) -> usize {
    let masks = if config.variant == Variant::Dia {
        spec.dropout_widths().iter().sum()
    } else {
        0
    };
    let labels = match config.label_mode {
        LabelMode::Joint => spec.num_classes(),
        LabelMode::Analytic => 0,
    };
    batch * (spec.input_numel() + masks + labels)
}

/// Where each optimized block lives in the flat variable vector.
struct Segments {
    x: std::ops::Range<usize>,
    masks: Vec<std::ops::Range<usize>>,
    labels: Option<std::ops::Range<usize>>,
}

/// Reconstructs a batch of `batch` samples from `client_grad`.
///
/// Dummy data starts from `N(0, 1)`. Each iteration evaluates the gradient
/// distance `D` (plus the TV and, for DIA, the mask regularizer), differentiates
/// through the dummy-gradient computation, and takes one Adam step. DIA masks are
/// projected onto [0, 1] after every step. Termination and the plateau schedule
/// both follow `D`. The final iterate is returned.
#[allow(clippy::too_many_arguments)]
pub fn run_attack<R: Rng + ?Sized>(
    config: &AttackConfig,
    spec: &ModelSpec,
    params: &ParameterSet,
    client_grad: &GradientVector,
    client_masks: Option<&MaskSet>,
    batch: usize,
    rng: &mut R,
) -> Result<AttackResult> {
    config.validate()?;
    if batch == 0 {
        return Err(Error::Precondition("batch size must be positive".into()));
    }
    if client_grad.len() != params.len() {
        return Err(Error::shape("run_attack", "client gradient does not match the model"));
    }
    let rate = spec.dropout_rate()?;
    match config.variant {
        Variant::Wiig => {
            let m = client_masks.ok_or_else(|| Error::Precondition("wiig needs the client masks".into()))?;
            m.check_matches(spec, batch)?;
        }
        Variant::Dia if spec.num_dropout_layers() == 0 => {
            return Err(Error::Precondition("dia needs a model with dropout layers".into()));
        }
        _ => {}
    }

    let classes = spec.num_classes();
    let fixed_labels = match config.label_mode {
        LabelMode::Analytic => Some(reconstruct_labels(client_grad, spec, batch)?),
        LabelMode::Joint => None,
    };

    let numel = batch * spec.input_numel();
    let mut vars: Vec<f64> = (0..numel).map(|_| StandardNormal.sample(rng)).collect();
    let mut mask_ranges = Vec::new();
    let mut mask_template = None;
    if config.variant == Variant::Dia {
        let init = init_attacker_masks(config.mask_init, spec, batch, rng, Some(client_grad))?;
        for layer in init.layers() {
            let start = vars.len();
            vars.extend_from_slice(layer.values());
            mask_ranges.push(start..vars.len());
        }
        mask_template = Some(init);
    }
    let label_range = (config.label_mode == LabelMode::Joint).then(|| {
        let start = vars.len();
        vars.extend((0..batch * classes).map(|_| -> f64 { StandardNormal.sample(rng) }));
        start..vars.len()
    });
    let seg = Segments {
        x: 0..numel,
        masks: mask_ranges,
        labels: label_range,
    };
    let target_onehot = fixed_labels.as_ref().map(|l| one_hot(l, classes));
    let objective = Objective {
        config,
        spec,
        params,
        client: client_grad.values(),
        client_masks,
        batch,
        rate,
        target: target_onehot.as_deref(),
        seg: &seg,
    };

    let mut adam = Adam::new(vars.len());
    let mut schedule = PlateauSchedule::new(config.lr, config.lr_decay, config.plateau_window);
    let mut tracker = BestTracker::default();
    let mut loss_trace = Vec::new();
    let mut lr_trace = Vec::new();
    let mut stop = StopReason::Max;
    for _ in 0..config.max_iterations {
        let (d, grads) = objective.evaluate(&vars, rng)?;
        loss_trace.push(d);
        lr_trace.push(schedule.lr());
        if !d.is_finite() {
            stop = StopReason::Diverged;
            break;
        }
        if d < config.loss_floor {
            stop = StopReason::Floor;
            break;
        }
        match adam.step(&mut vars, &grads, schedule.lr()) {
            Ok(()) => {}
            Err(Error::Divergence(_)) => {
                stop = StopReason::Diverged;
                break;
            }
            Err(e) => return Err(e),
        }
        for r in &seg.masks {
            for v in &mut vars[r.clone()] {
                *v = v.clamp(0.0, 1.0);
            }
        }
        tracker.observe(d);
        schedule.observe(d);
        if tracker.since_best() >= config.stall_window {
            stop = StopReason::Stall;
            break;
        }
    }

    let masks = match mask_template {
        Some(t) => Some(t.with_values(seg.masks.iter().map(|r| vars[r.clone()].to_vec()).collect())?),
        None => None,
    };
    let soft_labels = seg.labels.as_ref().map(|r| softmax_rows(&vars[r.clone()], classes));
    let labels = match (&fixed_labels, &soft_labels) {
        (Some(l), _) => l.clone(),
        (None, Some(s)) => s
            .chunks(classes)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map_or(0, |(i, _)| i)
            })
            .collect(),
        (None, None) => unreachable!("labels are either analytic or learned"),
    };
    Ok(AttackResult {
        x: vars[seg.x].to_vec(),
        labels,
        soft_labels,
        masks,
        iterations_run: loss_trace.len(),
        loss_trace,
        lr_trace,
        stop_reason: stop,
    })
}

fn softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}

struct Objective<'a> {
    config: &'a AttackConfig,
    spec: &'a ModelSpec,
    params: &'a ParameterSet,
    client: &'a [f64],
    client_masks: Option<&'a MaskSet>,
    batch: usize,
    rate: f64,
    target: Option<&'a [f64]>,
    seg: &'a Segments,
}

impl Objective<'_> {
    /// Gradient distance and the gradient of the full attack loss w.r.t. `vars`.
    fn evaluate<R: Rng + ?Sized>(&self, vars: &[f64], rng: &mut R) -> Result<(f64, Vec<f64>)> {
        let spec = self.spec;
        let b = self.batch;
        let classes = spec.num_classes();
        let mut g = Graph::new();
        let p = self.params.to_graph(&mut g, true)?;
        let [c, h, w] = spec.input_shape();
        let x = g.leaf(&[b, c, h, w], vars[self.seg.x.clone()].to_vec(), true)?;
        let mut wrt = vec![x];

        let widths = spec.dropout_widths();
        let (mode, masks): (Mode, Option<Vec<NodeId>>) = match self.config.variant {
            Variant::IgEval => (Mode::Eval, None),
            Variant::IgTrain => {
                let m = MaskSet::sample_client(spec, b, rng)?;
                (Mode::Train, Some(m.to_graph(&mut g, false)?))
            }
            Variant::Wiig => {
                let m = self.client_masks.expect("checked before the loop");
                (Mode::Train, Some(m.to_graph(&mut g, false)?))
            }
            Variant::Dia => {
                let mut nodes = Vec::with_capacity(widths.len());
                for (r, &n) in self.seg.masks.iter().zip(&widths) {
                    nodes.push(g.leaf(&[b, n], vars[r.clone()].to_vec(), true)?);
                }
                wrt.extend_from_slice(&nodes);
                (Mode::Train, Some(nodes))
            }
        };

        let target = match (&self.seg.labels, self.target) {
            (Some(r), _) => {
                let y = g.leaf(&[b, classes], vars[r.clone()].to_vec(), true)?;
                wrt.push(y);
                softmax_node(&mut g, y, classes)?
            }
            (None, Some(t)) => g.constant(&[b, classes], t.to_vec())?,
            (None, None) => unreachable!("labels are either analytic or learned"),
        };

        let logits = forward(&mut g, spec, &p, x, mode, masks.as_deref())?;
        let ce = cross_entropy(&mut g, logits, target)?;
        let dummy = g.backward(ce, &p, true)?;
        let d = match self.config.distance {
            Distance::Global => {
                let mut flat = Vec::with_capacity(dummy.len());
                for &t in &dummy {
                    flat.push(g.flatten(t)?);
                }
                let all = g.concat(&flat)?;
                let client = g.constant(&[self.client.len()], self.client.to_vec())?;
                cosine_distance(&mut g, all, client)?
            }
            Distance::PerLayer => {
                let mut total: Option<NodeId> = None;
                for (&t, e) in dummy.iter().zip(self.params.layout().entries()) {
                    let client = g.constant(&e.shape, self.client[e.range()].to_vec())?;
                    let term = cosine_distance(&mut g, t, client)?;
                    total = Some(match total {
                        None => term,
                        Some(s) => g.add(s, term)?,
                    });
                }
                total.ok_or_else(|| Error::Precondition("model has no parameters".into()))?
            }
        };
        let mut loss = d;
        if self.config.tv_weight > 0.0 {
            let tv = total_variation(&mut g, x)?;
            let tv = g.scale(tv, self.config.tv_weight)?;
            loss = g.add(loss, tv)?;
        }
        if self.config.variant == Variant::Dia && self.config.mask_weight > 0.0 {
            let reg = mask_regularizer(&mut g, masks.as_deref().unwrap_or_default(), self.rate)?;
            let reg = g.scale(reg, self.config.mask_weight)?;
            loss = g.add(loss, reg)?;
        }
        let grads = g.backward(loss, &wrt, false)?;
        let mut flat = vec![0.0; vars.len()];
        flat[self.seg.x.clone()].copy_from_slice(g.values(grads[0]));
        let mut k = 1;
        if self.config.variant == Variant::Dia {
            for r in &self.seg.masks {
                flat[r.clone()].copy_from_slice(g.values(grads[k]));
                k += 1;
            }
        }
        if let Some(r) = &self.seg.labels {
            flat[r.clone()].copy_from_slice(g.values(grads[k]));
        }
        Ok((g.scalar(d), flat))
    }
}

/// Row softmax with the row maximum subtracted as a constant.
fn softmax_node(g: &mut Graph, logits: NodeId, classes: usize) -> Result<NodeId> {
    let shape = g.shape(logits).to_vec();
    let mut shift = Vec::with_capacity(g.node(logits).numel());
    for row in g.values(logits).chunks(classes) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        shift.extend(std::iter::repeat_n(m, classes));
    }
    let shift = g.constant(&shape, shift)?;
    let z = g.sub(logits, shift)?;
    let e = g.exp(z)?;
    let s = g.row_sums(e)?;
    let s = g.repeat_cols(s, classes)?;
    g.div(e, s)
}
