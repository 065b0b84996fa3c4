//! Dropout mask algebra: client sampling, attacker initialization, clipping,
//! the throughput regularizer, mask distances, and analytic recovery from a
//! single-sample gradient.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::{GradientVector, Layer, ModelSpec, ParamKind};

/// Nonzero threshold for analytic mask recovery.
pub const ANALYTIC_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    /// Entries in {0, 1}; what the client samples.
    Binary,
    /// Entries in [0, 1]; what the attacker optimizes.
    Fuzzy,
}

/// Masks of one dropout layer, `(batch, width)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskLayer {
    batch: usize,
    width: usize,
    values: Vec<f64>,
}

impl MaskLayer {
    pub fn new(batch: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != batch * width {
            return Err(Error::shape(
                "mask",
                format!("({batch}, {width}) needs {} values, got {}", batch * width, values.len()),
            ));
        }
        Ok(Self { batch, width, values })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, sample: usize) -> &[f64] {
        &self.values[sample * self.width..(sample + 1) * self.width]
    }

    /// Mean keep rate `||psi||_1 / (B n)`.
    pub fn throughput(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    layers: Vec<MaskLayer>,
    kind: MaskKind,
    rate: f64,
}

impl MaskSet {
    pub fn new(layers: Vec<MaskLayer>, kind: MaskKind, rate: f64) -> Result<Self> {
        if let Some(first) = layers.first() {
            if layers.iter().any(|l| l.batch != first.batch) {
                return Err(Error::MaskMismatch("layers disagree on batch size".into()));
            }
        }
        let ok = layers.iter().flat_map(|l| &l.values).all(|&v| match kind {
            MaskKind::Binary => v == 0.0 || v == 1.0,
            MaskKind::Fuzzy => (0.0..=1.0).contains(&v),
        });
        if !ok {
            return Err(Error::InvalidArgument(format!("mask values outside the {kind:?} domain")));
        }
        Ok(Self { layers, kind, rate })
    }

    /// All-ones binary masks: the realization equal to the deterministic network.
    pub fn ones(spec: &ModelSpec, batch: usize) -> Result<Self> {
        let layers = spec
            .dropout_widths()
            .into_iter()
            .map(|n| MaskLayer::new(batch, n, vec![1.0; batch * n]))
            .collect::<Result<_>>()?;
        Self::new(layers, MaskKind::Binary, spec.dropout_rate()?)
    }

    /// Client masks: each element kept with probability `1 - p`, independently per
    /// sample and element.
    pub fn sample_client<R: Rng + ?Sized>(spec: &ModelSpec, batch: usize, rng: &mut R) -> Result<Self> {
        let p = spec.dropout_rate()?;
        let layers = spec
            .dropout_widths()
            .into_iter()
            .map(|n| {
                let v = (0..batch * n)
                    .map(|_| if rng.random::<f64>() < 1.0 - p { 1.0 } else { 0.0 })
                    .collect();
                MaskLayer::new(batch, n, v)
            })
            .collect::<Result<_>>()?;
        Self::new(layers, MaskKind::Binary, p)
    }

    pub fn layers(&self) -> &[MaskLayer] {
        &self.layers
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn batch(&self) -> usize {
        self.layers.first().map_or(0, |l| l.batch)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Total number of mask entries, `B * sum_i n_i`.
    pub fn numel(&self) -> usize {
        self.layers.iter().map(|l| l.values.len()).sum()
    }

    /// Same values tagged as fuzzy.
    pub fn into_fuzzy(self) -> Self {
        Self {
            kind: MaskKind::Fuzzy,
            ..self
        }
    }

    /// Replace the values of every layer, keeping shapes, kind and rate.
    pub fn with_values(&self, per_layer: Vec<Vec<f64>>) -> Result<Self> {
        if per_layer.len() != self.layers.len() {
            return Err(Error::MaskMismatch("layer count differs".into()));
        }
        let layers = self
            .layers
            .iter()
            .zip(per_layer)
            .map(|(l, v)| MaskLayer::new(l.batch, l.width, v))
            .collect::<Result<_>>()?;
        Self::new(layers, self.kind, self.rate)
    }

    /// Masks of samples `start..end` only.
    pub fn samples(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.batch() {
            return Err(Error::shape("mask samples", format!("{start}..{end} of {}", self.batch())));
        }
        let layers = self
            .layers
            .iter()
            .map(|l| MaskLayer::new(end - start, l.width, l.values[start * l.width..end * l.width].to_vec()))
            .collect::<Result<_>>()?;
        Self::new(layers, self.kind, self.rate)
    }

    pub fn check_matches(&self, spec: &ModelSpec, batch: usize) -> Result<()> {
        let widths = spec.dropout_widths();
        if widths.len() != self.layers.len()
            || self.layers.iter().zip(&widths).any(|(l, &n)| l.width != n || l.batch != batch)
        {
            return Err(Error::MaskMismatch(format!(
                "masks {:?} do not fit batch {batch} and widths {:?}",
                self.layers.iter().map(|l| (l.batch, l.width)).collect::<Vec<_>>(),
                widths
            )));
        }
        Ok(())
    }

    /// One `(B, n_i)` leaf per layer.
    pub fn to_graph(&self, g: &mut Graph, requires_grad: bool) -> Result<Vec<NodeId>> {
        self.layers
            .iter()
            .map(|l| g.leaf(&[l.batch, l.width], l.values.clone(), requires_grad))
            .collect()
    }

    /// Writes `<stem>_layer<i>.csv` per layer (header `sample,psi_0,...`, one row per
    /// sample) into `dir` and returns the paths.
    pub fn write_csv(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        let mut paths = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let mut out = String::from("sample");
            for k in 0..l.width {
                let _ = write!(out, ",psi_{k}");
            }
            out.push('\n');
            for b in 0..l.batch {
                let _ = write!(out, "{b}");
                for v in l.row(b) {
                    let _ = write!(out, ",{v}");
                }
                out.push('\n');
            }
            let path = dir.join(format!("{stem}_layer{}.csv", i + 1));
            crate::experiment::write_atomic(&path, out.as_bytes())?;
            paths.push(path);
        }
        Ok(paths)
    }
}

/// Elementwise clamp to [0, 1]. Idempotent.
pub fn clip_masks(masks: &MaskSet) -> MaskSet {
    MaskSet {
        layers: masks
            .layers
            .iter()
            .map(|l| MaskLayer {
                batch: l.batch,
                width: l.width,
                values: l.values.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            })
            .collect(),
        kind: masks.kind,
        rate: masks.rate,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskInitScheme {
    /// Binary draws with keep probability `1 - p`.
    BernoulliKeep,
    /// `N(1 - p, 1/sqrt(n_i))`.
    NormalWidth,
    /// `N(0.5, 0.25)`, for an attacker that does not know `p`.
    NormalFixed,
    /// Recovered from the client gradient; batch size 1 only.
    Analytic,
}

/// Starting masks for the attacker, clipped to [0, 1] and tagged fuzzy.
///
/// `client_grad` is consulted only by [`MaskInitScheme::Analytic`].
pub fn init_attacker_masks<R: Rng + ?Sized>(
    scheme: MaskInitScheme,
    spec: &ModelSpec,
    batch: usize,
    rng: &mut R,
    client_grad: Option<&GradientVector>,
) -> Result<MaskSet> {
    let widths = spec.dropout_widths();
    if widths.is_empty() {
        return Err(Error::Precondition("model has no dropout layers".into()));
    }
    let p = spec.dropout_rate()?;
    let layers: Vec<MaskLayer> = match scheme {
        MaskInitScheme::BernoulliKeep => return Ok(MaskSet::sample_client(spec, batch, rng)?.into_fuzzy()),
        MaskInitScheme::NormalWidth | MaskInitScheme::NormalFixed => widths
            .iter()
            .map(|&n| {
                let (mean, std) = match scheme {
                    MaskInitScheme::NormalWidth => (1.0 - p, 1.0 / (n as f64).sqrt()),
                    _ => (0.5, 0.25),
                };
                let dist = Normal::new(mean, std).expect("finite positive std");
                let v = (0..batch * n).map(|_| dist.sample(rng).clamp(0.0, 1.0)).collect();
                MaskLayer::new(batch, n, v)
            })
            .collect::<Result<_>>()?,
        MaskInitScheme::Analytic => {
            let grad = client_grad
                .ok_or_else(|| Error::Precondition("analytic mask init needs the client gradient".into()))?;
            (1..=widths.len())
                .map(|i| {
                    let row = analytic_mask_reconstruction(grad, spec, i, batch)?;
                    MaskLayer::new(batch, row.len(), row)
                })
                .collect::<Result<_>>()?
        }
    };
    MaskSet::new(layers, MaskKind::Fuzzy, p)
}

/// `sum_i |p - (1 - ||psi_i||_1 / (B n_i))|` as a differentiable node.
pub fn mask_regularizer(g: &mut Graph, masks: &[NodeId], p: f64) -> Result<NodeId> {
    let mut total: Option<NodeId> = None;
    for &m in masks {
        let n = g.node(m).numel() as f64;
        let s = g.sum(m)?;
        let rate = g.scale(s, 1.0 / n)?;
        let dev = g.add_scalar(rate, p - 1.0)?;
        let term = g.abs(dev)?;
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    Ok(total.unwrap_or_else(|| g.scalar_constant(0.0)))
}

/// Mean mask distance: `(1/l) sum_i ||psi_A - psi_C||^2 / (B n_i)`.
pub fn mmd(attacker: &MaskSet, client: &MaskSet) -> Result<f64> {
    if attacker.layers.len() != client.layers.len()
        || attacker
            .layers
            .iter()
            .zip(&client.layers)
            .any(|(a, c)| a.batch != c.batch || a.width != c.width)
    {
        return Err(Error::MaskMismatch("mmd needs masks of identical shapes".into()));
    }
    if attacker.layers.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = attacker
        .layers
        .iter()
        .zip(&client.layers)
        .map(|(a, c)| {
            let sq: f64 = a.values.iter().zip(&c.values).map(|(x, y)| (x - y) * (x - y)).sum();
            sq / a.values.len() as f64
        })
        .sum();
    Ok(total / attacker.layers.len() as f64)
}

/// Throughput rate distance: `(1/l) sum_i |p - (1 - ||psi_i||_1 / (B n_i))|`.
pub fn trd(masks: &MaskSet, p: f64) -> f64 {
    if masks.layers.is_empty() {
        return 0.0;
    }
    let total: f64 = masks.layers.iter().map(|l| (p - (1.0 - l.throughput())).abs()).sum();
    total / masks.layers.len() as f64
}

/// Recover the client's binary mask of dropout layer `index` (1-based) from a
/// batch-size-1 gradient.
///
/// The dense layer right after the dropout receives the dropped activations as
/// inputs, so input row `k` of its weight gradient vanishes exactly when element
/// `k` was dropped. A kept neuron whose gradient row happens to be zero is
/// reported as dropped.
pub fn analytic_mask_reconstruction(
    grad: &GradientVector,
    spec: &ModelSpec,
    index: usize,
    batch: usize,
) -> Result<Vec<f64>> {
    if batch != 1 {
        return Err(Error::Precondition(format!(
            "analytic mask recovery needs batch size 1, got {batch}"
        )));
    }
    let pos = *spec
        .dropout_positions()
        .get(index.wrapping_sub(1))
        .ok_or_else(|| Error::Precondition(format!("no dropout layer with index {index}")))?;
    let next = spec.layers()[pos + 1..]
        .iter()
        .position(|l| !matches!(l, Layer::Flatten))
        .map(|o| pos + 1 + o)
        .ok_or_else(|| Error::Precondition("dropout layer is last".into()))?;
    let Layer::Dense { inputs, outputs, .. } = spec.layers()[next] else {
        return Err(Error::Precondition(format!(
            "dropout layer {index} is not followed by a dense layer"
        )));
    };
    let w = grad
        .block(next, ParamKind::Weight)
        .ok_or_else(|| Error::Precondition("gradient layout has no weight block for that layer".into()))?;
    Ok((0..inputs)
        .map(|k| {
            let s: f64 = w[k * outputs..(k + 1) * outputs].iter().map(|v| v.abs()).sum();
            if s > ANALYTIC_THRESHOLD {
                1.0
            } else {
                0.0
            }
        })
        .collect())
}
