use rand::Rng;

use super::conv::{im2col_map, SpatialLayout};
use super::params::{GradientVector, ParameterSet};
use super::{Activation, Layer, ModelSpec};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::masks::MaskSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout layers multiply by the supplied masks and rescale by `1/(1-p)`.
    Train,
    /// Dropout layers are the identity.
    Eval,
}

enum Repr {
    Image {
        layout: SpatialLayout,
        channels: usize,
        height: usize,
        width: usize,
    },
    Flat,
}

/// Logits `(B, num_classes)` for a batch `x` of shape `(B, C, H, W)` or `(B, C*H*W)`.
///
/// `params` are the graph leaves in layout order (see [`ParameterSet::to_graph`]).
/// In train mode `masks` must hold one `(B, n_i)` node per dropout layer.
pub fn forward(
    g: &mut Graph,
    spec: &ModelSpec,
    params: &[NodeId],
    x: NodeId,
    mode: Mode,
    masks: Option<&[NodeId]>,
) -> Result<NodeId> {
    let xs = g.shape(x).to_vec();
    let batch = *xs.first().ok_or_else(|| Error::shape("forward", "input has no batch axis"))?;
    if xs[1..].iter().product::<usize>() != spec.input_numel() {
        return Err(Error::shape(
            "forward",
            format!("input {:?} does not match model input {:?}", xs, spec.input_shape()),
        ));
    }
    let widths = spec.dropout_widths();
    if mode == Mode::Train {
        let masks = masks.ok_or_else(|| Error::MaskMismatch("train mode needs dropout masks".into()))?;
        if masks.len() != widths.len() {
            return Err(Error::MaskMismatch(format!(
                "{} mask layers for {} dropout layers",
                masks.len(),
                widths.len()
            )));
        }
        for (m, &n) in masks.iter().zip(&widths) {
            if g.shape(*m) != [batch, n] {
                return Err(Error::MaskMismatch(format!(
                    "mask shape {:?}, expected [{batch}, {n}]",
                    g.shape(*m)
                )));
            }
        }
    }

    let [c, h, w] = spec.input_shape();
    let mut cur = g.reshape(x, &[batch, spec.input_numel()])?;
    let mut repr = Repr::Image {
        layout: SpatialLayout::Nchw,
        channels: c,
        height: h,
        width: w,
    };
    let mut next_param = params.iter().copied();
    let mut take = || {
        next_param
            .next()
            .ok_or_else(|| Error::shape("forward", "fewer parameter tensors than layers need"))
    };
    let mut dropout_k = 0;

    for layer in spec.layers() {
        match *layer {
            Layer::Dense { bias, .. } => {
                let n = g.node(cur).numel() / batch;
                let flat = g.reshape(cur, &[batch, n])?;
                let weight = take()?;
                let mut out = g.matmul(flat, weight)?;
                if bias {
                    let b = take()?;
                    out = g.add_row(out, b)?;
                }
                cur = out;
                repr = Repr::Flat;
            }
            Layer::Activation(a) => {
                cur = match a {
                    Activation::Gelu => g.gelu(cur)?,
                    Activation::Sigmoid => g.sigmoid(cur)?,
                    Activation::Tanh => g.tanh(cur)?,
                };
            }
            Layer::Dropout { rate, .. } => {
                if mode == Mode::Train {
                    let mask = masks.expect("checked above")[dropout_k];
                    let shape = g.shape(cur).to_vec();
                    let n = g.node(cur).numel() / batch;
                    let flat = g.reshape(cur, &[batch, n])?;
                    let kept = g.mul(flat, mask)?;
                    let scaled = g.scale(kept, 1.0 / (1.0 - rate))?;
                    cur = g.reshape(scaled, &shape)?;
                }
                dropout_k += 1;
            }
            Layer::Conv {
                out_channels,
                kernel,
                stride,
                pad,
                ..
            } => {
                let Repr::Image {
                    layout,
                    channels,
                    height,
                    width,
                } = repr
                else {
                    return Err(Error::shape("forward", "convolution on flattened features"));
                };
                let (map, oh, ow) = im2col_map(batch, channels, height, width, kernel, stride, pad, layout)
                    .ok_or_else(|| Error::shape("forward", "kernel larger than feature map"))?;
                let cols = g.gather(cur, map, &[batch * oh * ow, channels * kernel * kernel])?;
                let weight = take()?;
                let out = g.matmul(cols, weight)?;
                let b = take()?;
                cur = g.add_row(out, b)?;
                repr = Repr::Image {
                    layout: SpatialLayout::Nhwc,
                    channels: out_channels,
                    height: oh,
                    width: ow,
                };
            }
            Layer::Flatten => {
                let n = g.node(cur).numel() / batch;
                cur = g.reshape(cur, &[batch, n])?;
                repr = Repr::Flat;
            }
        }
    }
    Ok(cur)
}

/// Row-wise one-hot encoding, `labels.len() x num_classes`.
pub fn one_hot(labels: &[usize], num_classes: usize) -> Vec<f64> {
    let mut out = vec![0.0; labels.len() * num_classes];
    for (i, &y) in labels.iter().enumerate() {
        out[i * num_classes + y] = 1.0;
    }
    out
}

/// Batch mean of `-sum_c target_c * log softmax(logits)_c`.
///
/// The row maximum is subtracted as a constant before exponentiation; the shift
/// cancels analytically so no derivative is lost.
pub fn cross_entropy(g: &mut Graph, logits: NodeId, target: NodeId) -> Result<NodeId> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || g.shape(target) != shape.as_slice() {
        return Err(Error::shape(
            "cross_entropy",
            format!("logits {:?} vs target {:?}", shape, g.shape(target)),
        ));
    }
    let (batch, classes) = (shape[0], shape[1]);
    for row in g.values(target).chunks(classes) {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 || row.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "target row {:?} is not a probability vector",
                row
            )));
        }
    }
    let lv = g.values(logits);
    let mut shift = Vec::with_capacity(lv.len());
    for row in lv.chunks(classes) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        shift.extend(std::iter::repeat_n(m, classes));
    }
    let shift = g.constant(&shape, shift)?;
    let z = g.sub(logits, shift)?;
    let e = g.exp(z)?;
    let s = g.row_sums(e)?;
    let lse = g.log(s)?;
    let lse = g.repeat_cols(lse, classes)?;
    let logp = g.sub(z, lse)?;
    let weighted = g.dot(target, logp)?;
    g.scale(weighted, -1.0 / batch as f64)
}

/// Loss value and flat parameter gradient for one batch.
///
/// `targets` is `B x num_classes` row-major. `masks` is required in train mode.
pub fn loss_and_gradient(
    spec: &ModelSpec,
    params: &ParameterSet,
    x: &[f64],
    targets: &[f64],
    mode: Mode,
    masks: Option<&MaskSet>,
) -> Result<(f64, GradientVector)> {
    let batch = batch_size(spec, x)?;
    let mut g = Graph::new();
    let p = params.to_graph(&mut g, true)?;
    let xn = g.constant(&[batch, spec.input_numel()], x.to_vec())?;
    let t = g.constant(&[batch, spec.num_classes()], targets.to_vec())?;
    let mask_nodes = masks.map(|m| m.to_graph(&mut g, false)).transpose()?;
    let logits = forward(&mut g, spec, &p, xn, mode, mask_nodes.as_deref())?;
    let loss = cross_entropy(&mut g, logits, t)?;
    let grads = g.backward(loss, &p, false)?;
    let mut flat = Vec::with_capacity(params.len());
    for id in grads {
        flat.extend_from_slice(g.values(id));
    }
    Ok((g.scalar(loss), GradientVector::new(flat, std::sync::Arc::clone(params.layout()))?))
}

/// One client training step's shared gradient: samples binary masks (keep
/// probability `1 - p`, independent per sample and element), runs the train-mode
/// forward, and returns the gradient together with the masks it used.
pub fn client_gradient<R: Rng + ?Sized>(
    spec: &ModelSpec,
    params: &ParameterSet,
    x: &[f64],
    labels: &[usize],
    rng: &mut R,
) -> Result<(GradientVector, MaskSet)> {
    let batch = batch_size(spec, x)?;
    if labels.len() != batch {
        return Err(Error::shape("client_gradient", "one label per sample required"));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= spec.num_classes()) {
        return Err(Error::InvalidArgument(format!("label {y} out of range")));
    }
    let masks = MaskSet::sample_client(spec, batch, rng)?;
    let targets = one_hot(labels, spec.num_classes());
    let (_, grad) = loss_and_gradient(spec, params, x, &targets, Mode::Train, Some(&masks))?;
    Ok((grad, masks))
}

pub(crate) fn batch_size(spec: &ModelSpec, x: &[f64]) -> Result<usize> {
    let n = spec.input_numel();
    if x.is_empty() || !x.len().is_multiple_of(n) {
        return Err(Error::shape(
            "batch",
            format!("{} values is not a whole number of {n}-value inputs", x.len()),
        ));
    }
    Ok(x.len() / n)
}
