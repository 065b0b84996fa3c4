use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;

use super::{Layer, ModelSpec};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

/// One parameter tensor in the flat layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutEntry {
    /// Position of the owning layer in `ModelSpec::layers()`.
    pub layer: usize,
    pub kind: ParamKind,
    pub offset: usize,
    /// Dense weights are `(inputs, outputs)`; conv weights `(in_ch * k * k, out_ch)`.
    pub shape: Vec<usize>,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat parameter order: layers in order, weight before bias, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    entries: Vec<LayoutEntry>,
    total: usize,
}

impl Layout {
    pub fn for_spec(spec: &ModelSpec) -> Self {
        let mut entries = Vec::new();
        let mut offset = 0;
        let mut push = |layer, kind, shape: Vec<usize>| {
            let len: usize = shape.iter().product();
            entries.push(LayoutEntry {
                layer,
                kind,
                offset,
                shape,
            });
            offset += len;
        };
        for (i, l) in spec.layers().iter().enumerate() {
            match *l {
                Layer::Dense { inputs, outputs, bias } => {
                    push(i, ParamKind::Weight, vec![inputs, outputs]);
                    if bias {
                        push(i, ParamKind::Bias, vec![outputs]);
                    }
                }
                Layer::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    push(i, ParamKind::Weight, vec![in_channels * kernel * kernel, out_channels]);
                    push(i, ParamKind::Bias, vec![out_channels]);
                }
                _ => {}
            }
        }
        Self { entries, total: offset }
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn find(&self, layer: usize, kind: ParamKind) -> Option<&LayoutEntry> {
        self.entries.iter().find(|e| e.layer == layer && e.kind == kind)
    }
}

/// Numeric parameters of one model. Tensors are reference counted so graphs can
/// borrow them as leaves without copying.
#[derive(Debug, Clone)]
pub struct ParameterSet {
    layout: Arc<Layout>,
    tensors: Vec<Arc<Vec<f64>>>,
}

impl ParameterSet {
    /// Dense-only models get the PyTorch default, uniform in `+-1/sqrt(fan_in)`.
    /// Models with convolutions use uniform `+-0.5` for every tensor, the usual
    /// LeNet setting in gradient-leakage work; sigmoid convolutions initialized
    /// at the smaller scale leak too little for inversion to succeed.
    pub fn init<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Self {
        let convolutional = spec.layers().iter().any(|l| matches!(l, Layer::Conv { .. }));
        let layout = Layout::for_spec(spec);
        let tensors = layout
            .entries()
            .iter()
            .map(|e| {
                let fan_in = match spec.layers()[e.layer] {
                    Layer::Dense { inputs, .. } => inputs,
                    Layer::Conv {
                        in_channels, kernel, ..
                    } => in_channels * kernel * kernel,
                    _ => unreachable!("only dense and conv layers own parameters"),
                };
                let bound = if convolutional { 0.5 } else { 1.0 / (fan_in as f64).sqrt() };
                Arc::new((0..e.len()).map(|_| rng.random_range(-bound..bound)).collect())
            })
            .collect();
        Self {
            layout: Arc::new(layout),
            tensors,
        }
    }

    pub fn zeros(spec: &ModelSpec) -> Self {
        let layout = Layout::for_spec(spec);
        let tensors = layout.entries().iter().map(|e| Arc::new(vec![0.0; e.len()])).collect();
        Self {
            layout: Arc::new(layout),
            tensors,
        }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn tensors(&self) -> &[Arc<Vec<f64>>] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.layout.total()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for t in &self.tensors {
            out.extend_from_slice(t);
        }
        out
    }

    pub fn unflatten(layout: Arc<Layout>, flat: &[f64]) -> Result<Self> {
        if flat.len() != layout.total() {
            return Err(Error::shape(
                "unflatten",
                format!("expected {} values, got {}", layout.total(), flat.len()),
            ));
        }
        let tensors = layout
            .entries()
            .iter()
            .map(|e| Arc::new(flat[e.range()].to_vec()))
            .collect();
        Ok(Self { layout, tensors })
    }

    /// `self + scale * delta`, with `delta` in the flat layout.
    pub fn add_scaled(&self, delta: &[f64], scale: f64) -> Result<Self> {
        let mut flat = self.flatten();
        if delta.len() != flat.len() {
            return Err(Error::shape("add_scaled", "delta length differs from parameter count"));
        }
        for (p, d) in flat.iter_mut().zip(delta) {
            *p += scale * d;
        }
        Self::unflatten(Arc::clone(&self.layout), &flat)
    }

    /// Every tensor as a leaf of `g`, in layout order.
    pub fn to_graph(&self, g: &mut Graph, requires_grad: bool) -> Result<Vec<NodeId>> {
        self.layout
            .entries()
            .iter()
            .zip(&self.tensors)
            .map(|(e, t)| g.leaf_shared(&e.shape, Arc::clone(t), requires_grad))
            .collect()
    }
}

/// Flattened gradient of the training loss with respect to every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl GradientVector {
    pub fn new(values: Vec<f64>, layout: Arc<Layout>) -> Result<Self> {
        if values.len() != layout.total() {
            return Err(Error::shape(
                "gradient",
                format!("expected {} values, got {}", layout.total(), values.len()),
            ));
        }
        Ok(Self { values, layout })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Gradient block of one parameter tensor.
    pub fn block(&self, layer: usize, kind: ParamKind) -> Option<&[f64]> {
        self.layout.find(layer, kind).map(|e| &self.values[e.range()])
    }
}

/// Writes `gradleak-checkpoint spec=<spec> seed=<seed> count=<n>\n` followed by the
/// flat parameters as little-endian f64.
pub fn save_checkpoint(path: &Path, spec: &ModelSpec, seed: u64, params: &ParameterSet) -> Result<()> {
    let mut buf = Vec::with_capacity(64 + 8 * params.len());
    writeln!(buf, "gradleak-checkpoint spec={spec} seed={seed} count={}", params.len())
        .map_err(|e| Error::io(path, e))?;
    for v in params.flatten() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    crate::experiment::write_atomic(path, &buf)
}

/// Reads a checkpoint written by [`save_checkpoint`] for the same architecture
/// (dropout rates may differ); returns the parameters and the recorded seed.
pub fn load_checkpoint(path: &Path, spec: &ModelSpec) -> Result<(ParameterSet, u64)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut header = String::new();
    reader.read_line(&mut header).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::Config(format!("{}: {reason}", path.display()));
    let mut fields = header.trim_end().split(' ');
    if fields.next() != Some("gradleak-checkpoint") {
        return Err(bad("not a checkpoint file"));
    }
    let mut spec_text = None;
    let mut seed = None;
    let mut count = None;
    for f in fields {
        if let Some(v) = f.strip_prefix("spec=") {
            spec_text = Some(v.to_string());
        } else if let Some(v) = f.strip_prefix("seed=") {
            seed = v.parse::<u64>().ok();
        } else if let Some(v) = f.strip_prefix("count=") {
            count = v.parse::<usize>().ok();
        }
    }
    // dropout rates do not affect the parameter layout
    let architecture = |s: &str| -> String {
        s.split(',')
            .map(|t| if t.starts_with("dropout") { "dropout" } else { t })
            .collect::<Vec<_>>()
            .join(",")
    };
    if spec_text.as_deref().map(architecture) != Some(architecture(&spec.to_string())) {
        return Err(bad("checkpoint was written for a different model"));
    }
    let (Some(seed), Some(count)) = (seed, count) else {
        return Err(bad("incomplete header"));
    };
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() != 8 * count {
        return Err(bad("payload length does not match parameter count"));
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let layout = Arc::new(Layout::for_spec(spec));
    Ok((ParameterSet::unflatten(layout, &flat)?, seed))
}
