//! Model descriptions with mask-parameterized dropout.
//!
//! A [`ModelSpec`] is a plain list of layers. The same spec yields the
//! deterministic network (eval mode, dropout is the identity) and each of its
//! stochastic realizations (train mode, one mask per dropout layer and sample).

mod conv;
mod forward;
mod params;

use std::fmt;

pub use conv::{conv_output_size, im2col_map, SpatialLayout};
pub use forward::{client_gradient, cross_entropy, forward, loss_and_gradient, one_hot, Mode};
pub use params::{
    load_checkpoint, save_checkpoint, GradientVector, Layout, LayoutEntry, ParamKind, ParameterSet,
};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Sigmoid,
    Tanh,
}

impl Activation {
    fn name(self) -> &'static str {
        match self {
            Activation::Gelu => "gelu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense {
        inputs: usize,
        outputs: usize,
        bias: bool,
    },
    Activation(Activation),
    /// Inverted dropout with drop probability `rate`. `index` is 1-based and counts
    /// dropout layers from the input side.
    Dropout { rate: f64, index: usize },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Flatten,
}

/// Shape of the activation flowing out of a layer, per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureShape {
    Spatial { channels: usize, height: usize, width: usize },
    Flat(usize),
}

impl FeatureShape {
    pub fn numel(self) -> usize {
        match self {
            FeatureShape::Spatial {
                channels,
                height,
                width,
            } => channels * height * width,
            FeatureShape::Flat(n) => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    layers: Vec<Layer>,
    input_shape: [usize; 3],
    num_classes: usize,
    /// Output shape after each layer.
    shapes: Vec<FeatureShape>,
}

impl ModelSpec {
    /// Validates the layer stack against `input_shape` = (channels, height, width).
    pub fn new(input_shape: [usize; 3], num_classes: usize, layers: Vec<Layer>) -> Result<Self> {
        if input_shape.contains(&0) || num_classes == 0 {
            return Err(Error::InvalidArgument("empty input shape or zero classes".into()));
        }
        let mut shape = FeatureShape::Spatial {
            channels: input_shape[0],
            height: input_shape[1],
            width: input_shape[2],
        };
        let mut shapes = Vec::with_capacity(layers.len());
        let mut next_dropout = 1;
        for (i, layer) in layers.iter().enumerate() {
            shape = match *layer {
                Layer::Dense { inputs, outputs, .. } => {
                    if inputs != shape.numel() || outputs == 0 {
                        return Err(Error::InvalidArgument(format!(
                            "layer {i}: dense expects {inputs} inputs, receives {}",
                            shape.numel()
                        )));
                    }
                    FeatureShape::Flat(outputs)
                }
                Layer::Activation(_) => shape,
                Layer::Dropout { rate, index } => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(Error::InvalidArgument(format!(
                            "layer {i}: dropout rate {rate} outside [0, 1)"
                        )));
                    }
                    if index != next_dropout {
                        return Err(Error::InvalidArgument(format!(
                            "layer {i}: dropout index {index}, expected {next_dropout}"
                        )));
                    }
                    next_dropout += 1;
                    shape
                }
                Layer::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    pad,
                } => {
                    let FeatureShape::Spatial {
                        channels,
                        height,
                        width,
                    } = shape
                    else {
                        return Err(Error::InvalidArgument(format!("layer {i}: conv after flatten")));
                    };
                    if channels != in_channels || out_channels == 0 || kernel == 0 || stride == 0 {
                        return Err(Error::InvalidArgument(format!(
                            "layer {i}: conv expects {in_channels} channels, receives {channels}"
                        )));
                    }
                    let oh = conv_output_size(height, kernel, stride, pad)
                        .ok_or_else(|| Error::InvalidArgument(format!("layer {i}: kernel larger than input")))?;
                    let ow = conv_output_size(width, kernel, stride, pad)
                        .ok_or_else(|| Error::InvalidArgument(format!("layer {i}: kernel larger than input")))?;
                    FeatureShape::Spatial {
                        channels: out_channels,
                        height: oh,
                        width: ow,
                    }
                }
                Layer::Flatten => FeatureShape::Flat(shape.numel()),
            };
            shapes.push(shape);
        }
        match layers.last() {
            Some(Layer::Dense { outputs, .. }) if *outputs == num_classes => {}
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "final layer must be dense with {num_classes} outputs"
                )))
            }
        }
        Ok(Self {
            layers,
            input_shape,
            num_classes,
            shapes,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn input_numel(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Activation shape produced by layer `i`.
    pub fn output_shape(&self, i: usize) -> FeatureShape {
        self.shapes[i]
    }

    /// Same layers with a different (equal-sized) input layout, e.g. to present a
    /// flat MLP input as an image for the total-variation prior.
    pub fn with_input_shape(&self, input_shape: [usize; 3]) -> Result<Self> {
        if input_shape.iter().product::<usize>() != self.input_numel() {
            return Err(Error::InvalidArgument(format!(
                "input shape {:?} does not hold {} values",
                input_shape,
                self.input_numel()
            )));
        }
        Self::new(input_shape, self.num_classes, self.layers.clone())
    }

    /// Positions in `layers()` of the dropout layers, in index order.
    pub fn dropout_positions(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Dropout { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn num_dropout_layers(&self) -> usize {
        self.dropout_positions().len()
    }

    /// Per-sample mask width `n_i` of every dropout layer.
    pub fn dropout_widths(&self) -> Vec<usize> {
        self.dropout_positions()
            .into_iter()
            .map(|i| self.shapes[i].numel())
            .collect()
    }

    /// Dropout rate shared by all dropout layers; `0.0` when there are none.
    pub fn dropout_rate(&self) -> Result<f64> {
        let rates: Vec<f64> = self
            .layers
            .iter()
            .filter_map(|l| match l {
                Layer::Dropout { rate, .. } => Some(*rate),
                _ => None,
            })
            .collect();
        match rates.first() {
            None => Ok(0.0),
            Some(&r) if rates.iter().all(|&x| x == r) => Ok(r),
            Some(_) => Err(Error::InvalidArgument("dropout layers use different rates".into())),
        }
    }

    /// Copy of this model with every dropout layer set to rate `p`.
    pub fn with_dropout_rate(&self, p: f64) -> Result<Self> {
        let layers = self
            .layers
            .iter()
            .map(|l| match *l {
                Layer::Dropout { index, .. } => Layer::Dropout { rate: p, index },
                ref other => other.clone(),
            })
            .collect();
        Self::new(self.input_shape, self.num_classes, layers)
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match *l {
                Layer::Dense { inputs, outputs, bias } => inputs * outputs + if bias { outputs } else { 0 },
                Layer::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => in_channels * kernel * kernel * out_channels + out_channels,
                _ => 0,
            })
            .sum()
    }

    /// Position of the final dense layer.
    pub fn output_layer(&self) -> usize {
        self.layers.len() - 1
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [c, h, w] = self.input_shape;
        write!(f, "in={c}x{h}x{w}")?;
        for l in &self.layers {
            match *l {
                Layer::Dense { inputs, outputs, bias } => {
                    write!(f, ",dense{inputs}x{outputs}{}", if bias { "" } else { "nb" })?
                }
                Layer::Activation(a) => write!(f, ",{}", a.name())?,
                Layer::Dropout { rate, .. } => write!(f, ",dropout{rate}")?,
                Layer::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    pad,
                } => write!(f, ",conv{in_channels}x{out_channels}k{kernel}s{stride}p{pad}")?,
                Layer::Flatten => write!(f, ",flatten")?,
            }
        }
        write!(f, ",classes={}", self.num_classes)
    }
}

fn square_side(n: usize) -> Option<usize> {
    let s = (n as f64).sqrt().round() as usize;
    (s * s == n).then_some(s)
}

/// `depth` repetitions of dense -> GeLU -> dropout(p), then a dense output layer.
///
/// A perfect-square `input_dim` is laid out as a one-channel square image,
/// anything else as a `1 x 1 x input_dim` strip.
pub fn build_mlp(input_dim: usize, hidden_width: usize, depth: usize, num_classes: usize, p: f64) -> Result<ModelSpec> {
    let input_shape = match square_side(input_dim) {
        Some(s) => [1, s, s],
        None => [1, 1, input_dim],
    };
    let mut layers = Vec::with_capacity(3 * depth + 1);
    let mut width = input_dim;
    for i in 0..depth {
        layers.push(Layer::Dense {
            inputs: width,
            outputs: hidden_width,
            bias: true,
        });
        layers.push(Layer::Activation(Activation::Gelu));
        layers.push(Layer::Dropout { rate: p, index: i + 1 });
        width = hidden_width;
    }
    layers.push(Layer::Dense {
        inputs: width,
        outputs: num_classes,
        bias: true,
    });
    ModelSpec::new(input_shape, num_classes, layers)
}

/// Two 5x5 stride-2 sigmoid convolutions with 12 channels each, flatten, one dropout
/// layer, and the dense classifier.
pub fn build_lenet_lite(input_shape: [usize; 3], num_classes: usize, p: f64) -> Result<ModelSpec> {
    let conv = |in_channels| Layer::Conv {
        in_channels,
        out_channels: 12,
        kernel: 5,
        stride: 2,
        pad: 2,
    };
    let h = conv_output_size(input_shape[1], 5, 2, 2)
        .and_then(|h| conv_output_size(h, 5, 2, 2))
        .ok_or_else(|| Error::InvalidArgument("input too small for two 5x5 convolutions".into()))?;
    let w = conv_output_size(input_shape[2], 5, 2, 2)
        .and_then(|w| conv_output_size(w, 5, 2, 2))
        .ok_or_else(|| Error::InvalidArgument("input too small for two 5x5 convolutions".into()))?;
    let features = 12 * h * w;
    let layers = vec![
        conv(input_shape[0]),
        Layer::Activation(Activation::Sigmoid),
        conv(12),
        Layer::Activation(Activation::Sigmoid),
        Layer::Flatten,
        Layer::Dropout { rate: p, index: 1 },
        Layer::Dense {
            inputs: features,
            outputs: num_classes,
            bias: true,
        },
    ];
    ModelSpec::new(input_shape, num_classes, layers)
}

#[cfg(test)]
mod tests;
