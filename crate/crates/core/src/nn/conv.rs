//! im2col index maps. A convolution becomes `gather(input, map) x weights`, so its
//! derivatives of every order fall out of the gather/scatter and matmul rules.

use std::sync::Arc;

use crate::autodiff::IndexMap;

/// Memory order of a batch of feature maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpatialLayout {
    /// (batch, channel, row, col) - how images enter the model.
    Nchw,
    /// (batch, row, col, channel) - how convolution outputs are produced.
    Nhwc,
}

pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

/// Patch matrix map of shape `(batch * out_h * out_w, channels * kernel * kernel)`.
///
/// Column order is (channel, kernel row, kernel col), matching weight rows.
/// Padding taps map to `None`.
#[allow(clippy::too_many_arguments)]
pub fn im2col_map(
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    layout: SpatialLayout,
) -> Option<(IndexMap, usize, usize)> {
    let oh = conv_output_size(height, kernel, stride, pad)?;
    let ow = conv_output_size(width, kernel, stride, pad)?;
    let cols = channels * kernel * kernel;
    let mut map = Vec::with_capacity(batch * oh * ow * cols);
    for b in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                for c in 0..channels {
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let y = (oy * stride + ky) as isize - pad as isize;
                            let x = (ox * stride + kx) as isize - pad as isize;
                            if y < 0 || x < 0 || y >= height as isize || x >= width as isize {
                                map.push(None);
                                continue;
                            }
                            let (y, x) = (y as usize, x as usize);
                            let idx = match layout {
                                SpatialLayout::Nchw => ((b * channels + c) * height + y) * width + x,
                                SpatialLayout::Nhwc => ((b * height + y) * width + x) * channels + c,
                            };
                            map.push(Some(idx));
                        }
                    }
                }
            }
        }
    }
    Some((Arc::new(map), oh, ow))
}
