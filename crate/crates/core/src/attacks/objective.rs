use std::sync::Arc;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};

/// Guard added inside each norm of the cosine distance.
pub const COSINE_EPS: f64 = 1e-12;

/// `1 - <a, b> / (sqrt(|a|^2 + eps) sqrt(|b|^2 + eps))` over the flattened inputs.
pub fn cosine_distance(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    if g.node(a).numel() != g.node(b).numel() {
        return Err(Error::shape(
            "cosine_distance",
            format!("{:?} vs {:?}", g.shape(a), g.shape(b)),
        ));
    }
    let a = g.flatten(a)?;
    let b = g.flatten(b)?;
    let ab = g.dot(a, b)?;
    let na = norm(g, a)?;
    let nb = norm(g, b)?;
    let den = g.mul(na, nb)?;
    let ratio = g.div(ab, den)?;
    let neg = g.scale(ratio, -1.0)?;
    g.add_scalar(neg, 1.0)
}

fn norm(g: &mut Graph, v: NodeId) -> Result<NodeId> {
    let sq = g.square(v)?;
    let s = g.sum(sq)?;
    let s = g.add_scalar(s, COSINE_EPS)?;
    g.sqrt(s)
}

/// Anisotropic total variation of a `(B, C, H, W)` batch: per image, the sum of
/// absolute horizontal and vertical neighbour differences over all channels,
/// averaged over the batch. An axis of length 1 contributes nothing.
pub fn total_variation(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let &[b, c, h, w] = g.shape(x) else {
        return Err(Error::shape("total_variation", format!("expected (B, C, H, W), got {:?}", g.shape(x))));
    };
    let mut total: Option<NodeId> = None;
    for (dy, dx) in [(0, 1), (1, 0)] {
        let mut from = Vec::new();
        let mut to = Vec::new();
        for plane in 0..b * c {
            for y in 0..h - dy {
                for xx in 0..w - dx {
                    from.push(Some((plane * h + y) * w + xx));
                    to.push(Some((plane * h + y + dy) * w + xx + dx));
                }
            }
        }
        if from.is_empty() {
            continue;
        }
        let n = from.len();
        let lo = g.gather(x, Arc::new(from), &[n])?;
        let hi = g.gather(x, Arc::new(to), &[n])?;
        let d = g.sub(hi, lo)?;
        let d = g.abs(d)?;
        let s = g.sum(d)?;
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    match total {
        Some(t) => g.scale(t, 1.0 / b as f64),
        None => Ok(g.scalar_constant(0.0)),
    }
}
