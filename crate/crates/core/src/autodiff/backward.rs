use std::sync::Arc;

use super::{Graph, NodeId, Op};
use crate::error::{Error, Result};

impl Graph {
    /// Gradients of the scalar `root` with respect to each node in `wrt`, in order.
    ///
    /// Only nodes lying on a path from some `wrt` node to `root` are visited. A `wrt`
    /// node that does not influence `root` gets an exactly-zero gradient.
    ///
    /// With `create_graph` the returned gradients are ordinary interior nodes and can
    /// be differentiated again. Without it, the intermediate backward nodes are
    /// discarded and the gradients come back as constant leaves.
    ///
    /// When a node feeds several consumers, its incoming contributions are summed in
    /// reverse creation order of those consumers, so repeated runs are bit-identical.
    pub fn backward(&mut self, root: NodeId, wrt: &[NodeId], create_graph: bool) -> Result<Vec<NodeId>> {
        if self.node(root).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got shape {:?}", self.shape(root)),
            ));
        }
        let start_len = self.len();
        let end = root.0 + 1;

        let mut relevant = vec![false; end];
        for w in wrt {
            if w.0 < end {
                relevant[w.0] = true;
            }
        }
        for i in 0..end {
            if !relevant[i] {
                relevant[i] = self.nodes[i].op.parents().iter().any(|p| relevant[p.0]);
            }
        }

        let mut grads: Vec<Option<NodeId>> = vec![None; end];
        if relevant[root.0] {
            let seed_shape = self.shape(root).to_vec();
            grads[root.0] = Some(self.ones(&seed_shape));
        }

        for i in (0..end).rev() {
            if !relevant[i] {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let op = self.nodes[i].op.clone();
            for (parent, contrib) in self.vjp(NodeId(i), &op, g, &relevant)? {
                grads[parent.0] = Some(match grads[parent.0] {
                    None => contrib,
                    Some(acc) => self.add(acc, contrib)?,
                });
            }
        }

        let mut out = Vec::with_capacity(wrt.len());
        for w in wrt {
            let g = match grads.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let shape = self.shape(*w).to_vec();
                    self.zeros(&shape)
                }
            };
            out.push(g);
        }

        if create_graph {
            return Ok(out);
        }
        let detached: Vec<(Vec<usize>, Arc<Vec<f64>>)> = out
            .iter()
            .map(|&g| (self.shape(g).to_vec(), self.values_arc(g)))
            .collect();
        self.truncate(start_len);
        detached
            .into_iter()
            .map(|(shape, values)| self.leaf_shared(&shape, values, false))
            .collect()
    }

    /// Sum a broadcast gradient back down to a one-element operand when needed.
    fn unbroadcast(&mut self, g: NodeId, target: NodeId) -> Result<NodeId> {
        if self.shape(g) == self.shape(target) {
            return Ok(g);
        }
        let shape = self.shape(target).to_vec();
        let s = self.sum(g)?;
        self.reshape(s, &shape)
    }

    fn vjp(&mut self, out: NodeId, op: &Op, g: NodeId, relevant: &[bool]) -> Result<Vec<(NodeId, NodeId)>> {
        let need = |n: NodeId| relevant[n.0];
        let mut res = Vec::with_capacity(2);
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if need(a) {
                    res.push((a, self.unbroadcast(g, a)?));
                }
                if need(b) {
                    res.push((b, self.unbroadcast(g, b)?));
                }
            }
            Op::Sub(a, b) => {
                if need(a) {
                    res.push((a, self.unbroadcast(g, a)?));
                }
                if need(b) {
                    let neg = self.scale(g, -1.0)?;
                    res.push((b, self.unbroadcast(neg, b)?));
                }
            }
            Op::Mul(a, b) => {
                if need(a) {
                    let t = self.mul(g, b)?;
                    res.push((a, self.unbroadcast(t, a)?));
                }
                if need(b) {
                    let t = self.mul(g, a)?;
                    res.push((b, self.unbroadcast(t, b)?));
                }
            }
            Op::Div(a, b) => {
                if need(a) {
                    let t = self.div(g, b)?;
                    res.push((a, self.unbroadcast(t, a)?));
                }
                if need(b) {
                    // d(a/b)/db = -(a/b)/b
                    let t = self.mul(g, out)?;
                    let t = self.div(t, b)?;
                    let t = self.scale(t, -1.0)?;
                    res.push((b, self.unbroadcast(t, b)?));
                }
            }
            Op::MatMul(a, b) => {
                if need(a) {
                    let bt = self.transpose(b)?;
                    res.push((a, self.matmul(g, bt)?));
                }
                if need(b) {
                    let at = self.transpose(a)?;
                    res.push((b, self.matmul(at, g)?));
                }
            }
            Op::Sum(x) => {
                if need(x) {
                    let shape = self.shape(x).to_vec();
                    res.push((x, self.expand(g, &shape)?));
                }
            }
            Op::Mean(x) => {
                if need(x) {
                    let shape = self.shape(x).to_vec();
                    let n = self.node(x).numel() as f64;
                    let t = self.scale(g, 1.0 / n)?;
                    res.push((x, self.expand(t, &shape)?));
                }
            }
            Op::Expand(x) => {
                if need(x) {
                    let shape = self.shape(x).to_vec();
                    let s = self.sum(g)?;
                    res.push((x, self.reshape(s, &shape)?));
                }
            }
            Op::Exp(x) => {
                if need(x) {
                    res.push((x, self.mul(g, out)?));
                }
            }
            Op::Log(x) => {
                if need(x) {
                    res.push((x, self.div(g, x)?));
                }
            }
            Op::Tanh(x) => {
                if need(x) {
                    // 1 - tanh^2
                    let sq = self.square(out)?;
                    let neg = self.scale(sq, -1.0)?;
                    let d = self.add_scalar(neg, 1.0)?;
                    res.push((x, self.mul(g, d)?));
                }
            }
            Op::Abs(x) => {
                if need(x) {
                    let shape = self.shape(x).to_vec();
                    let sign = self.values(x).iter().map(|&v| sign(v)).collect();
                    let s = self.constant(&shape, sign)?;
                    res.push((x, self.mul(g, s)?));
                }
            }
            Op::Sqrt(x) => {
                if need(x) {
                    let two_out = self.scale(out, 2.0)?;
                    res.push((x, self.div(g, two_out)?));
                }
            }
            Op::Square(x) => {
                if need(x) {
                    let two_x = self.scale(x, 2.0)?;
                    res.push((x, self.mul(g, two_x)?));
                }
            }
            Op::Scale(x, c) => {
                if need(x) {
                    res.push((x, self.scale(g, c)?));
                }
            }
            Op::AddScalar(x, _) => {
                if need(x) {
                    res.push((x, g));
                }
            }
            Op::Clamp { x, lo, hi } => {
                if need(x) {
                    let shape = self.shape(x).to_vec();
                    let inside = self
                        .values(x)
                        .iter()
                        .map(|&v| if v > lo && v < hi { 1.0 } else { 0.0 })
                        .collect();
                    let m = self.constant(&shape, inside)?;
                    res.push((x, self.mul(g, m)?));
                }
            }
            Op::Concat(ref parts) => {
                let mut row = 0;
                for &p in parts {
                    let rows = self.shape(p)[0];
                    if need(p) {
                        res.push((p, self.slice(g, row, row + rows)?));
                    }
                    row += rows;
                }
            }
            Op::Reshape(x) => {
                if need(x) {
                    let shape = self.shape(x).to_vec();
                    res.push((x, self.reshape(g, &shape)?));
                }
            }
            Op::Slice { x, start, end } => {
                if need(x) {
                    let shape = self.shape(x).to_vec();
                    let mut parts = Vec::with_capacity(3);
                    if start > 0 {
                        let mut s = shape.clone();
                        s[0] = start;
                        parts.push(self.zeros(&s));
                    }
                    parts.push(g);
                    if end < shape[0] {
                        let mut s = shape.clone();
                        s[0] = shape[0] - end;
                        parts.push(self.zeros(&s));
                    }
                    let padded = if parts.len() == 1 { g } else { self.concat(&parts)? };
                    res.push((x, padded));
                }
            }
            Op::Transpose(x) => {
                if need(x) {
                    res.push((x, self.transpose(g)?));
                }
            }
            Op::Gather { x, ref map } => {
                if need(x) {
                    let shape = self.shape(x).to_vec();
                    res.push((x, self.scatter_add(g, Arc::clone(map), &shape)?));
                }
            }
            Op::ScatterAdd { x, ref map } => {
                if need(x) {
                    let shape = self.shape(x).to_vec();
                    res.push((x, self.gather(g, Arc::clone(map), &shape)?));
                }
            }
        }
        Ok(res)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
