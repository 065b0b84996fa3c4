use super::{Graph, IndexMap, NodeId, Op};
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    LeftScalar,
    RightScalar,
}

impl Graph {
    fn broadcast(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(Broadcast, Vec<usize>)> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.shape == nb.shape {
            Ok((Broadcast::Same, na.shape.clone()))
        } else if na.numel() == 1 {
            Ok((Broadcast::LeftScalar, nb.shape.clone()))
        } else if nb.numel() == 1 {
            Ok((Broadcast::RightScalar, na.shape.clone()))
        } else {
            Err(Error::shape(op, format!("{:?} vs {:?}", na.shape, nb.shape)))
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        let (mode, shape) = self.broadcast(name, a, b)?;
        let (va, vb) = (self.values(a), self.values(b));
        let values: Vec<f64> = match mode {
            Broadcast::Same => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::LeftScalar => vb.iter().map(|&y| f(va[0], y)).collect(),
            Broadcast::RightScalar => va.iter().map(|&x| f(x, vb[0])).collect(),
        };
        Ok(self.derived(shape, values, op))
    }

    fn unary(&mut self, x: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let shape = self.shape(x).to_vec();
        let values = self.values(x).iter().map(|&v| f(v)).collect();
        self.derived(shape, values, op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Elementwise quotient. Division by zero yields non-finite values rather than an error.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// `(m, k) x (k, n) -> (m, n)`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_kernel(self.values(a), self.values(b), m, k, n);
        Ok(self.derived(vec![m, n], out, Op::MatMul(a, b)))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.values(x).iter().sum();
        Ok(self.derived(Vec::new(), vec![s], Op::Sum(x)))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.node(x).numel();
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s: f64 = self.values(x).iter().sum();
        Ok(self.derived(Vec::new(), vec![s / n as f64], Op::Mean(x)))
    }

    /// Broadcast a one-element node to `shape`.
    pub fn expand(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        if self.node(x).numel() != 1 {
            return Err(Error::shape("expand", format!("source {:?} is not a scalar", self.shape(x))));
        }
        let n = shape.iter().product();
        let v = self.values(x)[0];
        Ok(self.derived(shape.to_vec(), vec![v; n], Op::Expand(x)))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        Ok(self.unary(x, Op::Exp(x), f64::exp))
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        Ok(self.unary(x, Op::Log(x), f64::ln))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        Ok(self.unary(x, Op::Tanh(x), f64::tanh))
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        Ok(self.unary(x, Op::Abs(x), f64::abs))
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        Ok(self.unary(x, Op::Sqrt(x), f64::sqrt))
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        Ok(self.unary(x, Op::Square(x), |v| v * v))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        Ok(self.unary(x, Op::Scale(x, c), |v| v * c))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        Ok(self.unary(x, Op::AddScalar(x, c), |v| v + c))
    }

    /// Elementwise clamp to `[lo, hi]`; the derivative is 1 strictly inside and 0 elsewhere.
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if lo > hi {
            return Err(Error::InvalidArgument(format!("clamp bounds {lo} > {hi}")));
        }
        Ok(self.unary(x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi)))
    }

    /// Concatenate along the leading axis. Trailing dimensions must agree.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let tail = self.shape(first).get(1..).unwrap_or(&[]).to_vec();
        if self.shape(first).is_empty() {
            return Err(Error::shape("concat", "cannot concatenate scalars"));
        }
        let mut rows = 0;
        let mut values = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape("concat", format!("{:?} vs trailing {:?}", s, tail)));
            }
            rows += s[0];
            values.extend_from_slice(self.values(p));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        Ok(self.derived(shape, values, Op::Concat(parts.to_vec())))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != self.node(x).numel() {
            return Err(Error::shape("reshape", format!("{:?} -> {:?}", self.shape(x), shape)));
        }
        let values = self.values_arc(x);
        let requires_grad = self.node(x).requires_grad;
        Ok(self.push(shape.to_vec(), values, Op::Reshape(x), requires_grad))
    }

    /// Flatten to one dimension.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.node(x).numel();
        self.reshape(x, &[n])
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || start > end || end > shape[0] {
            return Err(Error::shape("slice", format!("{start}..{end} of {:?}", shape)));
        }
        let row: usize = shape[1..].iter().product();
        let values = self.values(x)[start * row..end * row].to_vec();
        let mut out_shape = shape;
        out_shape[0] = end - start;
        Ok(self.derived(out_shape, values, Op::Slice { x, start, end }))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("expected 2-D, got {:?}", s)));
        }
        let (r, c) = (s[0], s[1]);
        let v = self.values(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        Ok(self.derived(vec![c, r], out, Op::Transpose(x)))
    }

    /// `out[i] = x[map[i]]` (or 0 for `None`), reshaped to `shape`.
    pub fn gather(&mut self, x: NodeId, map: IndexMap, shape: &[usize]) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        let src = self.values(x);
        if map.len() != n || map.iter().flatten().any(|&j| j >= src.len()) {
            return Err(Error::shape("gather", "index map does not fit input/output"));
        }
        let values = map.iter().map(|j| j.map_or(0.0, |j| src[j])).collect();
        Ok(self.derived(shape.to_vec(), values, Op::Gather { x, map }))
    }

    /// Adjoint of [`Graph::gather`]: `out[map[i]] += x[i]`, output of `shape`.
    pub fn scatter_add(&mut self, x: NodeId, map: IndexMap, shape: &[usize]) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        let src = self.values(x);
        if map.len() != src.len() || map.iter().flatten().any(|&j| j >= n) {
            return Err(Error::shape("scatter_add", "index map does not fit input/output"));
        }
        let mut values = vec![0.0; n];
        for (i, j) in map.iter().enumerate() {
            if let Some(j) = *j {
                values[j] += src[i];
            }
        }
        Ok(self.derived(shape.to_vec(), values, Op::ScatterAdd { x, map }))
    }

    /// Logistic sigmoid, written as `0.5 (1 + tanh(z / 2))`.
    pub fn sigmoid(&mut self, z: NodeId) -> Result<NodeId> {
        let half = self.scale(z, 0.5)?;
        let t = self.tanh(half)?;
        let t1 = self.add_scalar(t, 1.0)?;
        self.scale(t1, 0.5)
    }

    /// Tanh-approximated GeLU, `0.5 z (1 + tanh(sqrt(2/pi) (z + 0.044715 z^3)))`.
    pub fn gelu(&mut self, z: NodeId) -> Result<NodeId> {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
        let z2 = self.square(z)?;
        let z3 = self.mul(z2, z)?;
        let cubic = self.scale(z3, 0.044_715)?;
        let inner = self.add(z, cubic)?;
        let inner = self.scale(inner, C)?;
        let t = self.tanh(inner)?;
        let t1 = self.add_scalar(t, 1.0)?;
        let hz = self.scale(z, 0.5)?;
        self.mul(hz, t1)
    }

    /// Sum of `a * b` over all elements.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    /// Row sums of a 2-D node as a `(rows, 1)` column, via a product with ones.
    pub fn row_sums(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("row_sums", format!("expected 2-D, got {:?}", s)));
        }
        let ones = self.ones(&[s[1], 1]);
        self.matmul(x, ones)
    }

    /// Repeat a `(rows, 1)` column across `cols` columns.
    pub fn repeat_cols(&mut self, col: NodeId, cols: usize) -> Result<NodeId> {
        let s = self.shape(col).to_vec();
        if s.len() != 2 || s[1] != 1 {
            return Err(Error::shape("repeat_cols", format!("expected (n, 1), got {:?}", s)));
        }
        let ones = self.ones(&[1, cols]);
        self.matmul(col, ones)
    }

    /// Add a bias row `(n,)` to every row of `(rows, n)`.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        let n = self.node(row).numel();
        if s.len() != 2 || s[1] != n {
            return Err(Error::shape("add_row", format!("{:?} + row of {}", s, n)));
        }
        let ones = self.ones(&[s[0], 1]);
        let r = self.reshape(row, &[1, n])?;
        let tiled = self.matmul(ones, r)?;
        self.add(x, tiled)
    }
}

/// Row-major `(m,k) x (k,n)`, i-k-j loop order.
pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}
