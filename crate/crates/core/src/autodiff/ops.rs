use crate::error::{Error, Result};

use super::tape::{Gradients, NodeId, Tape};
use super::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};

/// Epsilon guarding the square-root adjoint; guidance maps legitimately
/// contain exact zeros.
pub const SQRT_GRAD_EPS: f64 = 1e-12;

/// Recorded operation. Inputs are node ids on the same tape.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    /// out = A * B
    Matmul { a: NodeId, b: NodeId },
    /// out = A * B^T
    MatmulNT { a: NodeId, b: NodeId },
    Transpose { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    /// Elementwise minimum; ties route the adjoint to the first argument.
    MinElem { a: NodeId, b: NodeId },
    MaxElem { a: NodeId, b: NodeId },
    /// Row-broadcast bias add: x[m x n] + bias[n].
    AddBias { x: NodeId, bias: NodeId },
    Scale { x: NodeId, c: f64 },
    AddConst { x: NodeId },
    Relu { x: NodeId },
    Abs { x: NodeId },
    Sigmoid { x: NodeId },
    Sqrt { x: NodeId },
    /// softmax(scale * x) per row.
    SoftmaxRows { x: NodeId, scale: f64 },
    LogSoftmaxRows { x: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    /// Mean over rows of sum_j p_ij ln((p_ij+eps)/(q_ij+eps)).
    KlRows { p: NodeId, q: NodeId, eps: f64 },
    /// Each row divided by (row sum + eps).
    RenormRows { x: NodeId, eps: f64 },
    /// Scalar sum of coeffs (.) x; coefficients are not differentiated.
    DotConst { x: NodeId, coeffs: Tensor },
    SumAll { x: NodeId },
    /// Scalar maximum entry; the adjoint goes to the first maximizer.
    MaxAll { x: NodeId },
    SliceCols { x: NodeId, start: usize, len: usize },
    ConcatCols { parts: Vec<NodeId> },
    GatherRows { x: NodeId, rows: Vec<usize> },
    /// Elementwise mean of same-shape nodes.
    MeanOf { parts: Vec<NodeId> },
}

fn require_matrix(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::Shape(format!("{what} needs a 2-axis tensor, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn require_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl Tape {
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = require_matrix(self.value(a), "matmul lhs")?;
        let (k2, n) = require_matrix(self.value(b), "matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul inner axes {k} vs {k2}")));
        }
        let mut out = Tensor::zeros(vec![m, n]);
        matmul_nn(self.value(a).data(), self.value(b).data(), out.data_mut(), m, k, n);
        let rg = self.inputs_require_grad(&[a, b]);
        Ok(self.push(out, Op::Matmul { a, b }, rg))
    }

    /// A * B^T without materializing the transpose.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = require_matrix(self.value(a), "matmul_nt lhs")?;
        let (n, k2) = require_matrix(self.value(b), "matmul_nt rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul_nt inner axes {k} vs {k2}")));
        }
        let mut out = Tensor::zeros(vec![m, n]);
        matmul_nt(self.value(a).data(), self.value(b).data(), out.data_mut(), m, k, n);
        let rg = self.inputs_require_grad(&[a, b]);
        Ok(self.push(out, Op::MatmulNT { a, b }, rg))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        require_matrix(self.value(x), "transpose")?;
        let out = self.value(x).transposed();
        let rg = self.inputs_require_grad(&[x]);
        Ok(self.push(out, Op::Transpose { x }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(a, b, "sub", |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(a, b, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(a, b, "div", |x, y| x / y, |a, b| Op::Div { a, b })
    }

    pub fn min_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(a, b, "min", |x, y| if x <= y { x } else { y }, |a, b| {
            Op::MinElem { a, b }
        })
    }

    pub fn max_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(a, b, "max", |x, y| if x >= y { x } else { y }, |a, b| {
            Op::MaxElem { a, b }
        })
    }

    fn binary_elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(NodeId, NodeId) -> Op,
    ) -> Result<NodeId> {
        require_same_shape(self.value(a), self.value(b), what)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.inputs_require_grad(&[a, b]);
        Ok(self.push(out, op(a, b), rg))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = require_matrix(self.value(x), "add_bias input")?;
        if self.value(bias).shape() != [n] {
            return Err(Error::Shape(format!(
                "bias shape {:?}, expected [{n}]",
                self.value(bias).shape()
            )));
        }
        let mut out = self.value(x).clone();
        let bias_vals = self.value(bias).data().to_vec();
        for i in 0..m {
            for (o, &bv) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(&bias_vals) {
                *o += bv;
            }
        }
        let rg = self.inputs_require_grad(&[x, bias]);
        Ok(self.push(out, Op::AddBias { x, bias }, rg))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let data = self.value(x).data().iter().map(|&v| c * v).collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data).expect("same shape");
        let rg = self.inputs_require_grad(&[x]);
        self.push(out, Op::Scale { x, c }, rg)
    }

    pub fn add_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let data = self.value(x).data().iter().map(|&v| v + c).collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data).expect("same shape");
        let rg = self.inputs_require_grad(&[x]);
        self.push(out, Op::AddConst { x }, rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.max(0.0), |x| Op::Relu { x })
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::abs, |x| Op::Abs { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), |x| Op::Sigmoid { x })
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: impl FnOnce(NodeId) -> Op) -> NodeId {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data).expect("same shape");
        let rg = self.inputs_require_grad(&[x]);
        self.push(out, op(x), rg)
    }

    /// Entrywise square root. Entries must be nonnegative.
    pub fn sqrt_elem(&mut self, x: NodeId) -> Result<NodeId> {
        if let Some(v) = self.value(x).data().iter().find(|v| **v < 0.0) {
            return Err(Error::Domain(format!("sqrt of negative entry {v}")));
        }
        let data = self.value(x).data().iter().map(|v| v.sqrt()).collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let rg = self.inputs_require_grad(&[x]);
        Ok(self.push(out, Op::Sqrt { x }, rg))
    }

    /// Row-wise softmax of `scale * x`, stabilized by row-max subtraction.
    pub fn softmax_rows(&mut self, x: NodeId, scale: f64) -> Result<NodeId> {
        let (m, n) = require_matrix(self.value(x), "softmax_rows")?;
        let mut out = Tensor::zeros(vec![m, n]);
        for i in 0..m {
            let row = self.value(x).row(i);
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(scale * v));
            let dst = &mut out.data_mut()[i * n..(i + 1) * n];
            let mut sum = 0.0;
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (scale * v - mx).exp();
                sum += *d;
            }
            for d in dst.iter_mut() {
                *d /= sum;
            }
        }
        let rg = self.inputs_require_grad(&[x]);
        Ok(self.push(out, Op::SoftmaxRows { x, scale }, rg))
    }

    pub fn log_softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = require_matrix(self.value(x), "log_softmax_rows")?;
        let mut out = Tensor::zeros(vec![m, n]);
        for i in 0..m {
            let row = self.value(x).row(i);
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
            for (d, &v) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(row) {
                *d = v - lse;
            }
        }
        let rg = self.inputs_require_grad(&[x]);
        Ok(self.push(out, Op::LogSoftmaxRows { x }, rg))
    }

    /// Per-row normalization over the channel axis followed by an affine map.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (m, n) = require_matrix(self.value(x), "layer_norm input")?;
        if self.value(gain).shape() != [n] || self.value(bias).shape() != [n] {
            return Err(Error::Shape(format!(
                "layer_norm gain/bias must have shape [{n}], got {:?} and {:?}",
                self.value(gain).shape(),
                self.value(bias).shape()
            )));
        }
        let mut out = Tensor::zeros(vec![m, n]);
        let gain_vals = self.value(gain).data().to_vec();
        let bias_vals = self.value(bias).data().to_vec();
        for i in 0..m {
            let row = self.value(x).row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                let xhat = (row[j] - mean) * inv_std;
                out.data_mut()[i * n + j] = gain_vals[j] * xhat + bias_vals[j];
            }
        }
        let rg = self.inputs_require_grad(&[x, gain, bias]);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, eps }, rg))
    }

    /// Mean over rows of the eps-smoothed KL divergence between row
    /// distributions. Callers renormalize rows beforehand; the epsilon keeps
    /// exact zeros (legitimate in guidance maps) out of the logs.
    pub fn kl_rows(&mut self, p: NodeId, q: NodeId, eps: f64) -> Result<NodeId> {
        require_same_shape(self.value(p), self.value(q), "kl_rows")?;
        let (m, _n) = require_matrix(self.value(p), "kl_rows")?;
        let mut total = 0.0;
        for (&pv, &qv) in self.value(p).data().iter().zip(self.value(q).data()) {
            total += pv * ((pv + eps) / (qv + eps)).ln();
        }
        let out = Tensor::scalar(total / m as f64);
        let rg = self.inputs_require_grad(&[p, q]);
        Ok(self.push(out, Op::KlRows { p, q, eps }, rg))
    }

    /// Divide each row by its sum plus eps, mapping nonnegative rows to
    /// (near-)distributions; a zero row stays (near) zero instead of NaN.
    pub fn renorm_rows(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let (m, n) = require_matrix(self.value(x), "renorm_rows")?;
        let mut out = Tensor::zeros(vec![m, n]);
        for i in 0..m {
            let row = self.value(x).row(i);
            let denom = row.iter().sum::<f64>() + eps;
            for (d, &v) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(row) {
                *d = v / denom;
            }
        }
        let rg = self.inputs_require_grad(&[x]);
        Ok(self.push(out, Op::RenormRows { x, eps }, rg))
    }

    /// Scalar sum of `coeffs (.) x` with constant coefficients. The workhorse
    /// behind weighted losses: cross-entropy gathers, L1 terms, means.
    pub fn dot_const(&mut self, x: NodeId, coeffs: Tensor) -> Result<NodeId> {
        require_same_shape(self.value(x), &coeffs, "dot_const")?;
        let total: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(coeffs.data())
            .map(|(&v, &c)| v * c)
            .sum();
        let rg = self.inputs_require_grad(&[x]);
        Ok(self.push(Tensor::scalar(total), Op::DotConst { x, coeffs }, rg))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.value(x).data().iter().sum();
        let rg = self.inputs_require_grad(&[x]);
        self.push(Tensor::scalar(total), Op::SumAll { x }, rg)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn max_all(&mut self, x: NodeId) -> NodeId {
        let mx = self.value(x).data().iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let rg = self.inputs_require_grad(&[x]);
        self.push(Tensor::scalar(mx), Op::MaxAll { x }, rg)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = require_matrix(self.value(x), "slice_cols")?;
        if start + len > n {
            return Err(Error::Shape(format!("slice {start}..{} of {n} columns", start + len)));
        }
        let mut out = Tensor::zeros(vec![m, len]);
        for i in 0..m {
            let src = &self.value(x).row(i)[start..start + len];
            out.data_mut()[i * len..(i + 1) * len].copy_from_slice(src);
        }
        let rg = self.inputs_require_grad(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start, len }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols of zero parts".into()));
        }
        let m = require_matrix(self.value(parts[0]), "concat_cols")?.0;
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = require_matrix(self.value(p), "concat_cols part")?;
            if pm != m {
                return Err(Error::Shape(format!("concat_cols rows {pm} vs {m}")));
            }
            total += pn;
        }
        let mut out = Tensor::zeros(vec![m, total]);
        for i in 0..m {
            let mut offset = 0;
            for &p in parts {
                let pn = self.value(p).cols();
                out.data_mut()[i * total + offset..i * total + offset + pn]
                    .copy_from_slice(self.value(p).row(i));
                offset += pn;
            }
        }
        let rg = self.inputs_require_grad(parts);
        Ok(self.push(out, Op::ConcatCols { parts: parts.to_vec() }, rg))
    }

    /// Select rows by index (duplicates allowed; adjoint scatter-adds).
    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let (m, n) = require_matrix(self.value(x), "gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::Shape(format!("row index {bad} out of {m}")));
        }
        let mut out = Tensor::zeros(vec![rows.len(), n]);
        for (i, &r) in rows.iter().enumerate() {
            out.data_mut()[i * n..(i + 1) * n].copy_from_slice(self.value(x).row(r));
        }
        let rg = self.inputs_require_grad(&[x]);
        Ok(self.push(out, Op::GatherRows { x, rows: rows.to_vec() }, rg))
    }

    pub fn mean_of(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("mean_of zero parts".into()));
        }
        for &p in &parts[1..] {
            require_same_shape(self.value(parts[0]), self.value(p), "mean_of")?;
        }
        let shape = self.value(parts[0]).shape().to_vec();
        let mut data = vec![0.0; self.value(parts[0]).numel()];
        for &p in parts {
            for (d, &v) in data.iter_mut().zip(self.value(p).data()) {
                *d += v;
            }
        }
        let k = parts.len() as f64;
        for d in data.iter_mut() {
            *d /= k;
        }
        let out = Tensor::new(shape, data)?;
        let rg = self.inputs_require_grad(parts);
        Ok(self.push(out, Op::MeanOf { parts: parts.to_vec() }, rg))
    }

    pub(crate) fn apply_adjoint(&self, id: NodeId, g: &[f64], grads: &mut Gradients) {
        let nodes = &self.nodes;
        match &nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (nodes[*a].value.rows(), nodes[*a].value.cols());
                let n = nodes[*b].value.cols();
                if nodes[*a].requires_grad {
                    let mut da = vec![0.0; m * k];
                    matmul_nt(g, nodes[*b].value.data(), &mut da, m, n, k);
                    Tape::accumulate(grads, nodes, *a, da.into_iter());
                }
                if nodes[*b].requires_grad {
                    let mut db = vec![0.0; k * n];
                    matmul_tn(nodes[*a].value.data(), g, &mut db, m, k, n);
                    Tape::accumulate(grads, nodes, *b, db.into_iter());
                }
            }
            Op::MatmulNT { a, b } => {
                // out[m x n] = A[m x k] * B[n x k]^T
                let (m, k) = (nodes[*a].value.rows(), nodes[*a].value.cols());
                let n = nodes[*b].value.rows();
                if nodes[*a].requires_grad {
                    let mut da = vec![0.0; m * k];
                    matmul_nn(g, nodes[*b].value.data(), &mut da, m, n, k);
                    Tape::accumulate(grads, nodes, *a, da.into_iter());
                }
                if nodes[*b].requires_grad {
                    let mut db = vec![0.0; n * k];
                    matmul_tn(g, nodes[*a].value.data(), &mut db, m, n, k);
                    Tape::accumulate(grads, nodes, *b, db.into_iter());
                }
            }
            Op::Transpose { x } => {
                let (m, n) = (nodes[*x].value.rows(), nodes[*x].value.cols());
                // g has shape n x m; transpose it back.
                Tape::accumulate(
                    grads,
                    nodes,
                    *x,
                    (0..m * n).map(|idx| g[(idx % n) * m + idx / n]),
                );
            }
            Op::Add { a, b } => {
                Tape::accumulate(grads, nodes, *a, g.iter().copied());
                Tape::accumulate(grads, nodes, *b, g.iter().copied());
            }
            Op::Sub { a, b } => {
                Tape::accumulate(grads, nodes, *a, g.iter().copied());
                Tape::accumulate(grads, nodes, *b, g.iter().map(|&v| -v));
            }
            Op::Mul { a, b } => {
                Tape::accumulate(grads, nodes, *a, g.iter().zip(nodes[*b].value.data()).map(|(&gv, &bv)| gv * bv));
                Tape::accumulate(grads, nodes, *b, g.iter().zip(nodes[*a].value.data()).map(|(&gv, &av)| gv * av));
            }
            Op::Div { a, b } => {
                let av = nodes[*a].value.data();
                let bv = nodes[*b].value.data();
                Tape::accumulate(grads, nodes, *a, g.iter().zip(bv).map(|(&gv, &y)| gv / y));
                Tape::accumulate(
                    grads,
                    nodes,
                    *b,
                    g.iter().zip(av.iter().zip(bv)).map(|(&gv, (&x, &y))| -gv * x / (y * y)),
                );
            }
            Op::MinElem { a, b } => {
                let av = nodes[*a].value.data();
                let bv = nodes[*b].value.data();
                Tape::accumulate(
                    grads,
                    nodes,
                    *a,
                    g.iter().zip(av.iter().zip(bv)).map(|(&gv, (&x, &y))| if x <= y { gv } else { 0.0 }),
                );
                Tape::accumulate(
                    grads,
                    nodes,
                    *b,
                    g.iter().zip(av.iter().zip(bv)).map(|(&gv, (&x, &y))| if y < x { gv } else { 0.0 }),
                );
            }
            Op::MaxElem { a, b } => {
                let av = nodes[*a].value.data();
                let bv = nodes[*b].value.data();
                Tape::accumulate(
                    grads,
                    nodes,
                    *a,
                    g.iter().zip(av.iter().zip(bv)).map(|(&gv, (&x, &y))| if x >= y { gv } else { 0.0 }),
                );
                Tape::accumulate(
                    grads,
                    nodes,
                    *b,
                    g.iter().zip(av.iter().zip(bv)).map(|(&gv, (&x, &y))| if y > x { gv } else { 0.0 }),
                );
            }
            Op::AddBias { x, bias } => {
                Tape::accumulate(grads, nodes, *x, g.iter().copied());
                if nodes[*bias].requires_grad {
                    let n = nodes[*bias].value.numel();
                    let mut db = vec![0.0; n];
                    for (idx, &gv) in g.iter().enumerate() {
                        db[idx % n] += gv;
                    }
                    Tape::accumulate(grads, nodes, *bias, db.into_iter());
                }
            }
            Op::Scale { x, c } => {
                Tape::accumulate(grads, nodes, *x, g.iter().map(|&v| c * v));
            }
            Op::AddConst { x } => {
                Tape::accumulate(grads, nodes, *x, g.iter().copied());
            }
            Op::Relu { x } => {
                Tape::accumulate(
                    grads,
                    nodes,
                    *x,
                    g.iter().zip(nodes[*x].value.data()).map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 }),
                );
            }
            Op::Abs { x } => {
                Tape::accumulate(
                    grads,
                    nodes,
                    *x,
                    g.iter().zip(nodes[*x].value.data()).map(|(&gv, &xv)| gv * sign(xv)),
                );
            }
            Op::Sigmoid { x } => {
                Tape::accumulate(
                    grads,
                    nodes,
                    *x,
                    g.iter().zip(nodes[id].value.data()).map(|(&gv, &s)| gv * s * (1.0 - s)),
                );
            }
            Op::Sqrt { x } => {
                Tape::accumulate(
                    grads,
                    nodes,
                    *x,
                    g.iter()
                        .zip(nodes[*x].value.data())
                        .map(|(&gv, &xv)| gv / (2.0 * (xv + SQRT_GRAD_EPS).sqrt())),
                );
            }
            Op::SoftmaxRows { x, scale } => {
                let y = &nodes[id].value;
                let (m, n) = (y.rows(), y.cols());
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let yr = y.row(i);
                    let gr = &g[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                    for j in 0..n {
                        dx[i * n + j] = scale * yr[j] * (gr[j] - dot);
                    }
                }
                Tape::accumulate(grads, nodes, *x, dx.into_iter());
            }
            Op::LogSoftmaxRows { x } => {
                let y = &nodes[id].value;
                let (m, n) = (y.rows(), y.cols());
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let yr = y.row(i);
                    let gr = &g[i * n..(i + 1) * n];
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..n {
                        dx[i * n + j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                Tape::accumulate(grads, nodes, *x, dx.into_iter());
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = &nodes[*x].value;
                let (m, n) = (xv.rows(), xv.cols());
                let gain_vals = nodes[*gain].value.data();
                let mut dx = vec![0.0; m * n];
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                for i in 0..m {
                    let row = xv.row(i);
                    let gr = &g[i * n..(i + 1) * n];
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                    let dxhat: Vec<f64> = gr.iter().zip(gain_vals).map(|(&gv, &w)| gv * w).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(&d, &h)| d * h).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dx[i * n + j] = inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                    }
                }
                Tape::accumulate(grads, nodes, *x, dx.into_iter());
                Tape::accumulate(grads, nodes, *gain, dgain.into_iter());
                Tape::accumulate(grads, nodes, *bias, dbias.into_iter());
            }
            Op::KlRows { p, q, eps } => {
                let gv = g[0];
                let pm = &nodes[*p].value;
                let inv_m = 1.0 / pm.rows() as f64;
                let pv = pm.data();
                let qv = nodes[*q].value.data();
                Tape::accumulate(
                    grads,
                    nodes,
                    *p,
                    pv.iter().zip(qv).map(|(&pi, &qi)| {
                        gv * inv_m * (((pi + eps) / (qi + eps)).ln() + pi / (pi + eps))
                    }),
                );
                Tape::accumulate(
                    grads,
                    nodes,
                    *q,
                    pv.iter().zip(qv).map(|(&pi, &qi)| -gv * inv_m * pi / (qi + eps)),
                );
            }
            Op::RenormRows { x, eps } => {
                let xv = &nodes[*x].value;
                let (m, n) = (xv.rows(), xv.cols());
                let y = &nodes[id].value;
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let denom = xv.row(i).iter().sum::<f64>() + eps;
                    let gr = &g[i * n..(i + 1) * n];
                    let dot: f64 = gr.iter().zip(y.row(i)).map(|(&gv, &yv)| gv * yv).sum();
                    for j in 0..n {
                        dx[i * n + j] = (gr[j] - dot) / denom;
                    }
                }
                Tape::accumulate(grads, nodes, *x, dx.into_iter());
            }
            Op::DotConst { x, coeffs } => {
                let gv = g[0];
                Tape::accumulate(grads, nodes, *x, coeffs.data().iter().map(|&c| gv * c));
            }
            Op::SumAll { x } => {
                let gv = g[0];
                Tape::accumulate(grads, nodes, *x, std::iter::repeat(gv).take(nodes[*x].value.numel()));
            }
            Op::MaxAll { x } => {
                let gv = g[0];
                let data = nodes[*x].value.data();
                let argmax = data
                    .iter()
                    .enumerate()
                    .fold((0usize, f64::NEG_INFINITY), |best, (i, &v)| {
                        if v > best.1 { (i, v) } else { best }
                    })
                    .0;
                Tape::accumulate(
                    grads,
                    nodes,
                    *x,
                    (0..data.len()).map(|i| if i == argmax { gv } else { 0.0 }),
                );
            }
            Op::SliceCols { x, start, len } => {
                let (m, n) = (nodes[*x].value.rows(), nodes[*x].value.cols());
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                Tape::accumulate(grads, nodes, *x, dx.into_iter());
            }
            Op::ConcatCols { parts } => {
                let total: usize = parts.iter().map(|&p| nodes[p].value.cols()).sum();
                let m = nodes[parts[0]].value.rows();
                let mut offset = 0;
                for &p in parts {
                    let pn = nodes[p].value.cols();
                    if nodes[p].requires_grad {
                        let mut dp = vec![0.0; m * pn];
                        for i in 0..m {
                            dp[i * pn..(i + 1) * pn]
                                .copy_from_slice(&g[i * total + offset..i * total + offset + pn]);
                        }
                        Tape::accumulate(grads, nodes, p, dp.into_iter());
                    }
                    offset += pn;
                }
            }
            Op::GatherRows { x, rows } => {
                let (m, n) = (nodes[*x].value.rows(), nodes[*x].value.cols());
                let mut dx = vec![0.0; m * n];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..n {
                        dx[r * n + j] += g[i * n + j];
                    }
                }
                Tape::accumulate(grads, nodes, *x, dx.into_iter());
            }
            Op::MeanOf { parts } => {
                let inv_k = 1.0 / parts.len() as f64;
                for &p in parts {
                    Tape::accumulate(grads, nodes, p, g.iter().map(|&v| v * inv_k));
                }
            }
        }
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
