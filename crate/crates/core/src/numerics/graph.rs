//! Tape-based reverse-mode autograd over [`Tensor`] values.
//!
//! Nodes are appended in topological order; `backward` walks the tape in
//! reverse and accumulates gradients of parameter leaves into a flat buffer
//! aligned with the [`super::ParamStore`] that produced them.

use super::ops;
use super::tensor::matmul_raw;
use super::{Scalar, Tensor};
use crate::{invalid, Result};

pub type NodeId = usize;

#[derive(Debug)]
enum Op<F> {
    /// Parameter or input leaf. `offset` locates it in the flat parameter
    /// vector; `None` means constant (no gradient is collected).
    Leaf { offset: Option<usize> },
    MatMul { trans_a: bool, trans_b: bool },
    Add,
    /// inputs: [matrix, row-vector]; adds the vector to every row.
    AddRowBroadcast,
    Scale(F),
    /// inputs: [x, s] with s a 1-element node; value = x * s.
    MulScalarNode,
    /// Pick entry `i` of a rank-1 input, producing a 1-element node.
    Index(usize),
    ConcatVec,
    ConcatRows,
    ConcatCols,
    SliceRows { start: usize, end: usize },
    SliceCols { start: usize, end: usize },
    Reshape,
    /// inputs: [x, gamma, beta]; per-row normalization.
    LayerNorm { eps: F },
    Gelu,
    Softplus,
    /// Softmax over a rank-1 input with temperature.
    Softmax { temp: F },
    /// Row-wise softmax of `scale * x`.
    SoftmaxRows { scale: F },
    CrossEntropy { label: usize },
    /// inputs: [p, q]; sum p ln(max(p,eps)/max(q,eps)).
    KlDiv { eps: F },
    /// inputs: [a, b]; sum (a-b)^2.
    SumSqDiff,
    /// Linear combination of scalar inputs with fixed coefficients.
    LinComb(Vec<F>),
    Detach,
}

struct Node<F> {
    op: Op<F>,
    inputs: Vec<NodeId>,
    value: Tensor<F>,
}

pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    param_len: usize,
}

impl<F: Scalar> Graph<F> {
    /// `param_len` is the length of the flat parameter vector gradients are
    /// accumulated against (0 for purely constant graphs).
    pub fn new(param_len: usize) -> Self {
        Graph {
            nodes: Vec::new(),
            param_len,
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<F>, inputs: Vec<NodeId>, value: Tensor<F>) -> NodeId {
        self.nodes.push(Node { op, inputs, value });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Tensor<F>, offset: Option<usize>) -> NodeId {
        self.push(Op::Leaf { offset }, vec![], value)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.leaf(value, None)
    }

    pub fn scalar_const(&mut self, v: F) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId, trans_a: bool, trans_b: bool) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        let (m, k) = if trans_a {
            (av.cols(), av.rows())
        } else {
            (av.rows(), av.cols())
        };
        let (kb, n) = if trans_b {
            (bv.cols(), bv.rows())
        } else {
            (bv.rows(), bv.cols())
        };
        if k != kb {
            return Err(invalid(format!(
                "matmul inner dims disagree: {k} vs {kb} (shapes {:?}, {:?})",
                av.shape(),
                bv.shape()
            )));
        }
        let (out, _, _) = matmul_raw(
            av.data(),
            av.rows(),
            av.cols(),
            trans_a,
            bv.data(),
            bv.rows(),
            bv.cols(),
            trans_b,
        );
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(Op::MatMul { trans_a, trans_b }, vec![a, b], value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        if av.shape() != bv.shape() {
            return Err(invalid(format!(
                "add shape mismatch: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data: Vec<F> = av
            .data()
            .iter()
            .zip(bv.data().iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(Op::Add, vec![a, b], value))
    }

    pub fn add_row_broadcast(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (mv, vv) = (&self.nodes[m].value, &self.nodes[v].value);
        if mv.cols() != vv.len() {
            return Err(invalid(format!(
                "row broadcast mismatch: {} cols vs vector of {}",
                mv.cols(),
                vv.len()
            )));
        }
        let cols = mv.cols();
        let data: Vec<F> = mv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vv.data()[i % cols])
            .collect();
        let value = Tensor::new(mv.shape().to_vec(), data)?;
        Ok(self.push(Op::AddRowBroadcast, vec![m, v], value))
    }

    pub fn scale(&mut self, x: NodeId, c: F) -> NodeId {
        let xv = &self.nodes[x].value;
        let data: Vec<F> = xv.data().iter().map(|&v| v * c).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(Op::Scale(c), vec![x], value)
    }

    pub fn mul_scalar_node(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.nodes[s].value.len() != 1 {
            return Err(invalid("mul_scalar_node: scalar operand must have one element"));
        }
        let sv = self.nodes[s].value.item();
        let xv = &self.nodes[x].value;
        let data: Vec<F> = xv.data().iter().map(|&v| v * sv).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(Op::MulScalarNode, vec![x, s], value))
    }

    pub fn index(&mut self, v: NodeId, i: usize) -> Result<NodeId> {
        let vv = &self.nodes[v].value;
        if i >= vv.len() {
            return Err(invalid(format!("index {i} out of range {}", vv.len())));
        }
        let value = Tensor::scalar(vv.data()[i]);
        Ok(self.push(Op::Index(i), vec![v], value))
    }

    pub fn concat_vec(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(invalid("concat_vec of no parts"));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.nodes[p].value.data());
        }
        let value = Tensor::vector(data);
        Ok(self.push(Op::ConcatVec, parts.to_vec(), value))
    }

    /// Stack matrix views on top of each other; rank-1 inputs count as one row.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(invalid("concat_rows of no parts"));
        }
        let cols = self.nodes[parts[0]].value.cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let pv = &self.nodes[p].value;
            if pv.cols() != cols {
                return Err(invalid(format!(
                    "concat_rows column mismatch: {} vs {}",
                    pv.cols(),
                    cols
                )));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let value = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(Op::ConcatRows, parts.to_vec(), value))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(invalid("concat_cols of no parts"));
        }
        let rows = self.nodes[parts[0]].value.rows();
        let mut cols = 0;
        for &p in parts {
            let pv = &self.nodes[p].value;
            if pv.rows() != rows {
                return Err(invalid(format!(
                    "concat_cols row mismatch: {} vs {}",
                    pv.rows(),
                    rows
                )));
            }
            cols += pv.cols();
        }
        let mut data = vec![F::zero(); rows * cols];
        let mut off = 0;
        for &p in parts {
            let pv = &self.nodes[p].value;
            let pc = pv.cols();
            for r in 0..rows {
                data[r * cols + off..r * cols + off + pc]
                    .copy_from_slice(&pv.data()[r * pc..(r + 1) * pc]);
            }
            off += pc;
        }
        let value = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(Op::ConcatCols, parts.to_vec(), value))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        if start >= end || end > xv.rows() {
            return Err(invalid(format!(
                "slice_rows [{start},{end}) out of range for {} rows",
                xv.rows()
            )));
        }
        let cols = xv.cols();
        let data = xv.data()[start * cols..end * cols].to_vec();
        let value = Tensor::matrix(end - start, cols, data)?;
        Ok(self.push(Op::SliceRows { start, end }, vec![x], value))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        if start >= end || end > xv.cols() {
            return Err(invalid(format!(
                "slice_cols [{start},{end}) out of range for {} cols",
                xv.cols()
            )));
        }
        let (rows, cols) = (xv.rows(), xv.cols());
        let w = end - start;
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&xv.data()[r * cols + start..r * cols + end]);
        }
        let value = Tensor::matrix(rows, w, data)?;
        Ok(self.push(Op::SliceCols { start, end }, vec![x], value))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.nodes[x].value.reshape(shape)?;
        Ok(self.push(Op::Reshape, vec![x], value))
    }

    /// Flatten any tensor to rank-1 (row-major order).
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.nodes[x].value.len();
        self.reshape(x, vec![n])
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: F) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        let d = xv.cols();
        if self.nodes[gamma].value.len() != d || self.nodes[beta].value.len() != d {
            return Err(invalid("layer_norm affine parameters must match feature dim"));
        }
        let rows = xv.rows();
        let g = self.nodes[gamma].value.data();
        let b = self.nodes[beta].value.data();
        let mut data = vec![F::zero(); rows * d];
        let inv_d = F::one() / F::from_f64(d as f64);
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean: F = row.iter().copied().sum::<F>() * inv_d;
            let var: F = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let inv_std = F::one() / (var + eps).sqrt();
            for i in 0..d {
                data[r * d + i] = (row[i] - mean) * inv_std * g[i] + b[i];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(Op::LayerNorm { eps }, vec![x, gamma, beta], value))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let data: Vec<F> = xv.data().iter().map(|&v| ops::gelu(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(Op::Gelu, vec![x], value)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let data: Vec<F> = xv.data().iter().map(|&v| ops::softplus(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(Op::Softplus, vec![x], value)
    }

    pub fn softmax_vec(&mut self, x: NodeId, temp: F) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        let out = ops::softmax(xv.data(), temp)?;
        let value = Tensor::vector(out);
        Ok(self.push(Op::Softmax { temp }, vec![x], value))
    }

    pub fn softmax_rows(&mut self, x: NodeId, scale: F) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut data = vec![F::zero(); rows * cols];
        for r in 0..rows {
            let row: Vec<F> = xv.data()[r * cols..(r + 1) * cols]
                .iter()
                .map(|&v| v * scale)
                .collect();
            let sm = ops::softmax(&row, F::one())?;
            data[r * cols..(r + 1) * cols].copy_from_slice(&sm);
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(Op::SoftmaxRows { scale }, vec![x], value))
    }

    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let lv = &self.nodes[logits].value;
        let v = ops::cross_entropy(lv.data(), label)?;
        Ok(self.push(Op::CrossEntropy { label }, vec![logits], Tensor::scalar(v)))
    }

    pub fn kl_div(&mut self, p: NodeId, q: NodeId, eps: F) -> Result<NodeId> {
        let v = ops::kl_divergence(self.nodes[p].value.data(), self.nodes[q].value.data(), eps)?;
        Ok(self.push(Op::KlDiv { eps }, vec![p, q], Tensor::scalar(v)))
    }

    pub fn sum_sq_diff(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::mse_pair(self.nodes[a].value.data(), self.nodes[b].value.data())?;
        Ok(self.push(Op::SumSqDiff, vec![a, b], Tensor::scalar(v)))
    }

    pub fn lin_comb(&mut self, parts: &[NodeId], coeffs: &[F]) -> Result<NodeId> {
        if parts.len() != coeffs.len() || parts.is_empty() {
            return Err(invalid("lin_comb needs matching, non-empty parts/coeffs"));
        }
        let shape = self.nodes[parts[0]].value.shape().to_vec();
        let mut acc = vec![F::zero(); self.nodes[parts[0]].value.len()];
        for (&p, &c) in parts.iter().zip(coeffs.iter()) {
            let pv = &self.nodes[p].value;
            if pv.shape() != shape.as_slice() {
                return Err(invalid("lin_comb operands must share one shape"));
            }
            for (a, &v) in acc.iter_mut().zip(pv.data()) {
                *a = *a + c * v;
            }
        }
        let value = Tensor::new(shape, acc)?;
        Ok(self.push(Op::LinComb(coeffs.to_vec()), parts.to_vec(), value))
    }

    /// Identity in the forward pass; blocks the gradient in the backward pass.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.clone();
        self.push(Op::Detach, vec![x], value)
    }

    /// Linear layer for a rank-1 input: y = x W + b.
    pub fn linear_vec(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let y = self.matmul(x, w, false, false)?;
        let n = self.nodes[y].value.len();
        let y = self.reshape(y, vec![n])?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Linear layer applied row-wise to a matrix: Y = X W + 1 b^T.
    pub fn linear_rows(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let y = self.matmul(x, w, false, false)?;
        match b {
            Some(b) => self.add_row_broadcast(y, b),
            None => Ok(y),
        }
    }

    /// Reverse pass from a scalar `loss` node. Returns the flat parameter
    /// gradient (aligned with the store this graph's leaves came from).
    pub fn backward(&mut self, loss: NodeId) -> Result<Vec<F>> {
        Ok(self.backward_full(loss)?.0)
    }

    /// Like [`Self::backward`] but also returns the adjoint of every node,
    /// which tests use to inspect gradients of non-parameter leaves.
    pub fn backward_full(&mut self, loss: NodeId) -> Result<(Vec<F>, Vec<Option<Tensor<F>>>)> {
        if self.nodes[loss].value.len() != 1 {
            return Err(invalid("backward requires a scalar loss node"));
        }
        let mut adj: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        adj[loss] = Some(Tensor::scalar(F::one()));
        let mut param_grads = vec![F::zero(); self.param_len];

        for id in (0..=loss).rev() {
            let g = match adj[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[id];
            let inputs = node.inputs.clone();
            let contribs = self.input_grads(id, &g)?;
            debug_assert_eq!(contribs.len(), inputs.len());
            for (inp, contrib) in inputs.into_iter().zip(contribs.into_iter()) {
                let contrib = match contrib {
                    Some(c) => c,
                    None => continue,
                };
                match adj[inp].as_mut() {
                    Some(existing) => {
                        for (e, c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                            *e = *e + *c;
                        }
                    }
                    None => adj[inp] = Some(contrib),
                }
            }
            // restore the adjoint for inspection, and collect leaf gradients
            if let Op::Leaf { offset: Some(off) } = self.nodes[id].op {
                for (i, &v) in g.data().iter().enumerate() {
                    param_grads[off + i] = param_grads[off + i] + v;
                }
            }
            adj[id] = Some(g);
        }
        Ok((param_grads, adj))
    }

    /// Gradient contributions of node `id` to each of its inputs, given the
    /// adjoint `g` of its output.
    fn input_grads(&self, id: NodeId, g: &Tensor<F>) -> Result<Vec<Option<Tensor<F>>>> {
        let node = &self.nodes[id];
        let inv = |i: usize| &self.nodes[node.inputs[i]].value;
        let out = match &node.op {
            Op::Leaf { .. } => vec![],
            Op::Detach => vec![None],
            Op::MatMul { trans_a, trans_b } => {
                let (av, bv) = (inv(0), inv(1));
                // logical views A_l (m x k), B_l (k x n); G is (m x n)
                // dA_l = G B_l^T, dB_l = A_l^T G
                let (m, n) = (g.rows(), g.cols());
                let da_l = matmul_raw(
                    g.data(),
                    m,
                    n,
                    false,
                    bv.data(),
                    bv.rows(),
                    bv.cols(),
                    !trans_b,
                )
                .0;
                let db_l = if *trans_b {
                    // dB = dB_l^T = G^T A_l
                    if *trans_a {
                        matmul_raw(g.data(), m, n, true, av.data(), av.rows(), av.cols(), true).0
                    } else {
                        matmul_raw(g.data(), m, n, true, av.data(), av.rows(), av.cols(), false).0
                    }
                } else if *trans_a {
                    matmul_raw(av.data(), av.rows(), av.cols(), false, g.data(), m, n, false).0
                } else {
                    matmul_raw(av.data(), av.rows(), av.cols(), true, g.data(), m, n, false).0
                };
                let da = if *trans_a {
                    // dA = dA_l^T: da_l is (m x k); transpose into a's layout
                    transpose(&da_l, m, g_inner(av, *trans_a))
                } else {
                    da_l
                };
                vec![
                    Some(Tensor::new(av.shape().to_vec(), da)?),
                    Some(Tensor::new(bv.shape().to_vec(), db_l)?),
                ]
            }
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::AddRowBroadcast => {
                let cols = inv(1).len();
                let mut dv = vec![F::zero(); cols];
                for (i, &x) in g.data().iter().enumerate() {
                    dv[i % cols] = dv[i % cols] + x;
                }
                vec![Some(g.clone()), Some(Tensor::vector(dv))]
            }
            Op::Scale(c) => {
                let data: Vec<F> = g.data().iter().map(|&v| v * *c).collect();
                vec![Some(Tensor::new(inv(0).shape().to_vec(), data)?)]
            }
            Op::MulScalarNode => {
                let s = inv(1).item();
                let x = inv(0);
                let dx: Vec<F> = g.data().iter().map(|&v| v * s).collect();
                let ds: F = g
                    .data()
                    .iter()
                    .zip(x.data().iter())
                    .map(|(&gv, &xv)| gv * xv)
                    .sum();
                vec![
                    Some(Tensor::new(x.shape().to_vec(), dx)?),
                    Some(Tensor::scalar(ds)),
                ]
            }
            Op::Index(i) => {
                let mut dv = Tensor::zeros(inv(0).shape().to_vec());
                dv.data_mut()[*i] = g.item();
                vec![Some(dv)]
            }
            Op::ConcatVec => {
                let mut out = Vec::with_capacity(node.inputs.len());
                let mut off = 0;
                for k in 0..node.inputs.len() {
                    let pv = inv(k);
                    let part = g.data()[off..off + pv.len()].to_vec();
                    off += pv.len();
                    out.push(Some(Tensor::new(pv.shape().to_vec(), part)?));
                }
                out
            }
            Op::ConcatRows => {
                let cols = node.value.cols();
                let mut out = Vec::with_capacity(node.inputs.len());
                let mut row = 0;
                for k in 0..node.inputs.len() {
                    let pv = inv(k);
                    let part = g.data()[row * cols..(row + pv.rows()) * cols].to_vec();
                    row += pv.rows();
                    out.push(Some(Tensor::new(pv.shape().to_vec(), part)?));
                }
                out
            }
            Op::ConcatCols => {
                let rows = node.value.rows();
                let cols = node.value.cols();
                let mut out = Vec::with_capacity(node.inputs.len());
                let mut coff = 0;
                for k in 0..node.inputs.len() {
                    let pv = inv(k);
                    let pc = pv.cols();
                    let mut part = Vec::with_capacity(rows * pc);
                    for r in 0..rows {
                        part.extend_from_slice(&g.data()[r * cols + coff..r * cols + coff + pc]);
                    }
                    coff += pc;
                    out.push(Some(Tensor::new(pv.shape().to_vec(), part)?));
                }
                out
            }
            Op::SliceRows { start, end } => {
                let xv = inv(0);
                let cols = xv.cols();
                debug_assert_eq!(g.len(), (end - start) * cols);
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                dx.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                vec![Some(dx)]
            }
            Op::SliceCols { start, end } => {
                let xv = inv(0);
                let (rows, cols) = (xv.rows(), xv.cols());
                let w = end - start;
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                for r in 0..rows {
                    dx.data_mut()[r * cols + start..r * cols + end]
                        .copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                vec![Some(dx)]
            }
            Op::Reshape => vec![Some(Tensor::new(inv(0).shape().to_vec(), g.data().to_vec())?)],
            Op::LayerNorm { eps } => {
                let xv = inv(0);
                let gamma = inv(1);
                let d = xv.cols();
                let rows = xv.rows();
                let inv_d = F::one() / F::from_f64(d as f64);
                let mut dx = vec![F::zero(); rows * d];
                let mut dgamma = vec![F::zero(); d];
                let mut dbeta = vec![F::zero(); d];
                for r in 0..rows {
                    let row = &xv.data()[r * d..(r + 1) * d];
                    let grow = &g.data()[r * d..(r + 1) * d];
                    let mean: F = row.iter().copied().sum::<F>() * inv_d;
                    let var: F = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
                    let inv_std = F::one() / (var + *eps).sqrt();
                    let xhat: Vec<F> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                    let dxhat: Vec<F> = grow
                        .iter()
                        .zip(gamma.data().iter())
                        .map(|(&gv, &ga)| gv * ga)
                        .collect();
                    let mean_dxhat: F = dxhat.iter().copied().sum::<F>() * inv_d;
                    let mean_dxhat_xhat: F = dxhat
                        .iter()
                        .zip(xhat.iter())
                        .map(|(&a, &b)| a * b)
                        .sum::<F>()
                        * inv_d;
                    for i in 0..d {
                        dx[r * d + i] =
                            inv_std * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
                        dgamma[i] = dgamma[i] + grow[i] * xhat[i];
                        dbeta[i] = dbeta[i] + grow[i];
                    }
                }
                vec![
                    Some(Tensor::new(xv.shape().to_vec(), dx)?),
                    Some(Tensor::vector(dgamma)),
                    Some(Tensor::vector(dbeta)),
                ]
            }
            Op::Gelu => {
                let xv = inv(0);
                let dx: Vec<F> = g
                    .data()
                    .iter()
                    .zip(xv.data().iter())
                    .map(|(&gv, &x)| gv * ops::gelu_deriv(x))
                    .collect();
                vec![Some(Tensor::new(xv.shape().to_vec(), dx)?)]
            }
            Op::Softplus => {
                let xv = inv(0);
                let dx: Vec<F> = g
                    .data()
                    .iter()
                    .zip(xv.data().iter())
                    .map(|(&gv, &x)| gv * ops::softplus_deriv(x))
                    .collect();
                vec![Some(Tensor::new(xv.shape().to_vec(), dx)?)]
            }
            Op::Softmax { temp } => {
                let y = node.value.data();
                let dot: F = g.data().iter().zip(y.iter()).map(|(&a, &b)| a * b).sum();
                let inv_t = F::one() / *temp;
                let dx: Vec<F> = g
                    .data()
                    .iter()
                    .zip(y.iter())
                    .map(|(&gv, &yv)| inv_t * yv * (gv - dot))
                    .collect();
                vec![Some(Tensor::new(inv(0).shape().to_vec(), dx)?)]
            }
            Op::SoftmaxRows { scale } => {
                let y = node.value.data();
                let (rows, cols) = (node.value.rows(), node.value.cols());
                let mut dx = vec![F::zero(); rows * cols];
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let dot: F = gr.iter().zip(yr.iter()).map(|(&a, &b)| a * b).sum();
                    for i in 0..cols {
                        dx[r * cols + i] = *scale * yr[i] * (gr[i] - dot);
                    }
                }
                vec![Some(Tensor::new(inv(0).shape().to_vec(), dx)?)]
            }
            Op::CrossEntropy { label } => {
                let lv = inv(0);
                let sm = ops::softmax(lv.data(), F::one())?;
                let gs = g.item();
                let dx: Vec<F> = sm
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| {
                        let onehot = if i == *label { F::one() } else { F::zero() };
                        gs * (p - onehot)
                    })
                    .collect();
                vec![Some(Tensor::new(lv.shape().to_vec(), dx)?)]
            }
            Op::KlDiv { eps } => {
                let (pv, qv) = (inv(0), inv(1));
                let gs = g.item();
                let mut dp = vec![F::zero(); pv.len()];
                let mut dq = vec![F::zero(); qv.len()];
                for i in 0..pv.len() {
                    let p = pv.data()[i];
                    let q = qv.data()[i];
                    let pc = p.max(*eps);
                    let qc = q.max(*eps);
                    let indicator_p = if p > *eps { F::one() } else { F::zero() };
                    let indicator_q = if q > *eps { F::one() } else { F::zero() };
                    dp[i] = gs * ((pc / qc).ln() + indicator_p);
                    dq[i] = -gs * p / qc * indicator_q;
                }
                vec![
                    Some(Tensor::new(pv.shape().to_vec(), dp)?),
                    Some(Tensor::new(qv.shape().to_vec(), dq)?),
                ]
            }
            Op::SumSqDiff => {
                let (av, bv) = (inv(0), inv(1));
                let gs = g.item();
                let two = F::from_f64(2.0);
                let da: Vec<F> = av
                    .data()
                    .iter()
                    .zip(bv.data().iter())
                    .map(|(&a, &b)| gs * two * (a - b))
                    .collect();
                let db: Vec<F> = da.iter().map(|&v| -v).collect();
                vec![
                    Some(Tensor::new(av.shape().to_vec(), da)?),
                    Some(Tensor::new(bv.shape().to_vec(), db)?),
                ]
            }
            Op::LinComb(coeffs) => coeffs
                .iter()
                .map(|&c| {
                    let data = g.data().iter().map(|&gv| gv * c).collect();
                    Tensor::new(g.shape().to_vec(), data).map(Some)
                })
                .collect::<Result<_>>()?,
        };
        Ok(out)
    }
}

fn g_inner<F: Scalar>(a: &Tensor<F>, trans_a: bool) -> usize {
    if trans_a {
        a.rows()
    } else {
        a.cols()
    }
}

fn transpose<F: Scalar>(data: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::check_gradients;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Build a scalar loss from leaves carved out of a flat parameter vector,
    /// then verify the analytic gradient against central differences at
    /// `points` random parameter vectors.
    fn check_op(
        shapes: &[Vec<usize>],
        points: usize,
        build: impl Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
    ) {
        let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..points {
            let x: Vec<f64> = (0..total).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let mut f = |p: &[f64]| {
                let mut g: Graph<f64> = Graph::new(total);
                let mut ids = Vec::new();
                let mut off = 0;
                for s in shapes {
                    let n: usize = s.iter().product();
                    let t = Tensor::new(s.clone(), p[off..off + n].to_vec()).unwrap();
                    ids.push(g.leaf(t, Some(off)));
                    off += n;
                }
                let loss = build(&mut g, &ids);
                assert_eq!(g.value(loss).len(), 1, "loss must be scalar");
                let v = g.value(loss).item();
                let grads = g.backward(loss).unwrap();
                (v, grads)
            };
            let report = check_gradients(&mut f, &x, 1e-5, 1e-4);
            assert!(
                report.passed(),
                "max rel {} at {:?}",
                report.max_rel_diff,
                report.worst_index
            );
        }
    }

    /// Reduce any node to a scalar: sum of squared differences to zero.
    fn scalarize(g: &mut Graph<f64>, x: NodeId) -> NodeId {
        let z = g.constant(Tensor::zeros(g.value(x).shape().to_vec()));
        g.sum_sq_diff(x, z).unwrap()
    }

    #[test]
    fn grad_matmul_all_transposes() {
        for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
            let a_shape = if ta { vec![4, 2] } else { vec![2, 4] };
            let b_shape = if tb { vec![3, 4] } else { vec![4, 3] };
            check_op(&[a_shape, b_shape], 25, move |g, ids| {
                let y = g.matmul(ids[0], ids[1], ta, tb).unwrap();
                scalarize(g, y)
            });
        }
    }

    #[test]
    fn grad_add_and_broadcast() {
        check_op(&[vec![3, 2], vec![3, 2]], 25, |g, ids| {
            let y = g.add(ids[0], ids[1]).unwrap();
            scalarize(g, y)
        });
        check_op(&[vec![3, 4], vec![4]], 25, |g, ids| {
            let y = g.add_row_broadcast(ids[0], ids[1]).unwrap();
            scalarize(g, y)
        });
    }

    #[test]
    fn grad_scale_index_mul_scalar() {
        check_op(&[vec![5]], 25, |g, ids| {
            let y = g.scale(ids[0], -0.7);
            scalarize(g, y)
        });
        check_op(&[vec![4], vec![1]], 25, |g, ids| {
            let y = g.mul_scalar_node(ids[0], ids[1]).unwrap();
            scalarize(g, y)
        });
        check_op(&[vec![4]], 25, |g, ids| {
            let s = g.index(ids[0], 2).unwrap();
            let y = g.mul_scalar_node(ids[0], s).unwrap();
            scalarize(g, y)
        });
    }

    #[test]
    fn grad_concat_and_slice() {
        check_op(&[vec![3], vec![2], vec![4]], 25, |g, ids| {
            let y = g.concat_vec(ids).unwrap();
            scalarize(g, y)
        });
        check_op(&[vec![2, 3], vec![1, 3]], 25, |g, ids| {
            let y = g.concat_rows(ids).unwrap();
            let y = g.slice_rows(y, 1, 3).unwrap();
            scalarize(g, y)
        });
        check_op(&[vec![2, 3], vec![2, 2]], 25, |g, ids| {
            let y = g.concat_cols(ids).unwrap();
            let y = g.slice_cols(y, 1, 4).unwrap();
            scalarize(g, y)
        });
        check_op(&[vec![2, 6]], 25, |g, ids| {
            let y = g.reshape(ids[0], vec![3, 4]).unwrap();
            scalarize(g, y)
        });
    }

    #[test]
    fn grad_layer_norm_gelu() {
        check_op(&[vec![3, 4], vec![4], vec![4]], 25, |g, ids| {
            let y = g.layer_norm(ids[0], ids[1], ids[2], 1e-5).unwrap();
            scalarize(g, y)
        });
        check_op(&[vec![6]], 25, |g, ids| {
            let y = g.gelu(ids[0]);
            scalarize(g, y)
        });
    }

    #[test]
    fn grad_softmax_variants() {
        check_op(&[vec![5]], 25, |g, ids| {
            let y = g.softmax_vec(ids[0], 0.7).unwrap();
            scalarize(g, y)
        });
        check_op(&[vec![3, 4]], 25, |g, ids| {
            let y = g.softmax_rows(ids[0], 0.5).unwrap();
            scalarize(g, y)
        });
    }

    #[test]
    fn grad_losses() {
        check_op(&[vec![4]], 25, |g, ids| {
            g.cross_entropy(ids[0], 1).unwrap()
        });
        check_op(&[vec![4], vec![4]], 25, |g, ids| {
            let p = g.softmax_vec(ids[0], 1.0).unwrap();
            let q = g.softmax_vec(ids[1], 1.0).unwrap();
            g.kl_div(p, q, 1e-8).unwrap()
        });
        check_op(&[vec![5], vec![5]], 25, |g, ids| {
            g.sum_sq_diff(ids[0], ids[1]).unwrap()
        });
        check_op(&[vec![3], vec![3]], 25, |g, ids| {
            let a = g.sum_sq_diff(ids[0], ids[1]).unwrap();
            let b = g.cross_entropy(ids[0], 0).unwrap();
            g.lin_comb(&[a, b], &[0.3, 1.7]).unwrap()
        });
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g: Graph<f64> = Graph::new(3);
        let x = Tensor::vector(vec![0.5, -1.0, 2.0]);
        let leaf = g.leaf(x, Some(0));
        let d = g.detach(leaf);
        let z = g.constant(Tensor::zeros(vec![3]));
        let loss = g.sum_sq_diff(d, z).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads, vec![0.0, 0.0, 0.0]);
        assert!(g.value(loss).item() > 0.0);
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero_pre_affine() {
        let mut g: Graph<f64> = Graph::new(0);
        let x = g.constant(Tensor::matrix(1, 4, vec![3.0; 4]).unwrap());
        let gamma = g.constant(Tensor::vector(vec![1.0; 4]));
        let beta = g.constant(Tensor::vector(vec![0.0; 4]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for &v in g.value(y).data() {
            assert_eq!(v, 0.0);
        }
    }
}
