//! Reverse-mode differentiation over a dynamically built tape.
//!
//! Every forward pass records its operations on a fresh [`Graph`]. Node ids
//! are handed out in creation order, so the tape is already topologically
//! sorted and [`Graph::gradients`] only has to walk it backwards once.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Guard on the product of norms in [`Graph::cosine_similarity_matrix`].
pub const COSINE_EPS: f64 = 1e-8;
/// Variance guard in [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Reduce down each column; one value per column.
    Rows,
    /// Reduce along each row; one value per row.
    Cols,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine(NodeId, T),
    Elementwise(Activation, NodeId),
    RowSoftmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    Max {
        x: NodeId,
        axis: Axis,
        argmax: Vec<usize>,
    },
    Cosine {
        a: NodeId,
        b: NodeId,
        a_norms: Vec<T>,
        b_norms: Vec<T>,
        eps: T,
    },
    ConcatCols(NodeId, NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    GatherRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    Transpose(NodeId),
    Sum(NodeId),
    Stack(Vec<NodeId>),
    Diagonal(NodeId),
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Recording of one forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, NodeId>,
    branches: u64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            branches: FNV_OFFSET,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node so the graph can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.branches = FNV_OFFSET;
    }

    /// Hash of every discrete choice made so far: ReLU active sets, max
    /// indices and cosine norm clamps. Two forward passes with equal
    /// signatures took the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        self.branches
    }

    fn record_branch(&mut self, choice: u64) {
        self.branches = (self.branches ^ choice).wrapping_mul(FNV_PRIME);
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Records a constant or input tensor.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Leaf holding the current value of a parameter. Repeated calls for
    /// the same parameter return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        if let Some(&node) = self.params.get(&id) {
            return node;
        }
        let node = self.input(store.value(id).clone());
        self.params.insert(id, node);
        node
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(
                op,
                format!("operands {sa:?} and {sb:?} differ"),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), value))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), value))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: NodeId, scale: T, shift: T) -> NodeId {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push(Op::Affine(x, scale), value)
    }

    pub fn scale(&mut self, x: NodeId, scale: T) -> NodeId {
        self.affine(x, scale, T::zero())
    }

    pub fn elementwise(&mut self, kind: Activation, x: NodeId) -> NodeId {
        if kind == Activation::Relu {
            let active: Vec<bool> = self
                .value(x)
                .data()
                .iter()
                .map(|&v| v > T::zero())
                .collect();
            for a in active {
                self.record_branch(a as u64);
            }
        }
        let value = match kind {
            // NaN passes through so non-finite losses stay detectable.
            Activation::Relu => self.value(x).map(|v| {
                if v > T::zero() || v.is_nan() {
                    v
                } else {
                    T::zero()
                }
            }),
            Activation::Tanh => self.value(x).map(|v| v.tanh()),
            Activation::Sigmoid => self.value(x).map(sigmoid),
        };
        self.push(Op::Elementwise(kind, x), value)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.elementwise(Activation::Relu, x)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.elementwise(Activation::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.elementwise(Activation::Sigmoid, x)
    }

    /// Softmax along each row, computed after subtracting the row max.
    pub fn row_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let src = self.value(x);
        let (p, q) = src.dims2()?;
        let mut out = vec![T::zero(); p * q];
        for i in 0..p {
            let row = src.row(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for (o, &v) in out[i * q..(i + 1) * q].iter_mut().zip(row) {
                *o = (v - max).exp();
                total = total + *o;
            }
            for o in &mut out[i * q..(i + 1) * q] {
                *o = *o / total;
            }
        }
        let value = Tensor::new(vec![p, q], out)?;
        Ok(self.push(Op::RowSoftmax(x), value))
    }

    /// Per-row standardisation (population variance, guarded by `eps`)
    /// followed by `gain * x + bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: T) -> Result<NodeId> {
        let src = self.value(x);
        let (p, d) = src.dims2()?;
        if d == 0 {
            return Err(Error::shape("layer_norm", "rows must be non-empty"));
        }
        let (g, b) = (self.value(gain), self.value(bias));
        if g.shape() != [d] || b.shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} do not match width {d}",
                    g.shape(),
                    b.shape()
                ),
            ));
        }
        let width = T::from_usize(d).unwrap();
        let mut normalized = vec![T::zero(); p * d];
        let mut inv_std = vec![T::zero(); p];
        let mut out = vec![T::zero(); p * d];
        for i in 0..p {
            let row = src.row(i);
            let mean = row.iter().copied().sum::<T>() / width;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / width;
            let rstd = T::one() / (var + eps).sqrt();
            inv_std[i] = rstd;
            for j in 0..d {
                let xh = (row[j] - mean) * rstd;
                normalized[i * d + j] = xh;
                out[i * d + j] = xh * g.data()[j] + b.data()[j];
            }
        }
        let value = Tensor::new(vec![p, d], out)?;
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            value,
        ))
    }

    /// Maximum of each slice along `axis`, with the first index reaching it.
    /// The gradient flows only to that index.
    pub fn max_over_axis(&mut self, x: NodeId, axis: Axis) -> Result<(NodeId, Vec<usize>)> {
        let (values, argmax) = max_over_axis(self.value(x), axis)?;
        for &i in &argmax {
            self.record_branch(i as u64);
        }
        let node = self.push(
            Op::Max {
                x,
                axis,
                argmax: argmax.clone(),
            },
            values,
        );
        Ok((node, argmax))
    }

    /// Matrix of row-pair cosines `a_i . b_j / max(|a_i| |b_j|, eps)`.
    pub fn cosine_similarity_matrix(&mut self, a: NodeId, b: NodeId, eps: T) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (p, d) = av.dims2()?;
        let (q, d2) = bv.dims2()?;
        if d != d2 || d == 0 {
            return Err(Error::shape(
                "cosine_similarity_matrix",
                format!("row widths differ: {:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let a_norms: Vec<T> = (0..p).map(|i| norm(av.row(i))).collect();
        let b_norms: Vec<T> = (0..q).map(|j| norm(bv.row(j))).collect();
        let mut out = vec![T::zero(); p * q];
        let mut clamped = Vec::new();
        for i in 0..p {
            for j in 0..q {
                let prod = a_norms[i] * b_norms[j];
                if prod < eps {
                    clamped.push((i * q + j) as u64);
                }
                out[i * q + j] = dot(av.row(i), bv.row(j)) / prod.max(eps);
            }
        }
        let value = Tensor::new(vec![p, q], out)?;
        for c in clamped {
            self.record_branch(c);
        }
        Ok(self.push(
            Op::Cosine {
                a,
                b,
                a_norms,
                b_norms,
                eps,
            },
            value,
        ))
    }

    /// `[a | b]` for two matrices with the same row count.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (p, qa) = av.dims2()?;
        let (p2, qb) = bv.dims2()?;
        if p != p2 {
            return Err(Error::shape(
                "concat_cols",
                format!("row counts differ: {:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = Vec::with_capacity(p * (qa + qb));
        for i in 0..p {
            out.extend_from_slice(av.row(i));
            out.extend_from_slice(bv.row(i));
        }
        let value = Tensor::new(vec![p, qa + qb], out)?;
        Ok(self.push(Op::ConcatCols(a, b), value))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, width: usize) -> Result<NodeId> {
        let src = self.value(x);
        let (p, q) = src.dims2()?;
        if start + width > q {
            return Err(Error::shape(
                "slice_cols",
                format!(
                    "columns {start}..{} out of range for {:?}",
                    start + width,
                    src.shape()
                ),
            ));
        }
        let mut out = Vec::with_capacity(p * width);
        for i in 0..p {
            out.extend_from_slice(&src.row(i)[start..start + width]);
        }
        let value = Tensor::new(vec![p, width], out)?;
        Ok(self.push(Op::SliceCols { x, start }, value))
    }

    /// Rows of `x` picked by `rows` (repeats allowed).
    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let src = self.value(x);
        let (p, q) = src.dims2()?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= p) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} out of range for {p} rows"),
            ));
        }
        let mut out = Vec::with_capacity(rows.len() * q);
        for &r in rows {
            out.extend_from_slice(src.row(r));
        }
        let value = Tensor::new(vec![rows.len(), q], out)?;
        Ok(self.push(
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            value,
        ))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).transpose()?;
        Ok(self.push(Op::Transpose(x), value))
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum(x), value)
    }

    /// Packs one-element nodes into a tensor of `shape`.
    pub fn stack(&mut self, items: &[NodeId], shape: &[usize]) -> Result<NodeId> {
        let mut out = Vec::with_capacity(items.len());
        for &id in items {
            let v = self.value(id);
            if v.len() != 1 {
                return Err(Error::shape(
                    "stack",
                    format!("item has shape {:?}", v.shape()),
                ));
            }
            out.push(v.data()[0]);
        }
        let value = Tensor::new(shape.to_vec(), out)?;
        Ok(self.push(Op::Stack(items.to_vec()), value))
    }

    /// Main diagonal of a square matrix.
    pub fn diagonal(&mut self, x: NodeId) -> Result<NodeId> {
        let src = self.value(x);
        let (p, q) = src.dims2()?;
        if p != q {
            return Err(Error::shape(
                "diagonal",
                format!("matrix {:?} is not square", src.shape()),
            ));
        }
        let value = Tensor::vector((0..p).map(|i| src.at(i, i)).collect());
        Ok(self.push(Op::Diagonal(x), value))
    }

    /// Gradients of the one-element node `loss` with respect to every node.
    pub fn gradients(&self, loss: NodeId) -> Result<Gradients<T>> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", loss_value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Graph::gradients`] and adds the gradient of every parameter
    /// leaf into `store`.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (&pid, &node) in &self.params {
            if let Some(g) = grads.get(node) {
                store.accumulate_grad(pid, g)?;
            }
        }
        Ok(())
    }

    fn backprop_node(
        &self,
        idx: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, g.matmul(&bv.transpose()?)?);
                accumulate(grads, *b, av.transpose()?.matmul(g)?);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, g.zip_map(bv, |gv, y| gv * y));
                accumulate(grads, *b, g.zip_map(av, |gv, x| gv * x));
            }
            Op::Affine(x, scale) => {
                let s = *scale;
                accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::Elementwise(kind, x) => {
                let local = match kind {
                    Activation::Relu => {
                        let xv = self.value(*x);
                        g.zip_map(xv, |gv, v| if v > T::zero() { gv } else { T::zero() })
                    }
                    Activation::Tanh => g.zip_map(out, |gv, y| gv * (T::one() - y * y)),
                    Activation::Sigmoid => g.zip_map(out, |gv, y| gv * y * (T::one() - y)),
                };
                accumulate(grads, *x, local);
            }
            Op::RowSoftmax(x) => {
                let (p, q) = out.dims2()?;
                let mut dx = vec![T::zero(); p * q];
                for i in 0..p {
                    let y = out.row(i);
                    let gy = g.row(i);
                    let inner = dot(y, gy);
                    for j in 0..q {
                        dx[i * q + j] = y[j] * (gy[j] - inner);
                    }
                }
                accumulate(grads, *x, Tensor::new(vec![p, q], dx)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let (p, d) = out.dims2()?;
                let gv = self.value(*gain).data();
                let width = T::from_usize(d).unwrap();
                let mut dx = vec![T::zero(); p * d];
                let mut dgain = vec![T::zero(); d];
                let mut dbias = vec![T::zero(); d];
                for i in 0..p {
                    let gy = g.row(i);
                    let xh = &normalized[i * d..(i + 1) * d];
                    let mut mean_dxh = T::zero();
                    let mut mean_dxh_xh = T::zero();
                    for j in 0..d {
                        let dxh = gy[j] * gv[j];
                        mean_dxh = mean_dxh + dxh;
                        mean_dxh_xh = mean_dxh_xh + dxh * xh[j];
                        dgain[j] = dgain[j] + gy[j] * xh[j];
                        dbias[j] = dbias[j] + gy[j];
                    }
                    mean_dxh = mean_dxh / width;
                    mean_dxh_xh = mean_dxh_xh / width;
                    for j in 0..d {
                        let dxh = gy[j] * gv[j];
                        dx[i * d + j] = inv_std[i] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
                accumulate(grads, *x, Tensor::new(vec![p, d], dx)?);
                accumulate(grads, *gain, Tensor::vector(dgain));
                accumulate(grads, *bias, Tensor::vector(dbias));
            }
            Op::Max { x, axis, argmax } => {
                let xv = self.value(*x);
                let (_, q) = xv.dims2()?;
                let mut dx = Tensor::zeros(xv.shape());
                for (slice, (&k, &gv)) in argmax.iter().zip(g.data()).enumerate() {
                    let flat = match axis {
                        Axis::Cols => slice * q + k,
                        Axis::Rows => k * q + slice,
                    };
                    dx.data_mut()[flat] = gv;
                }
                accumulate(grads, *x, dx);
            }
            Op::Cosine {
                a,
                b,
                a_norms,
                b_norms,
                eps,
            } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (p, d) = av.dims2()?;
                let (q, _) = bv.dims2()?;
                let mut da = vec![T::zero(); p * d];
                let mut db = vec![T::zero(); q * d];
                for i in 0..p {
                    for j in 0..q {
                        let gij = g.data()[i * q + j];
                        if gij == T::zero() {
                            continue;
                        }
                        let c = out.data()[i * q + j];
                        let prod = a_norms[i] * b_norms[j];
                        let (ai, bj) = (av.row(i), bv.row(j));
                        if prod > *eps {
                            // dc/da = b/den - c a/|a|^2, symmetric for b.
                            let den = prod;
                            let ca = c / (a_norms[i] * a_norms[i]);
                            let cb = c / (b_norms[j] * b_norms[j]);
                            for k in 0..d {
                                da[i * d + k] = da[i * d + k] + gij * (bj[k] / den - ca * ai[k]);
                                db[j * d + k] = db[j * d + k] + gij * (ai[k] / den - cb * bj[k]);
                            }
                        } else {
                            for k in 0..d {
                                da[i * d + k] = da[i * d + k] + gij * bj[k] / *eps;
                                db[j * d + k] = db[j * d + k] + gij * ai[k] / *eps;
                            }
                        }
                    }
                }
                accumulate(grads, *a, Tensor::new(vec![p, d], da)?);
                accumulate(grads, *b, Tensor::new(vec![q, d], db)?);
            }
            Op::ConcatCols(a, b) => {
                let (p, qa) = self.value(*a).dims2()?;
                let (_, qb) = self.value(*b).dims2()?;
                let mut ga = Vec::with_capacity(p * qa);
                let mut gb = Vec::with_capacity(p * qb);
                for i in 0..p {
                    let row = g.row(i);
                    ga.extend_from_slice(&row[..qa]);
                    gb.extend_from_slice(&row[qa..]);
                }
                accumulate(grads, *a, Tensor::new(vec![p, qa], ga)?);
                accumulate(grads, *b, Tensor::new(vec![p, qb], gb)?);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (p, q) = xv.dims2()?;
                let (_, width) = g.dims2()?;
                let mut dx = vec![T::zero(); p * q];
                for i in 0..p {
                    dx[i * q + start..i * q + start + width].copy_from_slice(g.row(i));
                }
                accumulate(grads, *x, Tensor::new(vec![p, q], dx)?);
            }
            Op::GatherRows { x, rows } => {
                let xv = self.value(*x);
                let (p, q) = xv.dims2()?;
                let mut dx = vec![T::zero(); p * q];
                for (k, &r) in rows.iter().enumerate() {
                    for (d, &v) in dx[r * q..(r + 1) * q].iter_mut().zip(g.row(k)) {
                        *d = *d + v;
                    }
                }
                accumulate(grads, *x, Tensor::new(vec![p, q], dx)?);
            }
            Op::Transpose(x) => accumulate(grads, *x, g.transpose()?),
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                accumulate(grads, *x, Tensor::full(&shape, g.data()[0]));
            }
            Op::Stack(items) => {
                for (&id, &gv) in items.iter().zip(g.data()) {
                    let shape = self.value(id).shape().to_vec();
                    accumulate(grads, id, Tensor::full(&shape, gv));
                }
            }
            Op::Diagonal(x) => {
                let xv = self.value(*x);
                let (p, _) = xv.dims2()?;
                let mut dx = Tensor::zeros(xv.shape());
                for i in 0..p {
                    dx.data_mut()[i * p + i] = g.data()[i];
                }
                accumulate(grads, *x, dx);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Result of a backward pass: one gradient per node reached from the loss.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of `id`, or zeros of `shape` when the loss does not depend on it.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor<T> {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

pub(crate) fn norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Slice-wise maximum with lowest-index tie breaking, outside any graph.
pub fn max_over_axis<T: Real>(x: &Tensor<T>, axis: Axis) -> Result<(Tensor<T>, Vec<usize>)> {
    let (p, q) = x.dims2()?;
    let (slices, extent) = match axis {
        Axis::Cols => (p, q),
        Axis::Rows => (q, p),
    };
    if extent == 0 {
        return Err(Error::shape("max_over_axis", "cannot reduce an empty axis"));
    }
    let mut values = Vec::with_capacity(slices);
    let mut argmax = Vec::with_capacity(slices);
    for s in 0..slices {
        let at = |k: usize| match axis {
            Axis::Cols => x.at(s, k),
            Axis::Rows => x.at(k, s),
        };
        let mut best = 0;
        let mut best_value = at(0);
        for k in 1..extent {
            let v = at(k);
            if v > best_value || (v.is_nan() && !best_value.is_nan()) {
                best = k;
                best_value = v;
            }
        }
        values.push(best_value);
        argmax.push(best);
    }
    Ok((Tensor::vector(values), argmax))
}
