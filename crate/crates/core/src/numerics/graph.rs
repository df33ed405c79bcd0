//! Eagerly evaluated compute graph with reverse-mode differentiation.
//!
//! Nodes are appended in construction order and every node's value is computed
//! as soon as it is added, so the node list is already a topological order.
//! [`Graph::gradient`] walks it backwards once.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::tensor::softmax_in_place;
use super::{NumericsError, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// Right operand is a single row added to every row of the left operand.
    Row,
    /// Right operand holds one element.
    Scalar,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId, Broadcast),
    Mul(NodeId, NodeId, Broadcast),
    Scale(NodeId, T),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Softmax(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Concat(Vec<NodeId>),
    Gather { table: NodeId, indices: Arc<Vec<usize>> },
    Attention { q: NodeId, k: NodeId, v: NodeId, keys: Arc<Vec<Vec<usize>>> },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b, _) | Op::Mul(a, b, _) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Softmax(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::Concat(parts) => parts.clone(),
            Op::Gather { table, .. } => vec![*table],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    /// Attention weights per query row, kept for the backward pass.
    weights: Option<Vec<Vec<T>>>,
}

#[derive(Clone, Debug, Default)]
pub struct Graph<T = f64> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Attention weights computed for an attention node, one row per query.
    pub fn attention_weights(&self, id: NodeId) -> Option<&[Vec<T>]> {
        self.nodes.get(id.0).and_then(|n| n.weights.as_deref())
    }

    fn get(&self, id: NodeId) -> Result<&Tensor<T>, NumericsError> {
        self.nodes.get(id.0).map(|n| &n.value).ok_or(NumericsError::UnknownNode(id.0))
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> NodeId {
        self.push_with(op, value, None)
    }

    fn push_with(&mut self, op: Op<T>, value: Tensor<T>, weights: Option<Vec<Vec<T>>>) -> NodeId {
        self.nodes.push(Node { op, value, weights });
        NodeId(self.nodes.len() - 1)
    }

    /// Adds a leaf (parameter, input or constant).
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn constant(&mut self, v: T) -> NodeId {
        self.leaf(Tensor::scalar(v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let value = self.get(a)?.matmul(self.get(b)?)?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    fn broadcast_kind(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        allow_row: bool,
    ) -> Result<Broadcast, NumericsError> {
        let (ta, tb) = (self.get(a)?, self.get(b)?);
        if ta.shape() == tb.shape() {
            return Ok(Broadcast::Same);
        }
        if tb.len() == 1 {
            return Ok(Broadcast::Scalar);
        }
        if allow_row {
            let (_, cols) = ta.dims2()?;
            let (rows_b, cols_b) = tb.dims2()?;
            if rows_b == 1 && cols_b == cols {
                return Ok(Broadcast::Row);
            }
        }
        Err(NumericsError::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
        })
    }

    /// Element-wise sum; `b` may also be a single row or a single element.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let kind = self.broadcast_kind("add", a, b, true)?;
        let value = broadcast_apply(self.get(a)?, self.get(b)?, kind, |x, y| x + y);
        Ok(self.push(Op::Add(a, b, kind), value))
    }

    /// Element-wise product; `b` may also be a single element.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let kind = self.broadcast_kind("mul", a, b, false)?;
        let value = broadcast_apply(self.get(a)?, self.get(b)?, kind, |x, y| x * y);
        Ok(self.push(Op::Mul(a, b, kind), value))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> Result<NodeId, NumericsError> {
        let value = self.get(a)?.map(|x| x * c);
        Ok(self.push(Op::Scale(a, c), value))
    }

    /// `a - b`, composed from scale and add.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let neg = self.scale(b, -T::one())?;
        self.add(a, neg)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let value = self.get(a)?.map(|x| x.max(T::zero()));
        Ok(self.push(Op::Relu(a), value))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let value = self.get(a)?.map(|x| x.exp());
        Ok(self.push(Op::Exp(a), value))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let value = self.get(a)?.map(|x| x.ln());
        Ok(self.push(Op::Log(a), value))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let value = self.get(a)?.softmax_rows()?;
        Ok(self.push(Op::Softmax(a), value))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let value = Tensor::scalar(self.get(a)?.sum());
        Ok(self.push(Op::Sum(a), value))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let t = self.get(a)?;
        if t.is_empty() {
            return Err(NumericsError::ShapeMismatch { op: "mean", detail: "empty tensor".into() });
        }
        let value = Tensor::scalar(t.sum() / T::lit(t.len() as f64));
        Ok(self.push(Op::Mean(a), value))
    }

    /// Concatenates rank-2 tensors with equal row counts along the column axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::ShapeMismatch { op: "concat", detail: "no inputs".into() });
        }
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            dims.push(self.get(p)?.dims2()?);
        }
        let rows = dims[0].0;
        if dims.iter().any(|&(r, _)| r != rows) {
            return Err(NumericsError::ShapeMismatch {
                op: "concat",
                detail: format!("row counts {dims:?}"),
            });
        }
        let width: usize = dims.iter().map(|d| d.1).sum();
        let mut values = Vec::with_capacity(rows * width);
        for i in 0..rows {
            for &p in parts {
                values.extend_from_slice(self.nodes[p.0].value.row(i));
            }
        }
        let value = Tensor::new(vec![rows, width], values)?;
        Ok(self.push(Op::Concat(parts.to_vec()), value))
    }

    /// Embedding lookup: output row `i` is `table[indices[i]]`.
    pub fn gather(&mut self, table: NodeId, indices: Vec<usize>) -> Result<NodeId, NumericsError> {
        let t = self.get(table)?;
        let (rows, cols) = t.dims2()?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(NumericsError::ShapeMismatch {
                op: "gather",
                detail: format!("index {bad} out of {rows} rows"),
            });
        }
        let mut values = Vec::with_capacity(indices.len() * cols);
        for &i in &indices {
            values.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(vec![indices.len(), cols], values)?;
        Ok(self.push(Op::Gather { table, indices: Arc::new(indices) }, value))
    }

    /// Scaled dot-product attention where query row `i` attends only to the
    /// key/value rows listed in `keys[i]`.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        keys: Arc<Vec<Vec<usize>>>,
    ) -> Result<NodeId, NumericsError> {
        let (tq, tk, tv) = (self.get(q)?, self.get(k)?, self.get(v)?);
        let (nq, dk) = tq.dims2()?;
        let (nk, dk2) = tk.dims2()?;
        let (nv, dv) = tv.dims2()?;
        if dk != dk2 || nk != nv || keys.len() != nq {
            return Err(NumericsError::ShapeMismatch {
                op: "attention",
                detail: format!(
                    "q {:?} k {:?} v {:?} key lists {}",
                    tq.shape(),
                    tk.shape(),
                    tv.shape(),
                    keys.len()
                ),
            });
        }
        if keys.iter().any(|ks| ks.is_empty() || ks.iter().any(|&j| j >= nk)) {
            return Err(NumericsError::ShapeMismatch {
                op: "attention",
                detail: "empty key list or key index out of range".into(),
            });
        }
        let inv_sqrt = T::one() / T::lit(dk as f64).sqrt();
        let mut out = vec![T::zero(); nq * dv];
        let mut weights = Vec::with_capacity(nq);
        for (i, ks) in keys.iter().enumerate() {
            let qi = tq.row(i);
            let mut w: Vec<T> = ks
                .iter()
                .map(|&j| dot(qi, tk.row(j)) * inv_sqrt)
                .collect();
            softmax_in_place(&mut w);
            let o = &mut out[i * dv..(i + 1) * dv];
            for (&j, &wj) in ks.iter().zip(&w) {
                for (oc, &vc) in o.iter_mut().zip(tv.row(j)) {
                    *oc = *oc + wj * vc;
                }
            }
            weights.push(w);
        }
        let value = Tensor::new(vec![nq, dv], out)?;
        Ok(self.push_with(Op::Attention { q, k, v, keys }, value, Some(weights)))
    }

    /// Reverse-mode gradient of a scalar `output` with respect to `params`.
    ///
    /// Parameters the output does not depend on map to zero tensors.
    pub fn gradient(
        &self,
        output: NodeId,
        params: &[NodeId],
    ) -> Result<BTreeMap<NodeId, Tensor<T>>, NumericsError> {
        let out = self.get(output)?;
        if !out.is_scalar() {
            return Err(NumericsError::NonScalarOutput(out.shape().to_vec()));
        }
        for &p in params {
            self.get(p)?;
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.op.inputs().iter().any(|i| i.0 >= idx) {
                return Err(NumericsError::Cycle(idx));
            }
        }

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::filled(out.shape(), T::one()));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            for (input, contrib) in self.backward(node, &g)? {
                accumulate(&mut grads[input.0], contrib);
            }
            grads[idx] = Some(g);
        }

        Ok(params
            .iter()
            .map(|&p| {
                let g = grads
                    .get(p.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[p.0].value.shape()));
                (p, g)
            })
            .collect())
    }

    fn backward(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
    ) -> Result<Vec<(NodeId, Tensor<T>)>, NumericsError> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let da = g.matmul(&val(*b).transpose()?)?;
                let db = val(*a).transpose()?.matmul(g)?;
                vec![(*a, reshape_like(da, val(*a))), (*b, reshape_like(db, val(*b)))]
            }
            Op::Add(a, b, kind) => {
                let db = match kind {
                    Broadcast::Same => g.clone(),
                    Broadcast::Scalar => Tensor::filled(val(*b).shape(), g.sum()),
                    Broadcast::Row => {
                        let (rows, cols) = g.dims2()?;
                        let mut acc = vec![T::zero(); cols];
                        for i in 0..rows {
                            for (s, &x) in acc.iter_mut().zip(g.row(i)) {
                                *s = *s + x;
                            }
                        }
                        Tensor::new(val(*b).shape().to_vec(), acc)?
                    }
                };
                vec![(*a, g.clone()), (*b, db)]
            }
            Op::Mul(a, b, kind) => match kind {
                Broadcast::Same => {
                    vec![(*a, g.zip_map(val(*b), |x, y| x * y)), (*b, g.zip_map(val(*a), |x, y| x * y))]
                }
                _ => {
                    let s = val(*b).item();
                    let db = g.zip_map(val(*a), |x, y| x * y).sum();
                    vec![(*a, g.map(|x| x * s)), (*b, Tensor::filled(val(*b).shape(), db))]
                }
            },
            Op::Scale(a, c) => vec![(*a, g.map(|x| x * *c))],
            Op::Relu(a) => {
                vec![(*a, g.zip_map(val(*a), |d, x| if x > T::zero() { d } else { T::zero() }))]
            }
            Op::Exp(a) => vec![(*a, g.zip_map(&node.value, |d, y| d * y))],
            Op::Log(a) => vec![(*a, g.zip_map(val(*a), |d, x| d / x))],
            Op::Softmax(a) => {
                let y = &node.value;
                let (rows, cols) = y.dims2()?;
                let mut dx = vec![T::zero(); rows * cols];
                for i in 0..rows {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let inner = dot(yr, gr);
                    for c in 0..cols {
                        dx[i * cols + c] = yr[c] * (gr[c] - inner);
                    }
                }
                vec![(*a, Tensor::new(y.shape().to_vec(), dx)?)]
            }
            Op::Sum(a) => vec![(*a, Tensor::filled(val(*a).shape(), g.item()))],
            Op::Mean(a) => {
                let n = T::lit(val(*a).len() as f64);
                vec![(*a, Tensor::filled(val(*a).shape(), g.item() / n))]
            }
            Op::Concat(parts) => {
                let (rows, _) = g.dims2()?;
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let (_, w) = val(p).dims2()?;
                    let mut vals = Vec::with_capacity(rows * w);
                    for i in 0..rows {
                        vals.extend_from_slice(&g.row(i)[offset..offset + w]);
                    }
                    offset += w;
                    res.push((p, Tensor::new(val(p).shape().to_vec(), vals)?));
                }
                res
            }
            Op::Gather { table, indices } => {
                let t = val(*table);
                let (_, cols) = t.dims2()?;
                let mut acc = Tensor::zeros(t.shape());
                let dst = acc.values_mut();
                for (i, &src) in indices.iter().enumerate() {
                    for (d, &x) in dst[src * cols..(src + 1) * cols].iter_mut().zip(g.row(i)) {
                        *d = *d + x;
                    }
                }
                vec![(*table, acc)]
            }
            Op::Attention { q, k, v, keys } => {
                let weights = node.weights.as_ref().expect("attention node caches weights");
                let (tq, tk, tv) = (val(*q), val(*k), val(*v));
                let (_, dk) = tq.dims2()?;
                let (_, dv) = tv.dims2()?;
                let inv_sqrt = T::one() / T::lit(dk as f64).sqrt();
                let mut dq = Tensor::zeros(tq.shape());
                let mut dkm = Tensor::zeros(tk.shape());
                let mut dvm = Tensor::zeros(tv.shape());
                for (i, ks) in keys.iter().enumerate() {
                    let gi = g.row(i);
                    let w = &weights[i];
                    let dw: Vec<T> = ks.iter().map(|&j| dot(gi, tv.row(j))).collect();
                    let inner = dot(w, &dw);
                    for (n, &j) in ks.iter().enumerate() {
                        let dvj = &mut dvm.values_mut()[j * dv..(j + 1) * dv];
                        for (d, &x) in dvj.iter_mut().zip(gi) {
                            *d = *d + w[n] * x;
                        }
                        let ds = w[n] * (dw[n] - inner) * inv_sqrt;
                        let dqi = &mut dq.values_mut()[i * dk..(i + 1) * dk];
                        for (d, &x) in dqi.iter_mut().zip(tk.row(j)) {
                            *d = *d + ds * x;
                        }
                        let dkj = &mut dkm.values_mut()[j * dk..(j + 1) * dk];
                        for (d, &x) in dkj.iter_mut().zip(tq.row(i)) {
                            *d = *d + ds * x;
                        }
                    }
                }
                vec![(*q, dq), (*k, dkm), (*v, dvm)]
            }
        })
    }

    #[cfg(test)]
    fn push_raw_matmul(&mut self, a: usize, b: usize, value: Tensor<T>) -> NodeId {
        self.push(Op::MatMul(NodeId(a), NodeId(b)), value)
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, contrib: Tensor<T>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.values_mut().iter_mut().zip(contrib.values()) {
                *e = *e + *c;
            }
        }
        None => *slot = Some(contrib),
    }
}

fn reshape_like<T: Scalar>(t: Tensor<T>, like: &Tensor<T>) -> Tensor<T> {
    if t.shape() == like.shape() {
        t
    } else {
        Tensor::new(like.shape().to_vec(), t.into_values()).expect("same element count")
    }
}

fn broadcast_apply<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    kind: Broadcast,
    f: impl Fn(T, T) -> T,
) -> Tensor<T> {
    match kind {
        Broadcast::Same => a.zip_map(b, f),
        Broadcast::Scalar => {
            let s = b.item();
            a.map(|x| f(x, s))
        }
        Broadcast::Row => {
            let cols = b.len();
            let mut out = a.clone();
            for (n, x) in out.values_mut().iter_mut().enumerate() {
                *x = f(*x, b.values()[n % cols]);
            }
            out
        }
    }
}
