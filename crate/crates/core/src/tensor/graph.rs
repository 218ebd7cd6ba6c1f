//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A `Graph` is rebuilt per forward pass. Ops append nodes that only refer to
//! earlier nodes, so creation order is a topological order and `backward`
//! walks it in reverse. Parameters are bound through a [`ParamStore`]; binding
//! the same parameter twice returns the same node, so gradients from every
//! use site accumulate on one leaf.

use std::collections::HashMap;

use crate::error::{IvaError, Result};
use crate::tensor::param::{ParamId, ParamStore};
use crate::tensor::{broadcast_offset, broadcast_shapes, strides_for, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    Gelu { a: NodeId },
    Softmax { a: NodeId, axis: usize, temp: f64 },
    CausalSoftmax { a: NodeId },
    LayerNorm { a: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    Permute { a: NodeId, perm: Vec<usize> },
    Reshape { a: NodeId },
    ConcatRows { parts: Vec<NodeId> },
    SliceRows { a: NodeId, start: usize, end: usize },
    GatherRows { table: NodeId, indices: Vec<usize> },
    SumAll { a: NodeId },
    CrossEntropy { logits: NodeId, targets: Vec<Option<usize>> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Gelu { .. } => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::CausalSoftmax { .. } => "causal_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Permute { .. } => "permute",
            Op::Reshape { .. } => "reshape",
            Op::ConcatRows { .. } => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::SumAll { .. } => "sum_all",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    grad: Option<Vec<f64>>,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op) -> NodeId {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            data,
            shape,
            grad: None,
            op,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn value(&self, id: NodeId) -> Tensor {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].data.clone())
            .expect("node shape/data consistent")
    }

    /// First node holding a non-finite value, reported by op name.
    pub fn check_finite(&self) -> Result<()> {
        for node in &self.nodes {
            if !node.data.iter().all(|v| v.is_finite()) {
                return Err(IvaError::Numeric {
                    op: node.op.name(),
                    message: "non-finite value in forward pass".into(),
                });
            }
        }
        Ok(())
    }

    // ── Inputs ──────────────────────────────────────────────────────────

    /// Non-parameter input.
    pub fn input(&mut self, t: &Tensor) -> NodeId {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf)
    }

    pub fn input_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<NodeId> {
        let t = Tensor::new(shape, data)?;
        Ok(self.input(&t))
    }

    /// Bind a parameter. The same parameter always maps to the same node, so
    /// k use sites accumulate k per-site gradients on one leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let tensor = store.tensor(id);
        let n = self.push(tensor.data().to_vec(), tensor.shape().to_vec(), Op::Leaf);
        self.param_nodes.insert(id, n);
        n
    }

    // ── Ops ─────────────────────────────────────────────────────────────

    /// Batched matrix product: `(…, m, k) @ (…, k, n) -> (…, m, n)` with
    /// broadcast leading dimensions.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() < 2 || bsh.len() < 2 || ash[ash.len() - 1] != bsh[bsh.len() - 2] {
            return Err(IvaError::Dimension {
                op: "matmul",
                lhs: ash,
                rhs: bsh,
            });
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let n = bsh[bsh.len() - 1];
        let batch = broadcast_shapes("matmul", &ash[..ash.len() - 2], &bsh[..bsh.len() - 2])?;
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);

        let mut out = vec![0.0; out_shape.iter().product()];
        let a_batch = &ash[..ash.len() - 2];
        let b_batch = &bsh[..bsh.len() - 2];
        let a_strides = strides_for(a_batch);
        let b_strides = strides_for(b_batch);
        let (ad, bd) = (self.data(a), self.data(b));
        for_each_index(&batch, |coords, flat| {
            let ao = broadcast_offset(coords, a_batch, &a_strides) * m * k;
            let bo = broadcast_offset(coords, b_batch, &b_strides) * k * n;
            mm_acc(
                &ad[ao..ao + m * k],
                &bd[bo..bo + k * n],
                &mut out[flat * m * n..(flat + 1) * m * n],
                m,
                k,
                n,
            );
        });
        Ok(self.push(out, out_shape, Op::Matmul { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.broadcast_binary(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.broadcast_binary(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.broadcast_binary(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    fn broadcast_binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shapes(name, &ash, &bsh)?;
        let a_strides = strides_for(&ash);
        let b_strides = strides_for(&bsh);
        let mut out = vec![0.0; out_shape.iter().product()];
        let (ad, bd) = (self.data(a), self.data(b));
        for_each_index(&out_shape, |coords, flat| {
            let ao = broadcast_offset(coords, &ash, &a_strides);
            let bo = broadcast_offset(coords, &bsh, &b_strides);
            out[flat] = f(ad[ao], bd[bo]);
        });
        Ok(self.push(out, out_shape, op))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let data: Vec<f64> = self.data(a).iter().map(|x| c * x).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(data, shape, Op::Scale { a, c }))
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let data: Vec<f64> = self.data(a).iter().map(|&x| gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(data, shape, Op::Gelu { a }))
    }

    /// Temperature-scaled softmax along `axis`: `softmax(x / temp)`, computed
    /// with max subtraction.
    pub fn softmax(&mut self, a: NodeId, axis: usize, temp: f64) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(IvaError::Dimension {
                op: "softmax",
                lhs: shape,
                rhs: vec![axis],
            });
        }
        if !(temp > 0.0) {
            return Err(IvaError::Domain(format!(
                "softmax temperature must be positive, got {temp}"
            )));
        }
        let (outer, size, inner) = split_axis(&shape, axis);
        let src = self.data(a);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * size * inner + j * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..size {
                    max = max.max(src[at(j)]);
                }
                let mut sum = 0.0;
                for j in 0..size {
                    let e = ((src[at(j)] - max) / temp).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..size {
                    out[at(j)] /= sum;
                }
            }
        }
        Ok(self.push(out, shape, Op::Softmax { a, axis, temp }))
    }

    /// Causal softmax over the last axis of a `(…, T, T)` tensor: row `i`
    /// normalizes over columns `j <= i` only. Columns `j > i` are exactly
    /// zero and never read, so earlier positions are bitwise independent of
    /// later ones.
    pub fn causal_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        let rank = shape.len();
        if rank < 2 || shape[rank - 1] != shape[rank - 2] {
            return Err(IvaError::Dimension {
                op: "causal_softmax",
                lhs: shape.clone(),
                rhs: shape,
            });
        }
        let t = shape[rank - 1];
        let batch: usize = shape[..rank - 2].iter().product();
        let src = self.data(a);
        let mut out = vec![0.0; src.len()];
        for bi in 0..batch {
            for i in 0..t {
                let row = bi * t * t + i * t;
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    max = max.max(src[row + j]);
                }
                let mut sum = 0.0;
                for j in 0..=i {
                    let e = (src[row + j] - max).exp();
                    out[row + j] = e;
                    sum += e;
                }
                for j in 0..=i {
                    out[row + j] /= sum;
                }
            }
        }
        Ok(self.push(out, shape, Op::CausalSoftmax { a }))
    }

    /// Layer normalization over the last axis, then affine by `gain`/`bias`.
    pub fn layer_norm(
        &mut self,
        a: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| IvaError::Dimension {
            op: "layer_norm",
            lhs: shape.clone(),
            rhs: vec![],
        })?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(IvaError::Dimension {
                op: "layer_norm",
                lhs: self.shape(gain).to_vec(),
                rhs: vec![d],
            });
        }
        let src = self.data(a);
        let gd = self.data(gain);
        let bd = self.data(bias);
        let mut out = vec![0.0; src.len()];
        for (row_in, row_out) in src.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mean = row_in.iter().sum::<f64>() / d as f64;
            let var = row_in.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                row_out[j] = (row_in[j] - mean) * inv * gd[j] + bd[j];
            }
        }
        Ok(self.push(out, shape, Op::LayerNorm { a, gain, bias, eps }))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(IvaError::Dimension {
                op: "permute",
                lhs: shape,
                rhs: perm.to_vec(),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = permute_data(self.data(a), &shape, perm);
        Ok(self.push(data, out_shape, Op::Permute { a, perm: perm.to_vec() }))
    }

    pub fn reshape(&mut self, a: NodeId, new_shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = new_shape.iter().product();
        if numel != self.data(a).len() {
            return Err(IvaError::Dimension {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: new_shape,
            });
        }
        let data = self.data(a).to_vec();
        Ok(self.push(data, new_shape, Op::Reshape { a }))
    }

    /// Concatenate along axis 0. All parts must share trailing dimensions.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(IvaError::Domain("concat_rows of zero parts".into()));
        }
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut rows = 0;
        for &p in parts {
            let sh = self.shape(p);
            if sh[1..] != tail[..] {
                return Err(IvaError::Dimension {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: sh.to_vec(),
                });
            }
            rows += sh[0];
        }
        let mut data = Vec::with_capacity(rows * tail.iter().product::<usize>());
        for &p in parts {
            data.extend_from_slice(self.data(p));
        }
        let mut shape = vec![rows];
        shape.extend(&tail);
        Ok(self.push(data, shape, Op::ConcatRows { parts: parts.to_vec() }))
    }

    /// Rows `start..end` along axis 0.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if start >= end || end > shape[0] {
            return Err(IvaError::Dimension {
                op: "slice_rows",
                lhs: shape,
                rhs: vec![start, end],
            });
        }
        let row: usize = shape[1..].iter().product();
        let data = self.data(a)[start * row..end * row].to_vec();
        let mut out_shape = vec![end - start];
        out_shape.extend(&shape[1..]);
        Ok(self.push(data, out_shape, Op::SliceRows { a, start, end }))
    }

    /// Row lookup into a rank-2 table (embedding gather).
    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(IvaError::Dimension {
                op: "gather_rows",
                lhs: shape,
                rhs: vec![2],
            });
        }
        if indices.is_empty() {
            return Err(IvaError::Domain("gather_rows with no indices".into()));
        }
        let (v, d) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(IvaError::Domain(format!(
                "gather_rows index {bad} out of range for table with {v} rows"
            )));
        }
        let src = self.data(table);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            data,
            vec![indices.len(), d],
            Op::GatherRows { table, indices: indices.to_vec() },
        ))
    }

    /// Sum of all entries, as a `[1]` scalar.
    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.data(a).iter().sum();
        Ok(self.push(vec![s], vec![1], Op::SumAll { a }))
    }

    /// Mean next-token cross-entropy over the rows with a target. Rows with
    /// `None` contribute nothing and receive exactly zero gradient.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[Option<usize>],
    ) -> Result<NodeId> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || targets.len() != shape[0] {
            return Err(IvaError::Dimension {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![targets.len()],
            });
        }
        let v = shape[1];
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(IvaError::Domain("cross_entropy with no targets".into()));
        }
        if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(IvaError::Domain(format!(
                "cross_entropy target {bad} out of range for vocab {v}"
            )));
        }
        let src = self.data(logits);
        let mut loss = 0.0;
        for (row, tgt) in src.chunks_exact(v).zip(targets) {
            if let Some(t) = tgt {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
                loss += lse - row[*t];
            }
        }
        loss /= count as f64;
        Ok(self.push(
            vec![loss],
            vec![1],
            Op::CrossEntropy { logits, targets: targets.to_vec() },
        ))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a `[1]`-shaped loss node. Node gradients are
    /// recomputed from scratch on every call; parameter accumulation happens
    /// in [`Graph::write_param_grads`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.shape(loss) != [1] {
            return Err(IvaError::State(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.grad = Some(vec![0.0; node.data.len()]);
        }
        self.nodes[loss.0].grad.as_mut().unwrap()[0] = 1.0;

        for idx in (0..self.nodes.len()).rev() {
            let op = self.nodes[idx].op.clone();
            let grad = self.nodes[idx].grad.clone().unwrap();
            if grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            self.backward_op(idx, &op, &grad);
        }
        Ok(())
    }

    /// Accumulate node gradients into the bound parameters' `grad` buffers.
    pub fn write_param_grads(&self, store: &mut ParamStore) {
        for (&pid, &nid) in &self.param_nodes {
            if let Some(g) = self.grad(nid) {
                store.tensor_mut(pid).accumulate_grad(g);
            }
        }
    }

    fn add_grad(&mut self, id: NodeId, delta: &[f64]) {
        let g = self.nodes[id.0].grad.as_mut().unwrap();
        for (a, b) in g.iter_mut().zip(delta) {
            *a += b;
        }
    }

    fn backward_op(&mut self, idx: usize, op: &Op, grad: &[f64]) {
        match op {
            Op::Leaf => {}

            Op::Matmul { a, b } => {
                let (ash, bsh) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
                let n = bsh[bsh.len() - 1];
                let a_batch = ash[..ash.len() - 2].to_vec();
                let b_batch = bsh[..bsh.len() - 2].to_vec();
                let batch = self.nodes[idx].shape[..self.nodes[idx].shape.len() - 2].to_vec();
                let a_strides = strides_for(&a_batch);
                let b_strides = strides_for(&b_batch);
                let mut da = vec![0.0; self.data(*a).len()];
                let mut db = vec![0.0; self.data(*b).len()];
                {
                    let ad = self.data(*a);
                    let bd = self.data(*b);
                    for_each_index(&batch, |coords, flat| {
                        let ao = broadcast_offset(coords, &a_batch, &a_strides) * m * k;
                        let bo = broadcast_offset(coords, &b_batch, &b_strides) * k * n;
                        let g = &grad[flat * m * n..(flat + 1) * m * n];
                        // dA += dC @ B^T
                        mm_abt_acc(g, &bd[bo..bo + k * n], &mut da[ao..ao + m * k], m, n, k);
                        // dB += A^T @ dC
                        mm_atb_acc(&ad[ao..ao + m * k], g, &mut db[bo..bo + k * n], m, k, n);
                    });
                }
                self.add_grad(*a, &da);
                self.add_grad(*b, &db);
            }

            Op::Add { a, b } | Op::Sub { a, b } => {
                let negate_b = matches!(op, Op::Sub { .. });
                let out_shape = self.nodes[idx].shape.clone();
                for (side, negate) in [(*a, false), (*b, negate_b)] {
                    let sh = self.shape(side).to_vec();
                    let strides = strides_for(&sh);
                    let mut d = vec![0.0; self.data(side).len()];
                    for_each_index(&out_shape, |coords, flat| {
                        let off = broadcast_offset(coords, &sh, &strides);
                        d[off] += if negate { -grad[flat] } else { grad[flat] };
                    });
                    self.add_grad(side, &d);
                }
            }

            Op::Mul { a, b } => {
                let out_shape = self.nodes[idx].shape.clone();
                let (ash, bsh) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let a_strides = strides_for(&ash);
                let b_strides = strides_for(&bsh);
                let mut da = vec![0.0; self.data(*a).len()];
                let mut db = vec![0.0; self.data(*b).len()];
                {
                    let ad = self.data(*a);
                    let bd = self.data(*b);
                    for_each_index(&out_shape, |coords, flat| {
                        let ao = broadcast_offset(coords, &ash, &a_strides);
                        let bo = broadcast_offset(coords, &bsh, &b_strides);
                        da[ao] += grad[flat] * bd[bo];
                        db[bo] += grad[flat] * ad[ao];
                    });
                }
                self.add_grad(*a, &da);
                self.add_grad(*b, &db);
            }

            Op::Scale { a, c } => {
                let d: Vec<f64> = grad.iter().map(|g| c * g).collect();
                self.add_grad(*a, &d);
            }

            Op::Gelu { a } => {
                let d: Vec<f64> = grad
                    .iter()
                    .zip(self.data(*a))
                    .map(|(g, &x)| g * gelu_grad(x))
                    .collect();
                self.add_grad(*a, &d);
            }

            Op::Softmax { a, axis, temp } => {
                let shape = self.nodes[idx].shape.clone();
                let (outer, size, inner) = split_axis(&shape, *axis);
                let y = &self.nodes[idx].data;
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * size * inner + j * inner + i;
                        let mut dot = 0.0;
                        for j in 0..size {
                            dot += grad[at(j)] * y[at(j)];
                        }
                        for j in 0..size {
                            d[at(j)] = y[at(j)] * (grad[at(j)] - dot) / temp;
                        }
                    }
                }
                self.add_grad(*a, &d);
            }

            Op::CausalSoftmax { a } => {
                let shape = self.nodes[idx].shape.clone();
                let rank = shape.len();
                let t = shape[rank - 1];
                let batch: usize = shape[..rank - 2].iter().product();
                let y = &self.nodes[idx].data;
                let mut d = vec![0.0; y.len()];
                for bi in 0..batch {
                    for i in 0..t {
                        let row = bi * t * t + i * t;
                        let mut dot = 0.0;
                        for j in 0..=i {
                            dot += grad[row + j] * y[row + j];
                        }
                        for j in 0..=i {
                            d[row + j] = y[row + j] * (grad[row + j] - dot);
                        }
                    }
                }
                self.add_grad(*a, &d);
            }

            Op::LayerNorm { a, gain, bias, eps } => {
                let x = self.data(*a).to_vec();
                let gd = self.data(*gain).to_vec();
                let d = *self.nodes[idx].shape.last().unwrap();
                let mut dx = vec![0.0; x.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for (row_idx, row) in x.chunks_exact(d).enumerate() {
                    let g = &grad[row_idx * d..(row_idx + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = g.iter().zip(&gd).map(|(gi, gn)| gi * gn).collect();
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    let df = d as f64;
                    for j in 0..d {
                        dgain[j] += g[j] * xhat[j];
                        dbias[j] += g[j];
                        dx[row_idx * d + j] =
                            inv / df * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                self.add_grad(*a, &dx);
                self.add_grad(*gain, &dgain);
                self.add_grad(*bias, &dbias);
            }

            Op::Permute { a, perm } => {
                let in_shape = self.shape(*a).to_vec();
                let out_shape = self.nodes[idx].shape.clone();
                // Gradient flows through the inverse permutation.
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let d = permute_data(grad, &out_shape, &inv);
                debug_assert_eq!(d.len(), in_shape.iter().product::<usize>());
                self.add_grad(*a, &d);
            }

            Op::Reshape { a } => {
                self.add_grad(*a, grad);
            }

            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts.clone().iter() {
                    let len = self.data(p).len();
                    let d = grad[offset..offset + len].to_vec();
                    self.add_grad(p, &d);
                    offset += len;
                }
            }

            Op::SliceRows { a, start, end: _ } => {
                let row: usize = self.shape(*a)[1..].iter().product();
                let mut d = vec![0.0; self.data(*a).len()];
                d[start * row..start * row + grad.len()].copy_from_slice(grad);
                self.add_grad(*a, &d);
            }

            Op::GatherRows { table, indices } => {
                let dcols = self.shape(*table)[1];
                let mut d = vec![0.0; self.data(*table).len()];
                for (i, &row) in indices.iter().enumerate() {
                    for j in 0..dcols {
                        d[row * dcols + j] += grad[i * dcols + j];
                    }
                }
                self.add_grad(*table, &d);
            }

            Op::SumAll { a } => {
                let d = vec![grad[0]; self.data(*a).len()];
                self.add_grad(*a, &d);
            }

            Op::CrossEntropy { logits, targets } => {
                let v = self.shape(*logits)[1];
                let count = targets.iter().flatten().count() as f64;
                let src = self.data(*logits).to_vec();
                let mut d = vec![0.0; src.len()];
                for (row_idx, tgt) in targets.iter().enumerate() {
                    if let Some(t) = tgt {
                        let row = &src[row_idx * v..(row_idx + 1) * v];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
                        let sum: f64 = exps.iter().sum();
                        for j in 0..v {
                            let p = exps[j] / sum;
                            let onehot = if j == *t { 1.0 } else { 0.0 };
                            d[row_idx * v + j] = grad[0] * (p - onehot) / count;
                        }
                    }
                }
                self.add_grad(*logits, &d);
            }
        }
    }
}

// ── Kernels & helpers ───────────────────────────────────────────────────

/// C += A(m×k) @ B(k×n), row-major.
fn mm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// C += A(m×n) @ B^T where B is (k×n), result (m×k).
fn mm_abt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for (p, cv) in crow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            *cv += s;
        }
    }
}

/// C += A^T @ B where A is (m×k), B is (m×n), result (k×n).
fn mm_atb_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * dinner
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides = strides_for(&out_shape);
    let mut out = vec![0.0; src.len()];
    for_each_index(shape, |coords, flat| {
        let mut off = 0;
        for (i, &p) in perm.iter().enumerate() {
            off += coords[p] * out_strides[i];
        }
        out[off] = src[flat];
    });
    out
}

/// Visit every multi-index of `shape` in row-major order with its flat index.
fn for_each_index(shape: &[usize], mut f: impl FnMut(&[usize], usize)) {
    let numel: usize = shape.iter().product();
    let mut coords = vec![0usize; shape.len()];
    for flat in 0..numel {
        f(&coords, flat);
        for d in (0..shape.len()).rev() {
            coords[d] += 1;
            if coords[d] < shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
}
