//! The tape: eager forward evaluation, reverse-order gradient replay.

use std::collections::BTreeMap;

use thiserror::Error;

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::codec::QuantizerConfig;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("parameter {name:?} bound twice in one graph")]
    DuplicateParam { name: String },
    #[error("parameter {name:?} not bound in this graph")]
    UnboundParam { name: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("gradient for parameter {name:?} is not finite")]
    NonFiniteGradient { name: String },
}

fn shape_err(op: &'static str, detail: String) -> GraphError {
    GraphError::Shape { op, detail }
}

/// Handle to a node on the tape. Only valid for the graph that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param,
    MatMul,
    Add,
    /// Row-broadcast add: (m,n) + (1,n).
    AddBias,
    Sub,
    Mul,
    Div,
    Scale(f64),
    Neg,
    Tanh,
    Sigmoid,
    Relu,
    Sqrt,
    RowSoftmax,
    ConcatRows,
    ConcatCols,
    Reshape,
    SliceRows { start: usize },
    Sum,
    SteQuantize(QuantizerConfig),
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
}

/// Bound-parameter lookup for one graph: name → leaf node.
pub struct Bound {
    map: BTreeMap<String, NodeId>,
}

impl Bound {
    pub fn id(&self, name: &str) -> Result<NodeId, GraphError> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| GraphError::UnboundParam { name: name.to_string() })
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_names: BTreeMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward pass w.r.t. node `id`, if it received
    /// any (same layout as the node's value).
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        let needs_grad = matches!(op, Op::Param)
            || inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { op, inputs, value, grad: None, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf with no gradient tracking.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, vec![], value)
    }

    /// Tracked leaf. Each name may be bound once per graph so gradients for
    /// shared parameters accumulate on a single node.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<NodeId, GraphError> {
        if self.param_names.contains_key(name) {
            return Err(GraphError::DuplicateParam { name: name.to_string() });
        }
        let id = self.push(Op::Param, vec![], value);
        self.param_names.insert(name.to_string(), id);
        Ok(id)
    }

    /// Binds every entry of `params` (in name order) as a tracked leaf.
    pub fn bind(&mut self, params: &ParamSet) -> Result<Bound, GraphError> {
        self.bind_filtered(params, |_| true)
    }

    /// Binds the entries whose names satisfy `keep`.
    pub fn bind_filtered(
        &mut self,
        params: &ParamSet,
        keep: impl Fn(&str) -> bool,
    ) -> Result<Bound, GraphError> {
        let mut map = BTreeMap::new();
        for (name, tensor) in params.iter() {
            if keep(name) {
                map.insert(name.to_string(), self.param(name, tensor.clone())?);
            }
        }
        Ok(Bound { map })
    }

    fn mat(&self, id: NodeId, op: &'static str) -> Result<(usize, usize), GraphError> {
        self.nodes[id.0].value.as_matrix().map_err(|_| {
            shape_err(op, format!("rank-2 value required, got {:?}", self.nodes[id.0].value.shape()))
        })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (m, ka) = self.mat(a, "matmul")?;
        let (kb, n) = self.mat(b, "matmul")?;
        if ka != kb {
            return Err(shape_err("matmul", format!("inner dims {ka} vs {kb}")));
        }
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for k in 0..ka {
                let aik = av[i * ka + k];
                let brow = &bv[k * n..(k + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aik * brow[j];
                }
            }
        }
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(Op::MatMul, vec![a, b], value))
    }

    fn zip_elementwise(
        &mut self,
        op: Op,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId, GraphError> {
        let sa = self.mat(a, name)?;
        let sb = self.mat(b, name)?;
        if sa != sb {
            return Err(shape_err(name, format!("operand shapes {sa:?} vs {sb:?}")));
        }
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::matrix(sa.0, sa.1, data)?;
        Ok(self.push(op, vec![a, b], value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.zip_elementwise(Op::Add, "add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.zip_elementwise(Op::Sub, "sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.zip_elementwise(Op::Mul, "mul", a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.zip_elementwise(Op::Div, "div", a, b, |x, y| x / y)
    }

    /// (m,n) + (1,n) with the bias row broadcast over rows.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, GraphError> {
        let (m, n) = self.mat(a, "add_bias")?;
        let (br, bc) = self.mat(bias, "add_bias")?;
        if br != 1 || bc != n {
            return Err(shape_err(
                "add_bias",
                format!("bias must be 1x{n}, got {br}x{bc}"),
            ));
        }
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[bias.0].value.data();
        let data: Vec<f64> = av
            .iter()
            .enumerate()
            .map(|(idx, &x)| x + bv[idx % n])
            .collect();
        let value = Tensor::matrix(m, n, data)?;
        Ok(self.push(Op::AddBias, vec![a, bias], value))
    }

    fn unary(
        &mut self,
        op: Op,
        name: &'static str,
        x: NodeId,
        f: impl Fn(f64) -> f64,
    ) -> Result<NodeId, GraphError> {
        let (m, n) = self.mat(x, name)?;
        let data: Vec<f64> = self.nodes[x.0].value.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::matrix(m, n, data)?;
        Ok(self.push(op, vec![x], value))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId, GraphError> {
        self.unary(Op::Scale(c), "scale", x, |v| c * v)
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.unary(Op::Neg, "neg", x, |v| -v)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.unary(Op::Tanh, "tanh", x, f64::tanh)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.unary(Op::Sigmoid, "sigmoid", x, |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.unary(Op::Relu, "relu", x, |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.unary(Op::Sqrt, "sqrt", x, f64::sqrt)
    }

    /// Numerically stabilized softmax applied independently to each row.
    pub fn row_softmax(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let (m, n) = self.mat(x, "row_softmax")?;
        let xv = self.nodes[x.0].value.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                data[i * n + j] = e;
                denom += e;
            }
            for j in 0..n {
                data[i * n + j] /= denom;
            }
        }
        let value = Tensor::matrix(m, n, data)?;
        Ok(self.push(Op::RowSoftmax, vec![x], value))
    }

    /// Vertical stack; all inputs must share the column count.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, GraphError> {
        if parts.is_empty() {
            return Err(shape_err("concat_rows", "no inputs".into()));
        }
        let (_, n) = self.mat(parts[0], "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pm, pn) = self.mat(p, "concat_rows")?;
            if pn != n {
                return Err(shape_err("concat_rows", format!("column counts {n} vs {pn}")));
            }
            rows += pm;
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        let value = Tensor::matrix(rows, n, data)?;
        Ok(self.push(Op::ConcatRows, parts.to_vec(), value))
    }

    /// Horizontal stack; all inputs must share the row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, GraphError> {
        if parts.is_empty() {
            return Err(shape_err("concat_cols", "no inputs".into()));
        }
        let (m, _) = self.mat(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.mat(p, "concat_cols")?;
            if pm != m {
                return Err(shape_err("concat_cols", format!("row counts {m} vs {pm}")));
            }
            widths.push(pn);
            total += pn;
        }
        let mut data = vec![0.0; m * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.nodes[p.0].value.data();
            for i in 0..m {
                data[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&pv[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let value = Tensor::matrix(m, total, data)?;
        Ok(self.push(Op::ConcatCols, parts.to_vec(), value))
    }

    /// Row-major reinterpretation to (rows, cols); element order unchanged.
    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> Result<NodeId, GraphError> {
        let len = self.nodes[x.0].value.len();
        if rows * cols != len {
            return Err(shape_err(
                "reshape",
                format!("cannot view {len} elements as {rows}x{cols}"),
            ));
        }
        let value = Tensor::matrix(rows, cols, self.nodes[x.0].value.data().to_vec())?;
        Ok(self.push(Op::Reshape, vec![x], value))
    }

    /// Contiguous row block [start, start+len).
    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, GraphError> {
        let (m, n) = self.mat(x, "slice_rows")?;
        if start + len > m || len == 0 {
            return Err(shape_err(
                "slice_rows",
                format!("rows [{start}, {}) out of 0..{m}", start + len),
            ));
        }
        let data = self.nodes[x.0].value.data()[start * n..(start + len) * n].to_vec();
        let value = Tensor::matrix(len, n, data)?;
        Ok(self.push(Op::SliceRows { start }, vec![x], value))
    }

    /// Sum of all entries, as a 1x1 tensor.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.mat(x, "sum")?;
        let s: f64 = self.nodes[x.0].value.data().iter().sum();
        Ok(self.push(Op::Sum, vec![x], Tensor::scalar(s)))
    }

    /// Straight-through midrise quantizer: forward applies the exact codec
    /// quantizer; backward passes the upstream gradient through unchanged
    /// wherever the input lies in the non-saturated range |y| <= A and
    /// blocks it elsewhere.
    pub fn ste_quantize(&mut self, x: NodeId, quant: QuantizerConfig) -> Result<NodeId, GraphError> {
        let (m, n) = self.mat(x, "ste_quantize")?;
        let data: Vec<f64> = self.nodes[x.0].value.data().iter().map(|&v| quant.quantize(v)).collect();
        let value = Tensor::matrix(m, n, data)?;
        Ok(self.push(Op::SteQuantize(quant), vec![x], value))
    }

    /// Reverse pass from a scalar loss node (seed gradient 1).
    pub fn backward(&mut self, loss: NodeId) -> Result<(), GraphError> {
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.len() != 1 {
            return Err(GraphError::NonScalarLoss { shape });
        }
        self.backward_seeded(loss, &[1.0])
    }

    /// Reverse pass with an explicit upstream gradient at `node`. Useful for
    /// probing sub-networks with a chosen cotangent.
    pub fn backward_seeded(&mut self, node: NodeId, seed: &[f64]) -> Result<(), GraphError> {
        if seed.len() != self.nodes[node.0].value.len() {
            return Err(shape_err(
                "backward_seeded",
                format!(
                    "seed has {} entries, node value has {}",
                    seed.len(),
                    self.nodes[node.0].value.len()
                ),
            ));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[node.0].grad = Some(seed.to_vec());
        for id in (0..=node.0).rev() {
            if !self.nodes[id].needs_grad || self.nodes[id].grad.is_none() {
                continue;
            }
            self.propagate(id);
        }
        Ok(())
    }

    /// Applies the VJP of node `id` into its inputs. Inputs always precede
    /// the node on the tape, so a split borrow is safe.
    fn propagate(&mut self, id: usize) {
        let (head, tail) = self.nodes.split_at_mut(id);
        let node = &tail[0];
        let g = node.grad.as_ref().expect("caller checked").clone();
        let inputs = node.inputs.clone();

        // Lazily materialize an input's gradient buffer.
        let ensure = |nodes: &mut [Node], nid: NodeId| {
            let len = nodes[nid.0].value.len();
            nodes[nid.0].grad.get_or_insert_with(|| vec![0.0; len]);
        };
        let wants = |nodes: &[Node], nid: NodeId| nodes[nid.0].needs_grad;

        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul => {
                let a = inputs[0];
                let b = inputs[1];
                let (m, k) = head[a.0].value.as_matrix().expect("validated");
                let (_, n) = head[b.0].value.as_matrix().expect("validated");
                if wants(head, a) {
                    ensure(head, a);
                    // dA = G B^T
                    let bv = head[b.0].value.data().to_vec();
                    let ga = head[a.0].grad.as_mut().expect("ensured");
                    for i in 0..m {
                        for kk in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv[kk * n + j];
                            }
                            ga[i * k + kk] += s;
                        }
                    }
                }
                if wants(head, b) {
                    ensure(head, b);
                    // dB = A^T G
                    let av = head[a.0].value.data().to_vec();
                    let gb = head[b.0].grad.as_mut().expect("ensured");
                    for kk in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += av[i * k + kk] * g[i * n + j];
                            }
                            gb[kk * n + j] += s;
                        }
                    }
                }
            }
            Op::Add => {
                for &inp in &inputs {
                    if wants(head, inp) {
                        ensure(head, inp);
                        let gi = head[inp.0].grad.as_mut().expect("ensured");
                        for (dst, &s) in gi.iter_mut().zip(&g) {
                            *dst += s;
                        }
                    }
                }
            }
            Op::AddBias => {
                let a = inputs[0];
                let bias = inputs[1];
                if wants(head, a) {
                    ensure(head, a);
                    let ga = head[a.0].grad.as_mut().expect("ensured");
                    for (dst, &s) in ga.iter_mut().zip(&g) {
                        *dst += s;
                    }
                }
                if wants(head, bias) {
                    ensure(head, bias);
                    let n = head[bias.0].value.len();
                    let gb = head[bias.0].grad.as_mut().expect("ensured");
                    for (idx, &s) in g.iter().enumerate() {
                        gb[idx % n] += s;
                    }
                }
            }
            Op::Sub => {
                let (a, b) = (inputs[0], inputs[1]);
                if wants(head, a) {
                    ensure(head, a);
                    let ga = head[a.0].grad.as_mut().expect("ensured");
                    for (dst, &s) in ga.iter_mut().zip(&g) {
                        *dst += s;
                    }
                }
                if wants(head, b) {
                    ensure(head, b);
                    let gb = head[b.0].grad.as_mut().expect("ensured");
                    for (dst, &s) in gb.iter_mut().zip(&g) {
                        *dst -= s;
                    }
                }
            }
            Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                if wants(head, a) {
                    ensure(head, a);
                    let bv = head[b.0].value.data().to_vec();
                    let ga = head[a.0].grad.as_mut().expect("ensured");
                    for ((dst, &s), &y) in ga.iter_mut().zip(&g).zip(&bv) {
                        *dst += s * y;
                    }
                }
                if wants(head, b) {
                    ensure(head, b);
                    let av = head[a.0].value.data().to_vec();
                    let gb = head[b.0].grad.as_mut().expect("ensured");
                    for ((dst, &s), &x) in gb.iter_mut().zip(&g).zip(&av) {
                        *dst += s * x;
                    }
                }
            }
            Op::Div => {
                let (a, b) = (inputs[0], inputs[1]);
                let bv = head[b.0].value.data().to_vec();
                if wants(head, a) {
                    ensure(head, a);
                    let ga = head[a.0].grad.as_mut().expect("ensured");
                    for ((dst, &s), &y) in ga.iter_mut().zip(&g).zip(&bv) {
                        *dst += s / y;
                    }
                }
                if wants(head, b) {
                    ensure(head, b);
                    let av = head[a.0].value.data().to_vec();
                    let gb = head[b.0].grad.as_mut().expect("ensured");
                    for i in 0..g.len() {
                        gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                }
            }
            Op::Scale(c) => {
                let c = *c;
                let x = inputs[0];
                if wants(head, x) {
                    ensure(head, x);
                    let gx = head[x.0].grad.as_mut().expect("ensured");
                    for (dst, &s) in gx.iter_mut().zip(&g) {
                        *dst += c * s;
                    }
                }
            }
            Op::Neg => {
                let x = inputs[0];
                if wants(head, x) {
                    ensure(head, x);
                    let gx = head[x.0].grad.as_mut().expect("ensured");
                    for (dst, &s) in gx.iter_mut().zip(&g) {
                        *dst -= s;
                    }
                }
            }
            Op::Tanh => {
                let x = inputs[0];
                if wants(head, x) {
                    ensure(head, x);
                    let yv = node.value.data().to_vec();
                    let gx = head[x.0].grad.as_mut().expect("ensured");
                    for ((dst, &s), &y) in gx.iter_mut().zip(&g).zip(&yv) {
                        *dst += s * (1.0 - y * y);
                    }
                }
            }
            Op::Sigmoid => {
                let x = inputs[0];
                if wants(head, x) {
                    ensure(head, x);
                    let yv = node.value.data().to_vec();
                    let gx = head[x.0].grad.as_mut().expect("ensured");
                    for ((dst, &s), &y) in gx.iter_mut().zip(&g).zip(&yv) {
                        *dst += s * y * (1.0 - y);
                    }
                }
            }
            Op::Relu => {
                let x = inputs[0];
                if wants(head, x) {
                    ensure(head, x);
                    let xv = head[x.0].value.data().to_vec();
                    let gx = head[x.0].grad.as_mut().expect("ensured");
                    for ((dst, &s), &v) in gx.iter_mut().zip(&g).zip(&xv) {
                        if v > 0.0 {
                            *dst += s;
                        }
                    }
                }
            }
            Op::Sqrt => {
                let x = inputs[0];
                if wants(head, x) {
                    ensure(head, x);
                    let yv = node.value.data().to_vec();
                    let gx = head[x.0].grad.as_mut().expect("ensured");
                    for ((dst, &s), &y) in gx.iter_mut().zip(&g).zip(&yv) {
                        // Subgradient 0 at the origin keeps a degenerate
                        // norm from poisoning the whole pass with NaN.
                        if y > 0.0 {
                            *dst += s * 0.5 / y;
                        }
                    }
                }
            }
            Op::RowSoftmax => {
                let x = inputs[0];
                if wants(head, x) {
                    ensure(head, x);
                    let (m, n) = node.value.as_matrix().expect("validated");
                    let yv = node.value.data().to_vec();
                    let gx = head[x.0].grad.as_mut().expect("ensured");
                    for i in 0..m {
                        let row = &yv[i * n..(i + 1) * n];
                        let grow = &g[i * n..(i + 1) * n];
                        let dot: f64 = row.iter().zip(grow).map(|(&y, &s)| y * s).sum();
                        for j in 0..n {
                            gx[i * n + j] += row[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::ConcatRows => {
                let mut offset = 0;
                for &inp in &inputs {
                    let len = head[inp.0].value.len();
                    if wants(head, inp) {
                        ensure(head, inp);
                        let gi = head[inp.0].grad.as_mut().expect("ensured");
                        for (dst, &s) in gi.iter_mut().zip(&g[offset..offset + len]) {
                            *dst += s;
                        }
                    }
                    offset += len;
                }
            }
            Op::ConcatCols => {
                let (m, total) = node.value.as_matrix().expect("validated");
                let mut offset = 0;
                for &inp in &inputs {
                    let (_, w) = head[inp.0].value.as_matrix().expect("validated");
                    if wants(head, inp) {
                        ensure(head, inp);
                        let gi = head[inp.0].grad.as_mut().expect("ensured");
                        for i in 0..m {
                            for j in 0..w {
                                gi[i * w + j] += g[i * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Reshape => {
                let x = inputs[0];
                if wants(head, x) {
                    ensure(head, x);
                    let gx = head[x.0].grad.as_mut().expect("ensured");
                    for (dst, &s) in gx.iter_mut().zip(&g) {
                        *dst += s;
                    }
                }
            }
            Op::SliceRows { start } => {
                let x = inputs[0];
                if wants(head, x) {
                    ensure(head, x);
                    let (_, n) = head[x.0].value.as_matrix().expect("validated");
                    let gx = head[x.0].grad.as_mut().expect("ensured");
                    for (idx, &s) in g.iter().enumerate() {
                        gx[start * n + idx] += s;
                    }
                }
            }
            Op::Sum => {
                let x = inputs[0];
                if wants(head, x) {
                    ensure(head, x);
                    let gx = head[x.0].grad.as_mut().expect("ensured");
                    for dst in gx.iter_mut() {
                        *dst += g[0];
                    }
                }
            }
            Op::SteQuantize(quant) => {
                let x = inputs[0];
                if wants(head, x) {
                    ensure(head, x);
                    let xv = head[x.0].value.data().to_vec();
                    let quant = *quant;
                    let gx = head[x.0].grad.as_mut().expect("ensured");
                    for ((dst, &s), &v) in gx.iter_mut().zip(&g).zip(&xv) {
                        if quant.in_range(v) {
                            *dst += s;
                        }
                    }
                }
            }
        }
    }

    /// Gradients of all bound parameters after a backward pass, in name
    /// order. Parameters unreachable from the loss get zero gradients.
    pub fn param_grads(&self) -> BTreeMap<String, Vec<f64>> {
        self.param_names
            .iter()
            .map(|(name, id)| {
                let node = &self.nodes[id.0];
                let grad = node
                    .grad
                    .clone()
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                (name.clone(), grad)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::gradcheck;
    use crate::autodiff::params::glorot_uniform;
    use crate::seeds::{rng_from, standard_normal, uniform};
    use rand::RngExt;

    fn randn(seed: u64, rows: usize, cols: usize) -> Tensor {
        let mut rng = rng_from(seed);
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| standard_normal(&mut rng)).collect())
            .unwrap()
    }

    /// FD check for a loss built from the given params; the oracle rebuilds
    /// the graph per probe, so any constant inputs must come from the
    /// closure's captures.
    fn assert_fd<F>(params: ParamSet, build: F)
    where
        F: FnMut(&mut Graph, &Bound) -> Result<NodeId, GraphError>,
    {
        let report = gradcheck(&params, 1e-5, build).unwrap();
        assert!(
            report.max_rel_err < 1e-6,
            "max rel err {:.3e} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn matmul_known_value() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_rejects_inner_dim_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(g.matmul(a, b), Err(GraphError::Shape { op: "matmul", .. })));
    }

    #[test]
    fn fd_matmul() {
        let mut p = ParamSet::new();
        p.insert("a", randn(1, 3, 4)).unwrap();
        p.insert("b", randn(2, 4, 2)).unwrap();
        let probe = randn(3, 3, 2);
        assert_fd(p, move |g, bound| {
            let a = bound.id("a")?;
            let b = bound.id("b")?;
            let prod = g.matmul(a, b)?;
            let c = g.constant(probe.clone());
            let weighted = g.mul(prod, c)?;
            g.sum(weighted)
        });
    }

    #[test]
    fn fd_elementwise_arithmetic() {
        let mut p = ParamSet::new();
        p.insert("a", randn(11, 3, 3)).unwrap();
        // Keep divisor coordinates away from zero.
        let mut rng = rng_from(12);
        let b = Tensor::matrix(
            3,
            3,
            (0..9)
                .map(|_| {
                    let x = uniform(&mut rng, 0.5, 2.0);
                    if rng.random::<bool>() {
                        x
                    } else {
                        -x
                    }
                })
                .collect(),
        )
        .unwrap();
        p.insert("b", b).unwrap();
        let probe = randn(13, 3, 3);
        assert_fd(p, move |g, bound| {
            let a = bound.id("a")?;
            let b = bound.id("b")?;
            let s = g.add(a, b)?;
            let d = g.sub(s, b)?;
            let m = g.mul(d, b)?;
            let q = g.div(m, b)?;
            let c = g.constant(probe.clone());
            let w = g.mul(q, c)?;
            g.sum(w)
        });
    }

    #[test]
    fn fd_add_bias_broadcast() {
        let mut p = ParamSet::new();
        p.insert("x", randn(21, 4, 3)).unwrap();
        p.insert("bias", randn(22, 1, 3)).unwrap();
        let probe = randn(23, 4, 3);
        assert_fd(p, move |g, bound| {
            let x = bound.id("x")?;
            let bias = bound.id("bias")?;
            let y = g.add_bias(x, bias)?;
            let c = g.constant(probe.clone());
            let w = g.mul(y, c)?;
            g.sum(w)
        });
    }

    #[test]
    fn fd_activations() {
        let mut p = ParamSet::new();
        // Keep relu inputs away from the kink and sqrt inputs positive.
        let mut rng = rng_from(31);
        let x = Tensor::matrix(
            2,
            5,
            (0..10)
                .map(|_| {
                    let m = uniform(&mut rng, 0.2, 1.5);
                    if rng.random::<bool>() {
                        m
                    } else {
                        -m
                    }
                })
                .collect(),
        )
        .unwrap();
        p.insert("x", x).unwrap();
        let probe = randn(33, 2, 5);
        assert_fd(p, move |g, bound| {
            let x = bound.id("x")?;
            let t = g.tanh(x)?;
            let s = g.sigmoid(t)?;
            let r = g.relu(x)?;
            let m = g.mul(s, r)?;
            let sq = g.mul(x, x)?;
            let root = g.sqrt(sq)?;
            let sum1 = g.add(m, root)?;
            let c = g.constant(probe.clone());
            let w = g.mul(sum1, c)?;
            g.sum(w)
        });
    }

    #[test]
    fn fd_scale_neg() {
        let mut p = ParamSet::new();
        p.insert("x", randn(41, 2, 3)).unwrap();
        assert_fd(p, move |g, bound| {
            let x = bound.id("x")?;
            let a = g.scale(x, -2.75)?;
            let b = g.neg(a)?;
            let m = g.mul(b, b)?;
            g.sum(m)
        });
    }

    #[test]
    fn fd_row_softmax() {
        let mut p = ParamSet::new();
        p.insert("x", randn(51, 3, 4)).unwrap();
        let probe = randn(52, 3, 4);
        assert_fd(p, move |g, bound| {
            let x = bound.id("x")?;
            let y = g.row_softmax(x)?;
            let c = g.constant(probe.clone());
            let w = g.mul(y, c)?;
            g.sum(w)
        });
    }

    #[test]
    fn fd_shape_ops() {
        let mut p = ParamSet::new();
        p.insert("a", randn(61, 2, 6)).unwrap();
        p.insert("b", randn(62, 1, 6)).unwrap();
        let probe = randn(63, 3, 5);
        assert_fd(p, move |g, bound| {
            let a = bound.id("a")?;
            let b = bound.id("b")?;
            let stack = g.concat_rows(&[a, b])?; // 3x6
            let left = g.slice_rows(stack, 0, 2)?; // 2x6, == a
            let lw = g.reshape(left, 3, 4)?;
            let col = g.reshape(b, 6, 1)?;
            let mid = g.slice_rows(col, 2, 3)?; // 3x1
            let block = g.concat_cols(&[lw, mid])?; // 3x5
            let c = g.constant(probe.clone());
            let w = g.mul(block, c)?;
            g.sum(w)
        });
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut g = Graph::new();
        let x = g.constant(randn(71, 4, 6));
        let y = g.row_softmax(x).unwrap();
        for i in 0..4 {
            let row_sum: f64 = (0..6).map(|j| g.value(y).get(i, j)).sum();
            assert!((row_sum - 1.0).abs() < 1e-12);
        }
        // Shifting a row by a constant leaves its softmax unchanged.
        let mut shifted = g.value(x).clone();
        for j in 0..6 {
            let v = shifted.get(0, j);
            shifted.data_mut()[j] = v + 123.456;
        }
        let xs = g.constant(shifted);
        let ys = g.row_softmax(xs).unwrap();
        for j in 0..6 {
            assert!((g.value(ys).get(0, j) - g.value(y).get(0, j)).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_node_gradients_accumulate() {
        // loss = sum(x * x) => dloss/dx = 2x exactly.
        let mut g = Graph::new();
        let x = g.param("x", randn(81, 2, 2)).unwrap();
        let m = g.mul(x, x).unwrap();
        let loss = g.sum(m).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(x).unwrap();
        for (gi, xi) in grad.iter().zip(g.value(x).data()) {
            assert_eq!(*gi, 2.0 * xi);
        }
    }

    #[test]
    fn param_rebinding_is_rejected() {
        let mut g = Graph::new();
        g.param("w", Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            g.param("w", Tensor::scalar(2.0)),
            Err(GraphError::DuplicateParam { .. })
        ));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param("x", randn(91, 2, 2)).unwrap();
        assert!(matches!(g.backward(x), Err(GraphError::NonScalarLoss { .. })));
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let run = || {
            let mut g = Graph::new();
            let w = g.param("w", glorot_uniform(&mut rng_from(7), 6, 6)).unwrap();
            let x = g.constant(randn(101, 6, 6));
            let h = g.matmul(x, w).unwrap();
            let t = g.tanh(h).unwrap();
            let s = g.row_softmax(t).unwrap();
            let m = g.mul(s, x).unwrap();
            let loss = g.sum(m).unwrap();
            g.backward(loss).unwrap();
            (g.value(loss).item().unwrap(), g.grad(w).unwrap().to_vec())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn ste_forward_matches_codec_quantizer() {
        let quant = QuantizerConfig::new(4, 0.3).unwrap();
        let mut g = Graph::new();
        let x = g.constant(randn(111, 3, 5));
        let q = g.ste_quantize(x, quant).unwrap();
        for (qi, xi) in g.value(q).data().iter().zip(g.value(x).data()) {
            assert_eq!(qi.to_bits(), quant.quantize(*xi).to_bits());
        }
    }

    #[test]
    fn ste_backward_is_saturation_mask() {
        let quant = QuantizerConfig::new(3, 0.25).unwrap();
        let a = quant.clip_amplitude();
        let mut g = Graph::new();
        let x = g
            .param("x", Tensor::row(vec![0.0, a, -a, a + 0.01, -a - 0.01, 0.3]))
            .unwrap();
        let q = g.ste_quantize(x, quant).unwrap();
        let loss = g.sum(q).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn ste_matches_identity_bottleneck_gradients_in_range() {
        // With a linear head after the bottleneck, upstream gradients do not
        // depend on the bottleneck's forward values, so encoder gradients
        // through the straight-through estimator must equal those through an
        // identity bottleneck bit for bit while nothing saturates.
        let quant = QuantizerConfig::new(8, 0.05).unwrap();
        let w0 = glorot_uniform(&mut rng_from(121), 4, 6);
        let x0 = randn(122, 2, 4);
        let head = randn(123, 6, 1);
        let run = |with_quant: bool| {
            let mut g = Graph::new();
            let w = g.param("w", w0.clone()).unwrap();
            let x = g.constant(x0.clone());
            let z = g.matmul(x, w).unwrap();
            let bottleneck = if with_quant {
                g.ste_quantize(z, quant).unwrap()
            } else {
                z
            };
            let h = g.constant(head.clone());
            let y = g.matmul(bottleneck, h).unwrap();
            let loss = g.sum(y).unwrap();
            g.backward(loss).unwrap();
            (g.value(z).data().to_vec(), g.grad(w).unwrap().to_vec())
        };
        let (z, grad_ste) = run(true);
        let (_, grad_id) = run(false);
        assert!(z.iter().all(|&v| quant.in_range(v)), "test setup must avoid saturation");
        for (a, b) in grad_ste.iter().zip(&grad_id) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
