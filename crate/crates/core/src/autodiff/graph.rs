use std::fmt;

use super::{AutodiffError, ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// A differentiable operation defined outside this module.
///
/// `backward` receives the upstream gradient of the output and returns one
/// gradient per input (`None` for inputs that receive nothing).
pub trait Function: fmt::Debug {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AutodiffError>;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f32]) -> Vec<Option<Vec<f32>>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Scalar,
    /// rhs is a row vector added to every row of lhs.
    Row,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    GatherParam(ParamId, Vec<usize>),
    Add(NodeId, NodeId, Broadcast),
    Sub(NodeId, NodeId, Broadcast),
    Mul(NodeId, NodeId, Broadcast),
    Neg(NodeId),
    Scale(NodeId, f32),
    AddScalar(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    LogSigmoid(NodeId),
    Log(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    MatMul(NodeId, NodeId),
    Softmax(NodeId),
    SelectRows(NodeId, Vec<usize>),
    ScatterRows(NodeId, Vec<usize>),
    RowWeightedSum(Vec<NodeId>, NodeId),
    Custom(Box<dyn Function>, Vec<NodeId>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::GatherParam(..) => "gather_param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::LogSigmoid(_) => "log_sigmoid",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::Sqrt(_) => "sqrt",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MatMul(..) => "matmul",
            Op::Softmax(_) => "softmax",
            Op::SelectRows(..) => "select_rows",
            Op::ScatterRows(..) => "scatter_rows",
            Op::RowWeightedSum(..) => "row_weighted_sum",
            Op::Custom(f, _) => f.name(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Dynamic reverse-mode tape. Nodes are appended in evaluation order, so the
/// node list is already a topological order and backward walks it in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sigmoid(x: f32) -> f32 {
    let x = x as f64;
    (if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }) as f32
}

/// `ln σ(x)` without overflow for large |x|.
fn log_sigmoid(x: f32) -> f32 {
    let x = x as f64;
    (if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }) as f32
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of a leaf node (populated by [`Graph::backward`]).
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.nodes[id.0].value.grad()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<NodeId, AutodiffError> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { value, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn needs_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].value.is_requires_grad())
    }

    fn derived(&mut self, shape: Vec<usize>, data: Vec<f32>, op: Op, inputs: &[NodeId]) -> Result<NodeId, AutodiffError> {
        let mut t = Tensor::new(shape, data)?;
        t.set_requires_grad(self.needs_grad(inputs));
        self.push(t, op)
    }

    /// Adds a leaf. Its gradient is tracked when the tensor requires grad.
    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId, AutodiffError> {
        self.push(value, Op::Leaf)
    }

    /// Adds a constant leaf that never receives a gradient.
    pub fn constant(&mut self, mut value: Tensor) -> Result<NodeId, AutodiffError> {
        value.set_requires_grad(false);
        value.zero_grad();
        self.push(value, Op::Leaf)
    }

    /// Copies the node's current value into a fresh constant (stop-gradient).
    pub fn detach(&mut self, id: NodeId) -> Result<NodeId, AutodiffError> {
        let v = self.nodes[id.0].value.detached();
        self.constant(v)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<NodeId, AutodiffError> {
        let mut v = store.get(id).detached();
        v.set_requires_grad(true);
        self.push(v, Op::Param(id))
    }

    /// Row lookup into a parameter matrix; backward scatter-adds into the rows.
    pub fn gather_param(&mut self, store: &ParamStore, id: ParamId, rows: &[usize]) -> Result<NodeId, AutodiffError> {
        let table = store.get(id);
        let cols = table.cols();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= table.rows() {
                return Err(AutodiffError::Invalid(format!(
                    "row {r} out of range for parameter block {} with {} rows",
                    store.name(id),
                    table.rows()
                )));
            }
            data.extend_from_slice(table.row(r));
        }
        let mut t = Tensor::new(vec![rows.len(), cols], data)?;
        t.set_requires_grad(true);
        self.push(t, Op::GatherParam(id, rows.to_vec()))
    }

    fn broadcast_kind(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Broadcast, AutodiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            Ok(Broadcast::Same)
        } else if self.value(b).numel() == 1 {
            Ok(Broadcast::Scalar)
        } else if sa.len() == 2 && sb.len() == 1 && sa[1] == sb[0] {
            Ok(Broadcast::Row)
        } else {
            Err(AutodiffError::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary(&mut self, name: &'static str, a: NodeId, b: NodeId, f: impl Fn(f32, f32) -> f32) -> Result<(Vec<usize>, Vec<f32>, Broadcast), AutodiffError> {
        let kind = self.broadcast_kind(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let cols = vb.numel();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match kind {
                    Broadcast::Same => vb.data()[i],
                    Broadcast::Scalar => vb.data()[0],
                    Broadcast::Row => vb.data()[i % cols],
                };
                f(x, y)
            })
            .collect();
        Ok((va.shape().to_vec(), data, kind))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (shape, data, kind) = self.binary("add", a, b, |x, y| x + y)?;
        self.derived(shape, data, Op::Add(a, b, kind), &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (shape, data, kind) = self.binary("sub", a, b, |x, y| x - y)?;
        self.derived(shape, data, Op::Sub(a, b, kind), &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (shape, data, kind) = self.binary("mul", a, b, |x, y| x * y)?;
        self.derived(shape, data, Op::Mul(a, b, kind), &[a, b])
    }

    fn unary(&mut self, x: NodeId, op: Op, f: impl Fn(f32) -> f32) -> Result<NodeId, AutodiffError> {
        let v = self.value(x);
        let shape = v.shape().to_vec();
        let data = v.data().iter().map(|&a| f(a)).collect();
        self.derived(shape, data, op, &[x])
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        self.unary(x, Op::Neg(x), |a| -a)
    }

    pub fn scale(&mut self, x: NodeId, c: f32) -> Result<NodeId, AutodiffError> {
        self.unary(x, Op::Scale(x, c), |a| a * c)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f32) -> Result<NodeId, AutodiffError> {
        self.unary(x, Op::AddScalar(x), |a| a + c)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        self.unary(x, Op::Relu(x), |a| a.max(0.0))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn log_sigmoid(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        self.unary(x, Op::LogSigmoid(x), log_sigmoid)
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        if let Some(&bad) = self.value(x).data().iter().find(|&&v| v <= 0.0) {
            return Err(AutodiffError::Domain { op: "log", value: bad });
        }
        self.unary(x, Op::Log(x), f32::ln)
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        self.unary(x, Op::Square(x), |a| a * a)
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        if let Some(&bad) = self.value(x).data().iter().find(|&&v| v < 0.0) {
            return Err(AutodiffError::Domain { op: "sqrt", value: bad });
        }
        self.unary(x, Op::Sqrt(x), f32::sqrt)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.derived(Vec::new(), vec![s as f32], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(AutodiffError::Invalid("mean of an empty tensor".into()));
        }
        let s: f64 = v.data().iter().map(|&v| v as f64).sum();
        let m = s / v.numel() as f64;
        self.derived(Vec::new(), vec![m as f32], Op::Mean(x), &[x])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ndim() != 2 || vb.ndim() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(AutodiffError::Shape {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let data = matmul_raw(va.data(), vb.data(), m, k, n);
        self.derived(vec![m, n], data, Op::MatMul(a, b), &[a, b])
    }

    /// Softmax over a vector, or over each row of a matrix.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let v = self.value(x);
        if v.numel() == 0 || v.ndim() > 2 {
            return Err(AutodiffError::Invalid(format!("softmax over shape {:?}", v.shape())));
        }
        let cols = if v.ndim() == 2 { v.cols() } else { v.numel() };
        let mut data = Vec::with_capacity(v.numel());
        for row in v.data().chunks(cols) {
            data.extend(softmax_row(row));
        }
        let shape = v.shape().to_vec();
        self.derived(shape, data, Op::Softmax(x), &[x])
    }

    pub fn select_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId, AutodiffError> {
        let v = self.value(x);
        let n = v.rows();
        if let Some(&r) = rows.iter().find(|&&r| r >= n) {
            return Err(AutodiffError::Invalid(format!("select_rows: row {r} out of range ({n} rows)")));
        }
        let mut data = Vec::with_capacity(rows.len() * v.cols());
        for &r in rows {
            data.extend_from_slice(v.row(r));
        }
        let mut shape = v.shape().to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        shape[0] = rows.len();
        self.derived(shape, data, Op::SelectRows(x, rows.to_vec()), &[x])
    }

    /// Places row `i` of `x` at row `rows[i]` of an `n`-row zero matrix.
    pub fn scatter_rows(&mut self, x: NodeId, rows: &[usize], n: usize) -> Result<NodeId, AutodiffError> {
        let v = self.value(x);
        if v.rows() != rows.len() || rows.iter().any(|&r| r >= n) {
            return Err(AutodiffError::Invalid(format!(
                "scatter_rows: {} source rows, {} targets, {n} output rows",
                v.rows(),
                rows.len()
            )));
        }
        let cols = v.cols();
        let mut data = vec![0.0f32; n * cols];
        for (i, &r) in rows.iter().enumerate() {
            data[r * cols..(r + 1) * cols]
                .iter_mut()
                .zip(v.row(i))
                .for_each(|(o, s)| *o += s);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = n;
        self.derived(shape, data, Op::ScatterRows(x, rows.to_vec()), &[x])
    }

    /// `out[e] = Σ_m w[e][m] · mats[m][e]`. `weights` is `[n × M]`, or a single
    /// row (`[1 × M]` or `[M]`) shared by every output row.
    pub fn row_weighted_sum(&mut self, mats: &[NodeId], weights: NodeId) -> Result<NodeId, AutodiffError> {
        if mats.is_empty() {
            return Err(AutodiffError::Invalid("row_weighted_sum over zero inputs".into()));
        }
        let shape = self.value(mats[0]).shape().to_vec();
        for &m in mats {
            if self.value(m).shape() != shape.as_slice() {
                return Err(AutodiffError::Shape {
                    op: "row_weighted_sum",
                    lhs: shape,
                    rhs: self.value(m).shape().to_vec(),
                });
            }
        }
        let first = self.value(mats[0]);
        let (n, cols) = (first.rows(), first.cols());
        let w = self.value(weights);
        let m_count = mats.len();
        let shared = w.numel() == m_count;
        if !(shared || w.numel() == n * m_count) {
            return Err(AutodiffError::Shape {
                op: "row_weighted_sum",
                lhs: vec![n, m_count],
                rhs: w.shape().to_vec(),
            });
        }
        let wd = w.data().to_vec();
        let mut data = vec![0.0f32; n * cols];
        for (mi, &m) in mats.iter().enumerate() {
            let v = self.value(m).data();
            for e in 0..n {
                let we = if shared { wd[mi] } else { wd[e * m_count + mi] };
                if we == 0.0 {
                    continue;
                }
                data[e * cols..(e + 1) * cols]
                    .iter_mut()
                    .zip(&v[e * cols..(e + 1) * cols])
                    .for_each(|(o, x)| *o += we * x);
            }
        }
        let mut inputs = mats.to_vec();
        inputs.push(weights);
        self.derived(shape, data, Op::RowWeightedSum(mats.to_vec(), weights), &inputs)
    }

    pub fn apply(&mut self, f: impl Function + 'static, inputs: &[NodeId]) -> Result<NodeId, AutodiffError> {
        let vals: Vec<&Tensor> = inputs.iter().map(|i| self.value(*i)).collect();
        let mut out = f.forward(&vals)?;
        out.zero_grad();
        out.set_requires_grad(self.needs_grad(inputs));
        self.push(out, Op::Custom(Box::new(f), inputs.to_vec()))
    }

    /// Backpropagates from a scalar `loss` into leaf nodes only.
    pub fn backward_local(&mut self, loss: NodeId) -> Result<(), AutodiffError> {
        self.backward_inner(loss, None)
    }

    /// Backpropagates from a scalar `loss`, accumulating into leaf nodes and
    /// into the gradient slots of `params`.
    pub fn backward(&mut self, loss: NodeId, params: &mut ParamStore) -> Result<(), AutodiffError> {
        self.backward_inner(loss, Some(params))
    }

    fn backward_inner(&mut self, loss: NodeId, mut params: Option<&mut ParamStore>) -> Result<(), AutodiffError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            if !self.nodes[idx].value.is_requires_grad() {
                continue;
            }
            match &self.nodes[idx].op {
                Op::Leaf => {
                    self.nodes[idx].value.accumulate_grad(&g);
                    continue;
                }
                Op::Param(pid) => {
                    if let Some(store) = params.as_deref_mut() {
                        store.get_mut(*pid).accumulate_grad(&g);
                    }
                    continue;
                }
                Op::GatherParam(pid, rows) => {
                    if let Some(store) = params.as_deref_mut() {
                        let t = store.get_mut(*pid);
                        let cols = t.cols();
                        let mut full = vec![0.0f32; t.numel()];
                        for (i, &r) in rows.iter().enumerate() {
                            full[r * cols..(r + 1) * cols]
                                .iter_mut()
                                .zip(&g[i * cols..(i + 1) * cols])
                                .for_each(|(o, x)| *o += x);
                        }
                        t.accumulate_grad(&full);
                    }
                    continue;
                }
                _ => {}
            }
            for (input, gi) in self.local_grads(idx, &g) {
                if input.0 >= adj.len() || !self.nodes[input.0].value.is_requires_grad() {
                    continue;
                }
                match &mut adj[input.0] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        Ok(())
    }

    /// Gradients flowing from node `idx` into each of its inputs.
    fn local_grads(&self, idx: usize, g: &[f32]) -> Vec<(NodeId, Vec<f32>)> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |id: NodeId| &self.nodes[id.0].value;
        let elementwise = |x: NodeId, f: &dyn Fn(f32, f32, f32) -> f32| -> Vec<(NodeId, Vec<f32>)> {
            let xv = val(x).data();
            let gi = xv
                .iter()
                .zip(out.data())
                .zip(g)
                .map(|((&xi, &yi), &gi)| f(xi, yi, gi))
                .collect();
            vec![(x, gi)]
        };
        match &node.op {
            Op::Leaf | Op::Param(_) | Op::GatherParam(..) => Vec::new(),
            Op::Add(a, b, kind) => vec![(*a, g.to_vec()), (*b, reduce_broadcast(g, *kind, val(*b).numel()))],
            Op::Sub(a, b, kind) => {
                let neg: Vec<f32> = g.iter().map(|v| -v).collect();
                vec![(*a, g.to_vec()), (*b, reduce_broadcast(&neg, *kind, val(*b).numel()))]
            }
            Op::Mul(a, b, kind) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                let cols = vb.len();
                let bval = |i: usize| match kind {
                    Broadcast::Same => vb[i],
                    Broadcast::Scalar => vb[0],
                    Broadcast::Row => vb[i % cols],
                };
                let ga: Vec<f32> = g.iter().enumerate().map(|(i, gi)| gi * bval(i)).collect();
                let gb_full: Vec<f32> = g.iter().zip(va).map(|(gi, ai)| gi * ai).collect();
                vec![(*a, ga), (*b, reduce_broadcast(&gb_full, *kind, cols))]
            }
            Op::Neg(x) => elementwise(*x, &|_, _, g| -g),
            Op::Scale(x, c) => {
                let c = *c;
                elementwise(*x, &move |_, _, g| g * c)
            }
            Op::AddScalar(x) => elementwise(*x, &|_, _, g| g),
            Op::Relu(x) => elementwise(*x, &|x, _, g| if x > 0.0 { g } else { 0.0 }),
            Op::Sigmoid(x) => elementwise(*x, &|_, y, g| g * y * (1.0 - y)),
            Op::LogSigmoid(x) => elementwise(*x, &|x, _, g| g * sigmoid(-x)),
            Op::Log(x) => elementwise(*x, &|x, _, g| g / x),
            Op::Square(x) => elementwise(*x, &|x, _, g| 2.0 * x * g),
            Op::Sqrt(x) => elementwise(*x, &|_, y, g| if y > 0.0 { g / (2.0 * y) } else { 0.0 }),
            Op::Sum(x) => vec![(*x, vec![g[0]; val(*x).numel()])],
            Op::Mean(x) => {
                let n = val(*x).numel();
                vec![(*x, vec![g[0] / n as f32; n])]
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                // dA = dC · Bᵀ, dB = Aᵀ · dC
                let bt = transpose(vb.data(), k, n);
                let at = transpose(va.data(), m, k);
                vec![
                    (*a, matmul_raw(g, &bt, m, n, k)),
                    (*b, matmul_raw(&at, g, k, m, n)),
                ]
            }
            Op::Softmax(x) => {
                let v = val(*x);
                let cols = if v.ndim() == 2 { v.cols() } else { v.numel() };
                let mut gi = Vec::with_capacity(g.len());
                for (y, gy) in out.data().chunks(cols).zip(g.chunks(cols)) {
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
                    gi.extend(y.iter().zip(gy).map(|(yi, gyi)| yi * (gyi - dot as f32)));
                }
                vec![(*x, gi)]
            }
            Op::SelectRows(x, rows) => {
                let v = val(*x);
                let cols = v.cols();
                let mut gi = vec![0.0f32; v.numel()];
                for (i, &r) in rows.iter().enumerate() {
                    gi[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .zip(&g[i * cols..(i + 1) * cols])
                        .for_each(|(o, s)| *o += s);
                }
                vec![(*x, gi)]
            }
            Op::ScatterRows(x, rows) => {
                let cols = val(*x).cols();
                let mut gi = Vec::with_capacity(rows.len() * cols);
                for &r in rows {
                    gi.extend_from_slice(&g[r * cols..(r + 1) * cols]);
                }
                vec![(*x, gi)]
            }
            Op::RowWeightedSum(mats, w) => {
                let wv = val(*w);
                let m_count = mats.len();
                let (n, cols) = (out.rows(), out.cols());
                let shared = wv.numel() == m_count;
                let mut res = Vec::with_capacity(m_count + 1);
                let mut gw = vec![0.0f64; wv.numel()];
                for (mi, &m) in mats.iter().enumerate() {
                    let mv = val(m).data();
                    let mut gm = vec![0.0f32; n * cols];
                    for e in 0..n {
                        let widx = if shared { mi } else { e * m_count + mi };
                        let we = wv.data()[widx];
                        let ge = &g[e * cols..(e + 1) * cols];
                        let me = &mv[e * cols..(e + 1) * cols];
                        let mut dot = 0.0f64;
                        for c in 0..cols {
                            gm[e * cols + c] = we * ge[c];
                            dot += (ge[c] as f64) * (me[c] as f64);
                        }
                        gw[widx] += dot;
                    }
                    res.push((m, gm));
                }
                res.push((*w, gw.into_iter().map(|v| v as f32).collect()));
                res
            }
            Op::Custom(f, inputs) => {
                let vals: Vec<&Tensor> = inputs.iter().map(|i| val(*i)).collect();
                f.backward(&vals, out, g)
                    .into_iter()
                    .zip(inputs)
                    .filter_map(|(gi, id)| gi.map(|gi| (*id, gi)))
                    .collect()
            }
        }
    }
}

fn reduce_broadcast(g: &[f32], kind: Broadcast, numel: usize) -> Vec<f32> {
    match kind {
        Broadcast::Same => g.to_vec(),
        Broadcast::Scalar => vec![g.iter().map(|&v| v as f64).sum::<f64>() as f32],
        Broadcast::Row => {
            let mut acc = vec![0.0f64; numel];
            for (i, &v) in g.iter().enumerate() {
                acc[i % numel] += v as f64;
            }
            acc.into_iter().map(|v| v as f32).collect()
        }
    }
}

fn matmul_raw(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for p in 0..k {
            let aip = a[i * k + p] as f64;
            if aip == 0.0 {
                continue;
            }
            for (j, bv) in b[p * n..(p + 1) * n].iter().enumerate() {
                acc[j] += aip * (*bv as f64);
            }
        }
        for j in 0..n {
            out[i * n + j] = acc[j] as f32;
        }
    }
    out
}

fn transpose(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut t = vec![0.0f32; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// Max-subtracted softmax of one row, accumulated in f64.
pub fn softmax_row(row: &[f32]) -> Vec<f32> {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| (e / z) as f32).collect()
}
