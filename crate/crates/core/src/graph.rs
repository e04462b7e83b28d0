//! Define-by-run reverse-mode autodiff tape.
//!
//! A `Graph` is an append-only list of nodes; building an op evaluates it
//! immediately, so shape and domain errors surface at the call site rather
//! than inside a later backward pass. Nodes are referenced by `NodeRef`,
//! which carries the owning graph's id so a ref can never be replayed
//! against a different tape.
//!
//! The tape is deterministic by construction: node order is program order,
//! and the backward pass visits nodes in strict reverse order with a fixed
//! accumulation order, so gradients are bit-identical across runs.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::store::{ParamId, ParamStore};
use crate::tensor::{Shape, Tensor};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRef {
    graph: u64,
    index: usize,
}

impl NodeRef {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Parameter { slot: ParamId },
    Add(NodeRef, NodeRef),
    Sub(NodeRef, NodeRef),
    Mul(NodeRef, NodeRef),
    Neg(NodeRef),
    Tanh(NodeRef),
    Sigmoid(NodeRef),
    Exp(NodeRef),
    Log(NodeRef),
    Scale(NodeRef, f64),
    AddConst(NodeRef, f64),
    MatMul(NodeRef, NodeRef),
    Softmax(NodeRef),
    LogSoftmax(NodeRef),
    Concat(NodeRef, NodeRef),
    SelectRow { source: NodeRef, row: usize },
    Pick { source: NodeRef, index: usize },
    Slice { source: NodeRef, start: usize },
    Stack(Vec<NodeRef>),
    StackRows(Vec<NodeRef>),
    Sum(NodeRef),
    Mean(NodeRef),
    Detach(NodeRef),
    StraightThrough { soft: NodeRef, hard: usize },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Debug)]
pub struct Graph {
    id: u64,
    store_id: u64,
    nodes: Vec<Node>,
    bound_params: Vec<(ParamId, NodeRef)>,
    stochastic_count: usize,
}

impl Graph {
    /// A fresh tape bound to `store`. Only parameters from that store may
    /// be introduced, and only that store can receive gradients.
    pub fn new(store: &ParamStore) -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            store_id: store.id(),
            nodes: Vec::new(),
            bound_params: Vec::new(),
            stochastic_count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record that a discrete draw happened while building this graph.
    /// The tape itself stays deterministic; the count is what regime
    /// contracts are checked against.
    pub fn register_stochastic(&mut self) {
        self.stochastic_count += 1;
    }

    pub fn n_stochastic(&self) -> usize {
        self.stochastic_count
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeRef {
        let index = self.nodes.len();
        self.nodes.push(Node { op, value });
        NodeRef {
            graph: self.id,
            index,
        }
    }

    fn check(&self, n: NodeRef) -> Result<()> {
        if n.graph != self.id {
            return Err(Error::ForeignNode);
        }
        debug_assert!(n.index < self.nodes.len());
        Ok(())
    }

    fn val(&self, n: NodeRef) -> &Tensor {
        &self.nodes[n.index].value
    }

    pub fn value(&self, n: NodeRef) -> Result<&Tensor> {
        self.check(n)?;
        Ok(self.val(n))
    }

    /// Scalar node's value.
    pub fn item(&self, n: NodeRef) -> Result<f64> {
        self.value(n)?.item()
    }

    // ---- leaves ----

    pub fn constant(&mut self, t: Tensor) -> Result<NodeRef> {
        if !t.is_finite() {
            return Err(Error::NonFinite {
                op: "constant",
                detail: "constants must be finite".to_string(),
            });
        }
        Ok(self.push(Op::Constant, t))
    }

    pub fn scalar(&mut self, v: f64) -> Result<NodeRef> {
        self.constant(Tensor::scalar(v))
    }

    /// Bind a parameter from the store. Binding the same parameter again
    /// returns the original node, so each parameter appears on the tape at
    /// most once per graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<NodeRef> {
        if store.id() != self.store_id {
            return Err(Error::ForeignStore);
        }
        if let Some((_, n)) = self.bound_params.iter().find(|(p, _)| *p == id) {
            return Ok(*n);
        }
        let value = store.value(id).clone();
        let n = self.push(Op::Parameter { slot: id }, value);
        self.bound_params.push((id, n));
        Ok(n)
    }

    pub fn param_named(&mut self, store: &ParamStore, name: &str) -> Result<NodeRef> {
        let id = store.id_of(name)?;
        self.param(store, id)
    }

    // ---- elementwise binary ----

    fn binary(
        &mut self,
        op_name: &'static str,
        a: NodeRef,
        b: NodeRef,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(NodeRef, NodeRef) -> Op,
    ) -> Result<NodeRef> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.val(a), self.val(b));
        let value = match (av.shape(), bv.shape()) {
            (sa, sb) if sa == sb => av.zip(bv, op_name, &f)?,
            (Shape::Scalar, _) => {
                let s = av.data()[0];
                bv.map(|x| f(s, x))
            }
            (_, Shape::Scalar) => {
                let s = bv.data()[0];
                av.map(|x| f(x, s))
            }
            (sa, sb) => {
                return Err(Error::shape(op_name, format!("{sa} vs {sb}")));
            }
        };
        Ok(self.push(make(a, b), value))
    }

    /// Elementwise sum; either side may be a scalar broadcast over the other.
    pub fn add(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise product; either side may be a scalar broadcast over the other.
    pub fn mul(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    // ---- elementwise unary ----

    pub fn neg(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.check(a)?;
        let value = self.val(a).map(|x| -x);
        Ok(self.push(Op::Neg(a), value))
    }

    pub fn tanh(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.check(a)?;
        let value = self.val(a).map(f64::tanh);
        Ok(self.push(Op::Tanh(a), value))
    }

    pub fn sigmoid(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.check(a)?;
        let value = self.val(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        Ok(self.push(Op::Sigmoid(a), value))
    }

    pub fn exp(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.check(a)?;
        let value = self.val(a).map(f64::exp);
        Ok(self.push(Op::Exp(a), value))
    }

    /// Natural log; every input entry must be strictly positive.
    pub fn log(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.check(a)?;
        if self.val(a).data().iter().any(|x| *x <= 0.0) {
            return Err(Error::domain("log", "input must be strictly positive"));
        }
        let value = self.val(a).map(f64::ln);
        Ok(self.push(Op::Log(a), value))
    }

    pub fn scale(&mut self, a: NodeRef, c: f64) -> Result<NodeRef> {
        self.check(a)?;
        let value = self.val(a).map(|x| c * x);
        Ok(self.push(Op::Scale(a, c), value))
    }

    pub fn add_const(&mut self, a: NodeRef, c: f64) -> Result<NodeRef> {
        self.check(a)?;
        let value = self.val(a).map(|x| x + c);
        Ok(self.push(Op::AddConst(a, c), value))
    }

    /// Add a fixed tensor to a node, wrapping the tensor as a constant.
    pub fn add_tensor(&mut self, a: NodeRef, t: &Tensor) -> Result<NodeRef> {
        let c = self.constant(t.clone())?;
        self.add(a, c)
    }

    // ---- linear algebra ----

    /// Matrix product, dispatched on operand shapes:
    /// (matrix, vector) and (vector, matrix) contract to a vector,
    /// (matrix, matrix) to a matrix, (vector, vector) to a scalar dot.
    pub fn matmul(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.val(a), self.val(b));
        let value = match (av.shape(), bv.shape()) {
            (Shape::Matrix(r, c), Shape::Vector(n)) => {
                if c != n {
                    return Err(Error::shape("matmul", format!("mat[{r}x{c}] @ vec[{n}]")));
                }
                let mut out = vec![0.0; r];
                for (i, o) in out.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for j in 0..c {
                        acc += av.data()[i * c + j] * bv.data()[j];
                    }
                    *o = acc;
                }
                Tensor::vector(out)
            }
            (Shape::Vector(n), Shape::Matrix(r, c)) => {
                if n != r {
                    return Err(Error::shape("matmul", format!("vec[{n}] @ mat[{r}x{c}]")));
                }
                let mut out = vec![0.0; c];
                for i in 0..r {
                    let x = av.data()[i];
                    for (j, o) in out.iter_mut().enumerate() {
                        *o += x * bv.data()[i * c + j];
                    }
                }
                Tensor::vector(out)
            }
            (Shape::Matrix(m, k), Shape::Matrix(k2, n)) => {
                if k != k2 {
                    return Err(Error::shape(
                        "matmul",
                        format!("mat[{m}x{k}] @ mat[{k2}x{n}]"),
                    ));
                }
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for p in 0..k {
                        let x = av.data()[i * k + p];
                        for j in 0..n {
                            out[i * n + j] += x * bv.data()[p * n + j];
                        }
                    }
                }
                Tensor::matrix(m, n, out)?
            }
            (Shape::Vector(n), Shape::Vector(m)) => {
                if n != m {
                    return Err(Error::shape("matmul", format!("vec[{n}] @ vec[{m}]")));
                }
                let dot: f64 = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).sum();
                Tensor::scalar(dot)
            }
            (sa, sb) => {
                return Err(Error::shape("matmul", format!("{sa} @ {sb}")));
            }
        };
        Ok(self.push(Op::MatMul(a, b), value))
    }

    // ---- softmax family ----

    /// Numerically stable softmax over a non-empty vector.
    pub fn softmax(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.check(a)?;
        let value = softmax_value(self.val(a))?;
        Ok(self.push(Op::Softmax(a), value))
    }

    /// log(softmax(x)), computed as x - max - log(sum(exp(x - max))).
    pub fn log_softmax(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.check(a)?;
        let xs = match self.val(a).shape() {
            Shape::Vector(n) if n > 0 => self.val(a).data(),
            s => {
                return Err(Error::shape(
                    "log_softmax",
                    format!("expected non-empty vector, got {s}"),
                ))
            }
        };
        let max = xs.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let lse = max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let value = Tensor::vector(xs.iter().map(|v| v - lse).collect());
        Ok(self.push(Op::LogSoftmax(a), value))
    }

    // ---- structure ----

    /// Concatenate two vectors.
    pub fn concat(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.val(a), self.val(b));
        match (av.shape(), bv.shape()) {
            (Shape::Vector(_), Shape::Vector(_)) => {
                let mut data = av.data().to_vec();
                data.extend_from_slice(bv.data());
                let value = Tensor::vector(data);
                Ok(self.push(Op::Concat(a, b), value))
            }
            (sa, sb) => Err(Error::shape("concat", format!("{sa} ++ {sb}"))),
        }
    }

    /// Row of a matrix as a vector.
    pub fn select_row(&mut self, m: NodeRef, row: usize) -> Result<NodeRef> {
        self.check(m)?;
        let value = self.val(m).row(row)?;
        Ok(self.push(Op::SelectRow { source: m, row }, value))
    }

    /// Embedding row for a token id; gradient scatters only to that row.
    pub fn embedding_lookup(&mut self, table: NodeRef, id: usize) -> Result<NodeRef> {
        self.select_row(table, id)
    }

    /// Single element of a vector as a scalar.
    pub fn pick(&mut self, v: NodeRef, index: usize) -> Result<NodeRef> {
        self.check(v)?;
        let value = match self.val(v).shape() {
            Shape::Vector(n) => {
                if index >= n {
                    return Err(Error::IndexOutOfRange {
                        what: "pick",
                        index,
                        size: n,
                    });
                }
                Tensor::scalar(self.val(v).data()[index])
            }
            s => return Err(Error::shape("pick", format!("expected vector, got {s}"))),
        };
        Ok(self.push(Op::Pick { source: v, index }, value))
    }

    /// Stack scalar nodes into a vector, in argument order.
    pub fn stack(&mut self, parts: &[NodeRef]) -> Result<NodeRef> {
        let mut data = Vec::with_capacity(parts.len());
        for p in parts {
            self.check(*p)?;
            data.push(self.val(*p).item()?);
        }
        let value = Tensor::vector(data);
        Ok(self.push(Op::Stack(parts.to_vec()), value))
    }

    /// Stack equal-length vector nodes into a matrix, one node per row.
    pub fn stack_rows(&mut self, rows: &[NodeRef]) -> Result<NodeRef> {
        if rows.is_empty() {
            return Err(Error::invalid("stack_rows", "need at least one row"));
        }
        let mut width = None;
        let mut data = Vec::new();
        for r in rows {
            self.check(*r)?;
            let v = self.val(*r);
            let n = match v.shape() {
                Shape::Vector(n) if n > 0 => n,
                s => {
                    return Err(Error::shape(
                        "stack_rows",
                        format!("rows must be non-empty vectors, got {s}"),
                    ))
                }
            };
            match width {
                None => width = Some(n),
                Some(w) if w != n => {
                    return Err(Error::shape(
                        "stack_rows",
                        format!("row widths differ: {w} vs {n}"),
                    ))
                }
                _ => {}
            }
            data.extend_from_slice(v.data());
        }
        let value = Tensor::matrix(rows.len(), width.unwrap(), data)?;
        Ok(self.push(Op::StackRows(rows.to_vec()), value))
    }

    /// Sum of all entries; the empty vector sums to 0.
    pub fn sum(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.check(a)?;
        let value = Tensor::scalar(self.val(a).sum());
        Ok(self.push(Op::Sum(a), value))
    }

    /// Arithmetic mean of all entries; empty input is an error.
    pub fn mean(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.check(a)?;
        let n = self.val(a).shape().len();
        if n == 0 {
            return Err(Error::invalid("mean", "empty input"));
        }
        let value = Tensor::scalar(self.val(a).sum() / n as f64);
        Ok(self.push(Op::Mean(a), value))
    }

    /// Identity forward, zero gradient backward.
    pub fn detach(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.check(a)?;
        let value = self.val(a).clone();
        Ok(self.push(Op::Detach(a), value))
    }

    /// Forward: one-hot at `hard`. Backward: gradient flows to `soft`
    /// unchanged, as if the op were the identity on `soft`.
    pub fn straight_through(&mut self, soft: NodeRef, hard: usize) -> Result<NodeRef> {
        self.check(soft)?;
        let n = match self.val(soft).shape() {
            Shape::Vector(n) => n,
            s => {
                return Err(Error::shape(
                    "straight_through",
                    format!("expected vector, got {s}"),
                ))
            }
        };
        let value = Tensor::one_hot(n, hard)?;
        Ok(self.push(Op::StraightThrough { soft, hard }, value))
    }

    // ---- backward ----

    /// Adjoints of every node with respect to a scalar root.
    fn adjoints(&self, root: NodeRef) -> Result<Vec<Option<Tensor>>> {
        self.check(root)?;
        if self.val(root).shape() != Shape::Scalar {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got {}", self.val(root).shape()),
            ));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[root.index] = Some(Tensor::scalar(1.0));

        for i in (0..=root.index).rev() {
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            adj[i] = Some(g.clone());
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant | Op::Parameter { .. } => {}
                Op::Add(a, b) => {
                    self.accumulate_broadcast(&mut adj, *a, &g, 1.0)?;
                    self.accumulate_broadcast(&mut adj, *b, &g, 1.0)?;
                }
                Op::Sub(a, b) => {
                    self.accumulate_broadcast(&mut adj, *a, &g, 1.0)?;
                    self.accumulate_broadcast(&mut adj, *b, &g, -1.0)?;
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.val(*a).clone(), self.val(*b).clone());
                    self.accumulate_product(&mut adj, *a, &g, &bv)?;
                    self.accumulate_product(&mut adj, *b, &g, &av)?;
                }
                Op::Neg(a) => {
                    accumulate(&mut adj, a.index, &g.map(|x| -x))?;
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let d = g.zip(y, "tanh_backward", |gi, yi| gi * (1.0 - yi * yi))?;
                    accumulate(&mut adj, a.index, &d)?;
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let d = g.zip(y, "sigmoid_backward", |gi, yi| gi * yi * (1.0 - yi))?;
                    accumulate(&mut adj, a.index, &d)?;
                }
                Op::Exp(a) => {
                    let d = g.zip(&node.value, "exp_backward", |gi, yi| gi * yi)?;
                    accumulate(&mut adj, a.index, &d)?;
                }
                Op::Log(a) => {
                    let d = g.zip(self.val(*a), "log_backward", |gi, xi| gi / xi)?;
                    accumulate(&mut adj, a.index, &d)?;
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut adj, a.index, &g.map(|x| c * x))?;
                }
                Op::AddConst(a, _) => {
                    accumulate(&mut adj, a.index, &g)?;
                }
                Op::MatMul(a, b) => {
                    let (da, db) = matmul_backward(self.val(*a), self.val(*b), &g)?;
                    accumulate(&mut adj, a.index, &da)?;
                    accumulate(&mut adj, b.index, &db)?;
                }
                Op::Softmax(a) => {
                    // dx_i = y_i * (g_i - sum_j g_j y_j)
                    let y = node.value.data();
                    let inner: f64 = g.data().iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                    let d = Tensor::vector(
                        g.data()
                            .iter()
                            .zip(y)
                            .map(|(gi, yi)| yi * (gi - inner))
                            .collect(),
                    );
                    accumulate(&mut adj, a.index, &d)?;
                }
                Op::LogSoftmax(a) => {
                    // dx_i = g_i - softmax(x)_i * sum_j g_j
                    let gsum: f64 = g.data().iter().sum();
                    let d = Tensor::vector(
                        g.data()
                            .iter()
                            .zip(node.value.data())
                            .map(|(gi, yi)| gi - yi.exp() * gsum)
                            .collect(),
                    );
                    accumulate(&mut adj, a.index, &d)?;
                }
                Op::Concat(a, b) => {
                    let na = self.val(*a).shape().len();
                    let da = Tensor::vector(g.data()[..na].to_vec());
                    let db = Tensor::vector(g.data()[na..].to_vec());
                    accumulate(&mut adj, a.index, &da)?;
                    accumulate(&mut adj, b.index, &db)?;
                }
                Op::SelectRow { source, row } => {
                    let shape = self.val(*source).shape();
                    let (r, c) = match shape {
                        Shape::Matrix(r, c) => (r, c),
                        _ => unreachable!("select_row source is always a matrix"),
                    };
                    let mut d = Tensor::zeros(Shape::Matrix(r, c));
                    d.data_mut()[row * c..(row + 1) * c].copy_from_slice(g.data());
                    accumulate(&mut adj, source.index, &d)?;
                }
                Op::Pick { source, index } => {
                    let n = self.val(*source).shape().len();
                    let mut d = Tensor::zeros(Shape::Vector(n));
                    d.data_mut()[*index] = g.item()?;
                    accumulate(&mut adj, source.index, &d)?;
                }
                Op::Stack(parts) => {
                    for (k, p) in parts.iter().enumerate() {
                        accumulate(&mut adj, p.index, &Tensor::scalar(g.data()[k]))?;
                    }
                }
                Op::StackRows(rows) => {
                    let width = g.shape().len() / rows.len();
                    for (k, r) in rows.iter().enumerate() {
                        let d = Tensor::vector(g.data()[k * width..(k + 1) * width].to_vec());
                        accumulate(&mut adj, r.index, &d)?;
                    }
                }
                Op::Sum(a) => {
                    let gs = g.item()?;
                    let d = Tensor::full(self.val(*a).shape(), gs);
                    accumulate(&mut adj, a.index, &d)?;
                }
                Op::Mean(a) => {
                    let n = self.val(*a).shape().len() as f64;
                    let d = Tensor::full(self.val(*a).shape(), g.item()? / n);
                    accumulate(&mut adj, a.index, &d)?;
                }
                Op::Detach(_) => {}
                Op::StraightThrough { soft, .. } => {
                    accumulate(&mut adj, soft.index, &g)?;
                }
            }
        }
        Ok(adj)
    }

    fn accumulate_broadcast(
        &self,
        adj: &mut [Option<Tensor>],
        target: NodeRef,
        g: &Tensor,
        sign: f64,
    ) -> Result<()> {
        let tshape = self.val(target).shape();
        let d = if tshape == g.shape() {
            g.map(|x| sign * x)
        } else if tshape == Shape::Scalar {
            Tensor::scalar(sign * g.sum())
        } else {
            return Err(Error::shape(
                "broadcast_backward",
                format!("{} vs {}", tshape, g.shape()),
            ));
        };
        accumulate(adj, target.index, &d)
    }

    fn accumulate_product(
        &self,
        adj: &mut [Option<Tensor>],
        target: NodeRef,
        g: &Tensor,
        other: &Tensor,
    ) -> Result<()> {
        let tshape = self.val(target).shape();
        let d = if tshape == g.shape() {
            if other.shape() == Shape::Scalar {
                let s = other.data()[0];
                g.map(|x| x * s)
            } else {
                g.zip(other, "mul_backward", |gi, oi| gi * oi)?
            }
        } else if tshape == Shape::Scalar {
            let dot: f64 = g.data().iter().zip(other.data()).map(|(x, y)| x * y).sum();
            Tensor::scalar(dot)
        } else {
            return Err(Error::shape(
                "mul_backward",
                format!("{} vs {}", tshape, g.shape()),
            ));
        };
        accumulate(adj, target.index, &d)
    }

    /// Reverse pass from a scalar root, accumulating parameter gradients
    /// into the store the graph was built against. Gradients add onto
    /// whatever the store already holds, so per-example losses can share
    /// one store across graphs before an optimizer step.
    pub fn backward(&self, root: NodeRef, store: &mut ParamStore) -> Result<()> {
        if store.id() != self.store_id {
            return Err(Error::ForeignStore);
        }
        let adj = self.adjoints(root)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Parameter { slot } = node.op {
                if let Some(g) = &adj[i] {
                    store.accumulate_grad(slot, g)?;
                }
            }
        }
        Ok(())
    }

    /// Tape self-check: parents strictly precede children (DAG by
    /// construction) and cached op metadata agrees with stored values.
    pub fn validate(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            for p in op_parents(&node.op) {
                if p.graph != self.id {
                    return Err(Error::ForeignNode);
                }
                if p.index >= i {
                    return Err(Error::invalid(
                        "validate",
                        format!("node {i} has parent at index {}", p.index),
                    ));
                }
            }
            match &node.op {
                Op::AddConst(a, c) => {
                    let expect = self.val(*a).map(|x| x + c);
                    if expect != node.value {
                        return Err(Error::invalid("validate", format!("add_const node {i}")));
                    }
                }
                Op::StraightThrough { soft, hard } => {
                    let n = self.val(*soft).shape().len();
                    if node.value != Tensor::one_hot(n, *hard)? {
                        return Err(Error::invalid(
                            "validate",
                            format!("straight_through node {i}"),
                        ));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Gradients of a scalar root with respect to arbitrary nodes.
    /// A node the root does not depend on gets a zero tensor.
    pub fn grad_wrt(&self, root: NodeRef, nodes: &[NodeRef]) -> Result<Vec<Tensor>> {
        for n in nodes {
            self.check(*n)?;
        }
        let adj = self.adjoints(root)?;
        Ok(nodes
            .iter()
            .map(|n| {
                adj[n.index]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.val(*n).shape()))
            })
            .collect())
    }
}

fn op_parents(op: &Op) -> Vec<NodeRef> {
    match op {
        Op::Constant | Op::Parameter { .. } => vec![],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::MatMul(a, b)
        | Op::Concat(a, b) => vec![*a, *b],
        Op::Neg(a)
        | Op::Tanh(a)
        | Op::Sigmoid(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Scale(a, _)
        | Op::AddConst(a, _)
        | Op::Softmax(a)
        | Op::LogSoftmax(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::Detach(a) => vec![*a],
        Op::SelectRow { source, .. } | Op::Pick { source, .. } => vec![*source],
        Op::Stack(parts) | Op::StackRows(parts) => parts.clone(),
        Op::StraightThrough { soft, .. } => vec![*soft],
    }
}

fn accumulate(adj: &mut [Option<Tensor>], index: usize, d: &Tensor) -> Result<()> {
    match &mut adj[index] {
        Some(existing) => {
            if existing.shape() != d.shape() {
                return Err(Error::shape(
                    "adjoint_accumulate",
                    format!("{} vs {}", existing.shape(), d.shape()),
                ));
            }
            for (e, x) in existing.data_mut().iter_mut().zip(d.data()) {
                *e += x;
            }
        }
        slot => *slot = Some(d.clone()),
    }
    Ok(())
}

fn softmax_value(x: &Tensor) -> Result<Tensor> {
    let xs = match x.shape() {
        Shape::Vector(n) if n > 0 => x.data(),
        s => {
            return Err(Error::shape(
                "softmax",
                format!("expected non-empty vector, got {s}"),
            ))
        }
    };
    let max = xs.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let exps: Vec<f64> = xs.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(Tensor::vector(exps.iter().map(|e| e / z).collect()))
}

/// Stable softmax of a raw logit slice, outside any graph.
pub fn softmax_slice(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let exps: Vec<f64> = xs.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    match (a.shape(), b.shape()) {
        (Shape::Matrix(r, c), Shape::Vector(_)) => {
            // y = M v: dM = g v^T, dv = M^T g
            let mut dm = Tensor::zeros(Shape::Matrix(r, c));
            let mut dv = Tensor::zeros(Shape::Vector(c));
            for i in 0..r {
                let gi = g.data()[i];
                for j in 0..c {
                    dm.data_mut()[i * c + j] += gi * b.data()[j];
                    dv.data_mut()[j] += a.data()[i * c + j] * gi;
                }
            }
            Ok((dm, dv))
        }
        (Shape::Vector(n), Shape::Matrix(r, c)) => {
            // y = v^T M: dv = M g, dM = v g^T
            let mut dv = Tensor::zeros(Shape::Vector(n));
            let mut dm = Tensor::zeros(Shape::Matrix(r, c));
            for i in 0..r {
                let vi = a.data()[i];
                let mut acc = 0.0;
                for j in 0..c {
                    let gj = g.data()[j];
                    acc += b.data()[i * c + j] * gj;
                    dm.data_mut()[i * c + j] += vi * gj;
                }
                dv.data_mut()[i] = acc;
            }
            Ok((dv, dm))
        }
        (Shape::Matrix(m, k), Shape::Matrix(_, n)) => {
            // C = A B: dA = G B^T, dB = A^T G
            let mut da = Tensor::zeros(Shape::Matrix(m, k));
            let mut db = Tensor::zeros(Shape::Matrix(k, n));
            for i in 0..m {
                for p in 0..k {
                    let mut acc = 0.0;
                    for j in 0..n {
                        let gij = g.data()[i * n + j];
                        acc += gij * b.data()[p * n + j];
                        db.data_mut()[p * n + j] += a.data()[i * k + p] * gij;
                    }
                    da.data_mut()[i * k + p] = acc;
                }
            }
            Ok((da, db))
        }
        (Shape::Vector(_), Shape::Vector(_)) => {
            let gs = g.item()?;
            Ok((b.map(|x| gs * x), a.map(|x| gs * x)))
        }
        _ => unreachable!("matmul forward rejects other shape pairs"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, t: Tensor) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.register(name, t).unwrap();
        (s, id)
    }

    #[test]
    fn forward_values_are_eager() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let a = g.constant(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let b = g.constant(Tensor::vector(vec![3.0, 4.0])).unwrap();
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn constants_must_be_finite() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        assert!(g.constant(Tensor::vector(vec![1.0, f64::NAN])).is_err());
        assert!(g.scalar(f64::INFINITY).is_err());
    }

    #[test]
    fn scalar_broadcast_add_and_mul() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let v = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let c = g.scalar(10.0).unwrap();
        let sum = g.add(v, c).unwrap();
        assert_eq!(g.value(sum).unwrap().data(), &[11.0, 12.0, 13.0]);
        let prod = g.mul(c, v).unwrap();
        assert_eq!(g.value(prod).unwrap().data(), &[10.0, 20.0, 30.0]);
    }

    #[test]
    fn backward_through_simple_chain() {
        // loss = sum((w * x)^2-ish): use loss = sum(mul(w, w)) so d/dw = 2w.
        let (mut s, w) = store_with("w", Tensor::vector(vec![1.0, -2.0, 3.0]));
        let mut g = Graph::new(&s);
        let wn = g.param(&s, w).unwrap();
        let sq = g.mul(wn, wn).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss, &mut s).unwrap();
        assert_eq!(s.grad(w).data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn rebinding_a_parameter_reuses_the_node() {
        let (mut s, w) = store_with("w", Tensor::scalar(2.0));
        let mut g = Graph::new(&s);
        let a = g.param(&s, w).unwrap();
        let b = g.param(&s, w).unwrap();
        assert_eq!(a, b);
        // loss = w * w; gradient must be 2w = 4, not double-counted.
        let prod = g.mul(a, b).unwrap();
        g.backward(prod, &mut s).unwrap();
        assert_eq!(s.grad(w).data(), &[4.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let (mut s, w) = store_with("w", Tensor::scalar(3.0));
        let mut g = Graph::new(&s);
        let wn = g.param(&s, w).unwrap();
        let d = g.detach(wn).unwrap();
        let loss = g.mul(wn, d).unwrap();
        g.backward(loss, &mut s).unwrap();
        // d(w * stop(w))/dw = stop(w) = 3, not 2w.
        assert_eq!(s.grad(w).data(), &[3.0]);
    }

    #[test]
    fn straight_through_forwards_one_hot_and_passes_gradient() {
        let (mut s, w) = store_with("w", Tensor::vector(vec![0.1, 0.7, 0.2]));
        let mut g = Graph::new(&s);
        let wn = g.param(&s, w).unwrap();
        let soft = g.softmax(wn).unwrap();
        let st = g.straight_through(soft, 1).unwrap();
        assert_eq!(g.value(st).unwrap().data(), &[0.0, 1.0, 0.0]);
        let probe = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let weighted = g.mul(st, probe).unwrap();
        let loss = g.sum(weighted).unwrap();
        g.backward(loss, &mut s).unwrap();
        // Gradient reaching `soft` is the probe vector itself; the softmax
        // jacobian then maps it onto w, so it must be nonzero.
        assert!(s.grad(w).max_abs() > 0.0);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_backward_matches_identity() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let y = g.softmax(x).unwrap();
        let total: f64 = g.value(y).unwrap().sum();
        assert!((total - 1.0).abs() < 1e-12);
        // Softmax backward annihilates constant gradients: J^T 1 = 0.
        let loss = g.sum(y).unwrap();
        let grads = g.grad_wrt(loss, &[x]).unwrap();
        assert!(grads[0].max_abs() < 1e-12);
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::vector(vec![1000.0, 1001.0, 999.0])).unwrap();
        let ls = g.log_softmax(x).unwrap();
        let probs: f64 = g.value(ls).unwrap().data().iter().map(|v| v.exp()).sum();
        assert!((probs - 1.0).abs() < 1e-12, "large logits must not overflow");
    }

    #[test]
    fn matmul_all_shape_cases() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let m = g
            .constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap())
            .unwrap();
        let v = g.constant(Tensor::vector(vec![1.0, 0.0, -1.0])).unwrap();
        let mv = g.matmul(m, v).unwrap();
        assert_eq!(g.value(mv).unwrap().data(), &[-2.0, -2.0]);

        let u = g.constant(Tensor::vector(vec![1.0, -1.0])).unwrap();
        let um = g.matmul(u, m).unwrap();
        assert_eq!(g.value(um).unwrap().data(), &[-3.0, -3.0, -3.0]);

        let dot = g.matmul(v, v).unwrap();
        assert_eq!(g.item(dot).unwrap(), 2.0);

        let a = g
            .constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let b = g
            .constant(Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap())
            .unwrap();
        let ab = g.matmul(a, b).unwrap();
        assert_eq!(g.value(ab).unwrap().data(), &[2.0, 1.0, 4.0, 3.0]);

        // Inner-dimension mismatch between two same-shaped non-square mats.
        let c = g
            .constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap())
            .unwrap();
        assert!(g.matmul(c, c).is_err());
    }

    #[test]
    fn stack_rows_builds_matrix_and_splits_gradient() {
        let mut s = ParamStore::new();
        let a_id = s.register("a", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let b_id = s.register("b", Tensor::vector(vec![3.0, 4.0])).unwrap();
        let mut g = Graph::new(&s);
        let a = g.param(&s, a_id).unwrap();
        let b = g.param(&s, b_id).unwrap();
        let m = g.stack_rows(&[a, b]).unwrap();
        assert_eq!(g.value(m).unwrap().shape(), Shape::Matrix(2, 2));
        // loss = weighted sum picking out row structure.
        let w = g
            .constant(Tensor::matrix(2, 2, vec![1.0, 10.0, 100.0, 1000.0]).unwrap())
            .unwrap();
        let prod = g.mul(m, w).unwrap();
        let flat_a = g.select_row(prod, 0).unwrap();
        let flat_b = g.select_row(prod, 1).unwrap();
        let sa = g.sum(flat_a).unwrap();
        let sb = g.sum(flat_b).unwrap();
        let loss = g.add(sa, sb).unwrap();
        g.backward(loss, &mut s).unwrap();
        assert_eq!(s.grad(a_id).data(), &[1.0, 10.0]);
        assert_eq!(s.grad(b_id).data(), &[100.0, 1000.0]);
    }

    #[test]
    fn matvec_backward_hand_checked() {
        // y = M v, loss = sum(y). dM = 1 v^T, dv = M^T 1 (column sums).
        let mut s = ParamStore::new();
        let m_id = s
            .register("m", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let v_id = s.register("v", Tensor::vector(vec![5.0, 6.0])).unwrap();
        let mut g = Graph::new(&s);
        let m = g.param(&s, m_id).unwrap();
        let v = g.param(&s, v_id).unwrap();
        let y = g.matmul(m, v).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss, &mut s).unwrap();
        assert_eq!(s.grad(m_id).data(), &[5.0, 6.0, 5.0, 6.0]);
        assert_eq!(s.grad(v_id).data(), &[4.0, 6.0]);
    }

    #[test]
    fn pick_and_select_route_gradient_to_one_slot() {
        let mut s = ParamStore::new();
        let e_id = s
            .register("emb", Tensor::matrix(3, 2, vec![0.0; 6]).unwrap())
            .unwrap();
        let mut g = Graph::new(&s);
        let e = g.param(&s, e_id).unwrap();
        let row = g.select_row(e, 1).unwrap();
        let el = g.pick(row, 0).unwrap();
        g.backward(el, &mut s).unwrap();
        assert_eq!(s.grad(e_id).data(), &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn stack_splits_gradient_per_part() {
        let (mut s, w) = store_with("w", Tensor::scalar(2.0));
        let mut g = Graph::new(&s);
        let wn = g.param(&s, w).unwrap();
        let double = g.scale(wn, 2.0).unwrap();
        let stacked = g.stack(&[wn, double]).unwrap();
        let weights = g.constant(Tensor::vector(vec![10.0, 1.0])).unwrap();
        let weighted = g.mul(stacked, weights).unwrap();
        let loss = g.sum(weighted).unwrap();
        g.backward(loss, &mut s).unwrap();
        // d/dw (10w + 1*2w) = 12.
        assert_eq!(s.grad(w).data(), &[12.0]);
    }

    #[test]
    fn sum_of_empty_vector_is_zero() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let empty = g.constant(Tensor::vector(vec![])).unwrap();
        let total = g.sum(empty).unwrap();
        assert_eq!(g.item(total).unwrap(), 0.0);
        assert!(g.mean(empty).is_err());
    }

    #[test]
    fn log_rejects_non_positive_input() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::vector(vec![1.0, 0.0])).unwrap();
        assert!(g.log(x).is_err());
    }

    #[test]
    fn detach_is_idempotent() {
        let (mut s, w) = store_with("w", Tensor::scalar(3.0));
        let mut g = Graph::new(&s);
        let wn = g.param(&s, w).unwrap();
        let d1 = g.detach(wn).unwrap();
        let d2 = g.detach(d1).unwrap();
        assert_eq!(g.item(d2).unwrap(), 3.0);
        g.backward(d2, &mut s).unwrap();
        assert_eq!(s.grad(w).data(), &[0.0]);
    }

    #[test]
    fn repeated_backward_is_bit_identical() {
        let (store, wid) = store_with("w", Tensor::scalar(0.3));
        let mut g = Graph::new(&store);
        let wn = g.param(&store, wid).unwrap();
        let t = g.tanh(wn).unwrap();
        let loss = g.mul(t, t).unwrap();
        let g1 = g.grad_wrt(loss, &[wn]).unwrap();
        let g2 = g.grad_wrt(loss, &[wn]).unwrap();
        assert_eq!(g1[0].data(), g2[0].data());
    }

    #[test]
    fn foreign_node_and_store_are_rejected() {
        let s1 = ParamStore::new();
        let s2 = ParamStore::new();
        let mut g1 = Graph::new(&s1);
        let mut g2 = Graph::new(&s2);
        let a = g1.scalar(1.0).unwrap();
        let b = g2.scalar(2.0).unwrap();
        assert!(matches!(g1.add(a, b), Err(Error::ForeignNode)));

        let mut s2m = s2;
        let loss = g1.scalar(0.0).unwrap();
        assert!(matches!(g1.backward(loss, &mut s2m), Err(Error::ForeignStore)));
    }

    #[test]
    fn grad_wrt_unreachable_node_is_zero() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let a = g.scalar(1.0).unwrap();
        let b = g.constant(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let loss = g.mul(a, a).unwrap();
        let grads = g.grad_wrt(loss, &[b]).unwrap();
        assert_eq!(grads[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn validate_accepts_a_busy_tape() {
        let (s, w) = store_with("w", Tensor::vector(vec![0.2, -0.4, 0.6]));
        let mut g = Graph::new(&s);
        let wn = g.param(&s, w).unwrap();
        let sm = g.softmax(wn).unwrap();
        let st = g.straight_through(sm, 0).unwrap();
        let shifted = g.add_const(st, 2.5).unwrap();
        let _ = g.sum(shifted).unwrap();
        g.validate().unwrap();
    }

    #[test]
    fn stochastic_counter_tracks_registrations() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        assert_eq!(g.n_stochastic(), 0);
        g.register_stochastic();
        g.register_stochastic();
        assert_eq!(g.n_stochastic(), 2);
    }
}
