//! Define-then-run computation graph with reverse-mode autodiff.
//!
//! A [`Graph`] is built once (shapes are inferred and checked at build time;
//! builder methods panic on misuse since graph structure is static code), then
//! evaluated many times through an [`Evaluator`], which preallocates every
//! node buffer so the steady-state train loop does no allocation. Leaves are
//! named `Input`s (rebound per example) and named `Param`s (rebound per
//! optimizer step). Backward accumulates adjoints in reverse topological
//! order; a [`BackwardPlan`] restricts the sweep to nodes that can influence
//! the tracked parameters, which makes frozen-subnetwork training cheap.

use std::collections::BTreeMap;

use super::{Array, NumericsError, Scalar};

pub type NodeId = usize;

/// Named leaf values for one evaluation.
pub type Bindings<T> = BTreeMap<String, Array<T>>;

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Exp(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Sqrt(NodeId),
    RowSoftmax(NodeId),
    RowLogSoftmax(NodeId),
    MeanRows(NodeId),
    VarRows(NodeId),
    MeanCols(NodeId),
    VarCols(NodeId),
    SumAll(NodeId),
    BroadcastRows(NodeId),
    BroadcastCols(NodeId),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    Transpose(NodeId),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input => "Input",
            Op::Param => "Param",
            Op::MatMul(..) => "MatMul",
            Op::Add(..) => "Add",
            Op::Sub(..) => "Sub",
            Op::Mul(..) => "Mul",
            Op::Div(..) => "Div",
            Op::Scale(..) => "Scale",
            Op::AddScalar(..) => "AddScalar",
            Op::Exp(..) => "Exp",
            Op::Tanh(..) => "Tanh",
            Op::Sigmoid(..) => "Sigmoid",
            Op::Sqrt(..) => "Sqrt",
            Op::RowSoftmax(..) => "RowSoftmax",
            Op::RowLogSoftmax(..) => "RowLogSoftmax",
            Op::MeanRows(..) => "MeanRows",
            Op::VarRows(..) => "VarRows",
            Op::MeanCols(..) => "MeanCols",
            Op::VarCols(..) => "VarCols",
            Op::SumAll(..) => "SumAll",
            Op::BroadcastRows(..) => "BroadcastRows",
            Op::BroadcastCols(..) => "BroadcastCols",
            Op::SliceRows(..) => "SliceRows",
            Op::SliceCols(..) => "SliceCols",
            Op::ConcatRows(..) => "ConcatRows",
            Op::ConcatCols(..) => "ConcatCols",
            Op::Transpose(..) => "Transpose",
        }
    }

    /// Direct dependencies of this op.
    fn inputs(&self, buf: &mut Vec<NodeId>) {
        buf.clear();
        match self {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                buf.push(*a);
                buf.push(*b);
            }
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Exp(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Sqrt(a)
            | Op::RowSoftmax(a)
            | Op::RowLogSoftmax(a)
            | Op::MeanRows(a)
            | Op::VarRows(a)
            | Op::MeanCols(a)
            | Op::VarCols(a)
            | Op::SumAll(a)
            | Op::BroadcastRows(a)
            | Op::BroadcastCols(a)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::Transpose(a) => buf.push(*a),
            Op::ConcatRows(v) | Op::ConcatCols(v) => buf.extend_from_slice(v),
        }
    }
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    name: Option<String>,
}

/// Static computation graph: named leaves, shape-checked ops, named outputs.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: BTreeMap<String, NodeId>,
    params: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        (self.nodes[id].rows, self.nodes[id].cols)
    }

    /// Human-readable node label for diagnostics.
    pub fn label(&self, id: NodeId) -> String {
        match &self.nodes[id].name {
            Some(n) => n.clone(),
            None => format!("node{}({})", id, self.nodes[id].op.kind()),
        }
    }

    /// Attach a diagnostic name to any node.
    pub fn name_node(&mut self, id: NodeId, name: &str) {
        self.nodes[id].name = Some(name.to_string());
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.inputs.keys().map(|s| s.as_str())
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn param_node(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    pub fn input_node(&self, name: &str) -> Option<NodeId> {
        self.inputs.get(name).copied()
    }

    /// First node carrying a given diagnostic name.
    pub fn node_named(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name.as_deref() == Some(name))
    }

    pub fn output_node(&self, name: &str) -> Option<NodeId> {
        self.outputs.get(name).copied()
    }

    pub fn has_input(&self, name: &str) -> bool {
        self.inputs.contains_key(name)
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, name: Option<String>) -> NodeId {
        assert!(rows > 0 && cols > 0, "{}: zero-sized shape {rows}x{cols}", op.kind());
        let mut deps = Vec::new();
        op.inputs(&mut deps);
        for d in deps {
            assert!(d < self.nodes.len(), "{}: dangling input node {d}", op.kind());
        }
        self.nodes.push(Node { op, rows, cols, name });
        self.nodes.len() - 1
    }

    // ── leaves ──────────────────────────────────────────────────────────

    pub fn input(&mut self, name: &str, rows: usize, cols: usize) -> NodeId {
        assert!(
            !self.inputs.contains_key(name) && !self.params.contains_key(name),
            "duplicate leaf name '{name}'"
        );
        let id = self.push(Op::Input, rows, cols, Some(name.to_string()));
        self.inputs.insert(name.to_string(), id);
        id
    }

    pub fn param(&mut self, name: &str, rows: usize, cols: usize) -> NodeId {
        assert!(
            !self.inputs.contains_key(name) && !self.params.contains_key(name),
            "duplicate leaf name '{name}'"
        );
        let id = self.push(Op::Param, rows, cols, Some(name.to_string()));
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        assert!(id < self.nodes.len(), "output '{name}': dangling node {id}");
        self.outputs.insert(name.to_string(), id);
    }

    // ── ops ─────────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        assert_eq!(
            ka,
            kb,
            "matmul: inner dims differ ({} is {m}x{ka}, {} is {kb}x{n})",
            self.label(a),
            self.label(b)
        );
        self.push(Op::MatMul(a, b), m, n, None)
    }

    fn binary(&mut self, op: fn(NodeId, NodeId) -> Op, kind: &str, a: NodeId, b: NodeId) -> NodeId {
        let sa = self.shape(a);
        let sb = self.shape(b);
        assert_eq!(
            sa,
            sb,
            "{kind}: shape mismatch ({} is {:?}, {} is {:?})",
            self.label(a),
            sa,
            self.label(b),
            sb
        );
        self.push(op(a, b), sa.0, sa.1, None)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Mul, "mul", a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Div, "div", a, b)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::Scale(a, k), r, c, None)
    }

    pub fn add_scalar(&mut self, a: NodeId, k: f64) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::AddScalar(a, k), r, c, None)
    }

    fn unary(&mut self, op: fn(NodeId) -> Op, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(op(a), r, c, None)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Exp, a)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sigmoid, a)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sqrt, a)
    }

    /// Row-wise softmax (max-subtracted for stability).
    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::RowSoftmax, a)
    }

    /// Row-wise log-softmax (stable form for cross-entropy losses).
    pub fn row_log_softmax(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::RowLogSoftmax, a)
    }

    /// Column means over the row axis: RxC -> 1xC.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let (_, c) = self.shape(a);
        self.push(Op::MeanRows(a), 1, c, None)
    }

    /// Column population variances over the row axis: RxC -> 1xC.
    pub fn var_rows(&mut self, a: NodeId) -> NodeId {
        let (_, c) = self.shape(a);
        self.push(Op::VarRows(a), 1, c, None)
    }

    /// Row means over the column axis: RxC -> Rx1.
    pub fn mean_cols(&mut self, a: NodeId) -> NodeId {
        let (r, _) = self.shape(a);
        self.push(Op::MeanCols(a), r, 1, None)
    }

    /// Row population variances over the column axis: RxC -> Rx1.
    pub fn var_cols(&mut self, a: NodeId) -> NodeId {
        let (r, _) = self.shape(a);
        self.push(Op::VarCols(a), r, 1, None)
    }

    /// Sum of all elements: RxC -> 1x1.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumAll(a), 1, 1, None)
    }

    /// Repeat a 1xC row vector down to rows x C.
    pub fn broadcast_rows(&mut self, a: NodeId, rows: usize) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!(r, 1, "broadcast_rows: {} is {r}x{c}, want 1xC", self.label(a));
        self.push(Op::BroadcastRows(a), rows, c, None)
    }

    /// Repeat an Rx1 column vector out to R x cols.
    pub fn broadcast_cols(&mut self, a: NodeId, cols: usize) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!(c, 1, "broadcast_cols: {} is {r}x{c}, want Rx1", self.label(a));
        self.push(Op::BroadcastCols(a), r, cols, None)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (r, c) = self.shape(a);
        assert!(len > 0 && start + len <= r, "slice_rows: [{start},{start}+{len}) out of {r} rows");
        self.push(Op::SliceRows(a, start), len, c, None)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (r, c) = self.shape(a);
        assert!(len > 0 && start + len <= c, "slice_cols: [{start},{start}+{len}) out of {c} cols");
        self.push(Op::SliceCols(a, start), r, len, None)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows: empty");
        let cols = self.shape(parts[0]).1;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            assert_eq!(c, cols, "concat_rows: {} has {c} cols, want {cols}", self.label(p));
            rows += r;
        }
        self.push(Op::ConcatRows(parts.to_vec()), rows, cols, None)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols: empty");
        let rows = self.shape(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            assert_eq!(r, rows, "concat_cols: {} has {r} rows, want {rows}", self.label(p));
            cols += c;
        }
        self.push(Op::ConcatCols(parts.to_vec()), rows, cols, None)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::Transpose(a), c, r, None)
    }

    // ── backward planning ───────────────────────────────────────────────

    /// Plan a backward sweep from `output` restricted to nodes that both
    /// depend on one of `tracked` (parameter names; `None` = all parameters)
    /// and can influence the output. Errors if the output is unknown or not
    /// a 1x1 scalar.
    pub fn plan(&self, output: &str, tracked: Option<&[String]>) -> Result<BackwardPlan, NumericsError> {
        let &out = self
            .outputs
            .get(output)
            .ok_or_else(|| NumericsError::UnknownOutput(output.to_string()))?;
        if (self.nodes[out].rows, self.nodes[out].cols) != (1, 1) {
            return Err(NumericsError::NotScalar(output.to_string()));
        }
        // Nodes the output depends on (reverse reachability).
        let mut reaches_out = vec![false; self.nodes.len()];
        reaches_out[out] = true;
        let mut deps = Vec::new();
        for id in (0..=out).rev() {
            if !reaches_out[id] {
                continue;
            }
            self.nodes[id].op.inputs(&mut deps);
            for &d in &deps {
                reaches_out[d] = true;
            }
        }
        // Nodes fed (transitively) by a tracked parameter.
        let mut from_tracked = vec![false; self.nodes.len()];
        match tracked {
            None => {
                for &id in self.params.values() {
                    from_tracked[id] = true;
                }
            }
            Some(names) => {
                for name in names {
                    let &id = self
                        .params
                        .get(name)
                        .ok_or_else(|| NumericsError::UnknownParam(name.clone()))?;
                    from_tracked[id] = true;
                }
            }
        }
        for id in 0..self.nodes.len() {
            if from_tracked[id] {
                continue;
            }
            self.nodes[id].op.inputs(&mut deps);
            if deps.iter().any(|&d| from_tracked[d]) {
                from_tracked[id] = true;
            }
        }
        let needed = (0..self.nodes.len()).map(|i| reaches_out[i] && from_tracked[i]).collect();
        Ok(BackwardPlan { output: out, needed })
    }
}

/// Precomputed node set for a backward sweep.
#[derive(Debug, Clone)]
pub struct BackwardPlan {
    output: NodeId,
    needed: Vec<bool>,
}

// ── kernels ─────────────────────────────────────────────────────────────────

/// out = a(mxk) . b(kxn), accumulating if `acc`.
fn mm<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize, acc: bool) {
    if !acc {
        out.fill(T::zero());
    }
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (ov, &bv) in orow.iter_mut().zip(brow) {
                *ov = *ov + av * bv;
            }
        }
    }
}

fn transpose_into<T: Copy>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    for i in 0..rows {
        for j in 0..cols {
            dst[j * rows + i] = src[i * cols + j];
        }
    }
}

#[inline]
fn add_assign<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

#[inline]
fn add_scaled<T: Scalar>(dst: &mut [T], src: &[T], k: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + k * s;
    }
}

#[inline]
fn add_mul<T: Scalar>(dst: &mut [T], a: &[T], b: &[T]) {
    for ((d, &x), &y) in dst.iter_mut().zip(a).zip(b) {
        *d = *d + x * y;
    }
}

fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

// ── evaluator ───────────────────────────────────────────────────────────────

/// Reusable evaluation workspace for one graph: all node value and adjoint
/// buffers are allocated up front.
pub struct Evaluator<'g, T> {
    graph: &'g Graph,
    values: Vec<Vec<T>>,
    adjoints: Vec<Vec<T>>,
    bound: Vec<bool>,
    scratch: Vec<T>,
}

impl<'g, T: Scalar> Evaluator<'g, T> {
    pub fn new(graph: &'g Graph) -> Self {
        let values: Vec<Vec<T>> =
            graph.nodes.iter().map(|n| vec![T::zero(); n.rows * n.cols]).collect();
        let adjoints = values.clone();
        let bound = vec![false; graph.nodes.len()];
        Self { graph, values, adjoints, bound, scratch: Vec::new() }
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    /// Bind a named input or parameter. The value must match the leaf shape
    /// and be finite.
    pub fn bind(&mut self, name: &str, value: &Array<T>) -> Result<(), NumericsError> {
        let id = self
            .graph
            .inputs
            .get(name)
            .or_else(|| self.graph.params.get(name))
            .copied()
            .ok_or_else(|| NumericsError::UnknownLeaf(name.to_string()))?;
        let node = &self.graph.nodes[id];
        if value.shape() != (node.rows, node.cols) {
            return Err(NumericsError::ShapeMismatch {
                node: name.to_string(),
                detail: format!(
                    "bound value is {}x{}, leaf is {}x{}",
                    value.rows(),
                    value.cols(),
                    node.rows,
                    node.cols
                ),
            });
        }
        if !value.all_finite() {
            return Err(NumericsError::NonFinite { node: name.to_string() });
        }
        self.values[id].copy_from_slice(value.data());
        self.bound[id] = true;
        Ok(())
    }

    pub fn bind_all(&mut self, bindings: &Bindings<T>) -> Result<(), NumericsError> {
        for (name, value) in bindings {
            self.bind(name, value)?;
        }
        Ok(())
    }

    /// Re-evaluate every node in topological order.
    pub fn forward(&mut self) -> Result<(), NumericsError> {
        for id in 0..self.graph.nodes.len() {
            match self.graph.nodes[id].op {
                Op::Input | Op::Param => {
                    if !self.bound[id] {
                        return Err(NumericsError::Unbound(self.graph.label(id)));
                    }
                }
                _ => {
                    self.compute(id);
                    // |x| summation: finite iff every element is finite, and
                    // vectorizes where a per-element test would not.
                    let mut acc = T::zero();
                    for &v in &self.values[id] {
                        acc = acc + v.abs();
                    }
                    if !acc.is_finite() {
                        return Err(NumericsError::NonFinite { node: self.graph.label(id) });
                    }
                }
            }
        }
        Ok(())
    }

    fn compute(&mut self, id: NodeId) {
        let (rows, cols) = (self.graph.nodes[id].rows, self.graph.nodes[id].cols);
        let (before, rest) = self.values.split_at_mut(id);
        let out = &mut rest[0][..];
        match &self.graph.nodes[id].op {
            Op::Input | Op::Param => unreachable!(),
            Op::MatMul(a, b) => {
                let (m, k) = self.graph.shape(*a);
                let n = self.graph.shape(*b).1;
                mm(&before[*a], &before[*b], out, m, k, n, false);
            }
            Op::Add(a, b) => {
                for ((o, &x), &y) in out.iter_mut().zip(&before[*a]).zip(&before[*b]) {
                    *o = x + y;
                }
            }
            Op::Sub(a, b) => {
                for ((o, &x), &y) in out.iter_mut().zip(&before[*a]).zip(&before[*b]) {
                    *o = x - y;
                }
            }
            Op::Mul(a, b) => {
                for ((o, &x), &y) in out.iter_mut().zip(&before[*a]).zip(&before[*b]) {
                    *o = x * y;
                }
            }
            Op::Div(a, b) => {
                for ((o, &x), &y) in out.iter_mut().zip(&before[*a]).zip(&before[*b]) {
                    *o = x / y;
                }
            }
            Op::Scale(a, k) => {
                let k = T::from_f64(*k);
                for (o, &x) in out.iter_mut().zip(&before[*a]) {
                    *o = k * x;
                }
            }
            Op::AddScalar(a, k) => {
                let k = T::from_f64(*k);
                for (o, &x) in out.iter_mut().zip(&before[*a]) {
                    *o = x + k;
                }
            }
            Op::Exp(a) => {
                for (o, &x) in out.iter_mut().zip(&before[*a]) {
                    *o = x.exp();
                }
            }
            Op::Tanh(a) => {
                for (o, &x) in out.iter_mut().zip(&before[*a]) {
                    *o = x.tanh();
                }
            }
            Op::Sigmoid(a) => {
                for (o, &x) in out.iter_mut().zip(&before[*a]) {
                    *o = stable_sigmoid(x);
                }
            }
            Op::Sqrt(a) => {
                for (o, &x) in out.iter_mut().zip(&before[*a]) {
                    *o = x.sqrt();
                }
            }
            Op::RowSoftmax(a) => {
                let src = &before[*a];
                for i in 0..rows {
                    let r = &src[i * cols..(i + 1) * cols];
                    let o = &mut out[i * cols..(i + 1) * cols];
                    let mut mx = r[0];
                    for &v in r {
                        if v > mx {
                            mx = v;
                        }
                    }
                    let mut sum = T::zero();
                    for (ov, &v) in o.iter_mut().zip(r) {
                        let e = (v - mx).exp();
                        *ov = e;
                        sum = sum + e;
                    }
                    for ov in o.iter_mut() {
                        *ov = *ov / sum;
                    }
                }
            }
            Op::RowLogSoftmax(a) => {
                let src = &before[*a];
                for i in 0..rows {
                    let r = &src[i * cols..(i + 1) * cols];
                    let o = &mut out[i * cols..(i + 1) * cols];
                    let mut mx = r[0];
                    for &v in r {
                        if v > mx {
                            mx = v;
                        }
                    }
                    let mut sum = T::zero();
                    for &v in r {
                        sum = sum + (v - mx).exp();
                    }
                    let lse = mx + sum.ln();
                    for (ov, &v) in o.iter_mut().zip(r) {
                        *ov = v - lse;
                    }
                }
            }
            Op::MeanRows(a) => {
                let src = &before[*a];
                let (r, c) = self.graph.shape(*a);
                let inv = T::from_f64(1.0 / r as f64);
                out.fill(T::zero());
                for i in 0..r {
                    add_assign(out, &src[i * c..(i + 1) * c]);
                }
                for o in out.iter_mut() {
                    *o = *o * inv;
                }
            }
            Op::VarRows(a) => {
                let src = &before[*a];
                let (r, c) = self.graph.shape(*a);
                let inv = T::from_f64(1.0 / r as f64);
                let mut mean = vec![T::zero(); c];
                for i in 0..r {
                    add_assign(&mut mean, &src[i * c..(i + 1) * c]);
                }
                for m in mean.iter_mut() {
                    *m = *m * inv;
                }
                out.fill(T::zero());
                for i in 0..r {
                    for (o, (&v, &m)) in out.iter_mut().zip(src[i * c..(i + 1) * c].iter().zip(&mean)) {
                        let d = v - m;
                        *o = *o + d * d;
                    }
                }
                for o in out.iter_mut() {
                    *o = *o * inv;
                }
            }
            Op::MeanCols(a) => {
                let src = &before[*a];
                let (r, c) = self.graph.shape(*a);
                let inv = T::from_f64(1.0 / c as f64);
                for i in 0..r {
                    let mut s = T::zero();
                    for &v in &src[i * c..(i + 1) * c] {
                        s = s + v;
                    }
                    out[i] = s * inv;
                }
            }
            Op::VarCols(a) => {
                let src = &before[*a];
                let (r, c) = self.graph.shape(*a);
                let inv = T::from_f64(1.0 / c as f64);
                for i in 0..r {
                    let row = &src[i * c..(i + 1) * c];
                    let mut s = T::zero();
                    for &v in row {
                        s = s + v;
                    }
                    let m = s * inv;
                    let mut q = T::zero();
                    for &v in row {
                        let d = v - m;
                        q = q + d * d;
                    }
                    out[i] = q * inv;
                }
            }
            Op::SumAll(a) => {
                let mut s = T::zero();
                for &v in &before[*a] {
                    s = s + v;
                }
                out[0] = s;
            }
            Op::BroadcastRows(a) => {
                let src = &before[*a];
                for chunk in out.chunks_exact_mut(cols) {
                    chunk.copy_from_slice(src);
                }
            }
            Op::BroadcastCols(a) => {
                let src = &before[*a];
                for (i, chunk) in out.chunks_exact_mut(cols).enumerate() {
                    chunk.fill(src[i]);
                }
            }
            Op::SliceRows(a, start) => {
                let src = &before[*a];
                let c = self.graph.shape(*a).1;
                out.copy_from_slice(&src[start * c..start * c + rows * c]);
            }
            Op::SliceCols(a, start) => {
                let src = &before[*a];
                let c = self.graph.shape(*a).1;
                for i in 0..rows {
                    out[i * cols..(i + 1) * cols].copy_from_slice(&src[i * c + start..i * c + start + cols]);
                }
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let src = &before[p];
                    out[at..at + src.len()].copy_from_slice(src);
                    at += src.len();
                }
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for &p in parts {
                    let src = &before[p];
                    let pc = self.graph.shape(p).1;
                    for i in 0..rows {
                        out[i * cols + at..i * cols + at + pc].copy_from_slice(&src[i * pc..(i + 1) * pc]);
                    }
                    at += pc;
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.graph.shape(*a);
                transpose_into(&before[*a], r, c, out);
            }
        }
    }

    /// Backward from a named scalar output, tracking all parameters.
    pub fn backward(&mut self, output: &str) -> Result<(), NumericsError> {
        let plan = self.graph.plan(output, None)?;
        self.backward_with(&plan)
    }

    /// Backward restricted to a precomputed plan. Adjoints of parameters
    /// outside the plan are zeroed, so every parameter reads back a gradient.
    pub fn backward_with(&mut self, plan: &BackwardPlan) -> Result<(), NumericsError> {
        for (id, adj) in self.adjoints.iter_mut().enumerate() {
            if plan.needed[id] || matches!(self.graph.nodes[id].op, Op::Param) {
                adj.fill(T::zero());
            }
        }
        self.adjoints[plan.output][0] = T::one();
        let mut deps = Vec::new();
        for id in (0..=plan.output).rev() {
            if !plan.needed[id] {
                continue;
            }
            if matches!(self.graph.nodes[id].op, Op::Input | Op::Param) {
                continue;
            }
            self.propagate(id, plan, &mut deps);
        }
        for (name, &id) in &self.graph.params {
            if !plan.needed[id] {
                continue;
            }
            let mut acc = T::zero();
            for &v in &self.adjoints[id] {
                acc = acc + v.abs();
            }
            if !acc.is_finite() {
                return Err(NumericsError::NonFinite { node: format!("grad({name})") });
            }
        }
        Ok(())
    }

    /// Push the adjoint of `id` into its inputs.
    fn propagate(&mut self, id: NodeId, plan: &BackwardPlan, deps: &mut Vec<NodeId>) {
        self.graph.nodes[id].op.inputs(deps);
        let goes = |d: NodeId| plan.needed[d];
        let (rows, cols) = (self.graph.nodes[id].rows, self.graph.nodes[id].cols);
        // Adjoints of inputs always precede `id`; split so we can read the
        // output adjoint while accumulating into input adjoints.
        macro_rules! split {
            ($dst:expr) => {{
                let (pre, rest) = self.adjoints.split_at_mut(id);
                (&mut pre[$dst][..], &rest[0][..])
            }};
        }
        match &self.graph.nodes[id].op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.graph.shape(*a);
                let n = self.graph.shape(*b).1;
                if goes(*a) {
                    // dA += dOut . B^T
                    self.scratch.resize(k * n, T::zero());
                    transpose_into(&self.values[*b], k, n, &mut self.scratch);
                    let (pre, rest) = self.adjoints.split_at_mut(id);
                    mm(&rest[0], &self.scratch, &mut pre[*a], m, n, k, true);
                }
                if goes(*b) {
                    // dB += A^T . dOut
                    self.scratch.resize(m * k, T::zero());
                    transpose_into(&self.values[*a], m, k, &mut self.scratch);
                    let (pre, rest) = self.adjoints.split_at_mut(id);
                    mm(&self.scratch, &rest[0], &mut pre[*b], k, m, n, true);
                }
            }
            Op::Add(a, b) => {
                if goes(*a) {
                    let (da, dout) = split!(*a);
                    add_assign(da, dout);
                }
                if goes(*b) {
                    let (db, dout) = split!(*b);
                    add_assign(db, dout);
                }
            }
            Op::Sub(a, b) => {
                if goes(*a) {
                    let (da, dout) = split!(*a);
                    add_assign(da, dout);
                }
                if goes(*b) {
                    let (db, dout) = split!(*b);
                    add_scaled(db, dout, -T::one());
                }
            }
            Op::Mul(a, b) => {
                if goes(*a) {
                    let vb = &self.values[*b];
                    let (pre, rest) = self.adjoints.split_at_mut(id);
                    add_mul(&mut pre[*a], &rest[0], vb);
                }
                if goes(*b) {
                    let va = &self.values[*a];
                    let (pre, rest) = self.adjoints.split_at_mut(id);
                    add_mul(&mut pre[*b], &rest[0], va);
                }
            }
            Op::Div(a, b) => {
                if goes(*a) {
                    let vb = &self.values[*b];
                    let (pre, rest) = self.adjoints.split_at_mut(id);
                    for ((d, &g), &y) in pre[*a].iter_mut().zip(&rest[0][..]).zip(vb) {
                        *d = *d + g / y;
                    }
                }
                if goes(*b) {
                    let vout = &self.values[id];
                    let vb = &self.values[*b];
                    let (pre, rest) = self.adjoints.split_at_mut(id);
                    for (((d, &g), &o), &y) in pre[*b].iter_mut().zip(&rest[0][..]).zip(vout).zip(vb) {
                        *d = *d - g * o / y;
                    }
                }
            }
            Op::Scale(a, k) => {
                if goes(*a) {
                    let k = T::from_f64(*k);
                    let (da, dout) = split!(*a);
                    add_scaled(da, dout, k);
                }
            }
            Op::AddScalar(a, _) => {
                if goes(*a) {
                    let (da, dout) = split!(*a);
                    add_assign(da, dout);
                }
            }
            Op::Exp(a) => {
                if goes(*a) {
                    let vout = &self.values[id];
                    let (pre, rest) = self.adjoints.split_at_mut(id);
                    add_mul(&mut pre[*a], &rest[0], vout);
                }
            }
            Op::Tanh(a) => {
                if goes(*a) {
                    let vout = &self.values[id];
                    let (pre, rest) = self.adjoints.split_at_mut(id);
                    for ((d, &g), &o) in pre[*a].iter_mut().zip(&rest[0][..]).zip(vout) {
                        *d = *d + g * (T::one() - o * o);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if goes(*a) {
                    let vout = &self.values[id];
                    let (pre, rest) = self.adjoints.split_at_mut(id);
                    for ((d, &g), &o) in pre[*a].iter_mut().zip(&rest[0][..]).zip(vout) {
                        *d = *d + g * o * (T::one() - o);
                    }
                }
            }
            Op::Sqrt(a) => {
                if goes(*a) {
                    let vout = &self.values[id];
                    let half = T::from_f64(0.5);
                    let (pre, rest) = self.adjoints.split_at_mut(id);
                    for ((d, &g), &o) in pre[*a].iter_mut().zip(&rest[0][..]).zip(vout) {
                        *d = *d + g * half / o;
                    }
                }
            }
            Op::RowSoftmax(a) => {
                if goes(*a) {
                    let vout = &self.values[id];
                    let (pre, rest) = self.adjoints.split_at_mut(id);
                    let dout = &rest[0];
                    for i in 0..rows {
                        let o = &vout[i * cols..(i + 1) * cols];
                        let g = &dout[i * cols..(i + 1) * cols];
                        let d = &mut pre[*a][i * cols..(i + 1) * cols];
                        let mut dot = T::zero();
                        for (&gv, &ov) in g.iter().zip(o) {
                            dot = dot + gv * ov;
                        }
                        for ((dv, &gv), &ov) in d.iter_mut().zip(g).zip(o) {
                            *dv = *dv + (gv - dot) * ov;
                        }
                    }
                }
            }
            Op::RowLogSoftmax(a) => {
                if goes(*a) {
                    let vout = &self.values[id];
                    let (pre, rest) = self.adjoints.split_at_mut(id);
                    let dout = &rest[0];
                    for i in 0..rows {
                        let o = &vout[i * cols..(i + 1) * cols];
                        let g = &dout[i * cols..(i + 1) * cols];
                        let d = &mut pre[*a][i * cols..(i + 1) * cols];
                        let mut gsum = T::zero();
                        for &gv in g {
                            gsum = gsum + gv;
                        }
                        for ((dv, &gv), &ov) in d.iter_mut().zip(g).zip(o) {
                            *dv = *dv + gv - gsum * ov.exp();
                        }
                    }
                }
            }
            Op::MeanRows(a) => {
                if goes(*a) {
                    let (r, c) = self.graph.shape(*a);
                    let inv = T::from_f64(1.0 / r as f64);
                    let (pre, rest) = self.adjoints.split_at_mut(id);
                    for chunk in pre[*a].chunks_exact_mut(c) {
                        add_scaled(chunk, &rest[0], inv);
                    }
                }
            }
            Op::VarRows(a) => {
                if goes(*a) {
                    let (r, c) = self.graph.shape(*a);
                    let src = &self.values[*a];
                    let inv = T::from_f64(1.0 / r as f64);
                    let two = T::from_f64(2.0);
                    let mut mean = vec![T::zero(); c];
                    for i in 0..r {
                        add_assign(&mut mean, &src[i * c..(i + 1) * c]);
                    }
                    for m in mean.iter_mut() {
                        *m = *m * inv;
                    }
                    let (pre, rest) = self.adjoints.split_at_mut(id);
                    let dout = &rest[0];
                    for i in 0..r {
                        let d = &mut pre[*a][i * c..(i + 1) * c];
                        let x = &src[i * c..(i + 1) * c];
                        for (((dv, &xv), &mv), &gv) in d.iter_mut().zip(x).zip(&mean).zip(dout) {
                            *dv = *dv + gv * two * (xv - mv) * inv;
                        }
                    }
                }
            }
            Op::MeanCols(a) => {
                if goes(*a) {
                    let (_, c) = self.graph.shape(*a);
                    let inv = T::from_f64(1.0 / c as f64);
                    let (pre, rest) = self.adjoints.split_at_mut(id);
                    for (i, chunk) in pre[*a].chunks_exact_mut(c).enumerate() {
                        let g = rest[0][i] * inv;
                        for dv in chunk {
                            *dv = *dv + g;
                        }
                    }
                }
            }
            Op::VarCols(a) => {
                if goes(*a) {
                    let (_, c) = self.graph.shape(*a);
                    let src = &self.values[*a];
                    let inv = T::from_f64(1.0 / c as f64);
                    let two = T::from_f64(2.0);
                    let (pre, rest) = self.adjoints.split_at_mut(id);
                    for (i, chunk) in pre[*a].chunks_exact_mut(c).enumerate() {
                        let row = &src[i * c..(i + 1) * c];
                        let mut s = T::zero();
                        for &v in row {
                            s = s + v;
                        }
                        let m = s * inv;
                        let g = rest[0][i];
                        for (dv, &xv) in chunk.iter_mut().zip(row) {
                            *dv = *dv + g * two * (xv - m) * inv;
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if goes(*a) {
                    let (pre, rest) = self.adjoints.split_at_mut(id);
                    let g = rest[0][0];
                    for dv in pre[*a].iter_mut() {
                        *dv = *dv + g;
                    }
                }
            }
            Op::BroadcastRows(a) => {
                if goes(*a) {
                    let (pre, rest) = self.adjoints.split_at_mut(id);
                    for chunk in rest[0].chunks_exact(cols) {
                        add_assign(&mut pre[*a], chunk);
                    }
                }
            }
            Op::BroadcastCols(a) => {
                if goes(*a) {
                    let (pre, rest) = self.adjoints.split_at_mut(id);
                    for (i, chunk) in rest[0].chunks_exact(cols).enumerate() {
                        let mut s = T::zero();
                        for &v in chunk {
                            s = s + v;
                        }
                        pre[*a][i] = pre[*a][i] + s;
                    }
                }
            }
            Op::SliceRows(a, start) => {
                if goes(*a) {
                    let c = self.graph.shape(*a).1;
                    let (pre, rest) = self.adjoints.split_at_mut(id);
                    add_assign(&mut pre[*a][start * c..start * c + rows * c], &rest[0]);
                }
            }
            Op::SliceCols(a, start) => {
                if goes(*a) {
                    let c = self.graph.shape(*a).1;
                    let (pre, rest) = self.adjoints.split_at_mut(id);
                    for i in 0..rows {
                        add_assign(
                            &mut pre[*a][i * c + start..i * c + start + cols],
                            &rest[0][i * cols..(i + 1) * cols],
                        );
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let mut at = 0;
                for &p in &parts {
                    let len = self.values[p].len();
                    if goes(p) {
                        let (pre, rest) = self.adjoints.split_at_mut(id);
                        add_assign(&mut pre[p], &rest[0][at..at + len]);
                    }
                    at += len;
                }
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let mut at = 0;
                for &p in &parts {
                    let pc = self.graph.shape(p).1;
                    if goes(p) {
                        let (pre, rest) = self.adjoints.split_at_mut(id);
                        for i in 0..rows {
                            add_assign(
                                &mut pre[p][i * pc..(i + 1) * pc],
                                &rest[0][i * cols + at..i * cols + at + pc],
                            );
                        }
                    }
                    at += pc;
                }
            }
            Op::Transpose(a) => {
                if goes(*a) {
                    let (r, c) = self.graph.shape(*a);
                    let (pre, rest) = self.adjoints.split_at_mut(id);
                    // dA += dOut^T  (dOut is c x r)
                    for i in 0..r {
                        for j in 0..c {
                            pre[*a][i * c + j] = pre[*a][i * c + j] + rest[0][j * r + i];
                        }
                    }
                }
            }
        }
    }

    /// Raw value slice of any node.
    pub fn value(&self, id: NodeId) -> &[T] {
        &self.values[id]
    }

    /// Copy out a named output.
    pub fn output(&self, name: &str) -> Result<Array<T>, NumericsError> {
        let &id = self
            .graph
            .outputs
            .get(name)
            .ok_or_else(|| NumericsError::UnknownOutput(name.to_string()))?;
        let (r, c) = self.graph.shape(id);
        Ok(Array::new(r, c, self.values[id].clone()).expect("node buffer matches shape"))
    }

    /// Scalar value of a named 1x1 output.
    pub fn output_scalar(&self, name: &str) -> Result<T, NumericsError> {
        let &id = self
            .graph
            .outputs
            .get(name)
            .ok_or_else(|| NumericsError::UnknownOutput(name.to_string()))?;
        Ok(self.values[id][0])
    }

    /// Copy out the gradient of a named parameter (zeros if detached).
    pub fn param_grad(&self, name: &str) -> Result<Array<T>, NumericsError> {
        let &id = self
            .graph
            .params
            .get(name)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))?;
        let (r, c) = self.graph.shape(id);
        Ok(Array::new(r, c, self.adjoints[id].clone()).expect("node buffer matches shape"))
    }

    /// Raw gradient slice of a named parameter.
    pub fn param_grad_slice(&self, name: &str) -> Result<&[T], NumericsError> {
        let &id = self
            .graph
            .params
            .get(name)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))?;
        Ok(&self.adjoints[id])
    }
}

// ── one-shot entry points ───────────────────────────────────────────────────

/// Evaluate a graph once and return every marked output by name.
pub fn forward<T: Scalar>(
    graph: &Graph,
    bindings: &Bindings<T>,
) -> Result<BTreeMap<String, Array<T>>, NumericsError> {
    let mut ev = Evaluator::new(graph);
    ev.bind_all(bindings)?;
    ev.forward()?;
    let mut out = BTreeMap::new();
    for name in graph.outputs.keys() {
        out.insert(name.clone(), ev.output(name)?);
    }
    Ok(out)
}

/// Evaluate a graph and return the gradient of the named scalar output with
/// respect to every parameter (zeros for detached parameters).
pub fn backward<T: Scalar>(
    graph: &Graph,
    output: &str,
    bindings: &Bindings<T>,
) -> Result<BTreeMap<String, Array<T>>, NumericsError> {
    let mut ev = Evaluator::new(graph);
    ev.bind_all(bindings)?;
    ev.forward()?;
    ev.backward(output)?;
    let mut out = BTreeMap::new();
    for name in graph.params.keys() {
        out.insert(name.clone(), ev.param_grad(name)?);
    }
    Ok(out)
}

// ── tests ───────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;

    /// Kitchen-sink graph touching every op, with inputs x (3x4) and params
    /// w (4x3), b (1x3). Returns the graph with output "loss".
    fn sink_graph() -> Graph {
        let mut g = Graph::new();
        let x = g.input("x", 3, 4);
        let w = g.param("w", 4, 3);
        let b = g.param("b", 1, 3);
        let h = g.matmul(x, w);
        let bb = g.broadcast_rows(b, 3);
        let hb = g.add(h, bb);
        let t = g.tanh(hb);
        let s = g.sigmoid(hb);
        let u = g.sub(t, s);
        let q0 = g.mul(t, s);
        let us = g.scale(u, 0.5);
        let q = g.sub(q0, us);
        let ss = g.mul(s, s);
        let denom = g.add_scalar(ss, 0.5);
        let d = g.div(q, denom);
        let ds = g.scale(d, 0.3);
        let e = g.exp(ds);
        let sm = g.row_softmax(e);
        let lsm = g.row_log_softmax(hb);
        let mr = g.mean_rows(q);
        let vr = g.var_rows(q);
        let mc = g.mean_cols(q);
        let vc = g.var_cols(q);
        let mv = g.add(vr, mr);
        let mvb = g.broadcast_rows(mv, 3);
        let z1 = g.mul(sm, mvb);
        let vcb = g.broadcast_cols(vc, 3);
        let z2 = g.mul(lsm, vcb);
        let _ = mc;
        let cat = g.concat_cols(&[z1, z2]);
        let top = g.slice_rows(cat, 0, 2);
        let bot = g.slice_rows(cat, 1, 2);
        let catr = g.concat_rows(&[top, bot]);
        let sl = g.slice_cols(catr, 1, 4);
        let tr = g.transpose(sl);
        let tsq = g.mul(tr, tr);
        let shifted = g.add_scalar(tsq, 0.1);
        let rt = g.sqrt(shifted);
        let l1 = g.sum_all(rt);
        let l2 = g.sum_all(cat);
        let l2s = g.scale(l2, 0.25);
        let mcs = g.sum_all(mc);
        let l3 = g.scale(mcs, 0.1);
        let la = g.add(l1, l2s);
        let loss = g.add(la, l3);
        g.mark_output("loss", loss);
        g
    }

    fn sink_bindings() -> Bindings<f64> {
        // Fixed quasi-random values, nothing special about them.
        let mut bind = Bindings::new();
        let gen = |n: usize, salt: u64| -> Vec<f64> {
            (0..n)
                .map(|i| {
                    let h = (i as u64 + 1).wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(salt);
                    ((h >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
                })
                .collect()
        };
        bind.insert("x".into(), Array::new(3, 4, gen(12, 7)).unwrap());
        bind.insert("w".into(), Array::new(4, 3, gen(12, 99)).unwrap());
        bind.insert("b".into(), Array::new(1, 3, gen(3, 1234)).unwrap());
        bind
    }

    #[test]
    fn forward_matches_hand_rolled_math() {
        // Independent reimplementation of a small two-layer computation.
        let mut g = Graph::new();
        let x = g.input("x", 2, 3);
        let w = g.param("w", 3, 2);
        let h = g.matmul(x, w);
        let sm = g.row_softmax(h);
        let p = g.mul(sm, sm);
        let loss = g.sum_all(p);
        g.mark_output("probs", sm);
        g.mark_output("loss", loss);

        let xv = [[0.5, -1.0, 2.0], [1.5, 0.25, -0.75]];
        let wv = [[1.0, 0.5], [-0.25, 1.25], [0.75, -0.5]];
        let mut bind = Bindings::new();
        bind.insert("x".into(), Array::from_rows(&[xv[0].to_vec(), xv[1].to_vec()]));
        bind.insert("w".into(), Array::from_rows(&[wv[0].to_vec(), wv[1].to_vec(), wv[2].to_vec()]));
        let outs = forward(&g, &bind).unwrap();

        // oracle: plain loops, written without the graph machinery
        let mut want_loss = 0.0;
        let mut want_probs = [[0.0f64; 2]; 2];
        for i in 0..2 {
            let mut row = [0.0f64; 2];
            for j in 0..2 {
                for k in 0..3 {
                    row[j] += xv[i][k] * wv[k][j];
                }
            }
            let m = row[0].max(row[1]);
            let e = [(row[0] - m).exp(), (row[1] - m).exp()];
            let s = e[0] + e[1];
            for j in 0..2 {
                want_probs[i][j] = e[j] / s;
                want_loss += (e[j] / s) * (e[j] / s);
            }
        }
        let probs = &outs["probs"];
        for i in 0..2 {
            for j in 0..2 {
                assert!((probs.get(i, j) - want_probs[i][j]).abs() < 1e-14);
            }
        }
        assert!((outs["loss"].get(0, 0) - want_loss).abs() < 1e-14);
        // softmax rows sum to one
        assert!((probs.get(0, 0) + probs.get(0, 1) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn softmax_is_stable_for_large_scores() {
        let mut g = Graph::new();
        let x = g.input("x", 1, 3);
        let sm = g.row_softmax(x);
        g.mark_output("p", sm);
        let mut bind = Bindings::new();
        bind.insert("x".into(), Array::row(vec![1000.0f64, 1001.0, 999.0]));
        let outs = forward(&g, &bind).unwrap();
        let p = &outs["p"];
        let sum: f64 = p.data().iter().sum();
        assert!(p.all_finite());
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(p.get(0, 1) > p.get(0, 0) && p.get(0, 0) > p.get(0, 2));
    }

    /// Central-difference oracle, written independently of grad_check.
    fn fd_param(g: &Graph, bind: &Bindings<f64>, param: &str, idx: usize, h: f64) -> f64 {
        let mut up = bind.clone();
        up.get_mut(param).unwrap().data_mut()[idx] += h;
        let fu = forward(g, &up).unwrap()["loss"].get(0, 0);
        let mut dn = bind.clone();
        dn.get_mut(param).unwrap().data_mut()[idx] -= h;
        let fd = forward(g, &dn).unwrap()["loss"].get(0, 0);
        (fu - fd) / (2.0 * h)
    }

    #[test]
    fn backward_matches_central_differences_on_every_op() {
        let g = sink_graph();
        let bind = sink_bindings();
        let grads = backward(&g, "loss", &bind).unwrap();
        for param in ["w", "b"] {
            let ga = &grads[param];
            for idx in 0..ga.numel() {
                let want = fd_param(&g, &bind, param, idx, 1e-5);
                let got = ga.data()[idx];
                let denom = want.abs().max(got.abs()).max(1e-6);
                assert!(
                    ((want - got) / denom).abs() < 1e-6,
                    "{param}[{idx}]: analytic {got} vs fd {want}"
                );
            }
        }
    }

    #[test]
    fn diamond_reuse_accumulates() {
        // y = sum(a*a) + sum(a) has gradient 2a + 1.
        let mut g = Graph::new();
        let a = g.param("a", 2, 2);
        let sq = g.mul(a, a);
        let s1 = g.sum_all(sq);
        let s2 = g.sum_all(a);
        let y = g.add(s1, s2);
        g.mark_output("loss", y);
        let mut bind = Bindings::new();
        bind.insert("a".into(), Array::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]));
        let grads = backward(&g, "loss", &bind).unwrap();
        let got = grads["a"].data().to_vec();
        assert_eq!(got, vec![3.0, -3.0, 2.0, 7.0]);
    }

    #[test]
    fn detached_param_reports_zero_gradient() {
        let mut g = Graph::new();
        let a = g.param("a", 1, 2);
        let unused = g.param("unused", 2, 2);
        let s = g.sum_all(a);
        let _ = g.sum_all(unused);
        g.mark_output("loss", s);
        let mut bind = Bindings::new();
        bind.insert("a".into(), Array::row(vec![1.0, 2.0]));
        bind.insert("unused".into(), Array::zeros(2, 2));
        let grads = backward(&g, "loss", &bind).unwrap();
        assert_eq!(grads["a"].data(), &[1.0, 1.0]);
        assert_eq!(grads["unused"].data(), &[0.0; 4]);
    }

    #[test]
    fn plan_restriction_skips_untracked_params() {
        let g = sink_graph();
        let bind = sink_bindings();
        let full = backward(&g, "loss", &bind).unwrap();

        let mut ev = Evaluator::new(&g);
        ev.bind_all(&bind).unwrap();
        ev.forward().unwrap();
        let plan = g.plan("loss", Some(&["b".to_string()])).unwrap();
        ev.backward_with(&plan).unwrap();
        assert_eq!(ev.param_grad("w").unwrap().data(), vec![0.0; 12].as_slice());
        assert!(ev.param_grad("b").unwrap().max_abs_diff(&full["b"]) < 1e-15);
    }

    #[test]
    fn evaluator_reuse_matches_fresh_runs() {
        let g = sink_graph();
        let bind1 = sink_bindings();
        let mut bind2 = sink_bindings();
        for v in bind2.get_mut("x").unwrap().data_mut() {
            *v *= -0.7;
        }
        let mut ev = Evaluator::new(&g);
        ev.bind_all(&bind1).unwrap();
        ev.forward().unwrap();
        let first = ev.output_scalar("loss").unwrap();
        ev.bind_all(&bind2).unwrap();
        ev.forward().unwrap();
        let second = ev.output_scalar("loss").unwrap();

        assert_eq!(first, forward(&g, &bind1).unwrap()["loss"].get(0, 0));
        assert_eq!(second, forward(&g, &bind2).unwrap()["loss"].get(0, 0));
        assert_ne!(first, second);
    }

    #[test]
    fn error_contract() {
        let mut g = Graph::new();
        let x = g.input("x", 2, 2);
        let y = g.exp(x);
        g.mark_output("y", y);
        // unbound leaf
        let err = forward::<f64>(&g, &Bindings::new()).unwrap_err();
        assert!(matches!(err, NumericsError::Unbound(ref n) if n == "x"));
        // wrong binding shape names the leaf
        let mut ev = Evaluator::<f64>::new(&g);
        let err = ev.bind("x", &Array::zeros(1, 2)).unwrap_err();
        assert!(matches!(err, NumericsError::ShapeMismatch { ref node, .. } if node == "x"));
        // non-finite binding rejected
        let err = ev.bind("x", &Array::filled(2, 2, f64::NAN)).unwrap_err();
        assert!(matches!(err, NumericsError::NonFinite { ref node } if node == "x"));
        // backward from a non-scalar output
        let mut bind = Bindings::<f64>::new();
        bind.insert("x".into(), Array::zeros(2, 2));
        let err = backward(&g, "y", &bind).unwrap_err();
        assert!(matches!(err, NumericsError::NotScalar(_)));
        // unknown output
        assert!(matches!(
            g.plan("nope", None).unwrap_err(),
            NumericsError::UnknownOutput(_)
        ));
    }

    #[test]
    fn overflow_is_reported_at_the_node_that_produced_it() {
        let mut g = Graph::new();
        let x = g.input("x", 1, 1);
        let e = g.exp(x);
        let id = g.num_nodes() - 1;
        g.name_node(id, "blowup");
        g.mark_output("y", e);
        let mut bind = Bindings::new();
        bind.insert("x".into(), Array::scalar(800.0f64));
        let err = forward(&g, &bind).unwrap_err();
        assert!(matches!(err, NumericsError::NonFinite { ref node } if node == "blowup"));
    }

    #[test]
    #[should_panic(expected = "matmul: inner dims differ")]
    fn build_time_shape_mismatch_panics() {
        let mut g = Graph::new();
        let a = g.input("a", 2, 3);
        let b = g.input("b", 2, 3);
        let _ = g.matmul(a, b);
    }
}
