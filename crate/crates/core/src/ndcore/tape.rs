//! Define-by-run reverse-mode differentiation over matrices.
//!
//! Values are computed eagerly as ops are pushed. The op set is closed:
//! add, mul (both with row / column / scalar broadcasting of the right
//! operand), matmul, tanh, exp, log, sum, column slice and column concat.

use super::{Matrix, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction axis for [`Tape::sum`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Everything, giving 1x1.
    All,
    /// Across columns, giving rows x 1.
    Cols,
    /// Across rows, giving 1 x cols.
    Rows,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sum(NodeId, Axis),
    Slice(NodeId, Vec<usize>),
    Concat(Vec<NodeId>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sum(..) => "sum",
            Op::Slice(..) => "slice",
            Op::Concat(_) => "concat",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
    requires_grad: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Col,
    Scalar,
}

fn broadcast_kind(a: (usize, usize), b: (usize, usize)) -> Option<Broadcast> {
    if a == b {
        Some(Broadcast::Same)
    } else if b == (1, 1) {
        Some(Broadcast::Scalar)
    } else if b == (1, a.1) {
        Some(Broadcast::Row)
    } else if b == (a.0, 1) {
        Some(Broadcast::Col)
    } else {
        None
    }
}

#[inline]
fn bidx(kind: Broadcast, r: usize, c: usize, cols: usize) -> usize {
    match kind {
        Broadcast::Same => r * cols + c,
        Broadcast::Row => c,
        Broadcast::Col => r,
        Broadcast::Scalar => 0,
    }
}

/// Recording of a computation; see the module docs.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(ParamId, NodeId)>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Differentiable leaf.
    pub fn var(&mut self, value: Matrix) -> NodeId {
        self.push_leaf(value, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push_leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Matrix::scalar(value))
    }

    /// Differentiable leaf bound to a parameter slot of `store`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let node = self.var(store.matrix(id));
        self.params.push((id, node));
        node
    }

    /// Leaves created through [`Tape::param`].
    pub fn param_bindings(&self) -> &[(ParamId, NodeId)] {
        &self.params
    }

    fn push_leaf(&mut self, value: Matrix, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let index = self.nodes.len();
        let value = self.compute(index, &op)?;
        let requires_grad = self.inputs(&op).iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(NodeId(index))
    }

    fn inputs(&self, op: &Op) -> Vec<NodeId> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Tanh(a) | Op::Exp(a) | Op::Log(a) | Op::Sum(a, _) | Op::Slice(a, _) => vec![*a],
            Op::Concat(xs) => xs.clone(),
        }
    }

    fn compute(&self, op_index: usize, op: &Op) -> Result<Matrix> {
        let shape_err = |detail: String| Error::Shape {
            op_index,
            op: op.name(),
            detail,
        };
        let v = |id: &NodeId| -> Result<&Matrix> {
            self.nodes
                .get(id.0)
                .filter(|_| id.0 < op_index)
                .map(|n| &n.value)
                .ok_or_else(|| shape_err(format!("operand {} is not an earlier node", id.0)))
        };
        Ok(match op {
            Op::Leaf => unreachable!("leaves carry their own value"),
            Op::Add(a, b) | Op::Mul(a, b) => {
                let (a, b) = (v(a)?, v(b)?);
                let kind = broadcast_kind(a.shape(), b.shape()).ok_or_else(|| {
                    shape_err(format!("{:?} vs {:?}", a.shape(), b.shape()))
                })?;
                let is_add = matches!(op, Op::Add(..));
                let mut out = a.clone();
                let cols = a.cols();
                let bd = b.data();
                for r in 0..a.rows() {
                    let row = out.row_mut(r);
                    for (c, o) in row.iter_mut().enumerate() {
                        let bv = bd[bidx(kind, r, c, cols)];
                        if is_add {
                            *o += bv;
                        } else {
                            *o *= bv;
                        }
                    }
                }
                out
            }
            Op::MatMul(a, b) => {
                let (a, b) = (v(a)?, v(b)?);
                if a.cols() != b.rows() {
                    return Err(shape_err(format!("{:?} x {:?}", a.shape(), b.shape())));
                }
                a.matmul(b)
            }
            Op::Tanh(a) => v(a)?.map(f64::tanh),
            Op::Exp(a) => v(a)?.map(f64::exp),
            Op::Log(a) => v(a)?.map(f64::ln),
            Op::Sum(a, axis) => {
                let a = v(a)?;
                match axis {
                    Axis::All => Matrix::scalar(a.sum()),
                    Axis::Cols => {
                        let mut out = Matrix::zeros(a.rows(), 1);
                        for r in 0..a.rows() {
                            out.set(r, 0, a.row(r).iter().sum());
                        }
                        out
                    }
                    Axis::Rows => {
                        let mut out = Matrix::zeros(1, a.cols());
                        for r in 0..a.rows() {
                            for (o, x) in out.data_mut().iter_mut().zip(a.row(r)) {
                                *o += x;
                            }
                        }
                        out
                    }
                }
            }
            Op::Slice(a, cols) => {
                let a = v(a)?;
                if let Some(bad) = cols.iter().find(|&&c| c >= a.cols()) {
                    return Err(shape_err(format!("column {bad} out of {}", a.cols())));
                }
                a.select_cols(cols)
            }
            Op::Concat(parts) => {
                if parts.is_empty() {
                    return Err(shape_err("nothing to concatenate".into()));
                }
                let vals = parts.iter().map(v).collect::<Result<Vec<_>>>()?;
                let rows = vals[0].rows();
                if let Some(bad) = vals.iter().find(|m| m.rows() != rows) {
                    return Err(shape_err(format!("{} rows vs {rows}", bad.rows())));
                }
                let cols: usize = vals.iter().map(|m| m.cols()).sum();
                let mut out = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    let dst = out.row_mut(r);
                    let mut off = 0;
                    for m in &vals {
                        dst[off..off + m.cols()].copy_from_slice(m.row(r));
                        off += m.cols();
                    }
                }
                out
            }
        })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Tanh(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Log(a))
    }

    pub fn sum(&mut self, a: NodeId, axis: Axis) -> Result<NodeId> {
        self.push(Op::Sum(a, axis))
    }

    /// Column gather; also serves as a permutation.
    pub fn slice(&mut self, a: NodeId, cols: Vec<usize>) -> Result<NodeId> {
        self.push(Op::Slice(a, cols))
    }

    pub fn concat(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        self.push(Op::Concat(parts))
    }

    /// `a · c` for a constant scalar `c` (composed from `mul`).
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let k = self.scalar(c);
        self.mul(a, k)
    }

    /// `a + c` for a constant scalar `c` (composed from `add`).
    pub fn offset(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let k = self.scalar(c);
        self.add(a, k)
    }

    /// `a − b` (composed from `add` and `mul`).
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    /// Recomputes every non-leaf value from the leaves, in recorded order.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let value = self.compute(i, &op)?;
            self.nodes[i].value = value;
        }
        Ok(())
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out = &self.nodes[output.0].value;
        if out.shape() != (1, 1) {
            return Err(Error::NonScalarOutput {
                rows: out.rows(),
                cols: out.cols(),
            });
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        adj[output.0] = Some(Matrix::scalar(1.0));

        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut adj, *a, || g.clone());
                    let bshape = self.nodes[b.0].value.shape();
                    self.accumulate(&mut adj, *b, || reduce_broadcast(&g, bshape));
                }
                Op::Mul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let kind = broadcast_kind(av.shape(), bv.shape()).expect("checked on push");
                    let cols = av.cols();
                    self.accumulate(&mut adj, *a, || {
                        let mut ga = g.clone();
                        for r in 0..ga.rows() {
                            for (c, x) in ga.row_mut(r).iter_mut().enumerate() {
                                *x *= bv.data()[bidx(kind, r, c, cols)];
                            }
                        }
                        ga
                    });
                    self.accumulate(&mut adj, *b, || {
                        let mut prod = g.clone();
                        for (x, y) in prod.data_mut().iter_mut().zip(av.data()) {
                            *x *= y;
                        }
                        reduce_broadcast(&prod, bv.shape())
                    });
                }
                Op::MatMul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    self.accumulate(&mut adj, *a, || g.matmul_nt(bv));
                    self.accumulate(&mut adj, *b, || av.matmul_tn(&g));
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    self.accumulate(&mut adj, *a, || {
                        let mut ga = g.clone();
                        for (x, t) in ga.data_mut().iter_mut().zip(y.data()) {
                            *x *= 1.0 - t * t;
                        }
                        ga
                    });
                }
                Op::Exp(a) => {
                    let y = &node.value;
                    self.accumulate(&mut adj, *a, || {
                        let mut ga = g.clone();
                        for (x, e) in ga.data_mut().iter_mut().zip(y.data()) {
                            *x *= e;
                        }
                        ga
                    });
                }
                Op::Log(a) => {
                    let av = &self.nodes[a.0].value;
                    self.accumulate(&mut adj, *a, || {
                        let mut ga = g.clone();
                        for (x, v) in ga.data_mut().iter_mut().zip(av.data()) {
                            *x /= v;
                        }
                        ga
                    });
                }
                Op::Sum(a, axis) => {
                    let (rows, cols) = self.nodes[a.0].value.shape();
                    self.accumulate(&mut adj, *a, || {
                        let mut ga = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                let v = match axis {
                                    Axis::All => g.get(0, 0),
                                    Axis::Cols => g.get(r, 0),
                                    Axis::Rows => g.get(0, c),
                                };
                                ga.set(r, c, v);
                            }
                        }
                        ga
                    });
                }
                Op::Slice(a, idx) => {
                    let (rows, cols) = self.nodes[a.0].value.shape();
                    self.accumulate(&mut adj, *a, || {
                        let mut ga = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            for (j, &c) in idx.iter().enumerate() {
                                let cur = ga.get(r, c);
                                ga.set(r, c, cur + g.get(r, j));
                            }
                        }
                        ga
                    });
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let (rows, cols) = self.nodes[p.0].value.shape();
                        let range: Vec<usize> = (off..off + cols).collect();
                        self.accumulate(&mut adj, *p, || {
                            let part = g.select_cols(&range);
                            debug_assert_eq!(part.rows(), rows);
                            part
                        });
                        off += cols;
                    }
                }
            }
            // Leaves keep their adjoint for the caller.
            if matches!(node.op, Op::Leaf) {
                adj[i] = Some(g);
            }
        }
        // Interior adjoints were consumed; only leaves are reported.
        Ok(Gradients { adjoints: adj })
    }

    fn accumulate(&self, adj: &mut [Option<Matrix>], target: NodeId, grad: impl FnOnce() -> Matrix) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let g = grad();
        match &mut adj[target.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Flat gradient in `store` layout, summed over all param bindings.
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> Vec<f64> {
        let mut flat = vec![0.0; store.len()];
        for &(pid, node) in &self.params {
            if let Some(g) = grads.adjoints[node.0].as_ref() {
                let range = store.range(pid);
                for (dst, src) in flat[range].iter_mut().zip(g.data()) {
                    *dst += src;
                }
            }
        }
        flat
    }
}

fn reduce_broadcast(g: &Matrix, target: (usize, usize)) -> Matrix {
    if g.shape() == target {
        return g.clone();
    }
    let mut out = Matrix::zeros(target.0, target.1);
    for r in 0..g.rows() {
        for c in 0..g.cols() {
            let (tr, tc) = (if target.0 == 1 { 0 } else { r }, if target.1 == 1 { 0 } else { c });
            let cur = out.get(tr, tc);
            out.set(tr, tc, cur + g.get(r, c));
        }
    }
    out
}

/// Adjoints of leaf nodes after [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Adjoint of a leaf; `None` when the leaf did not influence the output.
    pub fn try_get(&self, id: NodeId) -> Option<&Matrix> {
        self.adjoints.get(id.0).and_then(Option::as_ref)
    }

    /// Adjoint of a leaf, zeros when unused. `shape` is the leaf's shape.
    pub fn get_or_zeros(&self, tape: &Tape, id: NodeId) -> Matrix {
        self.try_get(id).cloned().unwrap_or_else(|| {
            let (r, c) = tape.value(id).shape();
            Matrix::zeros(r, c)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_value_and_grad() {
        let mut t = Tape::new();
        let x = t.var(Matrix::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        assert_eq!(t.value(y).as_scalar(), Some(9.0));
        let g = t.backward(y).unwrap();
        assert_eq!(g.try_get(x).unwrap().as_scalar(), Some(6.0));
    }

    #[test]
    fn product_grads() {
        let mut t = Tape::new();
        let x = t.var(Matrix::scalar(2.0));
        let y = t.var(Matrix::scalar(5.0));
        let f = t.mul(x, y).unwrap();
        assert_eq!(t.value(f).as_scalar(), Some(10.0));
        let g = t.backward(f).unwrap();
        assert_eq!(g.try_get(x).unwrap().as_scalar(), Some(5.0));
        assert_eq!(g.try_get(y).unwrap().as_scalar(), Some(2.0));
    }

    #[test]
    fn unused_leaf_has_zero_adjoint() {
        let mut t = Tape::new();
        let x = t.var(Matrix::scalar(2.0));
        let unused = t.var(Matrix::filled(2, 3, 1.0));
        let f = t.mul(x, x).unwrap();
        let g = t.backward(f).unwrap();
        assert!(g.try_get(unused).is_none());
        assert_eq!(g.get_or_zeros(&t, unused), Matrix::zeros(2, 3));
    }

    #[test]
    fn shape_error_names_op_index() {
        let mut t = Tape::new();
        let a = t.var(Matrix::zeros(2, 3));
        let b = t.var(Matrix::zeros(2, 3));
        let err = t.matmul(a, b).unwrap_err();
        match err {
            Error::Shape { op_index, op, .. } => {
                assert_eq!(op_index, 2);
                assert_eq!(op, "matmul");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn non_scalar_backward_errors() {
        let mut t = Tape::new();
        let a = t.var(Matrix::zeros(2, 2));
        let b = t.tanh(a).unwrap();
        assert!(matches!(t.backward(b), Err(Error::NonScalarOutput { .. })));
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut t = Tape::new();
        let x = t.var(Matrix::from_vec(2, 2, vec![0.3, -1.2, 0.7, 2.0]).unwrap());
        let w = t.var(Matrix::from_vec(2, 3, vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6]).unwrap());
        let h = t.matmul(x, w).unwrap();
        let h = t.tanh(h).unwrap();
        let e = t.exp(h).unwrap();
        let l = t.log(e).unwrap();
        let s = t.sum(l, Axis::All).unwrap();
        let before = t.value(s).clone();
        t.replay().unwrap();
        assert_eq!(t.value(s).data()[0].to_bits(), before.data()[0].to_bits());
    }

    #[test]
    fn broadcast_grads_reduce() {
        let mut t = Tape::new();
        let x = t.var(Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = t.var(Matrix::row_vector(vec![10.0, 20.0]));
        let c = t.var(Matrix::from_vec(2, 1, vec![2.0, 3.0]).unwrap());
        let y = t.add(x, b).unwrap();
        let y = t.mul(y, c).unwrap();
        let s = t.sum(y, Axis::All).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.try_get(b).unwrap().data(), &[5.0, 5.0]);
        assert_eq!(g.try_get(c).unwrap().data(), &[33.0, 37.0]);
        assert_eq!(g.try_get(x).unwrap().data(), &[2.0, 2.0, 3.0, 3.0]);
    }
}
