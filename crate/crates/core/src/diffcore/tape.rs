//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! Every node holds a 2-D value. Binary ops broadcast singleton rows and
//! columns the way `ndarray` does, and the backward pass folds the adjoint
//! back onto the broadcast operand's shape.

use ndarray::{Array2, Axis};

use crate::error::{structural, Error, Result};

use super::params::ParamVector;

pub type Matrix = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Tanh(NodeId),
    Square(NodeId),
    Softplus(NodeId),
    Sum(NodeId),
    Mean(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::Tanh(_) => "tanh",
            Op::Square(_) => "square",
            Op::Softplus(_) => "softplus",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
        }
    }
}

struct Node {
    op: Op,
    value: Matrix,
    requires_grad: bool,
}

/// Append-only computation record. Parents always precede children.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub fn inverse_softplus(y: f64) -> f64 {
    // ln(e^y - 1), written to stay accurate for large y
    y + (-(-y).exp_m1()).ln()
}

fn broadcast_shape(a: &Matrix, b: &Matrix) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (dim(a.nrows(), b.nrows()), dim(a.ncols(), b.ncols())) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(structural(format!(
            "cannot broadcast {:?} with {:?}",
            a.dim(),
            b.dim()
        ))),
    }
}

/// Sum `g` down to `shape`, undoing broadcasting.
fn reduce_to(g: Matrix, shape: (usize, usize)) -> Matrix {
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    /// Value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[[0, 0]]
    }

    pub fn op(&self, id: NodeId) -> Op {
        self.nodes[id.0].op
    }

    fn push(&mut self, op: Op, value: Matrix, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn scalar_const(&mut self, c: f64) -> NodeId {
        self.constant(Array2::from_elem((1, 1), c))
    }

    /// Registers every segment of `params` as a differentiable leaf.
    pub fn bind(&mut self, params: &ParamVector) -> ParamBinding {
        let nodes = params
            .unpack()
            .into_iter()
            .map(|m| self.param(m))
            .collect();
        ParamBinding {
            nodes,
            len: params.len(),
        }
    }

    /// Registers every segment of `params` as a constant leaf.
    pub fn bind_const(&mut self, params: &ParamVector) -> ParamBinding {
        let nodes = params
            .unpack()
            .into_iter()
            .map(|m| self.constant(m))
            .collect();
        ParamBinding {
            nodes,
            len: params.len(),
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        broadcast_shape(va, vb)?;
        let v = va + vb;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), v, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        broadcast_shape(va, vb)?;
        let v = va * vb;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), v, rg))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(structural(format!(
                "matmul shape mismatch {:?} x {:?}",
                va.dim(),
                vb.dim()
            )));
        }
        let v = va.dot(vb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), v, rg))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::tanh);
        let rg = self.rg(a);
        self.push(Op::Tanh(a), v, rg)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x * x);
        let rg = self.rg(a);
        self.push(Op::Square(a), v, rg)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(softplus);
        let rg = self.rg(a);
        self.push(Op::Softplus(a), v, rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(Op::Sum(a), v, rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let v = Array2::from_elem((1, 1), va.sum() / va.len() as f64);
        let rg = self.rg(a);
        self.push(Op::Mean(a), v, rg)
    }

    // Composites built from the primitives above.

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let k = self.scalar_const(c);
        self.mul(a, k).expect("scalar broadcast")
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let k = self.scalar_const(c);
        self.add(a, k).expect("scalar broadcast")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Logistic function via `(1 + tanh(x/2)) / 2`.
    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let half = self.scale(a, 0.5);
        let t = self.tanh(half);
        let t = self.scale(t, 0.5);
        self.add_scalar(t, 0.5)
    }

    /// Column `j` of `a` as an `(n, 1)` node, by right-multiplying a one-hot vector.
    pub fn column(&mut self, a: NodeId, j: usize) -> Result<NodeId> {
        let cols = self.value(a).ncols();
        if j >= cols {
            return Err(structural(format!("column {j} out of range for {cols} columns")));
        }
        if cols == 1 {
            return Ok(a);
        }
        let mut sel = Array2::zeros((cols, 1));
        sel[[j, 0]] = 1.0;
        let s = self.constant(sel);
        self.matmul(a, s)
    }

    /// Checks forward values up to and including `root`.
    fn check_finite(&self, root: NodeId) -> Result<()> {
        for (i, n) in self.nodes[..=root.0].iter().enumerate() {
            if n.value.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite forward value at node {i} ({})",
                    n.op.name()
                )));
            }
        }
        Ok(())
    }

    /// Backward pass from a 1x1 root.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let shape = self.value(root).dim();
        if shape != (1, 1) {
            return Err(structural(format!(
                "backward root must be scalar, got shape {shape:?}"
            )));
        }
        self.backward_seeded(root, Array2::from_elem((1, 1), 1.0))
    }

    /// Backward pass with an explicit adjoint seed for `root`.
    pub fn backward_seeded(&self, root: NodeId, seed: Matrix) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(structural("root node not on this tape"));
        }
        if seed.dim() != self.value(root).dim() {
            return Err(structural("seed shape does not match root"));
        }
        self.check_finite(root)?;
        let mut adj: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        adj[root.0] = Some(seed);

        fn acc(adj: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
            match &mut adj[id.0] {
                Some(a) => *a += &g,
                slot => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = adj[i].take() else { continue };
            match node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => match (self.rg(a), self.rg(b)) {
                    (true, true) => {
                        acc(&mut adj, a, reduce_to(g.clone(), self.value(a).dim()));
                        acc(&mut adj, b, reduce_to(g, self.value(b).dim()));
                    }
                    (true, false) => acc(&mut adj, a, reduce_to(g, self.value(a).dim())),
                    (false, true) => acc(&mut adj, b, reduce_to(g, self.value(b).dim())),
                    (false, false) => {}
                },
                Op::Mul(a, b) => {
                    if self.rg(a) {
                        let ga = &g * self.value(b);
                        acc(&mut adj, a, reduce_to(ga, self.value(a).dim()));
                    }
                    if self.rg(b) {
                        let gb = &g * self.value(a);
                        acc(&mut adj, b, reduce_to(gb, self.value(b).dim()));
                    }
                }
                Op::MatMul(a, b) => {
                    if self.rg(a) {
                        acc(&mut adj, a, g.dot(&self.value(b).t()));
                    }
                    if self.rg(b) {
                        acc(&mut adj, b, self.value(a).t().dot(&g));
                    }
                }
                Op::Tanh(a) => {
                    ndarray::Zip::from(&mut g)
                        .and(&node.value)
                        .for_each(|gv, &y| *gv *= 1.0 - y * y);
                    acc(&mut adj, a, g);
                }
                Op::Square(a) => {
                    ndarray::Zip::from(&mut g)
                        .and(self.value(a))
                        .for_each(|gv, &x| *gv *= 2.0 * x);
                    acc(&mut adj, a, g);
                }
                Op::Softplus(a) => {
                    ndarray::Zip::from(&mut g)
                        .and(self.value(a))
                        .for_each(|gv, &x| *gv *= sigmoid(x));
                    acc(&mut adj, a, g);
                }
                Op::Sum(a) => {
                    let ga = Array2::from_elem(self.value(a).dim(), g[[0, 0]]);
                    acc(&mut adj, a, ga);
                }
                Op::Mean(a) => {
                    let va = self.value(a);
                    let ga = Array2::from_elem(va.dim(), g[[0, 0]] / va.len() as f64);
                    acc(&mut adj, a, ga);
                }
            }
        }
        Ok(Gradients { adjoints: adj })
    }
}

/// Adjoints of the differentiable leaves after one backward pass. Leaves off
/// the path to the root have none.
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.adjoints.get(id.0).and_then(Option::as_ref)
    }
}

/// Leaf nodes holding the segments of one [`ParamVector`].
#[derive(Clone, Debug)]
pub struct ParamBinding {
    pub nodes: Vec<NodeId>,
    len: usize,
}

impl ParamBinding {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Gradient of a scalar root with respect to every parameter in `binding`.
pub fn reverse_grad(tape: &Tape, root: NodeId, params: &ParamVector, binding: &ParamBinding) -> Result<ParamVector> {
    let grads = tape.backward(root)?;
    let mut flat = Vec::with_capacity(binding.len());
    flat_grad(tape, &grads, binding, &mut flat);
    Ok(params.with_data(flat))
}

/// Appends the gradient for `binding` to `out`, writing zeros for leaves the root never reached.
pub fn flat_grad(tape: &Tape, grads: &Gradients, binding: &ParamBinding, out: &mut Vec<f64>) {
    for &id in &binding.nodes {
        match grads.get(id) {
            Some(g) => out.extend(g.iter().copied()),
            None => out.extend(std::iter::repeat(0.0).take(tape.value(id).len())),
        }
    }
}

/// Jacobian of several scalar outputs with respect to the concatenated bindings.
pub fn jacobian_rows(tape: &Tape, outputs: &[NodeId], bindings: &[&ParamBinding]) -> Result<Matrix> {
    let cols: usize = bindings.iter().map(|b| b.len()).sum();
    let mut j = Array2::zeros((outputs.len(), cols));
    let mut row = Vec::with_capacity(cols);
    for (i, &out) in outputs.iter().enumerate() {
        let grads = tape.backward(out)?;
        row.clear();
        for b in bindings {
            flat_grad(tape, &grads, b, &mut row);
        }
        j.row_mut(i).assign(&ndarray::ArrayView1::from(&row[..]));
    }
    Ok(j)
}
