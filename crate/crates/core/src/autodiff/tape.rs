use std::cell::RefCell;

use super::Tensor;
use crate::error::{Error, Result};

/// Elementwise operation kinds. Binary kinds accept equal shapes or a
/// single-element operand on either side.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Square,
    Tanh,
    Silu,
    Relu,
    Scale(f64),
    Negate,
}

impl Elementwise {
    pub fn is_binary(self) -> bool {
        matches!(self, Elementwise::Add | Elementwise::Sub | Elementwise::Mul)
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Square(usize),
    Tanh(usize),
    Silu(usize),
    Relu(usize),
    Scale(usize, f64),
    Sum(usize),
    SumAxis(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    ConcatCols(usize, usize),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run record of a forward computation.
///
/// Nodes are appended in execution order, so every node's inputs precede it
/// and a single reverse sweep visits each node once.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}

/// Gradients of a scalar loss with respect to the differentiable leaves.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for a leaf, `None` when the leaf did not participate.
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Adds the leaf's gradient (if any) into `tensor.grad`.
    pub fn accumulate_into(&self, var: Var<'_>, tensor: &mut Tensor) {
        if let Some(g) = self.get(var) {
            tensor.accumulate_grad(g);
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// `c = op(a) * op(b) + beta * c` for row-major operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    // SAFETY: the strides above address only elements within the asserted
    // lengths of `a`, `b` and `c`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf. Differentiable iff `tensor.requires_grad`.
    pub fn leaf(&self, tensor: &Tensor) -> Var<'_> {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf, tensor.requires_grad)
    }

    /// Records a non-differentiable leaf regardless of `requires_grad`.
    pub fn constant(&self, tensor: &Tensor) -> Var<'_> {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var<'_>> {
        if numel(&shape) != data.len() {
            return Err(Error::Shape {
                op: "constant",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.push(vec![], vec![value], Op::Leaf, false)
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::ForeignVar);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if root.needs_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let g = match node.op {
                Op::Leaf => continue,
                _ => match grads[id].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            backprop(&nodes, node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
        None => *slot = Some(contrib),
    }
}

/// Gradient contribution for a broadcast operand: either elementwise or
/// summed down to a single element.
fn reduce_to(len: usize, contrib: Vec<f64>) -> Vec<f64> {
    if len == contrib.len() {
        contrib
    } else {
        vec![contrib.iter().sum()]
    }
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |id: usize| nodes[id].value.as_slice();
    let needs = |id: usize| nodes[id].needs_grad;
    match node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a].shape[0], nodes[a].shape[1]);
            let n = nodes[b].shape[1];
            if needs(a) {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, false, val(b), true, 0.0, &mut ga);
                add_into(&mut grads[a], ga);
            }
            if needs(b) {
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, val(a), true, g, false, 0.0, &mut gb);
                add_into(&mut grads[b], gb);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (nodes[a].shape[0], nodes[a].shape[1]);
            let mut ga = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    ga[i * c + j] = g[j * r + i];
                }
            }
            add_into(&mut grads[a], ga);
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if needs(a) {
                add_into(&mut grads[a], reduce_to(val(a).len(), g.to_vec()));
            }
            if needs(b) {
                let gb = g.iter().map(|v| sign * v).collect();
                add_into(&mut grads[b], reduce_to(val(b).len(), gb));
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(a), val(b));
            let at = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
            if needs(a) {
                let ga = g.iter().enumerate().map(|(i, gi)| gi * at(vb, i)).collect();
                add_into(&mut grads[a], reduce_to(va.len(), ga));
            }
            if needs(b) {
                let gb = g.iter().enumerate().map(|(i, gi)| gi * at(va, i)).collect();
                add_into(&mut grads[b], reduce_to(vb.len(), gb));
            }
        }
        Op::Square(a) => {
            let ga = g.iter().zip(val(a)).map(|(gi, x)| 2.0 * x * gi).collect();
            add_into(&mut grads[a], ga);
        }
        Op::Tanh(a) => {
            let ga = g
                .iter()
                .zip(&node.value)
                .map(|(gi, y)| gi * (1.0 - y * y))
                .collect();
            add_into(&mut grads[a], ga);
        }
        Op::Silu(a) => {
            let ga = g
                .iter()
                .zip(val(a))
                .map(|(gi, &x)| {
                    let s = sigmoid(x);
                    gi * s * (1.0 + x * (1.0 - s))
                })
                .collect();
            add_into(&mut grads[a], ga);
        }
        Op::Relu(a) => {
            let ga = g
                .iter()
                .zip(val(a))
                .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                .collect();
            add_into(&mut grads[a], ga);
        }
        Op::Scale(a, s) => {
            add_into(&mut grads[a], g.iter().map(|gi| s * gi).collect());
        }
        Op::Sum(a) => {
            add_into(&mut grads[a], vec![g[0]; val(a).len()]);
        }
        Op::SumAxis(a, axis) => {
            let shape = &nodes[a].shape;
            let outer: usize = shape[..axis].iter().product();
            let n = shape[axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let mut ga = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for j in 0..n {
                    let dst = &mut ga[(o * n + j) * inner..(o * n + j + 1) * inner];
                    dst.copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            add_into(&mut grads[a], ga);
        }
        Op::AddRow(a, row) => {
            let n = val(row).len();
            if needs(a) {
                add_into(&mut grads[a], g.to_vec());
            }
            if needs(row) {
                let mut gr = vec![0.0; n];
                for chunk in g.chunks_exact(n) {
                    gr.iter_mut().zip(chunk).for_each(|(r, c)| *r += c);
                }
                add_into(&mut grads[row], gr);
            }
        }
        Op::MulRow(a, row) => {
            let (va, vr) = (val(a), val(row));
            let n = vr.len();
            if needs(a) {
                let ga = g
                    .chunks_exact(n)
                    .flat_map(|chunk| chunk.iter().zip(vr).map(|(gi, r)| gi * r))
                    .collect();
                add_into(&mut grads[a], ga);
            }
            if needs(row) {
                let mut gr = vec![0.0; n];
                for (gc, ac) in g.chunks_exact(n).zip(va.chunks_exact(n)) {
                    for j in 0..n {
                        gr[j] += gc[j] * ac[j];
                    }
                }
                add_into(&mut grads[row], gr);
            }
        }
        Op::ConcatCols(a, b) => {
            let p = nodes[a].shape[1];
            let q = nodes[b].shape[1];
            if needs(a) {
                let ga = g.chunks_exact(p + q).flat_map(|r| r[..p].to_vec()).collect();
                add_into(&mut grads[a], ga);
            }
            if needs(b) {
                let gb = g.chunks_exact(p + q).flat_map(|r| r[p..].to_vec()).collect();
                add_into(&mut grads[b], gb);
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn len(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs(self.id)
    }

    /// Copy of the recorded value.
    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node shape is consistent")
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value[0]
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let (shape, value, needs) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.shape.clone(), n.value.iter().map(|&x| f(x)).collect(), n.needs_grad)
        };
        self.tape.push(shape, value, op, needs)
    }

    fn binary(self, other: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        let (shape, value, needs) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let (la, lb) = (a.value.len(), b.value.len());
            let shape = if a.shape == b.shape || lb == 1 {
                a.shape.clone()
            } else if la == 1 {
                b.shape.clone()
            } else {
                return Err(Error::Shape {
                    op: name,
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            };
            let len = la.max(lb);
            let value = (0..len)
                .map(|i| {
                    let x = if la == 1 { a.value[0] } else { a.value[i] };
                    let y = if lb == 1 { b.value[0] } else { b.value[i] };
                    f(x, y)
                })
                .collect();
            (shape, value, a.needs_grad || b.needs_grad)
        };
        let op = match name {
            "add" => Op::Add(self.id, other.id),
            "sub" => Op::Sub(self.id, other.id),
            _ => Op::Mul(self.id, other.id),
        };
        Ok(self.tape.push(shape, value, op, needs))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |x, y| x + y)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |x, y| x - y)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |x, y| x * y)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square(self.id), |x| x * x)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(self) -> Var<'t> {
        self.unary(Op::Silu(self.id), |x| x * sigmoid(x))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, s), |x| s * x)
    }

    pub fn negate(self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// Dispatches on [`Elementwise`]; `rhs` is required for binary kinds.
    pub fn apply(self, kind: Elementwise, rhs: Option<Var<'t>>) -> Result<Var<'t>> {
        if kind.is_binary() {
            let Some(rhs) = rhs else {
                return Err(Error::Shape {
                    op: "elementwise",
                    lhs: self.shape(),
                    rhs: vec![],
                });
            };
            return match kind {
                Elementwise::Add => self.add(rhs),
                Elementwise::Sub => self.sub(rhs),
                _ => self.mul(rhs),
            };
        }
        Ok(match kind {
            Elementwise::Square => self.square(),
            Elementwise::Tanh => self.tanh(),
            Elementwise::Silu => self.silu(),
            Elementwise::Relu => self.relu(),
            Elementwise::Scale(s) => self.scale(s),
            Elementwise::Negate => self.negate(),
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul => unreachable!(),
        })
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (shape, value, needs) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(Error::Shape {
                    op: "matmul",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, &a.value, false, &b.value, false, 0.0, &mut c);
            (vec![m, n], c, a.needs_grad || b.needs_grad)
        };
        Ok(self.tape.push(shape, value, Op::MatMul(self.id, other.id), needs))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let (shape, value, needs) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            if a.shape.len() != 2 {
                return Err(Error::Shape {
                    op: "transpose",
                    lhs: a.shape.clone(),
                    rhs: vec![],
                });
            }
            let (r, c) = (a.shape[0], a.shape[1]);
            let mut t = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    t[j * r + i] = a.value[i * c + j];
                }
            }
            (vec![c, r], t, a.needs_grad)
        };
        Ok(self.tape.push(shape, value, Op::Transpose(self.id), needs))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Var<'t> {
        let (value, needs) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            (a.value.iter().sum::<f64>(), a.needs_grad)
        };
        self.tape.push(vec![], vec![value], Op::Sum(self.id), needs)
    }

    /// Sum along `axis`, or over everything when `axis` is `None`.
    pub fn reduce_sum(self, axis: Option<usize>) -> Result<Var<'t>> {
        let Some(axis) = axis else {
            return Ok(self.sum());
        };
        let (shape, value, needs) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            if axis >= a.shape.len() {
                return Err(Error::Axis {
                    axis,
                    rank: a.shape.len(),
                });
            }
            let outer: usize = a.shape[..axis].iter().product();
            let n = a.shape[axis];
            let inner: usize = a.shape[axis + 1..].iter().product();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for j in 0..n {
                    let src = &a.value[(o * n + j) * inner..(o * n + j + 1) * inner];
                    out[o * inner..(o + 1) * inner]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, s)| *d += s);
                }
            }
            let mut shape = a.shape.clone();
            shape.remove(axis);
            (shape, out, a.needs_grad)
        };
        Ok(self.tape.push(shape, value, Op::SumAxis(self.id, axis), needs))
    }

    fn row_op(self, row: Var<'t>, name: &'static str) -> Result<Var<'t>> {
        let (shape, value, needs) = {
            let nodes = self.tape.nodes.borrow();
            let (a, r) = (&nodes[self.id], &nodes[row.id]);
            if a.shape.len() != 2 || r.value.len() != a.shape[1] {
                return Err(Error::Shape {
                    op: name,
                    lhs: a.shape.clone(),
                    rhs: r.shape.clone(),
                });
            }
            let n = a.shape[1];
            let value: Vec<f64> = if n == 0 {
                Vec::new()
            } else {
                a.value
                    .chunks_exact(n)
                    .flat_map(|chunk| {
                        chunk.iter().zip(&r.value).map(|(x, y)| {
                            if name == "add_row" {
                                x + y
                            } else {
                                x * y
                            }
                        })
                    })
                    .collect()
            };
            (a.shape.clone(), value, a.needs_grad || r.needs_grad)
        };
        let op = if name == "add_row" {
            Op::AddRow(self.id, row.id)
        } else {
            Op::MulRow(self.id, row.id)
        };
        Ok(self.tape.push(shape, value, op, needs))
    }

    /// `[m×n] + [n]` with the row broadcast over all `m` rows.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.row_op(row, "add_row")
    }

    /// `[m×n] ⊙ [n]` with the row broadcast over all `m` rows.
    pub fn mul_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.row_op(row, "mul_row")
    }

    /// Column-wise concatenation `[m×p] ++ [m×q] -> [m×(p+q)]`.
    pub fn concat_cols(self, other: Var<'t>) -> Result<Var<'t>> {
        let (shape, value, needs) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[0] != b.shape[0] {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let (m, p, q) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut out = Vec::with_capacity(m * (p + q));
            for i in 0..m {
                out.extend_from_slice(&a.value[i * p..(i + 1) * p]);
                out.extend_from_slice(&b.value[i * q..(i + 1) * q]);
            }
            (vec![m, p + q], out, a.needs_grad || b.needs_grad)
        };
        Ok(self.tape.push(shape, value, Op::ConcatCols(self.id, other.id), needs))
    }
}
