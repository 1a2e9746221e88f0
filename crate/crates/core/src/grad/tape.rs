//! Tape-based reverse-mode differentiation over [`Array`] values.
//!
//! A [`Tape`] records every primitive whose inputs include at least one
//! tracked [`Var`]. Values built only from constants never touch the tape,
//! so the same model code serves both differentiable rollouts and plain
//! inference. Nodes are appended in execution order, which is already a
//! topological order; [`Var::backward`] walks it in reverse once.

use std::cell::RefCell;
use std::rc::Rc;

use super::array::{broadcast, Array};
use crate::error::{Error, Result};

/// Recording of one differentiable computation. Cheap to clone (shared).
#[derive(Clone, Default)]
pub struct Tape {
    nodes: Rc<RefCell<Vec<Node>>>,
}

struct Node {
    op: Op,
    len: usize,
}

type Parent = Option<usize>;

enum Op {
    Leaf,
    Add {
        a: Parent,
        b: Parent,
        ia: Option<Rc<Vec<usize>>>,
        ib: Option<Rc<Vec<usize>>>,
    },
    Sub {
        a: Parent,
        b: Parent,
        ia: Option<Rc<Vec<usize>>>,
        ib: Option<Rc<Vec<usize>>>,
    },
    Mul {
        a: Parent,
        b: Parent,
        av: Rc<Array>,
        bv: Rc<Array>,
        ia: Option<Rc<Vec<usize>>>,
        ib: Option<Rc<Vec<usize>>>,
    },
    Div {
        a: Parent,
        b: Parent,
        av: Rc<Array>,
        bv: Rc<Array>,
        ia: Option<Rc<Vec<usize>>>,
        ib: Option<Rc<Vec<usize>>>,
    },
    Maximum {
        a: Parent,
        b: Parent,
        /// true where the lhs value was selected
        pick_a: Rc<Vec<bool>>,
        ia: Option<Rc<Vec<usize>>>,
        ib: Option<Rc<Vec<usize>>>,
    },
    MatMul {
        a: Parent,
        b: Parent,
        av: Rc<Array>,
        bv: Rc<Array>,
        m: usize,
        k: usize,
        n: usize,
    },
    Exp {
        a: usize,
        out: Rc<Array>,
    },
    Ln {
        a: usize,
        av: Rc<Array>,
    },
    LnSupport {
        a: usize,
        av: Rc<Array>,
    },
    Tanh {
        a: usize,
        out: Rc<Array>,
    },
    Scale {
        a: usize,
        c: f64,
    },
    Softmax {
        a: usize,
        out: Rc<Array>,
    },
    LogSoftmax {
        a: usize,
        soft: Rc<Vec<f64>>,
        width: usize,
    },
    Sum {
        a: usize,
    },
    SumLast {
        a: usize,
        width: usize,
    },
    Reshape {
        a: usize,
    },
    Concat {
        parts: Vec<(Parent, usize, usize)>,
    },
    IndexSelect {
        a: usize,
        indices: Rc<Vec<usize>>,
        row: usize,
    },
    SelectLast {
        a: usize,
        indices: Rc<Vec<usize>>,
        width: usize,
    },
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a differentiable leaf.
    pub fn leaf(&self, value: Array) -> Var {
        let len = value.len();
        let id = self.push(Op::Leaf, len);
        Var {
            value: Rc::new(value),
            node: Some(NodeRef { tape: self.clone(), id }),
        }
    }

    /// Number of recorded operations (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, len: usize) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, len });
        nodes.len() - 1
    }

    fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.nodes, &other.nodes)
    }
}

#[derive(Clone)]
struct NodeRef {
    tape: Tape,
    id: usize,
}

/// A value that may participate in a recorded computation.
#[derive(Clone)]
pub struct Var {
    value: Rc<Array>,
    node: Option<NodeRef>,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("value", &self.value)
            .field("tracked", &self.node.is_some())
            .finish()
    }
}

/// Gradients produced by [`Var::backward`].
pub struct Gradients {
    tape: Option<Tape>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to the leaf `var`; zeros for values that are
    /// not leaves of the differentiated tape.
    pub fn get(&self, var: &Var) -> Array {
        let shape = var.value.shape().to_vec();
        if let (Some(node), Some(tape)) = (&var.node, &self.tape) {
            if node.tape.same(tape) {
                if let Some(Some(g)) = self.grads.get(node.id) {
                    return Array::new(shape, g.clone()).expect("gradient shape");
                }
            }
        }
        Array::zeros(&shape)
    }
}

fn join_tape(op: &'static str, vars: &[&Var]) -> Result<Option<Tape>> {
    let mut tape: Option<&Tape> = None;
    for v in vars {
        if let Some(n) = &v.node {
            match tape {
                None => tape = Some(&n.tape),
                Some(t) if t.same(&n.tape) => {}
                Some(_) => {
                    return Err(Error::InvalidArgument(format!(
                        "{op}: operands recorded on different tapes"
                    )))
                }
            }
        }
    }
    Ok(tape.cloned())
}

fn rc_idx(v: Option<Vec<usize>>) -> Option<Rc<Vec<usize>>> {
    v.map(Rc::new)
}

#[inline]
fn at(map: &Option<Rc<Vec<usize>>>, i: usize) -> usize {
    match map {
        Some(m) => m[i],
        None => i,
    }
}

/// Result of a broadcast binary op with the source index of each output
/// element in each operand (`None` when that operand already has the output
/// shape).
type Broadcast = (Array, Option<Vec<usize>>, Option<Vec<usize>>);

impl Var {
    /// Untracked value; operations on constants are never recorded.
    pub fn constant(value: Array) -> Self {
        Self {
            value: Rc::new(value),
            node: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::constant(Array::scalar(value))
    }

    pub fn value(&self) -> &Array {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.value.data()
    }

    pub fn item(&self) -> f64 {
        self.value.item()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var {
        Var {
            value: self.value.clone(),
            node: None,
        }
    }

    fn id(&self) -> Parent {
        self.node.as_ref().map(|n| n.id)
    }

    fn unary(&self, value: Array, op: impl FnOnce(usize) -> Op) -> Var {
        match &self.node {
            None => Var::constant(value),
            Some(n) => {
                let id = n.tape.push(op(n.id), value.len());
                Var {
                    value: Rc::new(value),
                    node: Some(NodeRef {
                        tape: n.tape.clone(),
                        id,
                    }),
                }
            }
        }
    }

    fn record(tape: Option<Tape>, value: Array, op: impl FnOnce() -> Op) -> Var {
        match tape {
            None => Var::constant(value),
            Some(tape) => {
                let id = tape.push(op(), value.len());
                Var {
                    value: Rc::new(value),
                    node: Some(NodeRef { tape, id }),
                }
            }
        }
    }

    fn elementwise(&self, other: &Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Broadcast> {
        let b = broadcast(name, self.shape(), other.shape())?;
        let (x, y) = (self.data(), other.data());
        let len: usize = b.shape.iter().product();
        let data: Vec<f64> = match (&b.lhs, &b.rhs) {
            (None, None) => x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect(),
            _ => (0..len)
                .map(|i| {
                    let pi = b.lhs.as_ref().map_or(i, |m| m[i]);
                    let qi = b.rhs.as_ref().map_or(i, |m| m[i]);
                    f(x[pi], y[qi])
                })
                .collect(),
        };
        Ok((Array::new(b.shape, data)?, b.lhs, b.rhs))
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        let tape = join_tape("add", &[self, other])?;
        let (value, ia, ib) = self.elementwise(other, "add", |a, b| a + b)?;
        Ok(Var::record(tape, value, || Op::Add {
            a: self.id(),
            b: other.id(),
            ia: rc_idx(ia),
            ib: rc_idx(ib),
        }))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        let tape = join_tape("sub", &[self, other])?;
        let (value, ia, ib) = self.elementwise(other, "sub", |a, b| a - b)?;
        Ok(Var::record(tape, value, || Op::Sub {
            a: self.id(),
            b: other.id(),
            ia: rc_idx(ia),
            ib: rc_idx(ib),
        }))
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        let tape = join_tape("mul", &[self, other])?;
        let (value, ia, ib) = self.elementwise(other, "mul", |a, b| a * b)?;
        Ok(Var::record(tape, value, || Op::Mul {
            a: self.id(),
            b: other.id(),
            av: self.value.clone(),
            bv: other.value.clone(),
            ia: rc_idx(ia),
            ib: rc_idx(ib),
        }))
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        let tape = join_tape("div", &[self, other])?;
        let (value, ia, ib) = self.elementwise(other, "div", |a, b| a / b)?;
        Ok(Var::record(tape, value, || Op::Div {
            a: self.id(),
            b: other.id(),
            av: self.value.clone(),
            bv: other.value.clone(),
            ia: rc_idx(ia),
            ib: rc_idx(ib),
        }))
    }

    /// Elementwise maximum; ties route the gradient to `self`.
    pub fn maximum(&self, other: &Var) -> Result<Var> {
        let tape = join_tape("maximum", &[self, other])?;
        let (value, ia, ib) = self.elementwise(other, "maximum", f64::max)?;
        let pick_a: Vec<bool> = (0..value.len())
            .map(|i| {
                let pa = ia.as_ref().map_or(i, |m| m[i]);
                let pb = ib.as_ref().map_or(i, |m| m[i]);
                self.data()[pa] >= other.data()[pb]
            })
            .collect();
        Ok(Var::record(tape, value, || Op::Maximum {
            a: self.id(),
            b: other.id(),
            pick_a: Rc::new(pick_a),
            ia: rc_idx(ia),
            ib: rc_idx(ib),
        }))
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var> {
        self.add(&Var::scalar(c))
    }

    /// 2-D matrix product `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let tape = join_tape("matmul", &[self, other])?;
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(), (k, 1), other.data(), (n, 1), &mut out);
        let value = Array::new(vec![m, n], out)?;
        Ok(Var::record(tape, value, || Op::MatMul {
            a: self.id(),
            b: other.id(),
            av: self.value.clone(),
            bv: other.value.clone(),
            m,
            k,
            n,
        }))
    }

    pub fn exp(&self) -> Var {
        let out = Rc::new(self.value.map(f64::exp));
        let saved = out.clone();
        self.unary_rc(out, |a| Op::Exp { a, out: saved })
    }

    pub fn ln(&self) -> Var {
        let value = self.value.map(f64::ln);
        let av = self.value.clone();
        self.unary(value, |a| Op::Ln { a, av })
    }

    /// Natural log on the support: zero entries map to `-inf` and receive
    /// no gradient. Used for categorical logits with impossible outcomes.
    pub fn ln_support(&self) -> Var {
        let value = self.value.map(|v| if v == 0.0 { f64::NEG_INFINITY } else { v.ln() });
        let av = self.value.clone();
        self.unary(value, |a| Op::LnSupport { a, av })
    }

    pub fn tanh(&self) -> Var {
        let out = Rc::new(self.value.map(f64::tanh));
        let saved = out.clone();
        self.unary_rc(out, |a| Op::Tanh { a, out: saved })
    }

    pub fn scale(&self, c: f64) -> Var {
        let value = self.value.map(|v| v * c);
        self.unary(value, |a| Op::Scale { a, c })
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&self) -> Var {
        let out = Rc::new(softmax_rows(&self.value));
        let saved = out.clone();
        self.unary_rc(out, |a| Op::Softmax { a, out: saved })
    }

    pub fn log_softmax(&self) -> Var {
        let soft = softmax_rows(&self.value);
        let width = self.value.last_dim();
        let mut data = Vec::with_capacity(self.value.len());
        for row in self.value.rows() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|v| v - lse));
        }
        let value = Array::new(self.shape().to_vec(), data).expect("same shape");
        let soft = Rc::new(soft.into_data());
        self.unary(value, |a| Op::LogSoftmax { a, soft, width })
    }

    /// Sum of all entries (scalar).
    pub fn sum(&self) -> Var {
        let value = Array::scalar(self.value.sum());
        self.unary(value, |a| Op::Sum { a })
    }

    pub fn mean(&self) -> Var {
        let n = self.value.len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over the last axis, dropping it.
    pub fn sum_last(&self) -> Var {
        let width = self.value.last_dim();
        let data: Vec<f64> = self.value.rows().map(|r| r.iter().sum()).collect();
        let mut shape = self.shape().to_vec();
        shape.pop();
        let value = Array::new(shape, data).expect("sum_last shape");
        self.unary(value, |a| Op::SumLast { a, width })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let value = (*self.value).clone().reshaped(shape)?;
        Ok(self.unary(value, |a| Op::Reshape { a }))
    }

    /// Concatenates along the first axis; trailing shapes must agree.
    pub fn concat(parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat: no inputs".into()))?;
        let tail = &first.shape()[1.min(first.shape().len())..];
        let mut rows = 0;
        let mut data = Vec::new();
        let mut meta = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            if s.is_empty() || &s[1..] != tail {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
            meta.push((p.id(), data.len(), p.value.len()));
            rows += s[0];
            data.extend_from_slice(p.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(tail);
        let refs: Vec<&Var> = parts.iter().collect();
        let tape = join_tape("concat", &refs)?;
        let value = Array::new(shape, data)?;
        Ok(Var::record(tape, value, || Op::Concat { parts: meta }))
    }

    /// Gathers rows (slices along the first axis).
    pub fn index_select(&self, indices: &[usize]) -> Result<Var> {
        let s = self.shape();
        if s.is_empty() {
            return Err(Error::Shape {
                op: "index_select",
                lhs: s.to_vec(),
                rhs: vec![indices.len()],
            });
        }
        let row: usize = s[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            if i >= s[0] {
                return Err(Error::InvalidArgument(format!(
                    "index_select: index {i} out of range for shape {s:?}"
                )));
            }
            data.extend_from_slice(&self.data()[i * row..(i + 1) * row]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&s[1..]);
        let value = Array::new(shape, data)?;
        let indices = Rc::new(indices.to_vec());
        Ok(self.unary(value, |a| Op::IndexSelect { a, indices, row }))
    }

    /// Gathers columns of the last axis.
    pub fn select_last(&self, indices: &[usize]) -> Result<Var> {
        let width = self.value.last_dim();
        if let Some(&bad) = indices.iter().find(|&&i| i >= width) {
            return Err(Error::InvalidArgument(format!(
                "select_last: index {bad} out of range for width {width}"
            )));
        }
        let mut data = Vec::with_capacity(self.value.len() / width.max(1) * indices.len());
        for r in self.value.rows() {
            data.extend(indices.iter().map(|&i| r[i]));
        }
        let mut shape = self.shape().to_vec();
        if shape.is_empty() {
            shape.push(indices.len());
        } else {
            *shape.last_mut().unwrap() = indices.len();
        }
        let value = Array::new(shape, data)?;
        let indices = Rc::new(indices.to_vec());
        Ok(self.unary(value, |a| Op::SelectLast { a, indices, width }))
    }

    fn unary_rc(&self, out: Rc<Array>, op: impl FnOnce(usize) -> Op) -> Var {
        match &self.node {
            None => Var { value: out, node: None },
            Some(n) => {
                let id = n.tape.push(op(n.id), out.len());
                Var {
                    value: out,
                    node: Some(NodeRef {
                        tape: n.tape.clone(),
                        id,
                    }),
                }
            }
        }
    }

    /// Reverse sweep from a scalar. Untracked scalars yield all-zero
    /// gradients.
    pub fn backward(&self) -> Result<Gradients> {
        if self.value.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        let Some(root) = &self.node else {
            return Ok(Gradients {
                tape: None,
                grads: Vec::new(),
            });
        };
        let nodes = root.tape.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        grads[root.id] = Some(vec![1.0]);
        for id in (0..=root.id).rev() {
            if matches!(nodes[id].op, Op::Leaf) {
                continue;
            }
            // interior gradients are released as soon as they are consumed
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes[id].op, &g, &nodes, &mut grads);
        }
        drop(nodes);
        Ok(Gradients {
            tape: Some(root.tape.clone()),
            grads,
        })
    }
}

fn softmax_rows(a: &Array) -> Array {
    let mut data = Vec::with_capacity(a.len());
    for row in a.rows() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = data.len();
        let mut total = 0.0;
        for &v in row {
            let e = (v - m).exp();
            total += e;
            data.push(e);
        }
        for v in &mut data[start..] {
            *v /= total;
        }
    }
    Array::new(a.shape().to_vec(), data).expect("same shape")
}

/// `out = a (m×k, strides sa) · b (k×n, strides sb)`, overwriting `out`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), out: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    // SAFETY: slices cover the strided extents implied by (m, k, n).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].len]);
    f(slot);
}

fn scatter(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    parent: Parent,
    map: &Option<Rc<Vec<usize>>>,
    g: &[f64],
    f: impl Fn(usize, f64) -> f64,
) {
    if let Some(p) = parent {
        accumulate(grads, nodes, p, |acc| {
            for (i, &gi) in g.iter().enumerate() {
                acc[at(map, i)] += f(i, gi);
            }
        });
    }
}

fn propagate(op: &Op, g: &[f64], nodes: &[Node], grads: &mut [Option<Vec<f64>>]) {
    match op {
        Op::Leaf => {}
        Op::Add { a, b, ia, ib } => {
            scatter(grads, nodes, *a, ia, g, |_, gi| gi);
            scatter(grads, nodes, *b, ib, g, |_, gi| gi);
        }
        Op::Sub { a, b, ia, ib } => {
            scatter(grads, nodes, *a, ia, g, |_, gi| gi);
            scatter(grads, nodes, *b, ib, g, |_, gi| -gi);
        }
        Op::Mul { a, b, av, bv, ia, ib } => {
            let (x, y) = (av.data(), bv.data());
            scatter(grads, nodes, *a, ia, g, |i, gi| gi * y[at(ib, i)]);
            scatter(grads, nodes, *b, ib, g, |i, gi| gi * x[at(ia, i)]);
        }
        Op::Div { a, b, av, bv, ia, ib } => {
            let (x, y) = (av.data(), bv.data());
            scatter(grads, nodes, *a, ia, g, |i, gi| gi / y[at(ib, i)]);
            scatter(grads, nodes, *b, ib, g, |i, gi| {
                let d = y[at(ib, i)];
                -gi * x[at(ia, i)] / (d * d)
            });
        }
        Op::Maximum { a, b, pick_a, ia, ib } => {
            scatter(grads, nodes, *a, ia, g, |i, gi| if pick_a[i] { gi } else { 0.0 });
            scatter(grads, nodes, *b, ib, g, |i, gi| if pick_a[i] { 0.0 } else { gi });
        }
        Op::MatMul { a, b, av, bv, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            if let Some(pa) = a {
                // dA = dC · Bᵀ
                let mut tmp = vec![0.0; m * k];
                gemm(m, n, k, g, (n, 1), bv.data(), (1, n), &mut tmp);
                accumulate(grads, nodes, *pa, |acc| {
                    acc.iter_mut().zip(&tmp).for_each(|(x, y)| *x += y)
                });
            }
            if let Some(pb) = b {
                // dB = Aᵀ · dC
                let mut tmp = vec![0.0; k * n];
                gemm(k, m, n, av.data(), (1, k), g, (n, 1), &mut tmp);
                accumulate(grads, nodes, *pb, |acc| {
                    acc.iter_mut().zip(&tmp).for_each(|(x, y)| *x += y)
                });
            }
        }
        Op::Exp { a, out } => {
            let o = out.data();
            accumulate(grads, nodes, *a, |acc| {
                for i in 0..g.len() {
                    acc[i] += g[i] * o[i];
                }
            });
        }
        Op::Ln { a, av } => {
            let x = av.data();
            accumulate(grads, nodes, *a, |acc| {
                for i in 0..g.len() {
                    acc[i] += g[i] / x[i];
                }
            });
        }
        Op::LnSupport { a, av } => {
            let x = av.data();
            accumulate(grads, nodes, *a, |acc| {
                for i in 0..g.len() {
                    if x[i] != 0.0 {
                        acc[i] += g[i] / x[i];
                    }
                }
            });
        }
        Op::Tanh { a, out } => {
            let o = out.data();
            accumulate(grads, nodes, *a, |acc| {
                for i in 0..g.len() {
                    acc[i] += g[i] * (1.0 - o[i] * o[i]);
                }
            });
        }
        Op::Scale { a, c } => {
            accumulate(grads, nodes, *a, |acc| {
                for i in 0..g.len() {
                    acc[i] += g[i] * c;
                }
            });
        }
        Op::Softmax { a, out } => {
            let w = out.last_dim();
            let o = out.data();
            accumulate(grads, nodes, *a, |acc| {
                for r in 0..g.len() / w {
                    let (gs, os) = (&g[r * w..(r + 1) * w], &o[r * w..(r + 1) * w]);
                    let dot: f64 = gs.iter().zip(os).map(|(x, y)| x * y).sum();
                    for j in 0..w {
                        // zero-probability entries contribute nothing even
                        // when their upstream gradient is infinite
                        if os[j] != 0.0 {
                            acc[r * w + j] += os[j] * (gs[j] - dot);
                        }
                    }
                }
            });
        }
        Op::LogSoftmax { a, soft, width } => {
            let w = *width;
            accumulate(grads, nodes, *a, |acc| {
                for r in 0..g.len() / w {
                    let gs = &g[r * w..(r + 1) * w];
                    let total: f64 = gs.iter().sum();
                    for j in 0..w {
                        acc[r * w + j] += gs[j] - soft[r * w + j] * total;
                    }
                }
            });
        }
        Op::Sum { a } => {
            let g0 = g[0];
            accumulate(grads, nodes, *a, |acc| acc.iter_mut().for_each(|x| *x += g0));
        }
        Op::SumLast { a, width } => {
            accumulate(grads, nodes, *a, |acc| {
                for (i, x) in acc.iter_mut().enumerate() {
                    *x += g[i / width];
                }
            });
        }
        Op::Reshape { a } => {
            accumulate(grads, nodes, *a, |acc| acc.iter_mut().zip(g).for_each(|(x, y)| *x += y));
        }
        Op::Concat { parts } => {
            for &(p, offset, len) in parts {
                if let Some(p) = p {
                    accumulate(grads, nodes, p, |acc| {
                        acc.iter_mut().zip(&g[offset..offset + len]).for_each(|(x, y)| *x += y)
                    });
                }
            }
        }
        Op::IndexSelect { a, indices, row } => {
            accumulate(grads, nodes, *a, |acc| {
                for (j, &src) in indices.iter().enumerate() {
                    for c in 0..*row {
                        acc[src * row + c] += g[j * row + c];
                    }
                }
            });
        }
        Op::SelectLast { a, indices, width } => {
            let k = indices.len();
            accumulate(grads, nodes, *a, |acc| {
                for r in 0..g.len() / k.max(1) {
                    for (j, &src) in indices.iter().enumerate() {
                        acc[r * width + src] += g[r * k + j];
                    }
                }
            });
        }
    }
}
