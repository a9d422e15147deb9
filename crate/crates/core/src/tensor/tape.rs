use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    /// rhs is a single row repeated over every row of lhs
    Row,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, T),
    LeakyRelu(Var, T),
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    Exp(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Concat(Vec<Var>, usize),
    GatherRows(Var, Vec<usize>),
    StopGradient,
    StraightThrough(Var),
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Single-use record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar loss with respect to every gradient-tracking leaf.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn width(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar(&self, v: Var) -> T {
        self.node(v).value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Records a copy of `t`; tracks gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(
            t.shape().to_vec(),
            t.values().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<T>) -> Var {
        assert_eq!(numel(&shape), values.len(), "constant shape mismatch");
        self.push(shape, values, Op::Constant, false)
    }

    pub fn constant_tensor(&mut self, t: &Tensor<T>) -> Var {
        self.constant(t.shape().to_vec(), t.values().to_vec())
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(Bcast::Same);
        }
        let row_like = match sb.len() {
            1 => true,
            2 => sb[0] == 1,
            _ => false,
        };
        if sa.len() == 2 && row_like && numel(sb) == sa[1] {
            return Ok(Bcast::Row);
        }
        Err(self.shape_err(op, a, b))
    }

    fn binary(&mut self, a: Var, b: Var, mode: Bcast, f: impl Fn(T, T) -> T) -> Vec<T> {
        let (va, vb) = (self.value(a), self.value(b));
        match mode {
            Bcast::Same => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Row => {
                let w = vb.len();
                va.iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, vb[i % w]))
                    .collect()
            }
        }
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push(shape, value, op, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.shape_err("matmul", a, b));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a),
            k as isize,
            1,
            self.value(b),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    /// Elementwise sum; `b` may also be a single row broadcast over `a`'s rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mode = self.bcast("add", a, b)?;
        let v = self.binary(a, b, mode, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Add(a, b, mode), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let mode = self.bcast("sub", a, b)?;
        let v = self.binary(a, b, mode, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Sub(a, b, mode), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let mode = self.bcast("mul", a, b)?;
        let v = self.binary(a, b, mode, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Mul(a, b, mode), ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > T::zero() { x } else { x * slope })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), T::tanh)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), T::ln)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), T::exp)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let w = width(self.shape(a));
        let value = softmax_rows(self.value(a), w);
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push(shape, value, Op::Softmax(a), ng)
    }

    /// Numerically stable log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let w = width(self.shape(a));
        let mut value = self.value(a).to_vec();
        for row in value.chunks_mut(w.max(1)) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).fold(T::zero(), |s, e| s + e).ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push(shape, value, Op::LogSoftmax(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().fold(T::zero(), |s, &x| s + x);
        let ng = self.ng(a);
        self.push(vec![], vec![s], Op::Sum(a), ng)
    }

    /// Mean of all elements; the mean of an empty tensor is 0.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.value(a).iter().fold(T::zero(), |s, &x| s + x);
        let m = if n == 0 { T::zero() } else { s / T::from_usize(n).unwrap() };
        let ng = self.ng(a);
        self.push(vec![], vec![m], Op::Mean(a), ng)
    }

    /// Sum over the last axis, keeping it with size 1.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let w = width(self.shape(a)).max(1);
        let value: Vec<T> = self
            .value(a)
            .chunks(w)
            .map(|r| r.iter().fold(T::zero(), |s, &x| s + x))
            .collect();
        let mut shape = self.shape(a).to_vec();
        if let Some(last) = shape.last_mut() {
            *last = 1;
        } else {
            shape = vec![1];
        }
        let ng = self.ng(a);
        self.push(shape, value, Op::SumLast(a), ng)
    }

    /// Concatenates rank-2 tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        if axis > 1 {
            return Err(Error::invalid(format!("concat axis {axis} on rank-2 tensors")));
        }
        for &p in parts {
            let (s0, sp) = (self.shape(first), self.shape(p));
            if s0.len() != 2 || sp.len() != 2 || s0[1 - axis] != sp[1 - axis] {
                return Err(self.shape_err("concat", first, p));
            }
        }
        let other = self.shape(first)[1 - axis];
        let total: usize = parts.iter().map(|&p| self.shape(p)[axis]).sum();
        let (shape, value) = if axis == 0 {
            let mut v = Vec::with_capacity(total * other);
            for &p in parts {
                v.extend_from_slice(self.value(p));
            }
            (vec![total, other], v)
        } else {
            let mut v = Vec::with_capacity(total * other);
            for r in 0..other {
                for &p in parts {
                    let w = self.shape(p)[1];
                    v.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
                }
            }
            (vec![other, total], v)
        };
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(shape, value, Op::Concat(parts.to_vec(), axis), ng))
    }

    /// Selects rows (first-axis slices) by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.is_empty() {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: sa,
                rhs: vec![idx.len()],
            });
        }
        let rows = sa[0];
        let w = numel(&sa) / rows.max(1);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: sa,
                rhs: vec![bad],
            });
        }
        let mut value = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            value.extend_from_slice(&self.value(a)[i * w..(i + 1) * w]);
        }
        let mut shape = sa;
        shape[0] = idx.len();
        let ng = self.ng(a);
        Ok(self.push(shape, value, Op::GatherRows(a, idx.to_vec()), ng))
    }

    /// Keeps the rows whose mask entry is true.
    pub fn masked_select(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let rows = self.shape(a).first().copied().unwrap_or(0);
        if mask.len() != rows {
            return Err(Error::Shape {
                op: "masked_select",
                lhs: self.shape(a).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let idx: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect();
        self.gather_rows(a, &idx)
    }

    /// Identity forward; blocks every gradient into `a`.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let (shape, value) = (self.shape(a).to_vec(), self.value(a).to_vec());
        self.push(shape, value, Op::StopGradient, false)
    }

    /// Forward value of `forward`, backward routed entirely to `source`.
    pub fn straight_through(&mut self, forward: Var, source: Var) -> Result<Var> {
        if self.shape(forward) != self.shape(source) {
            return Err(self.shape_err("straight_through", forward, source));
        }
        let (shape, value) = (self.shape(forward).to_vec(), self.value(forward).to_vec());
        let ng = self.ng(source);
        Ok(self.push(shape, value, Op::StraightThrough(source), ng))
    }

    /// Reverse sweep from a scalar `loss`; consumes the recorded nodes.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if numel(self.shape(loss)) != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let nodes = std::mem::take(&mut self.nodes);
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            propagate(&nodes, node, &g, &mut grads);
        }
        for (g, n) in grads.iter_mut().zip(&nodes) {
            if !(matches!(n.op, Op::Leaf) && n.needs_grad) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn softmax_rows<T: Scalar>(x: &[T], w: usize) -> Vec<T> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(w.max(1)) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var, contrib: Vec<T>) {
    if !nodes[v.0].needs_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(b, &c)| *b += c),
        slot => *slot = Some(contrib),
    }
}

/// Reduces a full-size gradient back onto a broadcast row operand.
fn reduce_rows<T: Scalar>(g: &[T], w: usize) -> Vec<T> {
    let mut out = vec![T::zero(); w];
    for row in g.chunks(w) {
        out.iter_mut().zip(row).for_each(|(o, &x)| *o += x);
    }
    out
}

fn propagate<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |v: Var| -> &[T] { &nodes[v.0].value };
    let ng = |v: Var| nodes[v.0].needs_grad;
    match &node.op {
        Op::Leaf | Op::Constant | Op::StopGradient => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            let n = nodes[b.0].shape[1];
            if ng(*a) {
                // dA = G · Bᵀ
                let mut da = vec![T::zero(); m * k];
                T::gemm(m, n, k, T::one(), g, n as isize, 1, val(*b), 1, n as isize, T::zero(), &mut da, k as isize, 1);
                accumulate(grads, nodes, *a, da);
            }
            if ng(*b) {
                // dB = Aᵀ · G
                let mut db = vec![T::zero(); k * n];
                T::gemm(k, m, n, T::one(), val(*a), 1, k as isize, g, n as isize, 1, T::zero(), &mut db, n as isize, 1);
                accumulate(grads, nodes, *b, db);
            }
        }
        Op::Add(a, b, mode) | Op::Sub(a, b, mode) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
            if ng(*a) {
                accumulate(grads, nodes, *a, g.to_vec());
            }
            if ng(*b) {
                let gb: Vec<T> = match mode {
                    Bcast::Same => g.iter().map(|&x| x * sign).collect(),
                    Bcast::Row => reduce_rows(g, val(*b).len()).into_iter().map(|x| x * sign).collect(),
                };
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Mul(a, b, mode) => {
            let (va, vb) = (val(*a), val(*b));
            let w = vb.len();
            let bat = |i: usize| match mode {
                Bcast::Same => vb[i],
                Bcast::Row => vb[i % w],
            };
            if ng(*a) {
                accumulate(grads, nodes, *a, g.iter().enumerate().map(|(i, &x)| x * bat(i)).collect());
            }
            if ng(*b) {
                let full: Vec<T> = g.iter().zip(va).map(|(&x, &y)| x * y).collect();
                let gb = match mode {
                    Bcast::Same => full,
                    Bcast::Row => reduce_rows(&full, w),
                };
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Scale(a, c) => accumulate(grads, nodes, *a, g.iter().map(|&x| x * *c).collect()),
        Op::LeakyRelu(a, s) => {
            let d = g
                .iter()
                .zip(val(*a))
                .map(|(&x, &z)| if z > T::zero() { x } else { x * *s })
                .collect();
            accumulate(grads, nodes, *a, d);
        }
        Op::Relu(a) => {
            let d = g
                .iter()
                .zip(val(*a))
                .map(|(&x, &z)| if z > T::zero() { x } else { T::zero() })
                .collect();
            accumulate(grads, nodes, *a, d);
        }
        Op::Tanh(a) => {
            let d = g.iter().zip(&node.value).map(|(&x, &y)| x * (T::one() - y * y)).collect();
            accumulate(grads, nodes, *a, d);
        }
        Op::Log(a) => {
            let d = g.iter().zip(val(*a)).map(|(&x, &z)| x / z).collect();
            accumulate(grads, nodes, *a, d);
        }
        Op::Exp(a) => {
            let d = g.iter().zip(&node.value).map(|(&x, &y)| x * y).collect();
            accumulate(grads, nodes, *a, d);
        }
        Op::Square(a) => {
            let two = T::one() + T::one();
            let d = g.iter().zip(val(*a)).map(|(&x, &z)| two * z * x).collect();
            accumulate(grads, nodes, *a, d);
        }
        Op::Softmax(a) => {
            let w = width(&node.shape).max(1);
            let mut d = Vec::with_capacity(g.len());
            for (gr, yr) in g.chunks(w).zip(node.value.chunks(w)) {
                let dot = gr.iter().zip(yr).fold(T::zero(), |s, (&x, &y)| s + x * y);
                d.extend(gr.iter().zip(yr).map(|(&x, &y)| y * (x - dot)));
            }
            accumulate(grads, nodes, *a, d);
        }
        Op::LogSoftmax(a) => {
            let w = width(&node.shape).max(1);
            let mut d = Vec::with_capacity(g.len());
            for (gr, yr) in g.chunks(w).zip(node.value.chunks(w)) {
                let gs = gr.iter().fold(T::zero(), |s, &x| s + x);
                d.extend(gr.iter().zip(yr).map(|(&x, &y)| x - y.exp() * gs));
            }
            accumulate(grads, nodes, *a, d);
        }
        Op::Sum(a) => accumulate(grads, nodes, *a, vec![g[0]; val(*a).len()]),
        Op::Mean(a) => {
            let n = val(*a).len();
            if n > 0 {
                let gi = g[0] / T::from_usize(n).unwrap();
                accumulate(grads, nodes, *a, vec![gi; n]);
            }
        }
        Op::SumLast(a) => {
            let w = width(&nodes[a.0].shape).max(1);
            let d = g.iter().flat_map(|&x| std::iter::repeat_n(x, w)).collect();
            accumulate(grads, nodes, *a, d);
        }
        Op::Concat(parts, axis) => {
            let out_w = node.shape[1];
            let mut offset = 0;
            for &p in parts {
                let sp = &nodes[p.0].shape;
                if *axis == 0 {
                    let len = numel(sp);
                    if ng(p) {
                        accumulate(grads, nodes, p, g[offset..offset + len].to_vec());
                    }
                    offset += len;
                } else {
                    let w = sp[1];
                    if ng(p) {
                        let d = (0..sp[0])
                            .flat_map(|r| g[r * out_w + offset..r * out_w + offset + w].iter().copied())
                            .collect();
                        accumulate(grads, nodes, p, d);
                    }
                    offset += w;
                }
            }
        }
        Op::GatherRows(a, idx) => {
            let sa = &nodes[a.0].shape;
            let w = numel(sa) / sa[0].max(1);
            let mut d = vec![T::zero(); numel(sa)];
            for (r, &i) in idx.iter().enumerate() {
                d[i * w..(i + 1) * w]
                    .iter_mut()
                    .zip(&g[r * w..(r + 1) * w])
                    .for_each(|(o, &x)| *o += x);
            }
            accumulate(grads, nodes, *a, d);
        }
        Op::StraightThrough(src) => accumulate(grads, nodes, *src, g.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_leaf(tape: &mut Tape<f64>, v: &[f64]) -> Var {
        tape.leaf(&Tensor::new(vec![v.len()], v.to_vec()).unwrap().requiring_grad())
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![1, 2], vec![0.0, 0.0]);
        let y = tape.softmax(x);
        assert_eq!(tape.value(y), &[0.5, 0.5]);
    }

    #[test]
    fn matmul_with_ones_gives_row_sums() {
        let mut tape = Tape::<f64>::new();
        // 2x3 identity-padded
        let a = tape.constant(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let b = tape.constant(vec![3, 1], vec![1.0; 3]);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[1.0, 1.0]);
        assert_eq!(tape.shape(c), &[2, 1]);
    }

    #[test]
    fn matmul_shape_mismatch_reports_dims() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]);
        let b = tape.constant(vec![2, 1], vec![0.0; 2]);
        match tape.matmul(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 1]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[1.0, 2.0, 3.0]);
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0]);
        assert!(tape.is_empty(), "tape is cleared by backward");
    }

    #[test]
    fn mean_square_gradient() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[2.0, -2.0]);
        let sq = tape.square(x);
        let m = tape.mean(sq);
        let g = tape.backward(m).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, -2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[1.0, 2.0]);
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn stop_gradient_blocks() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[1.0, 4.0]);
        let s = tape.stop_gradient(x);
        assert_eq!(tape.value(s), tape.value(x));
        let l = tape.sum(s);
        let g = tape.backward(l).unwrap();
        assert!(g.get(x).is_none_or(|g| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn stop_gradient_half_product() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[3.0]);
        let s = tape.stop_gradient(x);
        let p = tape.mul(x, s).unwrap();
        let l = tape.sum(p);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &[3.0]);
    }

    #[test]
    fn straight_through_routes_to_source() {
        let mut tape = Tape::new();
        let q = vec_leaf(&mut tape, &[5.0, -1.0]);
        let z = vec_leaf(&mut tape, &[0.5, 0.25]);
        let st = tape.straight_through(q, z).unwrap();
        assert_eq!(tape.value(st), &[5.0, -1.0]);
        let l = tape.sum(st);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(z).unwrap(), &[1.0, 1.0]);
        assert!(g.get(q).is_none());
    }

    #[test]
    fn straight_through_shape_mismatch() {
        let mut tape = Tape::new();
        let q = vec_leaf(&mut tape, &[5.0, -1.0]);
        let z = vec_leaf(&mut tape, &[0.5]);
        assert!(tape.straight_through(q, z).is_err());
    }

    #[test]
    fn row_broadcast_add_reduces_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::new(vec![3, 2], vec![1.0; 6]).unwrap().requiring_grad());
        let b = vec_leaf(&mut tape, &[0.5, -0.5]);
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c), &[1.5, 0.5, 1.5, 0.5, 1.5, 0.5]);
        let l = tape.sum(c);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(b).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn concat_columns_then_split_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap().requiring_grad());
        let b = tape.leaf(&Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap().requiring_grad());
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let w = tape.constant(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let p = tape.mul(c, w).unwrap();
        let l = tape.sum(p);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(a).unwrap(), &[1.0, 4.0]);
        assert_eq!(g.get(b).unwrap(), &[2.0, 3.0, 5.0, 6.0]);
    }

    #[test]
    fn gather_rows_scatter_adds() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap().requiring_grad());
        let g = tape.gather_rows(a, &[2, 2, 0]).unwrap();
        assert_eq!(tape.value(g), &[3.0, 3.0, 1.0]);
        let l = tape.sum(g);
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[1.0, 0.0, 2.0]);
    }

    #[test]
    fn masked_select_keeps_true_rows() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let s = tape.masked_select(a, &[true, false, true]).unwrap();
        assert_eq!(tape.value(s), &[1.0, 2.0, 5.0, 6.0]);
        assert!(tape.masked_select(a, &[true]).is_err());
    }
}
