use std::collections::BTreeMap;
use std::rc::Rc;

use super::{numel, ParamId, ParamStore, Scalar, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Sample {
    Value,
    Deriv(usize),
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Sigmoid(Var),
    Softplus(Var),
    Gelu(Var),
    GeluPrime(Var),
    ClampMin(Var, T),
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Expand(Var),
    SumAll(Var),
    SumAxis(Var, usize),
    MaxAxis(Var, Vec<usize>),
    Softmax(Var),
    LayerNorm(Var, Vec<T>),
    RowWhere(Rc<[bool]>, Var, Var),
    ScatterRows(Var, Rc<[usize]>),
    CumsumExclusive(Var),
    Triplane(Var, Rc<[T]>, Sample),
    SdfDensity(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of operations for one forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    leaves: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: BTreeMap<ParamId, Var>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf; `None` when the leaf did not influence the output.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.leaves.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        match self.get(v) {
            Some(g) => Tensor::from_vec(&self.shapes[v.0], g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(&id).and_then(|&v| self.get(v))
    }
}

const GELU_A: f64 = 0.044715;

fn gelu_parts<T: Scalar>(x: T) -> (T, T, T, T) {
    // returns (tanh(u), u', u'', c) for u = c (x + a x^3)
    let c = T::c((2.0 / std::f64::consts::PI).sqrt());
    let a = T::c(GELU_A);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::c(3.0) * a * x * x);
    let ddu = c * T::c(6.0) * a * x;
    (t, du, ddu, c)
}

fn gelu<T: Scalar>(x: T) -> T {
    let (t, _, _, _) = gelu_parts(x);
    T::c(0.5) * x * (T::one() + t)
}

fn gelu_prime<T: Scalar>(x: T) -> T {
    let (t, du, _, _) = gelu_parts(x);
    let half = T::c(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

fn gelu_second<T: Scalar>(x: T) -> T {
    let (t, du, ddu, _) = gelu_parts(x);
    (T::one() - t * t) * (du + T::c(0.5) * x * (ddu - T::c(2.0) * t * du * du))
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    if x > T::c(30.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Maps every output offset to a source offset given per-output-axis source strides.
fn gather_offsets(out_shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let n = numel(out_shape);
    let mut offsets = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        offsets.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    offsets
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

/// Per (point, plane) corner indices into one plane and their weights.
fn triplane_corners<T: Scalar>(
    points: &[T],
    res: usize,
    mode: Sample,
) -> Vec<[(usize, T); 4]> {
    let n = points.len() / 3;
    let scale = T::c((res - 1) as f64 / 2.0);
    let mut out = Vec::with_capacity(n * 3);
    // (col axis, row axis) per plane: xy, yz, xz
    const AXES: [(usize, usize); 3] = [(0, 1), (1, 2), (0, 2)];
    for p in 0..n {
        for &(col_ax, row_ax) in AXES.iter() {
            let setup = |u: T| {
                let inside = u >= -T::one() && u <= T::one();
                let u = u.max(-T::one()).min(T::one());
                let f = (u + T::one()) * scale;
                let i0 = f.floor().to_usize().unwrap_or(0).min(res - 2);
                (i0, f - T::c(i0 as f64), inside)
            };
            let (c0, wc, in_c) = setup(points[3 * p + col_ax]);
            let (r0, wr, in_r) = setup(points[3 * p + row_ax]);
            let one = T::one();
            let idx = [
                r0 * res + c0,
                r0 * res + c0 + 1,
                (r0 + 1) * res + c0,
                (r0 + 1) * res + c0 + 1,
            ];
            let w = match mode {
                Sample::Value => [
                    (one - wr) * (one - wc),
                    (one - wr) * wc,
                    wr * (one - wc),
                    wr * wc,
                ],
                Sample::Deriv(axis) if axis == col_ax => {
                    let s = if in_c { scale } else { T::zero() };
                    [-(one - wr) * s, (one - wr) * s, -wr * s, wr * s]
                }
                Sample::Deriv(axis) if axis == row_ax => {
                    let s = if in_r { scale } else { T::zero() };
                    [-(one - wc) * s, -wc * s, (one - wc) * s, wc * s]
                }
                Sample::Deriv(_) => [T::zero(); 4],
            };
            out.push([(idx[0], w[0]), (idx[1], w[1]), (idx[2], w[2]), (idx[3], w[3])]);
        }
    }
    out
}

/// Callback handing a mutable gradient buffer for a variable to a writer.
type GradSink<'a, T> = dyn FnMut(Var, &mut dyn FnMut(&mut [T])) + 'a;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable leaf.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf bound to a stored parameter; repeated calls with the same id share one leaf.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.input(store.get(id).clone());
        self.params.insert(id, v);
        v
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    // ---- elementwise binary (rhs may broadcast over leading dimensions) ----

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(sb, sa) {
            return Err(Error::shape(name, sa, sb));
        }
        let (da, db) = (self.data(a), self.data(b));
        let nb = db.len().max(1);
        Ok(da
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, db[i % nb]))
            .collect())
    }

    fn finish_binary(&mut self, a: Var, b: Var, data: Vec<T>, op: Op<T>) -> Var {
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_vec(&shape, data).expect("shape"), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.finish_binary(a, b, d, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.finish_binary(a, b, d, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.finish_binary(a, b, d, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.finish_binary(a, b, d, Op::Div(a, b)))
    }

    // ---- elementwise unary ----

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_vec(&shape, data).expect("shape"), op, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    /// `c - a`
    pub fn rsub_scalar(&mut self, c: T, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, c)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("same shape")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.sqrt(), Op::Sqrt(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    /// Derivative of [`Graph::gelu`], itself differentiable.
    pub fn gelu_prime(&mut self, a: Var) -> Var {
        self.unary(a, gelu_prime, Op::GeluPrime(a))
    }

    pub fn clamp_min(&mut self, a: Var, lo: T) -> Var {
        self.unary(a, |x| x.max(lo), Op::ClampMin(a, lo))
    }

    // ---- linear algebra ----

    /// `[.., m, k] x [k, n]` or batched `[.., m, k] x [.., k, n]` with equal leading dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let batch: usize = numel(&sa[..sa.len() - 2]);
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        let (da, db) = (self.data(a), self.data(b));
        if sb.len() == 2 {
            T::gemm(
                batch * m,
                k,
                n,
                T::one(),
                da,
                k as isize,
                1,
                db,
                n as isize,
                1,
                T::zero(),
                &mut out,
                n as isize,
                1,
            );
        } else {
            if sb[..sb.len() - 2] != sa[..sa.len() - 2] {
                return Err(Error::shape("matmul", &sa, &sb));
            }
            for bi in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &da[bi * m * k..(bi + 1) * m * k],
                    k as isize,
                    1,
                    &db[bi * k * n..(bi + 1) * k * n],
                    n as isize,
                    1,
                    T::zero(),
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    n as isize,
                    1,
                );
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_vec(&out_shape, out)?, Op::MatMul(a, b), rg))
    }

    // ---- shape manipulation ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if axes.len() != sa.len() || axes.iter().any(|&x| x >= sa.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::shape("permute", &sa, axes));
        }
        let st = strides(&sa);
        let out_shape: Vec<usize> = axes.iter().map(|&x| sa[x]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&x| st[x]).collect();
        let offs = gather_offsets(&out_shape, &src_strides);
        let da = self.data(a);
        let data = offs.iter().map(|&o| da[o]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_vec(&out_shape, data)?, Op::Permute(a, axes.to_vec()), rg))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::shape("transpose", self.shape(a), &[2]));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.data(p)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(Tensor::from_vec(&shape, data)?, Op::Concat(parts.to_vec(), axis), rg))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || start >= end || end > sa[axis] {
            return Err(Error::shape("slice", &sa, &[axis, start, end]));
        }
        let (outer, len, inner) = split_axis(&sa, axis);
        let da = self.data(a);
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            data.extend_from_slice(&da[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut shape = sa;
        shape[axis] = end - start;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_vec(&shape, data)?, Op::Slice(a, axis, start), rg))
    }

    /// Repeat size-1 axes to `shape` (same rank).
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != shape.len() || sa.iter().zip(shape).any(|(&x, &y)| x != y && x != 1) {
            return Err(Error::shape("expand", &sa, shape));
        }
        let st = strides(&sa);
        let src: Vec<usize> = (0..sa.len()).map(|i| if sa[i] == 1 { 0 } else { st[i] }).collect();
        let offs = gather_offsets(shape, &src);
        let da = self.data(a);
        let data = offs.iter().map(|&o| da[o]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_vec(shape, data)?, Op::Expand(a), rg))
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.data(a).iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::c(self.value(a).len().max(1) as f64);
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(Error::shape("sum_axis", &sa, &[axis]));
        }
        let (outer, len, inner) = split_axis(&sa, axis);
        let da = self.data(a);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &da[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += v;
                }
            }
        }
        let mut shape = sa;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::SumAxis(a, axis), rg))
    }

    /// Max over `axis`, removing it; the gradient flows to the first maximiser.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || sa[axis] == 0 {
            return Err(Error::shape("max_axis", &sa, &[axis]));
        }
        let (outer, len, inner) = split_axis(&sa, axis);
        let da = self.data(a);
        let mut out = vec![T::neg_infinity(); outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    let src = (o * len + l) * inner + i;
                    let dst = o * inner + i;
                    if da[src] > out[dst] {
                        out[dst] = da[src];
                        arg[dst] = src;
                    }
                }
            }
        }
        let mut shape = sa;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::MaxAxis(a, arg), rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = *t.shape().last().unwrap_or(&1);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_vec(&shape, data).expect("shape"), Op::Softmax(a), rg)
    }

    /// Normalise the last axis to zero mean and unit (biased) variance.
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Var {
        let t = self.value(a);
        let n = *t.shape().last().unwrap_or(&1);
        let mut data = t.data().to_vec();
        let mut rstds = Vec::with_capacity(data.len() / n.max(1));
        let nf = T::c(n as f64);
        for row in data.chunks_mut(n.max(1)) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rstd = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * rstd;
            }
            rstds.push(rstd);
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_vec(&shape, data).expect("shape"), Op::LayerNorm(a, rstds), rg)
    }

    // ---- indexing ----

    /// Rows of `a` (`[n, d]`) where `mask` is set are replaced by `row` (`[d]`).
    pub fn row_where(&mut self, mask: &[bool], a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a).to_vec(), self.shape(row).to_vec());
        if sa.len() != 2 || sr != [sa[1]] || mask.len() != sa[0] {
            return Err(Error::shape("row_where", &sa, &[mask.len(), sr[0]]));
        }
        let d = sa[1];
        let mut data = self.data(a).to_vec();
        let dr = self.data(row).to_vec();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                data[i * d..(i + 1) * d].copy_from_slice(&dr);
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(Tensor::from_vec(&sa, data)?, Op::RowWhere(mask.into(), a, row), rg))
    }

    /// Place the rows of `a` at `indices` of a zero tensor with `total` rows.
    pub fn scatter_rows(&mut self, a: Var, indices: &[usize], total: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.is_empty() || sa[0] != indices.len() || indices.iter().any(|&i| i >= total) {
            return Err(Error::shape("scatter_rows", &sa, &[indices.len(), total]));
        }
        let row = numel(&sa[1..]);
        let mut data = vec![T::zero(); total * row];
        let da = self.data(a);
        for (k, &i) in indices.iter().enumerate() {
            data[i * row..(i + 1) * row].copy_from_slice(&da[k * row..(k + 1) * row]);
        }
        let mut shape = sa;
        shape[0] = total;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_vec(&shape, data)?, Op::ScatterRows(a, indices.into()), rg))
    }

    /// Exclusive prefix sum over the last axis.
    pub fn cumsum_exclusive(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = *t.shape().last().unwrap_or(&1);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            let mut acc = T::zero();
            for v in row.iter_mut() {
                let x = *v;
                *v = acc;
                acc += x;
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_vec(&shape, data).expect("shape"), Op::CumsumExclusive(a), rg)
    }

    // ---- field-specific fused ops ----

    fn triplane_op(&mut self, planes: Var, points: &[T], mode: Sample) -> Result<Var> {
        let sp = self.shape(planes).to_vec();
        if sp.len() != 4 || sp[0] != 3 || sp[1] != sp[2] || sp[1] < 2 || !points.len().is_multiple_of(3) {
            return Err(Error::shape("triplane_sample", &sp, &[points.len()]));
        }
        let (res, ch) = (sp[1], sp[3]);
        let plane_len = res * res * ch;
        let n = points.len() / 3;
        let corners = triplane_corners(points, res, mode);
        let dp = self.data(planes);
        let mut out = vec![T::zero(); n * 3 * ch];
        for (q, cw) in corners.iter().enumerate() {
            let k = q % 3;
            let dst = &mut out[q * ch..(q + 1) * ch];
            for &(idx, w) in cw {
                if w == T::zero() {
                    continue;
                }
                let src = &dp[k * plane_len + idx * ch..k * plane_len + (idx + 1) * ch];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o += w * v;
                }
            }
        }
        let pts: Rc<[T]> = points.into();
        let rg = self.rg(&[planes]);
        Ok(self.push(Tensor::from_vec(&[n, 3 * ch], out)?, Op::Triplane(planes, pts, mode), rg))
    }

    /// Bilinear lookup of `planes` (`[3, P, P, c]`, order xy, yz, xz) at points in
    /// `[-1, 1]^3` (flat `[n*3]`), concatenating the three features into `[n, 3c]`.
    ///
    /// Plane `xy` is indexed `[row = y][col = x]`, `yz` as `[z][y]`, `xz` as `[z][x]`;
    /// grid node `i` sits at `-1 + 2i/(P-1)`. Out-of-domain points are clamped.
    pub fn triplane_sample(&mut self, planes: Var, points: &[T]) -> Result<Var> {
        self.triplane_op(planes, points, Sample::Value)
    }

    /// Partial derivative of [`Graph::triplane_sample`] with respect to coordinate `axis`.
    pub fn triplane_sample_deriv(&mut self, planes: Var, points: &[T], axis: usize) -> Result<Var> {
        if axis > 2 {
            return Err(Error::invalid(format!("axis {axis} out of range")));
        }
        self.triplane_op(planes, points, Sample::Deriv(axis))
    }

    /// Density `(1/beta) * Psi_beta(-sdf)` with `Psi_beta` the zero-mean Laplace CDF.
    pub fn sdf_density(&mut self, sdf: Var, beta: Var) -> Result<Var> {
        if self.value(beta).len() != 1 {
            return Err(Error::shape("sdf_density", self.shape(sdf), self.shape(beta)));
        }
        let b = self.scalar_value(beta);
        let t = self.value(sdf);
        let data = t.data().iter().map(|&s| laplace_density(s, b)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[sdf, beta]);
        Ok(self.push(Tensor::from_vec(&shape, data)?, Op::SdfDensity(sdf, beta), rg))
    }

    /// Scaled dot-product attention with `heads` heads over `[nq, d]` queries and `[nk, d]` keys/values.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if sq.len() != 2 || sk.len() != 2 || sk != sv || sq[1] != sk[1] || heads == 0 || sq[1] % heads != 0 {
            return Err(Error::shape("attention", &sq, &sk));
        }
        let (nq, nk, d) = (sq[0], sk[0], sq[1]);
        let dh = d / heads;
        let qh = self.reshape(q, &[nq, heads, dh])?;
        let qh = self.permute(qh, &[1, 0, 2])?;
        let kh = self.reshape(k, &[nk, heads, dh])?;
        let kt = self.permute(kh, &[1, 2, 0])?;
        let vh = self.reshape(v, &[nk, heads, dh])?;
        let vh = self.permute(vh, &[1, 0, 2])?;
        let scores = self.matmul(qh, kt)?;
        let scores = self.scale(scores, T::one() / T::c(dh as f64).sqrt());
        let probs = self.softmax(scores);
        let out = self.matmul(probs, vh)?;
        let out = self.permute(out, &[1, 0, 2])?;
        self.reshape(out, &[nq, d])
    }

    // ---- reverse pass ----

    /// Reverse-mode gradients of the scalar `root` with respect to every leaf.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::shape("backward", self.shape(root), &[1]));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        let mut leaves: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves[i] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients {
            leaves,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.params.clone(),
        })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
            f(slot);
        };
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &gi)| *x += gi));
                let nb = self.nodes[b.0].value.len();
                acc(*b, &mut |gb| {
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % nb] += sign * gi;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                let nb = db.len();
                acc(*a, &mut |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] * db[i % nb];
                    }
                });
                acc(*b, &mut |gb| {
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % nb] += gi * da[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let db = self.data(*b);
                let nb = db.len();
                acc(*a, &mut |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] / db[i % nb];
                    }
                });
                acc(*b, &mut |gb| {
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % nb] -= gi * y[i] / db[i % nb];
                    }
                });
            }
            Op::Neg(a) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &gi)| *x -= gi)),
            Op::Scale(a, c) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &gi)| *x += gi * *c)),
            Op::AddScalar(a) | Op::Reshape(a) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &gi)| *x += gi))
            }
            Op::Exp(a) => acc(*a, &mut |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * y[i];
                }
            }),
            Op::Log(a) => {
                let da = self.data(*a);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] / da[i];
                    }
                })
            }
            Op::Sqrt(a) => acc(*a, &mut |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] / (T::c(2.0) * y[i]);
                }
            }),
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * y[i] * (T::one() - y[i]);
                }
            }),
            Op::Softplus(a) => {
                let da = self.data(*a);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * sigmoid(da[i]);
                    }
                })
            }
            Op::Gelu(a) => {
                let da = self.data(*a);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * gelu_prime(da[i]);
                    }
                })
            }
            Op::GeluPrime(a) => {
                let da = self.data(*a);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * gelu_second(da[i]);
                    }
                })
            }
            Op::ClampMin(a, lo) => {
                let da = self.data(*a);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        if da[i] >= *lo {
                            ga[i] += g[i];
                        }
                    }
                })
            }
            Op::MatMul(a, b) => self.backprop_matmul(*a, *b, g, &mut acc),
            Op::Permute(a, axes) => {
                let sa = self.shape(*a);
                let st = strides(sa);
                let out_shape: Vec<usize> = axes.iter().map(|&x| sa[x]).collect();
                let src: Vec<usize> = axes.iter().map(|&x| st[x]).collect();
                let offs = gather_offsets(&out_shape, &src);
                acc(*a, &mut |ga| {
                    for (o, &gi) in offs.iter().zip(g) {
                        ga[*o] += gi;
                    }
                });
            }
            Op::Expand(a) => {
                let sa = self.shape(*a);
                let st = strides(sa);
                let src: Vec<usize> = (0..sa.len()).map(|i| if sa[i] == 1 { 0 } else { st[i] }).collect();
                let offs = gather_offsets(node.value.shape(), &src);
                acc(*a, &mut |ga| {
                    for (o, &gi) in offs.iter().zip(g) {
                        ga[*o] += gi;
                    }
                });
            }
            Op::Concat(parts, axis) => {
                let total = node.value.shape()[*axis];
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    acc(p, &mut |gp| {
                        for o in 0..outer {
                            let src = &g[(o * total + start) * inner..(o * total + start + len) * inner];
                            for (x, &gi) in gp[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                                *x += gi;
                            }
                        }
                    });
                    start += len;
                }
            }
            Op::Slice(a, axis, start) => {
                let sa = self.shape(*a).to_vec();
                let (outer, len, inner) = split_axis(&sa, *axis);
                let w = node.value.shape()[*axis];
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        let dst = &mut ga[(o * len + start) * inner..(o * len + start + w) * inner];
                        for (x, &gi) in dst.iter_mut().zip(&g[o * w * inner..(o + 1) * w * inner]) {
                            *x += gi;
                        }
                    }
                });
            }
            Op::SumAll(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::SumAxis(a, axis) => {
                let (outer, len, inner) = split_axis(self.shape(*a), *axis);
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        for l in 0..len {
                            let dst = &mut ga[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (x, &gi) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *x += gi;
                            }
                        }
                    }
                });
            }
            Op::MaxAxis(a, arg) => acc(*a, &mut |ga| {
                for (&src, &gi) in arg.iter().zip(g) {
                    ga[src] += gi;
                }
            }),
            Op::Softmax(a) => {
                let n = *node.value.shape().last().unwrap_or(&1);
                acc(*a, &mut |ga| {
                    for r in 0..y.len() / n {
                        let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            ga[r * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm(a, rstds) => {
                let n = *node.value.shape().last().unwrap_or(&1);
                let nf = T::c(n as f64);
                acc(*a, &mut |ga| {
                    for (r, &rstd) in rstds.iter().enumerate() {
                        let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        let mg = gr.iter().copied().sum::<T>() / nf;
                        let mgy = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>() / nf;
                        for j in 0..n {
                            ga[r * n + j] += rstd * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                });
            }
            Op::RowWhere(mask, a, row) => {
                let d = *node.value.shape().last().unwrap_or(&1);
                acc(*a, &mut |ga| {
                    for (i, &m) in mask.iter().enumerate() {
                        if !m {
                            for j in 0..d {
                                ga[i * d + j] += g[i * d + j];
                            }
                        }
                    }
                });
                acc(*row, &mut |gr| {
                    for (i, &m) in mask.iter().enumerate() {
                        if m {
                            for j in 0..d {
                                gr[j] += g[i * d + j];
                            }
                        }
                    }
                });
            }
            Op::ScatterRows(a, indices) => {
                let row = numel(&node.value.shape()[1..]);
                acc(*a, &mut |ga| {
                    for (k, &i) in indices.iter().enumerate() {
                        for j in 0..row {
                            ga[k * row + j] += g[i * row + j];
                        }
                    }
                });
            }
            Op::CumsumExclusive(a) => {
                let n = *node.value.shape().last().unwrap_or(&1);
                acc(*a, &mut |ga| {
                    for r in 0..g.len() / n {
                        let mut suffix = T::zero();
                        for j in (0..n).rev() {
                            ga[r * n + j] += suffix;
                            suffix += g[r * n + j];
                        }
                    }
                });
            }
            Op::Triplane(planes, points, mode) => {
                let sp = self.shape(*planes);
                let (res, ch) = (sp[1], sp[3]);
                let plane_len = res * res * ch;
                let corners = triplane_corners(points, res, *mode);
                acc(*planes, &mut |gp| {
                    for (q, cw) in corners.iter().enumerate() {
                        let k = q % 3;
                        let src = &g[q * ch..(q + 1) * ch];
                        for &(idx, w) in cw {
                            if w == T::zero() {
                                continue;
                            }
                            let dst = &mut gp[k * plane_len + idx * ch..k * plane_len + (idx + 1) * ch];
                            for (x, &gi) in dst.iter_mut().zip(src) {
                                *x += w * gi;
                            }
                        }
                    }
                });
            }
            Op::SdfDensity(sdf, beta) => {
                let b = self.scalar_value(*beta);
                let ds = self.data(*sdf);
                acc(*sdf, &mut |gs| {
                    for i in 0..gs.len() {
                        gs[i] += g[i] * laplace_density_dsdf(ds[i], b);
                    }
                });
                acc(*beta, &mut |gb| {
                    let mut total = T::zero();
                    for (i, &s) in ds.iter().enumerate() {
                        total += g[i] * laplace_density_dbeta(s, b);
                    }
                    gb[0] += total;
                });
            }
        }
    }

    fn backprop_matmul(&self, a: Var, b: Var, g: &[T], acc: &mut GradSink<'_, T>) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let batch = numel(&sa[..sa.len() - 2]);
        let (da, db) = (self.data(a), self.data(b));
        let shared = sb.len() == 2;
        // dA = dC * B^T
        acc(a, &mut |ga| {
            for bi in 0..if shared { 1 } else { batch } {
                let rows = if shared { batch * m } else { m };
                let boff = if shared { 0 } else { bi * k * n };
                T::gemm(
                    rows,
                    n,
                    k,
                    T::one(),
                    &g[bi * rows * n..(bi + 1) * rows * n],
                    n as isize,
                    1,
                    &db[boff..boff + k * n],
                    1,
                    n as isize,
                    T::one(),
                    &mut ga[bi * rows * k..(bi + 1) * rows * k],
                    k as isize,
                    1,
                );
            }
        });
        // dB = A^T * dC
        acc(b, &mut |gb| {
            for bi in 0..if shared { 1 } else { batch } {
                let rows = if shared { batch * m } else { m };
                let boff = if shared { 0 } else { bi * k * n };
                T::gemm(
                    k,
                    rows,
                    n,
                    T::one(),
                    &da[bi * rows * k..(bi + 1) * rows * k],
                    1,
                    k as isize,
                    &g[bi * rows * n..(bi + 1) * rows * n],
                    n as isize,
                    1,
                    T::one(),
                    &mut gb[boff..boff + k * n],
                    n as isize,
                    1,
                );
            }
        });
    }
}

pub(crate) fn laplace_density<T: Scalar>(sdf: T, beta: T) -> T {
    let u = -sdf;
    let e = (-u.abs() / beta).exp();
    let half = T::c(0.5);
    let psi = if u <= T::zero() { half * e } else { T::one() - half * e };
    psi / beta
}

fn laplace_density_dsdf<T: Scalar>(sdf: T, beta: T) -> T {
    let e = (-sdf.abs() / beta).exp();
    -e / (T::c(2.0) * beta * beta)
}

fn laplace_density_dbeta<T: Scalar>(sdf: T, beta: T) -> T {
    let u = -sdf;
    let e = (-u.abs() / beta).exp();
    let half = T::c(0.5);
    let psi = if u <= T::zero() { half * e } else { T::one() - half * e };
    -psi / (beta * beta) - u * e / (T::c(2.0) * beta * beta * beta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn softmax_of_equal_entries_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[7], 3.3));
        let y = g.softmax(x);
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 7.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_rows_have_zero_mean_unit_variance() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 4], &[1.0, 2.0, 5.0, -3.0, 0.1, 0.2, 0.3, 0.7]));
        let y = g.layer_norm(x, 1e-12);
        for row in g.value(y).data().chunks(4) {
            let m: f64 = row.iter().sum::<f64>() / 4.0;
            let v: f64 = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn shape_errors_report_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 3]"), "{err}");
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn suffix_broadcast_add() {
        let mut g = Graph::<f64>::new();
        let a = g.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.input(t(&[2], &[10.0, 20.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0, 22.0, 13.0, 24.0]);
        let s = g.sum(c);
        let gr = g.backward(s).unwrap();
        assert_eq!(gr.get(b).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn permute_and_concat_values() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]));
        let p = g.transpose(a).unwrap();
        assert_eq!(g.value(p).data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let c = g.concat(&[a, a], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 6]);
        assert_eq!(g.value(c).data()[3..9], [0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let s = g.slice(c, 1, 2, 4).unwrap();
        assert_eq!(g.value(s).data(), &[2.0, 0.0, 5.0, 3.0]);
    }

    #[test]
    fn gradient_accumulates_across_uses() {
        // d/dx [f(x) + g(x)] equals the sum of the separate gradients
        let x0 = t(&[3], &[0.3, -0.7, 1.1]);
        let grad_of = |which: u8| {
            let mut g = Graph::<f64>::new();
            let x = g.input(x0.clone());
            let f = g.exp(x);
            let h = g.square(x);
            let out = match which {
                0 => g.sum(f),
                1 => g.sum(h),
                _ => {
                    let s = g.add(f, h).unwrap();
                    g.sum(s)
                }
            };
            g.backward(out).unwrap().get(x).unwrap().to_vec()
        };
        let (a, b, c) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..3 {
            assert_eq!(a[i] + b[i], c[i]);
        }
    }

    #[test]
    fn triplane_node_lookup_returns_stored_features() {
        let res = 3;
        let ch = 2;
        let data: Vec<f64> = (0..3 * res * res * ch).map(|v| v as f64).collect();
        let mut g = Graph::<f64>::new();
        let planes = g.constant(Tensor::from_vec(&[3, res, res, ch], data.clone()).unwrap());
        // node (x=1, y=2, z=0) -> coordinates (0, 1, -1)
        let s = g.triplane_sample(planes, &[0.0, 1.0, -1.0]).unwrap();
        let v = g.value(s).data();
        let at = |k: usize, r: usize, c: usize| &data[((k * res + r) * res + c) * ch..][..ch];
        assert_eq!(&v[0..2], at(0, 2, 1)); // xy: row y=2, col x=1
        assert_eq!(&v[2..4], at(1, 0, 2)); // yz: row z=0, col y=2
        assert_eq!(&v[4..6], at(2, 0, 1)); // xz: row z=0, col x=1
    }

    #[test]
    fn density_at_zero_is_half_alpha() {
        let mut g = Graph::<f64>::new();
        let s = g.constant(Tensor::zeros(&[1]));
        let b = g.constant(Tensor::scalar(0.1));
        let d = g.sdf_density(s, b).unwrap();
        assert!((g.scalar_value(d) - 5.0).abs() < 1e-12);
    }
}
