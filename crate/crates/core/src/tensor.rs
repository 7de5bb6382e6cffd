//! Dense row-major tensors with a reverse-mode tape.
//!
//! A [`Tape`] owns every value computed in one forward pass; [`Var`] is a
//! handle into it. The tape is generic over the element type so the same model
//! code runs in `f32` for training and in `f64` for gradient checks.
//!
//! Broadcasting is limited to the trailing axis (`add_row`, `mul_row`); all
//! other shape changes are explicit.

use std::fmt::Debug;
use std::sync::Arc;

use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar types the tape can run on.
pub trait Element: Float + Debug + Default + Send + Sync + std::iter::Sum + 'static {
    /// `c = alpha · op(a) · op(b) + beta · c` on strided row/column layouts.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], rsa: isize, csa: isize, b: &[Self], rsb: isize, csb: isize, beta: Self, c: &mut [Self], rsc: isize, csc: isize);

    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

macro_rules! impl_element {
    ($t:ty, $gemm:path) => {
        impl Element for $t {
            fn gemm(m: usize, k: usize, n: usize, a: &[Self], rsa: isize, csa: isize, b: &[Self], rsb: isize, csb: isize, beta: Self, c: &mut [Self], rsc: isize, csc: isize) {
                if m == 0 || n == 0 {
                    return;
                }
                let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    if rows == 0 || cols == 0 {
                        0
                    } else {
                        ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
                    }
                };
                assert!(a.len() >= span(m, k, rsa, csa));
                assert!(b.len() >= span(k, n, rsb, csb));
                assert!(c.len() >= span(m, n, rsc, csc));
                // SAFETY: the asserts above bound every strided access inside the slices.
                unsafe {
                    $gemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, csc);
                }
            }

            fn from_f64(v: f64) -> Self {
                v as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_element!(f32, matrixmultiply::sgemm);
impl_element!(f64, matrixmultiply::dgemm);

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index map for [`Tape::gather`]; `None` entries produce zeros.
#[derive(Clone, Debug)]
pub struct GatherIndex {
    src: Vec<u32>,
    pub in_len: usize,
}

impl GatherIndex {
    const ZERO: u32 = u32::MAX;

    pub fn new(in_len: usize, entries: impl IntoIterator<Item = Option<usize>>) -> Self {
        let src = entries.into_iter().map(|e| e.map_or(Self::ZERO, |i| i as u32)).collect();
        GatherIndex { src, in_len }
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool, batch: usize, m: usize, k: usize, n: usize, shared_b: bool },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Exp(Var),
    Log(Var),
    Abs(Var),
    Gelu(Var),
    Softmax(Var),
    MeanAxis(Var, usize),
    VarAxis(Var, usize),
    Normalize { x: Var, rstd: Vec<f64> },
    Gather(Var, Arc<GatherIndex>),
    SumAll(Var),
    MeanAll(Var),
}

struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// Arena of recorded operations. Freed wholesale; never reused across steps.
pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// `(outer, len, inner)` split of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)

fn gelu<T: Element>(x: T) -> T {
    let x = x.as_f64();
    T::from_f64(0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()))
}

fn gelu_grad<T: Element>(x: T) -> T {
    let x = x.as_f64();
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    T::from_f64(0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node { value, shape, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Vec<T>, shape: &[usize]) -> Result<Var> {
        self.leaf(value, shape, true)
    }

    /// Constant leaf; no gradient is tracked.
    pub fn constant(&mut self, value: Vec<T>, shape: &[usize]) -> Result<Var> {
        self.leaf(value, shape, false)
    }

    fn leaf(&mut self, value: Vec<T>, shape: &[usize], requires_grad: bool) -> Result<Var> {
        if value.len() != numel(shape) {
            return Err(Error::shape("leaf", format!("{} values for shape {shape:?}", value.len())));
        }
        Ok(self.push(value, shape.to_vec(), Op::Leaf, requires_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, rec: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, shape, rec, rg))
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T, rec: Op) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(value, shape, rec, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let st = T::from_f64(s);
        self.map(a, |x| x * st, Op::Scale(a, s))
    }

    fn row_check(&self, op: &'static str, x: Var, r: Var) -> Result<usize> {
        let d = *self.shape(x).last().ok_or_else(|| Error::shape(op, "scalar input"))?;
        if self.shape(r) != [d] {
            return Err(Error::shape(op, format!("{:?} against row {:?}", self.shape(x), self.shape(r))));
        }
        Ok(d)
    }

    /// `x[..., d] + b[d]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = self.row_check("add_row", x, b)?;
        let bv = self.value(b);
        let value = self.value(x).iter().enumerate().map(|(i, &v)| v + bv[i % d]).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(value, shape, Op::AddRow(x, b), rg))
    }

    /// `x[..., d] * s[d]`.
    pub fn mul_row(&mut self, x: Var, s: Var) -> Result<Var> {
        let d = self.row_check("mul_row", x, s)?;
        let sv = self.value(s);
        let value = self.value(x).iter().enumerate().map(|(i, &v)| v * sv[i % d]).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(value, shape, Op::MulRow(x, s), rg))
    }

    /// `[m, k] · [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        self.matmul_impl(a, b, false, false, 1, sa[0], sa[1], sb[1], true)
    }

    /// Batched `op(a) · op(b)` over a leading batch axis; `tb` transposes the
    /// trailing two axes of `b`.
    pub fn bmm(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (kb, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if sa[2] != kb {
            return Err(Error::shape("bmm", format!("{sa:?} x {sb:?} (transpose_b = {tb})")));
        }
        self.matmul_impl(a, b, false, tb, sa[0], sa[1], sa[2], n, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn matmul_impl(&mut self, a: Var, b: Var, ta: bool, tb: bool, batch: usize, m: usize, k: usize, n: usize, shared_b: bool) -> Result<Var> {
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            for bi in 0..batch {
                let a_s = &av[bi * m * k..(bi + 1) * m * k];
                let b_s = if shared_b { bv } else { &bv[bi * k * n..(bi + 1) * k * n] };
                let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
                T::gemm(m, k, n, a_s, rsa, csa, b_s, rsb, csb, T::zero(), &mut out[bi * m * n..(bi + 1) * m * n], n as isize, 1);
            }
        }
        let shape = if shared_b && batch == 1 { vec![m, n] } else { vec![batch, m, n] };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, shape, Op::MatMul { a, b, ta, tb, batch, m, k, n, shared_b }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(x)) {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(value, shape.to_vec(), Op::Reshape(x), rg))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{perm:?} on {shape:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let value = permute_values(self.value(x), &shape, perm);
        let rg = self.rg(x);
        Ok(self.push(value, out_shape, Op::Permute(x, perm.to_vec()), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose", format!("{:?}", self.shape(x))));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} on {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                value.extend_from_slice(&self.value(p)[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, shape, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape("slice", format!("[{start}, {}) on axis {axis} of {shape:?}", start + len)));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let xv = self.value(x);
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            value.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(value, out_shape, Op::Slice { x, axis, start }, rg))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map(x, |v| v.ln(), Op::Log(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, gelu, Op::Gelu(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let d = *self.shape(x).last().ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let mut value = self.value(x).to_vec();
        for row in value.chunks_mut(d) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(value, shape, Op::Softmax(x), rg))
    }

    fn reduce_shape(&self, op: &'static str, x: Var, axis: usize) -> Result<(Vec<usize>, (usize, usize, usize))> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape(op, format!("axis {axis} of {shape:?}")));
        }
        let split = split_axis(&shape, axis);
        let mut out = shape;
        out.remove(axis);
        Ok((out, split))
    }

    /// Mean over `axis` (the axis is removed).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (out_shape, (outer, len, inner)) = self.reduce_shape("mean_axis", x, axis)?;
        let xv = self.value(x);
        let inv = T::from_f64(1.0 / len as f64);
        let mut value = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    value[o * inner + i] = value[o * inner + i] + xv[(o * len + l) * inner + i];
                }
            }
        }
        value.iter_mut().for_each(|v| *v = *v * inv);
        let rg = self.rg(x);
        Ok(self.push(value, out_shape, Op::MeanAxis(x, axis), rg))
    }

    /// Population variance over `axis` (the axis is removed).
    pub fn var_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (out_shape, (outer, len, inner)) = self.reduce_shape("var_axis", x, axis)?;
        let xv = self.value(x);
        let inv = 1.0 / len as f64;
        let mut value = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| xv[(o * len + l) * inner + i].as_f64();
                let mean = (0..len).map(at).sum::<f64>() * inv;
                let var = (0..len).map(|l| (at(l) - mean).powi(2)).sum::<f64>() * inv;
                value[o * inner + i] = T::from_f64(var);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(value, out_shape, Op::VarAxis(x, axis), rg))
    }

    /// `(x − μ) / √(σ² + ε)` over the last axis.
    pub fn normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().ok_or_else(|| Error::shape("normalize", "scalar input"))?;
        let xv = self.value(x);
        let mut value = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(xv.len() / d.max(1));
        for row in xv.chunks(d) {
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            value.extend(row.iter().map(|v| T::from_f64((v.as_f64() - mean) * r)));
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(value, shape, Op::Normalize { x, rstd }, rg))
    }

    /// `out[i] = x[index[i]]` (or zero), reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: &Arc<GatherIndex>, shape: &[usize]) -> Result<Var> {
        if index.in_len != numel(self.shape(x)) || index.len() != numel(shape) {
            return Err(Error::shape(
                "gather",
                format!("index {}->{} for input {:?} output {shape:?}", index.in_len, index.len(), self.shape(x)),
            ));
        }
        let xv = self.value(x);
        let value = index.src.iter().map(|&s| if s == GatherIndex::ZERO { T::zero() } else { xv[s as usize] }).collect();
        let rg = self.rg(x);
        Ok(self.push(value, shape.to_vec(), Op::Gather(x, Arc::clone(index)), rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(vec![s], vec![], Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s: T = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(vec![s / T::from_f64(n as f64)], vec![], Op::MeanAll(x), rg)
    }

    /// Populates gradients of every node that depends on a trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.pullback(i, &g);
            self.grads[i] = Some(g);
        }
        // Leaves that are trainable but disconnected from the loss get zeros.
        for i in 0..self.nodes.len() {
            if self.nodes[i].requires_grad && matches!(self.nodes[i].op, Op::Leaf) && self.grads[i].is_none() {
                self.grads[i] = Some(vec![T::zero(); self.nodes[i].value.len()]);
            }
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let g = self.grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
        f(g);
    }

    fn pullback(&mut self, i: usize, g: &[T]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(a, |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y));
                self.acc(b, |gb| gb.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y));
            }
            Op::Sub(a, b) => {
                self.acc(a, |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y));
                self.acc(b, |gb| gb.iter_mut().zip(g).for_each(|(x, &y)| *x = *x - y));
            }
            Op::Mul(a, b) => {
                let bv = self.nodes[b.0].value.clone();
                let av = self.nodes[a.0].value.clone();
                self.acc(a, |ga| ga.iter_mut().zip(g.iter().zip(&bv)).for_each(|(x, (&y, &w))| *x = *x + y * w));
                self.acc(b, |gb| gb.iter_mut().zip(g.iter().zip(&av)).for_each(|(x, (&y, &w))| *x = *x + y * w));
            }
            Op::Scale(a, s) => {
                let s = T::from_f64(s);
                self.acc(a, |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y * s));
            }
            Op::AddRow(x, b) => {
                let d = self.nodes[b.0].value.len();
                self.acc(x, |gx| gx.iter_mut().zip(g).for_each(|(p, &y)| *p = *p + y));
                self.acc(b, |gb| {
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(p, &y)| *p = *p + y);
                    }
                });
            }
            Op::MulRow(x, s) => {
                let d = self.nodes[s.0].value.len();
                let sv = self.nodes[s.0].value.clone();
                let xv = self.nodes[x.0].value.clone();
                self.acc(x, |gx| {
                    for (k, p) in gx.iter_mut().enumerate() {
                        *p = *p + g[k] * sv[k % d];
                    }
                });
                self.acc(s, |gs| {
                    for (k, (&y, &xx)) in g.iter().zip(&xv).enumerate() {
                        gs[k % d] = gs[k % d] + y * xx;
                    }
                });
            }
            Op::MatMul { a, b, ta, tb, batch, m, k, n, shared_b } => {
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                let (rsa, csa) = if ta { (1isize, m as isize) } else { (k as isize, 1isize) };
                let (rsb, csb) = if tb { (1isize, k as isize) } else { (n as isize, 1isize) };
                self.acc(a, |ga| {
                    for bi in 0..batch {
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        let b_s = if shared_b { &bv[..] } else { &bv[bi * k * n..(bi + 1) * k * n] };
                        let ga_s = &mut ga[bi * m * k..(bi + 1) * m * k];
                        // dA_eff[m,k] = dC[m,n] · op(B)ᵀ; written into A's layout.
                        let (rsg, csg) = if ta { (1isize, m as isize) } else { (k as isize, 1isize) };
                        T::gemm(m, n, k, gc, n as isize, 1, b_s, csb, rsb, T::one(), ga_s, rsg, csg);
                    }
                });
                self.acc(b, |gb| {
                    for bi in 0..batch {
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        let a_s = &av[bi * m * k..(bi + 1) * m * k];
                        let off = if shared_b { 0 } else { bi * k * n };
                        let gb_s = &mut gb[off..off + k * n];
                        // dB_eff[k,n] = op(A)ᵀ · dC.
                        let (rsg, csg) = if tb { (1isize, k as isize) } else { (n as isize, 1isize) };
                        T::gemm(k, m, n, a_s, csa, rsa, gc, n as isize, 1, T::one(), gb_s, rsg, csg);
                    }
                });
            }
            Op::Reshape(x) => {
                self.acc(x, |gx| gx.iter_mut().zip(g).for_each(|(p, &y)| *p = *p + y));
            }
            Op::Permute(x, perm) => {
                let out_shape = self.nodes[i].shape.clone();
                let mut inv = vec![0; perm.len()];
                for (o, &p) in perm.iter().enumerate() {
                    inv[p] = o;
                }
                let back = permute_values(g, &out_shape, &inv);
                self.acc(x, |gx| gx.iter_mut().zip(&back).for_each(|(p, &y)| *p = *p + y));
            }
            Op::Concat { parts, axis } => {
                let shape = self.nodes[i].shape.clone();
                let (outer, total, inner) = split_axis(&shape, axis);
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].shape[axis];
                    self.acc(p, |gp| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            gp[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let in_shape = self.nodes[x.0].shape.clone();
                let len = self.nodes[i].shape[axis];
                let (outer, full, inner) = split_axis(&in_shape, axis);
                self.acc(x, |gx| {
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        gx[base..base + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                            .for_each(|(a, &b)| *a = *a + b);
                    }
                });
            }
            Op::Exp(x) => {
                let y = self.nodes[i].value.clone();
                self.acc(x, |gx| gx.iter_mut().zip(g.iter().zip(&y)).for_each(|(p, (&d, &v))| *p = *p + d * v));
            }
            Op::Log(x) => {
                let xv = self.nodes[x.0].value.clone();
                self.acc(x, |gx| gx.iter_mut().zip(g.iter().zip(&xv)).for_each(|(p, (&d, &v))| *p = *p + d / v));
            }
            Op::Abs(x) => {
                let xv = self.nodes[x.0].value.clone();
                self.acc(x, |gx| {
                    gx.iter_mut().zip(g.iter().zip(&xv)).for_each(|(p, (&d, &v))| {
                        let s = if v > T::zero() { T::one() } else if v < T::zero() { -T::one() } else { T::zero() };
                        *p = *p + d * s
                    })
                });
            }
            Op::Gelu(x) => {
                let xv = self.nodes[x.0].value.clone();
                self.acc(x, |gx| gx.iter_mut().zip(g.iter().zip(&xv)).for_each(|(p, (&d, &v))| *p = *p + d * gelu_grad(v)));
            }
            Op::Softmax(x) => {
                let y = self.nodes[i].value.clone();
                let d = *self.nodes[i].shape.last().expect("softmax rank");
                self.acc(x, |gx| {
                    for ((gxr, gr), yr) in gx.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((p, &dy), &yy) in gxr.iter_mut().zip(gr).zip(yr) {
                            *p = *p + yy * (dy - dot);
                        }
                    }
                });
            }
            Op::MeanAxis(x, axis) => {
                let (outer, len, inner) = split_axis(&self.nodes[x.0].shape.clone(), axis);
                let inv = T::from_f64(1.0 / len as f64);
                self.acc(x, |gx| {
                    for o in 0..outer {
                        for l in 0..len {
                            for k in 0..inner {
                                let idx = (o * len + l) * inner + k;
                                gx[idx] = gx[idx] + g[o * inner + k] * inv;
                            }
                        }
                    }
                });
            }
            Op::VarAxis(x, axis) => {
                let (outer, len, inner) = split_axis(&self.nodes[x.0].shape.clone(), axis);
                let xv = self.nodes[x.0].value.clone();
                self.acc(x, |gx| {
                    for o in 0..outer {
                        for k in 0..inner {
                            let at = |l: usize| xv[(o * len + l) * inner + k].as_f64();
                            let mean = (0..len).map(at).sum::<f64>() / len as f64;
                            let gv = g[o * inner + k].as_f64();
                            for l in 0..len {
                                let idx = (o * len + l) * inner + k;
                                gx[idx] = gx[idx] + T::from_f64(gv * 2.0 * (at(l) - mean) / len as f64);
                            }
                        }
                    }
                });
            }
            Op::Normalize { x, rstd } => {
                let y = self.nodes[i].value.clone();
                let d = *self.nodes[i].shape.last().expect("normalize rank");
                self.acc(x, |gx| {
                    for (r, ((gxr, gr), yr)) in gx.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)).enumerate() {
                        let mg = gr.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a.as_f64() * b.as_f64()).sum::<f64>() / d as f64;
                        for ((p, &dy), &yy) in gxr.iter_mut().zip(gr).zip(yr) {
                            *p = *p + T::from_f64(rstd[r] * (dy.as_f64() - mg - yy.as_f64() * mgy));
                        }
                    }
                });
            }
            Op::Gather(x, index) => {
                self.acc(x, |gx| {
                    for (o, &s) in index.src.iter().enumerate() {
                        if s != GatherIndex::ZERO {
                            gx[s as usize] = gx[s as usize] + g[o];
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                let d = g[0];
                self.acc(x, |gx| gx.iter_mut().for_each(|p| *p = *p + d));
            }
            Op::MeanAll(x) => {
                let n = self.nodes[x.0].value.len().max(1);
                let d = g[0] / T::from_f64(n as f64);
                self.acc(x, |gx| gx.iter_mut().for_each(|p| *p = *p + d));
            }
        }
    }
}

fn permute_values<T: Copy>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for a in (0..rank.saturating_sub(1)).rev() {
        in_strides[a] = in_strides[a + 1] * shape[a + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = src.len();
    let mut out = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..total {
        out.push(src[offset]);
        for a in (0..rank).rev() {
            counter[a] += 1;
            offset += strides[a];
            if counter[a] < out_shape[a] {
                break;
            }
            offset -= strides[a] * out_shape[a];
            counter[a] = 0;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Index builders for spatial rearrangements of `[H, W, C]` feature maps.

/// Zero padding of a `[h, w, c]` map to `[h + top + bottom, w + left + right, c]`.
pub fn pad_index(h: usize, w: usize, c: usize, top: usize, bottom: usize, left: usize, right: usize) -> GatherIndex {
    let (ho, wo) = (h + top + bottom, w + left + right);
    let entries = (0..ho).flat_map(move |y| {
        (0..wo).flat_map(move |x| {
            (0..c).map(move |ch| {
                let inside = y >= top && y < top + h && x >= left && x < left + w;
                inside.then(|| ((y - top) * w + (x - left)) * c + ch)
            })
        })
    });
    GatherIndex::new(h * w * c, entries)
}

/// Crops `[h, w, c]` to its top-left `[ho, wo, c]` corner.
pub fn crop_index(h: usize, w: usize, c: usize, ho: usize, wo: usize) -> GatherIndex {
    let entries = (0..ho).flat_map(move |y| (0..wo).flat_map(move |x| (0..c).map(move |ch| Some((y * w + x) * c + ch))));
    GatherIndex::new(h * w * c, entries)
}

/// Cyclic shift: `out[y, x] = in[(y + dy) mod h, (x + dx) mod w]`.
pub fn roll_index(h: usize, w: usize, c: usize, dy: usize, dx: usize) -> GatherIndex {
    let entries = (0..h).flat_map(move |y| {
        (0..w).flat_map(move |x| (0..c).map(move |ch| Some((((y + dy) % h) * w + (x + dx) % w) * c + ch)))
    });
    GatherIndex::new(h * w * c, entries)
}

/// `[h, w, c] → [n_windows, win², c]`, windows in row-major order.
pub fn window_partition_index(h: usize, w: usize, c: usize, win: usize) -> GatherIndex {
    let (nh, nw) = (h / win, w / win);
    let entries = (0..nh * nw).flat_map(move |wi| {
        let (wy, wx) = (wi / nw, wi % nw);
        (0..win * win).flat_map(move |t| {
            let (y, x) = (wy * win + t / win, wx * win + t % win);
            (0..c).map(move |ch| Some((y * w + x) * c + ch))
        })
    });
    GatherIndex::new(h * w * c, entries)
}

/// Inverse of [`window_partition_index`].
pub fn window_merge_index(h: usize, w: usize, c: usize, win: usize) -> GatherIndex {
    let nw = w / win;
    let entries = (0..h).flat_map(move |y| {
        (0..w).flat_map(move |x| {
            let wi = (y / win) * nw + x / win;
            let t = (y % win) * win + x % win;
            (0..c).map(move |ch| Some((wi * win * win + t) * c + ch))
        })
    });
    GatherIndex::new(h * w * c, entries)
}

/// Space-to-depth: `[h, w, c] → [h/f, w/f, f²·c]`, patch pixels row-major.
pub fn space_to_depth_index(h: usize, w: usize, c: usize, f: usize) -> GatherIndex {
    let (ho, wo) = (h / f, w / f);
    let entries = (0..ho).flat_map(move |y| {
        (0..wo).flat_map(move |x| {
            (0..f * f).flat_map(move |k| {
                let (yy, xx) = (y * f + k / f, x * f + k % f);
                (0..c).map(move |ch| Some((yy * w + xx) * c + ch))
            })
        })
    });
    GatherIndex::new(h * w * c, entries)
}

/// Depth-to-space: `[h, w, f²·c] → [h·f, w·f, c]`, inverse of [`space_to_depth_index`].
pub fn depth_to_space_index(h: usize, w: usize, c: usize, f: usize) -> GatherIndex {
    let (ho, wo) = (h * f, w * f);
    let entries = (0..ho).flat_map(move |y| {
        (0..wo).flat_map(move |x| {
            let k = (y % f) * f + x % f;
            (0..c).map(move |ch| Some((((y / f) * w + x / f) * f * f + k) * c + ch))
        })
    });
    GatherIndex::new(h * w * f * f * c, entries)
}

/// `k×k` same-padded patches: `[h, w, c] → [h·w, k²·c]` (im2col).
pub fn im2col_index(h: usize, w: usize, c: usize, k: usize) -> GatherIndex {
    let r = (k / 2) as isize;
    let entries = (0..h).flat_map(move |y| {
        (0..w).flat_map(move |x| {
            (0..k * k).flat_map(move |t| {
                let yy = y as isize + (t / k) as isize - r;
                let xx = x as isize + (t % k) as isize - r;
                let inside = yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w;
                (0..c).map(move |ch| inside.then(|| ((yy as usize) * w + xx as usize) * c + ch))
            })
        })
    });
    GatherIndex::new(h * w * c, entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Central finite differences of `f` against the tape gradient at `x`.
    fn check_grad(x0: Vec<f64>, shape: &[usize], f: impl Fn(&mut Tape<f64>, Var) -> Var) -> f64 {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(x0.clone(), shape).unwrap();
        let y = f(&mut tape, x);
        tape.backward(y).unwrap();
        let analytic = tape.grad(x).unwrap().to_vec();
        let h = 1e-5;
        let eval = |v: Vec<f64>| {
            let mut t = Tape::<f64>::new();
            let x = t.param(v, shape).unwrap();
            let y = f(&mut t, x);
            t.scalar(y)
        };
        let mut worst: f64 = 0.0;
        for i in 0..x0.len() {
            let mut p = x0.clone();
            p[i] += h;
            let mut m = x0.clone();
            m[i] -= h;
            let fd = (eval(p) - eval(m)) / (2.0 * h);
            let scale = fd.abs().max(analytic[i].abs()).max(1e-2);
            worst = worst.max((fd - analytic[i]).abs() / scale);
        }
        worst
    }

    /// Weighted sum so every output element carries a distinct cotangent.
    fn probe(t: &mut Tape<f64>, y: Var, seed: u64) -> Var {
        let n = t.value(y).len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = t.constant(rand_vec(&mut rng, n), &t.shape(y).to_vec()).unwrap();
        let p = t.mul(y, w).unwrap();
        t.sum_all(p)
    }

    #[test]
    fn matmul_scalar_case() {
        let mut t = Tape::<f32>::new();
        let a = t.param(vec![2.0], &[1, 1]).unwrap();
        let b = t.param(vec![3.0], &[1, 1]).unwrap();
        let c = t.matmul(a, b).unwrap();
        let s = t.sum_all(c);
        assert_eq!(t.scalar(s), 6.0);
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[3.0]);
        assert_eq!(t.grad(b).unwrap(), &[2.0]);
    }

    #[test]
    fn softmax_uniform_and_zero_gradient_of_sum() {
        let mut t = Tape::<f64>::new();
        let x = t.param(vec![0.7; 5], &[5]).unwrap();
        let y = t.softmax(x).unwrap();
        assert!(t.value(y).iter().all(|&v| (v - 0.2).abs() < 1e-15));
        let s = t.sum_all(y);
        t.backward(s).unwrap();
        assert!(t.grad(x).unwrap().iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn backward_basics() {
        let mut t = Tape::<f32>::new();
        let x = t.param(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        let c = t.constant(vec![4.0], &[]).unwrap();
        t.backward(c).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0, 0.0, 0.0]);
        assert!(matches!(t.backward(c), Err(Error::BackwardTwice)));

        t.reset();
        let x = t.param(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        let s = t.sum_all(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut t = Tape::<f32>::new();
        let a = t.constant(vec![0.0; 6], &[2, 3]).unwrap();
        let b = t.constant(vec![0.0; 6], &[2, 3]).unwrap();
        match t.matmul(a, b) {
            Err(Error::Shape { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("unexpected {other:?}"),
        }
        let r = t.constant(vec![0.0; 2], &[2]).unwrap();
        assert!(matches!(t.add_row(a, r), Err(Error::Shape { op: "add_row", .. })));
        assert!(matches!(t.add(a, r), Err(Error::Shape { op: "add", .. })));
        assert!(matches!(t.reshape(a, &[5]), Err(Error::Shape { op: "reshape", .. })));
    }

    #[test]
    fn gelu_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = rand_vec(&mut rng, 12);
        let err = check_grad(x0, &[3, 4], |t, x| {
            let g = t.gelu(x);
            t.mean_all(g)
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn every_primitive_passes_fd_in_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = rand_vec(&mut rng, 24);
        let pos: Vec<f64> = x0.iter().map(|v| v.abs() + 0.5).collect();
        let away_from_zero: Vec<f64> = x0.iter().map(|v| if v.abs() < 0.1 { v + 0.3 } else { *v }).collect();
        let w = rand_vec(&mut rng, 24);
        let row = rand_vec(&mut rng, 4);
        let idx = Arc::new(roll_index(2, 3, 4, 1, 2));
        let pad = Arc::new(pad_index(2, 3, 4, 1, 0, 0, 1));

        type Build = Box<dyn Fn(&mut Tape<f64>, Var) -> Var>;
        let wc = w.clone();
        let rc = row.clone();
        let rc2 = row.clone();
        let cases: Vec<(&str, Vec<f64>, Build)> = vec![
            ("add", x0.clone(), Box::new(move |t, x| { let c = t.constant(wc.clone(), &[2, 3, 4]).unwrap(); let y = t.add(x, c).unwrap(); probe(t, y, 1) })),
            ("sub", x0.clone(), Box::new(|t, x| { let y = t.scale(x, 0.5); let z = t.sub(x, y).unwrap(); let z = t.mul(z, x).unwrap(); probe(t, z, 2) })),
            ("mul", x0.clone(), Box::new(|t, x| { let y = t.mul(x, x).unwrap(); probe(t, y, 3) })),
            ("add_row", x0.clone(), Box::new(move |t, x| { let b = t.param(rc.clone(), &[4]).unwrap(); let y = t.add_row(x, b).unwrap(); let y = t.mul(y, y).unwrap(); probe(t, y, 4) })),
            ("mul_row", x0.clone(), Box::new(move |t, x| { let s = t.constant(rc2.clone(), &[4]).unwrap(); let y = t.mul_row(x, s).unwrap(); probe(t, y, 5) })),
            ("matmul", x0.clone(), Box::new(|t, x| { let a = t.reshape(x, &[6, 4]).unwrap(); let b = t.transpose(a).unwrap(); let c = t.matmul(a, b).unwrap(); probe(t, c, 6) })),
            ("bmm", x0.clone(), Box::new(|t, x| { let a = t.reshape(x, &[2, 3, 4]).unwrap(); let c = t.bmm(a, a, true).unwrap(); let d = t.bmm(c, a, false).unwrap(); probe(t, d, 7) })),
            ("permute", x0.clone(), Box::new(|t, x| { let y = t.permute(x, &[2, 0, 1]).unwrap(); let y = t.mul(y, y).unwrap(); probe(t, y, 8) })),
            ("concat_slice", x0.clone(), Box::new(|t, x| { let a = t.slice(x, 2, 1, 2).unwrap(); let b = t.slice(x, 1, 0, 1).unwrap(); let b = t.reshape(b, &[2, 4, 1]).unwrap(); let b = t.slice(b, 1, 0, 3).unwrap(); let b = t.reshape(b, &[2, 3, 1]).unwrap(); let c = t.concat(&[a, b, a], 2).unwrap(); let c = t.mul(c, c).unwrap(); probe(t, c, 9) })),
            ("exp", x0.clone(), Box::new(|t, x| { let y = t.exp(x); probe(t, y, 10) })),
            ("log", pos, Box::new(|t, x| { let y = t.log(x); probe(t, y, 11) })),
            ("abs", away_from_zero, Box::new(|t, x| { let y = t.abs(x); let y = t.mul(y, x).unwrap(); probe(t, y, 12) })),
            ("gelu", x0.clone(), Box::new(|t, x| { let y = t.gelu(x); probe(t, y, 13) })),
            ("softmax", x0.clone(), Box::new(|t, x| { let y = t.softmax(x).unwrap(); probe(t, y, 14) })),
            ("mean_axis", x0.clone(), Box::new(|t, x| { let y = t.mean_axis(x, 1).unwrap(); let y = t.mul(y, y).unwrap(); probe(t, y, 15) })),
            ("var_axis", x0.clone(), Box::new(|t, x| { let y = t.var_axis(x, 2).unwrap(); probe(t, y, 16) })),
            ("normalize", x0.clone(), Box::new(|t, x| { let y = t.normalize(x, 1e-5).unwrap(); probe(t, y, 17) })),
            ("gather_roll", x0.clone(), Box::new(move |t, x| { let y = t.gather(x, &idx, &[2, 3, 4]).unwrap(); let y = t.mul(y, x).unwrap(); probe(t, y, 18) })),
            ("gather_pad", x0.clone(), Box::new(move |t, x| { let y = t.gather(x, &pad, &[3, 4, 4]).unwrap(); let y = t.gelu(y); probe(t, y, 19) })),
            ("mean_all", x0.clone(), Box::new(|t, x| { let y = t.mul(x, x).unwrap(); t.mean_all(y) })),
        ];
        for (name, init, f) in cases {
            let err = check_grad(init, &[2, 3, 4], |t, x| f(t, x));
            assert!(err < 1e-4, "{name}: relative error {err}");
        }
    }

    #[test]
    fn rearrangements_round_trip() {
        let (h, w, c, win) = (6, 4, 3, 2);
        let data: Vec<f32> = (0..h * w * c).map(|v| v as f32).collect();
        let mut t = Tape::<f32>::new();
        let x = t.constant(data.clone(), &[h, w, c]).unwrap();
        let p = Arc::new(window_partition_index(h, w, c, win));
        let m = Arc::new(window_merge_index(h, w, c, win));
        let y = t.gather(x, &p, &[h * w / (win * win), win * win, c]).unwrap();
        let z = t.gather(y, &m, &[h, w, c]).unwrap();
        assert_eq!(t.value(z), &data[..]);
        // First window holds pixels (0,0), (0,1), (1,0), (1,1).
        assert_eq!(&t.value(y)[..12], &[0., 1., 2., 3., 4., 5., 12., 13., 14., 15., 16., 17.]);

        let s = Arc::new(space_to_depth_index(h, w, c, 2));
        let d = Arc::new(depth_to_space_index(h / 2, w / 2, c, 2));
        let y = t.gather(x, &s, &[h / 2, w / 2, 4 * c]).unwrap();
        let z = t.gather(y, &d, &[h, w, c]).unwrap();
        assert_eq!(t.value(z), &data[..]);

        let r = Arc::new(roll_index(h, w, c, 1, 3));
        let back = Arc::new(roll_index(h, w, c, h - 1, w - 3));
        let y = t.gather(x, &r, &[h, w, c]).unwrap();
        let z = t.gather(y, &back, &[h, w, c]).unwrap();
        assert_eq!(t.value(z), &data[..]);
    }

    #[test]
    fn deterministic_forward_backward() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let xs: Vec<f32> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut t = Tape::<f32>::new();
            let x = t.param(xs, &[4, 8]).unwrap();
            let xt = t.transpose(x).unwrap();
            let y = t.matmul(x, xt).unwrap();
            let y = t.softmax(y).unwrap();
            let l = t.mean_all(y);
            t.backward(l).unwrap();
            (t.scalar(l), t.grad(x).unwrap().to_vec())
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert!(a.1.iter().zip(&b.1).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    proptest::proptest! {
        #[test]
        fn composite_graphs_match_fd(seed in 0u64..1000, rows in 1usize..5, cols in 2usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x0 = rand_vec(&mut rng, rows * cols);
            let wv = rand_vec(&mut rng, cols * 3);
            let err = check_grad(x0, &[rows, cols], move |t, x| {
                let w = t.constant(wv.clone(), &[cols, 3]).unwrap();
                let y = t.matmul(x, w).unwrap();
                let y = t.normalize(y, 1e-5).unwrap();
                let y = t.gelu(y);
                let y = t.softmax(y).unwrap();
                probe(t, y, seed)
            });
            proptest::prop_assert!(err < 1e-4, "relative error {}", err);
        }

        #[test]
        fn f32_primitives_match_fd_loosely(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x0: Vec<f32> = (0..16).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let f = |t: &mut Tape<f32>, x: Var| {
                let a = t.reshape(x, &[4, 4]).unwrap();
                let b = t.transpose(a).unwrap();
                let y = t.matmul(a, b).unwrap();
                let y = t.gelu(y);
                t.mean_all(y)
            };
            let mut t = Tape::<f32>::new();
            let x = t.param(x0.clone(), &[16]).unwrap();
            let y = f(&mut t, x);
            t.backward(y).unwrap();
            let g = t.grad(x).unwrap().to_vec();
            let h = 1e-2f32;
            for i in 0..16 {
                let eval = |d: f32| { let mut v = x0.clone(); v[i] += d; let mut t = Tape::<f32>::new(); let x = t.param(v, &[16]).unwrap(); let y = f(&mut t, x); t.scalar(y) };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let scale = fd.abs().max(g[i].abs()).max(1e-1);
                proptest::prop_assert!((fd - g[i]).abs() / scale < 1e-2);
            }
        }
    }
}
