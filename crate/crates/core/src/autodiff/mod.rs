//! Tape-based reverse-mode automatic differentiation over real tensors.
//!
//! The engine is define-by-run: every operation computes its forward value
//! immediately and, when any input requires gradients, records a closure that
//! applies the exact vector-Jacobian product during the backward sweep. The
//! tape is replayed once in reverse topological order (which is simply
//! descending node id) and consumed by [`Tape::backward`].
//!
//! A dynamic tape was chosen over a static graph because the sliding-window
//! trainer changes which blocks require gradients from epoch to epoch; a
//! frozen block binds its parameters as constants and the backward sweep
//! never visits its subgraph.

pub mod adam;
pub mod checkpoint;
pub mod complex;

use std::cell::RefCell;

use rand_chacha::ChaCha20Rng;
use rand_core::RngCore;

use crate::error::{Error, Result};
use crate::fsum::ExactSum;

use crate::scalar::{real, Real};

/// Tensor payload: shape, row-major data, and an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorData<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub grad: Option<Vec<T>>,
}

impl<T: Real> TensorData<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension {
                op: "TensorData::new",
                detail: format!("shape {shape:?} has a zero dimension"),
            });
        }
        if data.len() != numel {
            return Err(Error::Dimension {
                op: "TensorData::new",
                detail: format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            });
        }
        Ok(TensorData { shape, data, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        TensorData { shape, data: vec![T::zero(); numel], grad: None }
    }

    pub fn scalar(x: T) -> Self {
        TensorData { shape: vec![], data: vec![x], grad: None }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn cast<U: Real>(&self) -> TensorData<U> {
        TensorData {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| real::<U>(x.to_f64().unwrap())).collect(),
            grad: None,
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn<T> = Box<dyn Fn(&Vals<'_, T>, &[T], &mut GradBufs<T>)>;

/// Read-only view of all forward values during the backward sweep.
pub(crate) struct Vals<'a, T> {
    values: &'a [Vec<T>],
}

impl<'a, T: Real> Vals<'a, T> {
    fn val(&self, id: usize) -> &[T] {
        &self.values[id]
    }
}

/// Gradient buffers indexed by node id, created lazily.
pub(crate) struct GradBufs<T> {
    bufs: Vec<Option<Vec<T>>>,
}

impl<T: Real> GradBufs<T> {
    /// Returns the buffer for `id`, creating it zero-filled at `len`.
    fn buf(&mut self, id: usize, len: usize) -> &mut [T] {
        self.bufs[id].get_or_insert_with(|| vec![T::zero(); len])
    }

    fn accum(&mut self, id: usize, contrib: &[T]) {
        let buf = self.buf(id, contrib.len());
        for (b, &c) in buf.iter_mut().zip(contrib.iter()) {
            *b = *b + c;
        }
    }
}

/// Gradients produced by [`Tape::backward`], addressed by [`Var`].
pub struct Gradients<T> {
    shapes: Vec<Vec<usize>>,
    bufs: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`, if anything flowed into it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.bufs[v.0].as_deref()
    }

    /// Gradient of the loss w.r.t. `v`; zeros when nothing flowed into it.
    pub fn take_or_zeros(&mut self, v: Var) -> Vec<T> {
        let numel: usize = self.shapes[v.0].iter().product();
        self.bufs[v.0].take().unwrap_or_else(|| vec![T::zero(); numel])
    }
}

struct TapeInner<T> {
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<T>>,
    needs_grad: Vec<bool>,
    backs: Vec<Option<BackFn<T>>>,
}

/// Recording tape for one forward pass.
pub struct Tape<T: Real> {
    inner: RefCell<TapeInner<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn rank2(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    if shape.len() != 2 {
        return Err(Error::Dimension { op, detail: format!("expected rank-2 tensor, got shape {shape:?}") });
    }
    Ok((shape[0], shape[1]))
}

// out += a (m x k) * b (k x n)
fn mm_nn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bkj) in orow.iter_mut().zip(brow.iter()) {
                *o = *o + aik * bkj;
            }
        }
    }
}

// out += a (m x k) * b^T, b stored (n x k)
fn mm_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow.iter()) {
                acc = acc + x * y;
            }
            *o = *o + acc;
        }
    }
}

// out += a^T * b, a stored (k x m), b stored (k x n)
fn mm_tn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for (i, &aki) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bkj) in orow.iter_mut().zip(brow.iter()) {
                *o = *o + aki * bkj;
            }
        }
    }
}

// Monotone map from a float to u64 preserving the IEEE total order.
fn ordered_bits<T: Real>(x: T) -> u64 {
    let b = x.to_f64().expect("scalar converts to f64").to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b ^ (1 << 63)
    }
}

// out = a * b with the contraction over k performed per output row in a
// canonical order: terms sorted by the a-value's total order, ties broken by
// the content of the corresponding b row. The resulting accumulation order,
// and therefore every output bit, is invariant to any simultaneous
// permutation of a's columns and b's rows.
fn mm_canonical_order<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    let mut order: Vec<(u64, u32)> = Vec::with_capacity(k);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        order.clear();
        order.extend(arow.iter().enumerate().map(|(j, &x)| (ordered_bits(x), j as u32)));
        order.sort_unstable_by_key(|p| p.0);
        // Ties in the key are resolved by the b-row content; equal keys with
        // equal rows contribute identical terms, so their order is moot.
        let mut run = 0;
        while run < order.len() {
            let mut end = run + 1;
            while end < order.len() && order[end].0 == order[run].0 {
                end += 1;
            }
            if end - run > 1 {
                order[run..end].sort_unstable_by(|x, y| {
                    let rx = &b[x.1 as usize * n..(x.1 as usize + 1) * n];
                    let ry = &b[y.1 as usize * n..(y.1 as usize + 1) * n];
                    for (u, v) in rx.iter().zip(ry.iter()) {
                        match ordered_bits(*u).cmp(&ordered_bits(*v)) {
                            std::cmp::Ordering::Equal => continue,
                            other => return other,
                        }
                    }
                    std::cmp::Ordering::Equal
                });
            }
            run = end;
        }
        let orow = &mut out[i * n..(i + 1) * n];
        for &(_, j) in &order {
            let aij = arow[j as usize];
            let brow = &b[j as usize * n..(j as usize + 1) * n];
            for (o, &v) in orow.iter_mut().zip(brow.iter()) {
                *o = *o + aij * v;
            }
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(TapeInner {
                shapes: Vec::new(),
                values: Vec::new(),
                needs_grad: Vec::new(),
                backs: Vec::new(),
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<T>, needs: bool, back: Option<BackFn<T>>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut inner = self.inner.borrow_mut();
        inner.shapes.push(shape);
        inner.values.push(value);
        inner.needs_grad.push(needs);
        inner.backs.push(if needs { back } else { None });
        Var(inner.values.len() - 1)
    }

    /// Pushes a node whose backward closure needs to know its own id.
    fn push_with_id(
        &self,
        shape: Vec<usize>,
        value: Vec<T>,
        needs: bool,
        make: impl FnOnce(Var) -> BackFn<T>,
    ) -> Var {
        let v = self.push(shape, value, needs, None);
        if needs {
            self.inner.borrow_mut().backs[v.0] = Some(make(v));
        }
        v
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.inner.borrow().shapes[v.0].clone()
    }

    pub fn value(&self, v: Var) -> Vec<T> {
        self.inner.borrow().values[v.0].clone()
    }

    pub fn scalar_value(&self, v: Var) -> T {
        let inner = self.inner.borrow();
        debug_assert_eq!(inner.values[v.0].len(), 1);
        inner.values[v.0][0]
    }

    /// Leaf that never requires gradients.
    pub fn constant(&self, shape: Vec<usize>, data: Vec<T>) -> Var {
        self.push(shape, data, false, None)
    }

    pub fn constant_scalar(&self, x: T) -> Var {
        self.push(vec![], vec![x], false, None)
    }

    /// Trainable leaf; its gradient is available after `backward`.
    pub fn param(&self, t: &TensorData<T>) -> Var {
        self.push(t.shape.clone(), t.data.clone(), true, None)
    }

    /// Leaf bound either as a parameter or as a constant.
    pub fn leaf(&self, t: &TensorData<T>, trainable: bool) -> Var {
        if trainable {
            self.param(t)
        } else {
            self.constant(t.shape.clone(), t.data.clone())
        }
    }

    /// Cuts the tensor out of the differentiation graph (stop-gradient).
    pub fn detach(&self, a: Var) -> Var {
        let inner = self.inner.borrow();
        let shape = inner.shapes[a.0].clone();
        let value = inner.values[a.0].clone();
        drop(inner);
        self.push(shape, value, false, None)
    }

    fn elementwise_binary(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        back: impl Fn(Var, Var) -> BackFn<T>,
    ) -> Result<Var> {
        let inner = self.inner.borrow();
        if inner.shapes[a.0] != inner.shapes[b.0] {
            return Err(Error::Dimension {
                op,
                detail: format!("{:?} vs {:?}", inner.shapes[a.0], inner.shapes[b.0]),
            });
        }
        let shape = inner.shapes[a.0].clone();
        let value: Vec<T> =
            inner.values[a.0].iter().zip(inner.values[b.0].iter()).map(|(&x, &y)| f(x, y)).collect();
        let needs = inner.needs_grad[a.0] || inner.needs_grad[b.0];
        drop(inner);
        Ok(self.push(shape, value, needs, Some(back(a, b))))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_binary(
            "add",
            a,
            b,
            |x, y| x + y,
            |a, b| {
                Box::new(move |_vals, g, grads| {
                    grads.accum(a.0, g);
                    grads.accum(b.0, g);
                })
            },
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_binary(
            "sub",
            a,
            b,
            |x, y| x - y,
            |a, b| {
                Box::new(move |_vals, g, grads| {
                    grads.accum(a.0, g);
                    let buf = grads.buf(b.0, g.len());
                    for (o, &gi) in buf.iter_mut().zip(g.iter()) {
                        *o = *o - gi;
                    }
                })
            },
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_binary(
            "mul",
            a,
            b,
            |x, y| x * y,
            |a, b| {
                Box::new(move |vals, g, grads| {
                    let (va, vb) = (vals.val(a.0), vals.val(b.0));
                    {
                        let buf = grads.buf(a.0, g.len());
                        for i in 0..g.len() {
                            buf[i] = buf[i] + g[i] * vb[i];
                        }
                    }
                    let buf = grads.buf(b.0, g.len());
                    for i in 0..g.len() {
                        buf[i] = buf[i] + g[i] * va[i];
                    }
                })
            },
        )
    }

    fn elementwise_unary(
        &self,
        a: Var,
        f: impl Fn(T) -> T,
        back: impl Fn(Var) -> BackFn<T>,
    ) -> Var {
        let inner = self.inner.borrow();
        let shape = inner.shapes[a.0].clone();
        let value: Vec<T> = inner.values[a.0].iter().map(|&x| f(x)).collect();
        let needs = inner.needs_grad[a.0];
        drop(inner);
        self.push(shape, value, needs, Some(back(a)))
    }

    pub fn scalar_mul(&self, a: Var, c: T) -> Var {
        self.elementwise_unary(
            a,
            |x| x * c,
            |a| {
                Box::new(move |_vals, g, grads| {
                    let buf = grads.buf(a.0, g.len());
                    for (o, &gi) in buf.iter_mut().zip(g.iter()) {
                        *o = *o + gi * c;
                    }
                })
            },
        )
    }

    pub fn add_scalar(&self, a: Var, c: T) -> Var {
        self.elementwise_unary(
            a,
            |x| x + c,
            |a| Box::new(move |_vals, g, grads| grads.accum(a.0, g)),
        )
    }

    pub fn square(&self, a: Var) -> Var {
        self.elementwise_unary(
            a,
            |x| x * x,
            |a| {
                Box::new(move |vals, g, grads| {
                    let va = vals.val(a.0);
                    let two = real::<T>(2.0);
                    let buf = grads.buf(a.0, g.len());
                    for i in 0..g.len() {
                        buf[i] = buf[i] + two * va[i] * g[i];
                    }
                })
            },
        )
    }

    pub fn reciprocal(&self, a: Var) -> Var {
        self.elementwise_unary(
            a,
            |x| T::one() / x,
            |a| {
                Box::new(move |vals, g, grads| {
                    let va = vals.val(a.0);
                    let buf = grads.buf(a.0, g.len());
                    for i in 0..g.len() {
                        buf[i] = buf[i] - g[i] / (va[i] * va[i]);
                    }
                })
            },
        )
    }

    pub fn log2(&self, a: Var) -> Var {
        let ln2 = real::<T>(std::f64::consts::LN_2);
        self.elementwise_unary(
            a,
            |x| x.log2(),
            move |a| {
                Box::new(move |vals, g, grads| {
                    let va = vals.val(a.0);
                    let buf = grads.buf(a.0, g.len());
                    for i in 0..g.len() {
                        buf[i] = buf[i] + g[i] / (va[i] * ln2);
                    }
                })
            },
        )
    }

    /// GELU with the tanh approximation; the backward pass differentiates
    /// exactly the forward expression.
    pub fn gelu(&self, a: Var) -> Var {
        let c0 = real::<T>(0.797_884_560_802_865_4); // sqrt(2/pi)
        let c1 = real::<T>(0.044_715);
        let half = real::<T>(0.5);
        let three = real::<T>(3.0);
        self.elementwise_unary(
            a,
            move |x| {
                let u = c0 * (x + c1 * x * x * x);
                half * x * (T::one() + u.tanh())
            },
            move |a| {
                Box::new(move |vals, g, grads| {
                    let va = vals.val(a.0);
                    let buf = grads.buf(a.0, g.len());
                    for i in 0..g.len() {
                        let x = va[i];
                        let u = c0 * (x + c1 * x * x * x);
                        let th = u.tanh();
                        let sech2 = T::one() - th * th;
                        let du = c0 * (T::one() + three * c1 * x * x);
                        let d = half * (T::one() + th) + half * x * sech2 * du;
                        buf[i] = buf[i] + g[i] * d;
                    }
                })
            },
        )
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Matmul whose contraction runs in a canonical, permutation-independent
    /// order: terms are accumulated sorted by the left factor's value (ties
    /// broken by the right factor's row content), so simultaneously permuting
    /// the columns of `a` and the rows of `b` cannot change a single output
    /// bit. Used for the attention-times-value product, where the contracted
    /// axis is the token axis and equivariance must hold bit-exactly.
    pub fn matmul_exact(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&self, a: Var, b: Var, exact: bool) -> Result<Var> {
        let inner = self.inner.borrow();
        let (m, k) = rank2(&inner.shapes[a.0], "matmul")?;
        let (k2, n) = rank2(&inner.shapes[b.0], "matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                detail: format!("{m}x{k} times {k2}x{n}"),
            });
        }
        let va = &inner.values[a.0];
        let vb = &inner.values[b.0];
        let mut out = vec![T::zero(); m * n];
        if exact {
            mm_canonical_order(va, vb, m, k, n, &mut out);
        } else {
            mm_nn(va, vb, m, k, n, &mut out);
        }
        let needs = inner.needs_grad[a.0] || inner.needs_grad[b.0];
        let (na, nb) = (inner.needs_grad[a.0], inner.needs_grad[b.0]);
        drop(inner);
        Ok(self.push(
            vec![m, n],
            out,
            needs,
            Some(Box::new(move |vals, g, grads| {
                if na {
                    let vb = vals.val(b.0);
                    let buf = grads.buf(a.0, m * k);
                    mm_nt(g, vb, m, n, k, buf);
                }
                if nb {
                    let va = vals.val(a.0);
                    let buf = grads.buf(b.0, k * n);
                    mm_tn(va, g, k, m, n, buf);
                }
            })),
        ))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let inner = self.inner.borrow();
        let (m, n) = rank2(&inner.shapes[a.0], "transpose")?;
        let va = &inner.values[a.0];
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = va[i * n + j];
            }
        }
        let needs = inner.needs_grad[a.0];
        drop(inner);
        Ok(self.push(
            vec![n, m],
            out,
            needs,
            Some(Box::new(move |_vals, g, grads| {
                let buf = grads.buf(a.0, m * n);
                for j in 0..n {
                    for i in 0..m {
                        buf[i * n + j] = buf[i * n + j] + g[j * m + i];
                    }
                }
            })),
        ))
    }

    /// Concatenates rank-2 tensors along `axis` (0 = stack rows, 1 = stack columns).
    pub fn concat(&self, axis: usize, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract { detail: "concat of zero tensors".into() });
        }
        if axis > 1 {
            return Err(Error::Dimension { op: "concat", detail: format!("axis {axis} out of range") });
        }
        let inner = self.inner.borrow();
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|p| rank2(&inner.shapes[p.0], "concat"))
            .collect::<Result<_>>()?;
        let fixed = if axis == 0 { dims[0].1 } else { dims[0].0 };
        for &(r, c) in &dims {
            let f = if axis == 0 { c } else { r };
            if f != fixed {
                return Err(Error::Dimension {
                    op: "concat",
                    detail: format!("incompatible shapes along axis {axis}"),
                });
            }
        }
        let (rows, cols) = if axis == 0 {
            (dims.iter().map(|d| d.0).sum::<usize>(), fixed)
        } else {
            (fixed, dims.iter().map(|d| d.1).sum::<usize>())
        };
        let mut out = vec![T::zero(); rows * cols];
        if axis == 0 {
            let mut r0 = 0;
            for (p, &(r, c)) in parts.iter().zip(dims.iter()) {
                out[r0 * cols..(r0 + r) * cols].copy_from_slice(&inner.values[p.0]);
                let _ = c;
                r0 += r;
            }
        } else {
            let mut c0 = 0;
            for (p, &(r, c)) in parts.iter().zip(dims.iter()) {
                let v = &inner.values[p.0];
                for i in 0..r {
                    out[i * cols + c0..i * cols + c0 + c].copy_from_slice(&v[i * c..(i + 1) * c]);
                }
                c0 += c;
            }
        }
        let needs = parts.iter().any(|p| inner.needs_grad[p.0]);
        let parts: Vec<Var> = parts.to_vec();
        drop(inner);
        Ok(self.push(
            vec![rows, cols],
            out,
            needs,
            Some(Box::new(move |_vals, g, grads| {
                if axis == 0 {
                    let mut r0 = 0;
                    for (p, &(r, _c)) in parts.iter().zip(dims.iter()) {
                        grads.accum(p.0, &g[r0 * cols..(r0 + r) * cols]);
                        r0 += r;
                    }
                } else {
                    let mut c0 = 0;
                    for (p, &(r, c)) in parts.iter().zip(dims.iter()) {
                        let buf = grads.buf(p.0, r * c);
                        for i in 0..r {
                            for j in 0..c {
                                buf[i * c + j] = buf[i * c + j] + g[i * cols + c0 + j];
                            }
                        }
                        c0 += c;
                    }
                }
            })),
        ))
    }

    /// Slice of a rank-2 tensor along `axis`, keeping `start..end`.
    pub fn slice(&self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let inner = self.inner.borrow();
        let (rows, cols) = rank2(&inner.shapes[a.0], "slice")?;
        let limit = if axis == 0 { rows } else { cols };
        if axis > 1 || start >= end || end > limit {
            return Err(Error::Dimension {
                op: "slice",
                detail: format!("range {start}..{end} on axis {axis} of {rows}x{cols}"),
            });
        }
        let va = &inner.values[a.0];
        let (orows, ocols) = if axis == 0 { (end - start, cols) } else { (rows, end - start) };
        let mut out = vec![T::zero(); orows * ocols];
        if axis == 0 {
            out.copy_from_slice(&va[start * cols..end * cols]);
        } else {
            for i in 0..rows {
                out[i * ocols..(i + 1) * ocols].copy_from_slice(&va[i * cols + start..i * cols + end]);
            }
        }
        let needs = inner.needs_grad[a.0];
        drop(inner);
        Ok(self.push(
            vec![orows, ocols],
            out,
            needs,
            Some(Box::new(move |_vals, g, grads| {
                let buf = grads.buf(a.0, rows * cols);
                if axis == 0 {
                    for (o, &gi) in buf[start * cols..end * cols].iter_mut().zip(g.iter()) {
                        *o = *o + gi;
                    }
                } else {
                    for i in 0..rows {
                        for j in 0..(end - start) {
                            buf[i * cols + start + j] = buf[i * cols + start + j] + g[i * ocols + j];
                        }
                    }
                }
            })),
        ))
    }

    pub fn sum(&self, a: Var) -> Var {
        let inner = self.inner.borrow();
        let mut s = T::zero();
        for &x in &inner.values[a.0] {
            s = s + x;
        }
        let needs = inner.needs_grad[a.0];
        let n = inner.values[a.0].len();
        drop(inner);
        self.push(
            vec![],
            vec![s],
            needs,
            Some(Box::new(move |_vals, g, grads| {
                let g0 = g[0];
                let buf = grads.buf(a.0, n);
                for o in buf.iter_mut() {
                    *o = *o + g0;
                }
            })),
        )
    }

    pub fn mean(&self, a: Var) -> Var {
        let inner = self.inner.borrow();
        let n = inner.values[a.0].len();
        let inv = T::one() / real::<T>(n as f64);
        let mut s = T::zero();
        for &x in &inner.values[a.0] {
            s = s + x;
        }
        let needs = inner.needs_grad[a.0];
        drop(inner);
        self.push(
            vec![],
            vec![s * inv],
            needs,
            Some(Box::new(move |_vals, g, grads| {
                let g0 = g[0] * inv;
                let buf = grads.buf(a.0, n);
                for o in buf.iter_mut() {
                    *o = *o + g0;
                }
            })),
        )
    }

    /// Reduces a rank-2 tensor along `axis` (0: column sums, 1: row sums).
    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let inner = self.inner.borrow();
        let (rows, cols) = rank2(&inner.shapes[a.0], "sum_axis")?;
        if axis > 1 {
            return Err(Error::Dimension { op: "sum_axis", detail: format!("axis {axis} out of range") });
        }
        let va = &inner.values[a.0];
        let out_len = if axis == 0 { cols } else { rows };
        let mut out = vec![T::zero(); out_len];
        if axis == 0 {
            for i in 0..rows {
                for j in 0..cols {
                    out[j] = out[j] + va[i * cols + j];
                }
            }
        } else {
            for i in 0..rows {
                let mut s = T::zero();
                for j in 0..cols {
                    s = s + va[i * cols + j];
                }
                out[i] = s;
            }
        }
        let needs = inner.needs_grad[a.0];
        drop(inner);
        Ok(self.push(
            vec![out_len],
            out,
            needs,
            Some(Box::new(move |_vals, g, grads| {
                let buf = grads.buf(a.0, rows * cols);
                if axis == 0 {
                    for i in 0..rows {
                        for j in 0..cols {
                            buf[i * cols + j] = buf[i * cols + j] + g[j];
                        }
                    }
                } else {
                    for i in 0..rows {
                        for j in 0..cols {
                            buf[i * cols + j] = buf[i * cols + j] + g[i];
                        }
                    }
                }
            })),
        ))
    }

    /// Softmax over each row of a rank-2 tensor.
    ///
    /// The normalizer is an order-invariant exact sum so that permuting the
    /// columns of a row permutes the outputs without changing any bit.
    pub fn row_softmax(&self, a: Var) -> Result<Var> {
        let inner = self.inner.borrow();
        let (rows, cols) = rank2(&inner.shapes[a.0], "row_softmax")?;
        if cols == 0 {
            return Err(Error::Dimension { op: "row_softmax", detail: "empty softmax axis".into() });
        }
        let va = &inner.values[a.0];
        let mut out = vec![T::zero(); rows * cols];
        for i in 0..rows {
            let row = &va[i * cols..(i + 1) * cols];
            let mut mx = row[0];
            for &x in row {
                if x > mx {
                    mx = x;
                }
            }
            let orow = &mut out[i * cols..(i + 1) * cols];
            let mut denom = ExactSum::new();
            for (o, &x) in orow.iter_mut().zip(row.iter()) {
                *o = (x - mx).exp();
                denom.add(*o);
            }
            let d = denom.total();
            for o in orow.iter_mut() {
                *o = *o / d;
            }
        }
        let needs = inner.needs_grad[a.0];
        drop(inner);
        Ok(self.push_with_id(vec![rows, cols], out, needs, move |me| {
            Box::new(move |vals, g, grads| {
                let y = vals.val(me.0);
                let buf = grads.buf(a.0, rows * cols);
                for i in 0..rows {
                    let yr = &y[i * cols..(i + 1) * cols];
                    let gr = &g[i * cols..(i + 1) * cols];
                    let mut dot = T::zero();
                    for (yy, gg) in yr.iter().zip(gr.iter()) {
                        dot = dot + *yy * *gg;
                    }
                    for j in 0..cols {
                        buf[i * cols + j] = buf[i * cols + j] + yr[j] * (gr[j] - dot);
                    }
                }
            })
        }))
    }

    /// Per-token standardization with learned gain/bias.
    ///
    /// Each row of `x` is shifted to zero mean and scaled to unit variance
    /// (epsilon 1e-5 inside the square root), then mapped through
    /// `gain * xhat + bias`.
    pub fn token_norm(&self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let inner = self.inner.borrow();
        let (rows, cols) = rank2(&inner.shapes[x.0], "token_norm")?;
        if cols < 2 {
            return Err(Error::Dimension {
                op: "token_norm",
                detail: format!("token dimension must be >= 2, got {cols}"),
            });
        }
        if inner.shapes[gain.0] != [cols] || inner.shapes[bias.0] != [cols] {
            return Err(Error::Dimension {
                op: "token_norm",
                detail: format!(
                    "gain/bias must have shape [{cols}], got {:?}/{:?}",
                    inner.shapes[gain.0], inner.shapes[bias.0]
                ),
            });
        }
        let eps = real::<T>(1e-5);
        let invn = T::one() / real::<T>(cols as f64);
        let vx = &inner.values[x.0];
        let vg = &inner.values[gain.0];
        let vb = &inner.values[bias.0];
        let mut out = vec![T::zero(); rows * cols];
        let mut xhat = vec![T::zero(); rows * cols];
        let mut inv_std = vec![T::zero(); rows];
        for i in 0..rows {
            let row = &vx[i * cols..(i + 1) * cols];
            let mut m = T::zero();
            for &v in row {
                m = m + v;
            }
            m = m * invn;
            let mut var = T::zero();
            for &v in row {
                let d = v - m;
                var = var + d * d;
            }
            var = var * invn;
            let istd = T::one() / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..cols {
                let xh = (row[j] - m) * istd;
                xhat[i * cols + j] = xh;
                out[i * cols + j] = vg[j] * xh + vb[j];
            }
        }
        let needs = inner.needs_grad[x.0] || inner.needs_grad[gain.0] || inner.needs_grad[bias.0];
        let (nx, ng, nb) = (inner.needs_grad[x.0], inner.needs_grad[gain.0], inner.needs_grad[bias.0]);
        drop(inner);
        Ok(self.push(
            vec![rows, cols],
            out,
            needs,
            Some(Box::new(move |vals, g, grads| {
                let vg = vals.val(gain.0);
                if nb {
                    let buf = grads.buf(bias.0, cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            buf[j] = buf[j] + g[i * cols + j];
                        }
                    }
                }
                if ng {
                    let buf = grads.buf(gain.0, cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            buf[j] = buf[j] + g[i * cols + j] * xhat[i * cols + j];
                        }
                    }
                }
                if nx {
                    let buf = grads.buf(x.0, rows * cols);
                    for i in 0..rows {
                        // u = gain .* dy restricted to this row
                        let mut mean_u = T::zero();
                        let mut mean_ux = T::zero();
                        for j in 0..cols {
                            let u = vg[j] * g[i * cols + j];
                            mean_u = mean_u + u;
                            mean_ux = mean_ux + u * xhat[i * cols + j];
                        }
                        mean_u = mean_u * invn;
                        mean_ux = mean_ux * invn;
                        for j in 0..cols {
                            let u = vg[j] * g[i * cols + j];
                            let xh = xhat[i * cols + j];
                            buf[i * cols + j] =
                                buf[i * cols + j] + inv_std[i] * (u - mean_u - xh * mean_ux);
                        }
                    }
                }
            })),
        ))
    }

    /// Inverted dropout; probability 0 is the identity.
    pub fn dropout(&self, a: Var, p: f64, rng: &mut ChaCha20Rng) -> Var {
        if p <= 0.0 {
            return a;
        }
        let keep = 1.0 - p;
        let scale = real::<T>(1.0 / keep);
        let inner = self.inner.borrow();
        let n = inner.values[a.0].len();
        let shape = inner.shapes[a.0].clone();
        let mut mask = vec![T::zero(); n];
        let mut out = vec![T::zero(); n];
        for i in 0..n {
            let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            if u < keep {
                mask[i] = scale;
                out[i] = inner.values[a.0][i] * scale;
            }
        }
        let needs = inner.needs_grad[a.0];
        drop(inner);
        self.push(
            shape,
            out,
            needs,
            Some(Box::new(move |_vals, g, grads| {
                let buf = grads.buf(a.0, g.len());
                for i in 0..g.len() {
                    buf[i] = buf[i] + g[i] * mask[i];
                }
            })),
        )
    }

    /// Euclidean norm of all entries (any rank).
    pub fn l2_norm(&self, a: Var) -> Var {
        let inner = self.inner.borrow();
        let mut s = T::zero();
        for &x in &inner.values[a.0] {
            s = s + x * x;
        }
        let norm = s.sqrt();
        let needs = inner.needs_grad[a.0];
        let n = inner.values[a.0].len();
        drop(inner);
        self.push(
            vec![],
            vec![norm],
            needs,
            Some(Box::new(move |vals, g, grads| {
                if norm == T::zero() {
                    return;
                }
                let va = vals.val(a.0);
                let g0 = g[0] / norm;
                let buf = grads.buf(a.0, n);
                for i in 0..n {
                    buf[i] = buf[i] + g0 * va[i];
                }
            })),
        )
    }

    /// Adds a length-`cols` bias vector to every row.
    pub fn add_row_broadcast(&self, x: Var, b: Var) -> Result<Var> {
        let inner = self.inner.borrow();
        let (rows, cols) = rank2(&inner.shapes[x.0], "add_row_broadcast")?;
        if inner.shapes[b.0] != [cols] {
            return Err(Error::Dimension {
                op: "add_row_broadcast",
                detail: format!("bias shape {:?}, expected [{cols}]", inner.shapes[b.0]),
            });
        }
        let vx = &inner.values[x.0];
        let vb = &inner.values[b.0];
        let mut out = vec![T::zero(); rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[i * cols + j] = vx[i * cols + j] + vb[j];
            }
        }
        let needs = inner.needs_grad[x.0] || inner.needs_grad[b.0];
        let (nx, nb) = (inner.needs_grad[x.0], inner.needs_grad[b.0]);
        drop(inner);
        Ok(self.push(
            vec![rows, cols],
            out,
            needs,
            Some(Box::new(move |_vals, g, grads| {
                if nx {
                    grads.accum(x.0, g);
                }
                if nb {
                    let buf = grads.buf(b.0, cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            buf[j] = buf[j] + g[i * cols + j];
                        }
                    }
                }
            })),
        ))
    }

    /// Multiplies row `i` of `x` by `v[i]`.
    pub fn scale_rows(&self, x: Var, v: Var) -> Result<Var> {
        let inner = self.inner.borrow();
        let (rows, cols) = rank2(&inner.shapes[x.0], "scale_rows")?;
        if inner.shapes[v.0] != [rows] {
            return Err(Error::Dimension {
                op: "scale_rows",
                detail: format!("factor shape {:?}, expected [{rows}]", inner.shapes[v.0]),
            });
        }
        let vx = &inner.values[x.0];
        let vv = &inner.values[v.0];
        let mut out = vec![T::zero(); rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[i * cols + j] = vx[i * cols + j] * vv[i];
            }
        }
        let needs = inner.needs_grad[x.0] || inner.needs_grad[v.0];
        let (nx, nv) = (inner.needs_grad[x.0], inner.needs_grad[v.0]);
        drop(inner);
        Ok(self.push(
            vec![rows, cols],
            out,
            needs,
            Some(Box::new(move |vals, g, grads| {
                if nx {
                    let vv = vals.val(v.0);
                    let buf = grads.buf(x.0, rows * cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            buf[i * cols + j] = buf[i * cols + j] + g[i * cols + j] * vv[i];
                        }
                    }
                }
                if nv {
                    let vx = vals.val(x.0);
                    let buf = grads.buf(v.0, rows);
                    for i in 0..rows {
                        let mut s = T::zero();
                        for j in 0..cols {
                            s = s + g[i * cols + j] * vx[i * cols + j];
                        }
                        buf[i] = buf[i] + s;
                    }
                }
            })),
        ))
    }

    /// Extracts the main diagonal of a square rank-2 tensor.
    pub fn diag(&self, a: Var) -> Result<Var> {
        let inner = self.inner.borrow();
        let (rows, cols) = rank2(&inner.shapes[a.0], "diag")?;
        if rows != cols {
            return Err(Error::Dimension { op: "diag", detail: format!("{rows}x{cols} not square") });
        }
        let va = &inner.values[a.0];
        let out: Vec<T> = (0..rows).map(|i| va[i * cols + i]).collect();
        let needs = inner.needs_grad[a.0];
        drop(inner);
        Ok(self.push(
            vec![rows],
            out,
            needs,
            Some(Box::new(move |_vals, g, grads| {
                let buf = grads.buf(a.0, rows * cols);
                for i in 0..rows {
                    buf[i * cols + i] = buf[i * cols + i] + g[i];
                }
            })),
        ))
    }

    /// Embeds a vector on the diagonal of a square matrix.
    pub fn diag_embed(&self, v: Var) -> Result<Var> {
        let inner = self.inner.borrow();
        let shape = &inner.shapes[v.0];
        if shape.len() != 1 {
            return Err(Error::Dimension {
                op: "diag_embed",
                detail: format!("expected rank-1 tensor, got {shape:?}"),
            });
        }
        let n = shape[0];
        let vv = &inner.values[v.0];
        let mut out = vec![T::zero(); n * n];
        for i in 0..n {
            out[i * n + i] = vv[i];
        }
        let needs = inner.needs_grad[v.0];
        drop(inner);
        Ok(self.push(
            vec![n, n],
            out,
            needs,
            Some(Box::new(move |_vals, g, grads| {
                let buf = grads.buf(v.0, n);
                for i in 0..n {
                    buf[i] = buf[i] + g[i * n + i];
                }
            })),
        ))
    }

    /// Multiplies a tensor by a scalar node (broadcast).
    pub fn scale_by(&self, x: Var, s: Var) -> Result<Var> {
        let inner = self.inner.borrow();
        if inner.values[s.0].len() != 1 {
            return Err(Error::Dimension {
                op: "scale_by",
                detail: format!("scale must be scalar, got shape {:?}", inner.shapes[s.0]),
            });
        }
        let sv = inner.values[s.0][0];
        let shape = inner.shapes[x.0].clone();
        let out: Vec<T> = inner.values[x.0].iter().map(|&v| v * sv).collect();
        let needs = inner.needs_grad[x.0] || inner.needs_grad[s.0];
        let (nx, ns) = (inner.needs_grad[x.0], inner.needs_grad[s.0]);
        drop(inner);
        Ok(self.push(
            shape,
            out,
            needs,
            Some(Box::new(move |vals, g, grads| {
                if nx {
                    let buf = grads.buf(x.0, g.len());
                    for i in 0..g.len() {
                        buf[i] = buf[i] + g[i] * sv;
                    }
                }
                if ns {
                    let vx = vals.val(x.0);
                    let mut acc = T::zero();
                    for i in 0..g.len() {
                        acc = acc + g[i] * vx[i];
                    }
                    let buf = grads.buf(s.0, 1);
                    buf[0] = buf[0] + acc;
                }
            })),
        ))
    }

    /// Reverse sweep from a scalar loss; consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let inner = self.inner.into_inner();
        let TapeInner { shapes, values, needs_grad: _, backs } = inner;
        if shapes[loss.0].iter().product::<usize>() != 1 {
            return Err(Error::Contract {
                detail: format!("backward needs a scalar loss, got shape {:?}", shapes[loss.0]),
            });
        }
        let n = values.len();
        let mut grads = GradBufs { bufs: vec![None; n] };
        grads.buf(loss.0, 1)[0] = T::one();
        let vals = Vals { values: &values };
        for id in (0..=loss.0).rev() {
            if grads.bufs[id].is_none() {
                continue;
            }
            if let Some(back) = &backs[id] {
                let g = grads.bufs[id].take().expect("grad buffer present");
                back(&vals, &g, &mut grads);
            }
        }
        Ok(Gradients { shapes, bufs: grads.bufs })
    }
}

#[cfg(test)]
mod tests;
