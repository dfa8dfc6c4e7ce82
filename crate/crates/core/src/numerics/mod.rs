//! Dense tensor arithmetic with reverse-mode automatic differentiation.
//!
//! Tensors are row-major `f64` buffers behind shared handles. Every operation
//! on a tensor that (transitively) requires gradients records its parents and
//! a backward rule; [`Tensor::backward`] walks the recorded graph in reverse
//! topological order and accumulates gradients into every reachable node.
//! Tensors that do not require gradients record nothing, so sampling and
//! evaluation paths carry no tape overhead.
//!
//! Broadcasting follows trailing-dimension alignment: shapes are right
//! aligned and each dimension must match, be 1, or be absent.

mod adam;

pub use adam::{adam_step, AdamState};

use crate::error::{Error, Result};
use std::cell::RefCell;
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

type BackwardFn = Box<dyn Fn(&[f64], &[f64], &[Tensor])>;

struct Inner {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    needs_grad: bool,
    name: Option<String>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Dense n-dimensional tensor participating in reverse-mode differentiation.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={}",
            inner.shape, inner.requires_grad
        )?;
        if let Some(name) = &inner.name {
            write!(f, ", name={name:?}")?;
        }
        if inner.data.len() <= 8 {
            write!(f, ", data={:?})", inner.data)
        } else {
            write!(f, ", data=[{} values])", inner.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Domain {
                op: "new",
                message: format!("shape {shape:?} expects {expected} values, got {}", data.len()),
            });
        }
        Ok(Self::raw(shape.to_vec(), data, false, None, Vec::new(), None))
    }

    pub fn scalar(value: f64) -> Self {
        Self::raw(vec![1], vec![value], false, None, Vec::new(), None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::raw(shape.to_vec(), vec![0.0; n], false, None, Vec::new(), None)
    }

    pub fn ones(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::raw(shape.to_vec(), vec![1.0; n], false, None, Vec::new(), None)
    }

    /// Leaf tensor tracked by the tape, e.g. a trainable parameter.
    pub fn param(shape: &[usize], data: Vec<f64>, name: &str) -> Result<Self> {
        let t = Self::new(shape, data)?;
        {
            let mut inner = t.inner.borrow_mut();
            inner.requires_grad = true;
            inner.needs_grad = true;
            inner.name = Some(name.to_string());
        }
        Ok(t)
    }

    fn raw(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        name: Option<String>,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Self {
        let needs_grad = requires_grad || parents.iter().any(|p| p.needs_grad());
        // Nodes outside the differentiable subgraph record nothing.
        let (parents, backward) = if needs_grad {
            (parents, backward)
        } else {
            (Vec::new(), None)
        };
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape,
                data,
                grad: None,
                requires_grad,
                needs_grad,
                name,
                parents,
                backward,
            })),
        }
    }

    /// Internal constructor for operations with hand-derived backward rules.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        Self::raw(shape, data, false, None, parents, Some(backward))
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let inner = self.inner.borrow();
        debug_assert_eq!(inner.data.len(), 1, "item() on non-scalar");
        inner.data[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    fn needs_grad(&self) -> bool {
        self.inner.borrow().needs_grad
    }

    pub fn name(&self) -> Option<String> {
        self.inner.borrow().name.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Overwrite the stored values in place, e.g. when loading a checkpoint.
    pub fn set_data(&self, data: &[f64]) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if inner.data.len() != data.len() {
            return Err(Error::Domain {
                op: "set_data",
                message: format!("expected {} values, got {}", inner.data.len(), data.len()),
            });
        }
        inner.data.copy_from_slice(data);
        Ok(())
    }

    pub(crate) fn apply_update(&self, f: impl Fn(usize, f64) -> f64) {
        let mut inner = self.inner.borrow_mut();
        for (i, v) in inner.data.iter_mut().enumerate() {
            *v = f(i, *v);
        }
    }

    /// Same values, detached from the tape.
    pub fn detach(&self) -> Tensor {
        let inner = self.inner.borrow();
        Self::raw(inner.shape.clone(), inner.data.clone(), false, None, Vec::new(), None)
    }

    /// Gradient accumulation hook for operations with hand-derived backward
    /// rules outside this module.
    pub(crate) fn accumulate_from(&self, contribution: &[f64]) {
        self.accumulate_grad(contribution);
    }

    fn accumulate_grad(&self, contribution: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        let n = inner.data.len();
        let grad = inner.grad.get_or_insert_with(|| vec![0.0; n]);
        for (g, c) in grad.iter_mut().zip(contribution) {
            *g += c;
        }
    }

    // ------------------------------------------------------------------
    // elementwise binary operations with broadcasting
    // ------------------------------------------------------------------

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", |a, b| a + b, |_, _, g| (g, g))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", |a, b| a - b, |_, _, g| (g, -g))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", |a, b| a * b, |a, b, g| (g * b, g * a))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        if other.inner.borrow().data.iter().any(|&v| v == 0.0) {
            return Err(Error::DivisionByZero);
        }
        self.binary(other, "div", |a, b| a / b, |a, b, g| (g / b, -g * a / (b * b)))
    }

    /// Generic broadcast binary op. `back` maps (a, b, out_grad) to the
    /// gradient contributions for a and b at one element.
    fn binary(
        &self,
        other: &Tensor,
        op: &'static str,
        fwd: impl Fn(f64, f64) -> f64,
        back: impl Fn(f64, f64, f64) -> (f64, f64) + 'static,
    ) -> Result<Tensor> {
        let sa = self.shape();
        let sb = other.shape();
        let shape = broadcast_shapes(&sa, &sb).ok_or_else(|| Error::ShapeMismatch {
            op,
            left: sa.clone(),
            right: sb.clone(),
        })?;
        let map_a = BroadcastMap::new(&sa, &shape);
        let map_b = BroadcastMap::new(&sb, &shape);
        let da = self.inner.borrow();
        let db = other.inner.borrow();
        let n: usize = shape.iter().product();
        let mut out = Vec::with_capacity(n);
        if sa == sb {
            for (a, b) in da.data.iter().zip(db.data.iter()) {
                out.push(fwd(*a, *b));
            }
        } else {
            for i in 0..n {
                out.push(fwd(da.data[map_a.source(i)], db.data[map_b.source(i)]));
            }
        }
        drop(da);
        drop(db);
        let parents = vec![self.clone(), other.clone()];
        Ok(Tensor::from_op(
            shape,
            out,
            parents,
            Box::new(move |_, grad, parents| {
                let (pa, pb) = (&parents[0], &parents[1]);
                let da = pa.inner.borrow().data.clone();
                let db = pb.inner.borrow().data.clone();
                let mut ga = vec![0.0; da.len()];
                let mut gb = vec![0.0; db.len()];
                for (i, g) in grad.iter().enumerate() {
                    let (ia, ib) = (map_a.source(i), map_b.source(i));
                    let (ca, cb) = back(da[ia], db[ib], *g);
                    ga[ia] += ca;
                    gb[ib] += cb;
                }
                pa.accumulate_grad(&ga);
                pb.accumulate_grad(&gb);
            }),
        ))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(|x| x + c, move |_, _, g| g)
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        self.unary(move |x| x * c, move |_, _, g| g * c)
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    // ------------------------------------------------------------------
    // elementwise unary operations
    // ------------------------------------------------------------------

    fn unary(
        &self,
        fwd: impl Fn(f64) -> f64,
        back: impl Fn(f64, f64, f64) -> f64 + 'static,
    ) -> Tensor {
        let inner = self.inner.borrow();
        let out: Vec<f64> = inner.data.iter().map(|&x| fwd(x)).collect();
        let shape = inner.shape.clone();
        drop(inner);
        Tensor::from_op(
            shape,
            out,
            vec![self.clone()],
            Box::new(move |out_data, grad, parents| {
                let data = parents[0].inner.borrow().data.clone();
                let contrib: Vec<f64> = grad
                    .iter()
                    .enumerate()
                    .map(|(i, g)| back(data[i], out_data[i], *g))
                    .collect();
                parents[0].accumulate_grad(&contrib);
            }),
        )
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, |_, y, g| g * y)
    }

    pub fn log(&self) -> Result<Tensor> {
        if self.inner.borrow().data.iter().any(|&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                message: "log requires strictly positive inputs".into(),
            });
        }
        Ok(self.unary(f64::ln, |x, _, g| g / x))
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(|x| 1.0 / (1.0 + (-x).exp()), |_, y, g| g * y * (1.0 - y))
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(f64::tanh, |_, y, g| g * (1.0 - y * y))
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        self.unary(
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _, g| if x > 0.0 { g } else { g * slope },
        )
    }

    /// Numerically stable log(1 + exp(x)).
    pub fn softplus(&self) -> Tensor {
        self.unary(
            |x| x.max(0.0) + (-x.abs()).exp().ln_1p(),
            |x, _, g| g / (1.0 + (-x).exp()),
        )
    }

    pub fn square(&self) -> Tensor {
        self.unary(|x| x * x, |x, _, g| 2.0 * x * g)
    }

    // ------------------------------------------------------------------
    // reductions and structure
    // ------------------------------------------------------------------

    pub fn sum(&self) -> Tensor {
        let inner = self.inner.borrow();
        let total: f64 = inner.data.iter().sum();
        let n = inner.data.len();
        drop(inner);
        Tensor::from_op(
            vec![1],
            vec![total],
            vec![self.clone()],
            Box::new(move |_, grad, parents| {
                parents[0].accumulate_grad(&vec![grad[0]; n]);
            }),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.len() as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    /// Sum over the last axis, keeping it as a size-1 dimension.
    pub fn sum_last(&self) -> Tensor {
        let inner = self.inner.borrow();
        let shape = inner.shape.clone();
        let last = *shape.last().unwrap_or(&1);
        let rows = inner.data.len() / last.max(1);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            out.push(inner.data[r * last..(r + 1) * last].iter().sum());
        }
        let mut out_shape = shape.clone();
        if let Some(l) = out_shape.last_mut() {
            *l = 1;
        }
        drop(inner);
        Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |_, grad, parents| {
                let mut contrib = vec![0.0; rows * last];
                for r in 0..rows {
                    for c in 0..last {
                        contrib[r * last + c] = grad[r];
                    }
                }
                parents[0].accumulate_grad(&contrib);
            }),
        )
    }

    /// Row-wise maximum over the last axis as a detached constant, shape
    /// `[..., 1]`. Used to stabilise log-sum-exp; no gradient flows through.
    pub fn row_max_const(&self) -> Tensor {
        let inner = self.inner.borrow();
        let last = *inner.shape.last().unwrap_or(&1);
        let rows = inner.data.len() / last.max(1);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let m = inner.data[r * last..(r + 1) * last]
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            out.push(m);
        }
        let mut shape = inner.shape.clone();
        if let Some(l) = shape.last_mut() {
            *l = 1;
        }
        Tensor::raw(shape, out, false, None, Vec::new(), None)
    }

    /// log(sum(exp(x))) over the last axis, keepdim, stabilised by the
    /// detached row maximum (its total derivative is zero).
    pub fn logsumexp_last(&self) -> Result<Tensor> {
        let m = self.row_max_const();
        let shifted = self.sub(&m)?;
        shifted.exp().sum_last().log()?.add(&m)
    }

    /// Concatenate along the last axis. All leading dimensions must match.
    pub fn concat_last(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Domain {
                op: "concat",
                message: "nothing to concatenate".into(),
            });
        }
        let first = parts[0].shape();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: first.clone(),
                    right: s,
                });
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (p, w) in parts.iter().zip(&widths) {
            let data = p.inner.borrow();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&data.data[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let parents: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        let widths_c = widths.clone();
        Ok(Tensor::from_op(
            shape,
            out,
            parents,
            Box::new(move |_, grad, parents| {
                let mut offset = 0;
                for (p, &w) in parents.iter().zip(&widths_c) {
                    let mut contrib = vec![0.0; rows * w];
                    for r in 0..rows {
                        contrib[r * w..(r + 1) * w]
                            .copy_from_slice(&grad[r * total + offset..r * total + offset + w]);
                    }
                    p.accumulate_grad(&contrib);
                    offset += w;
                }
            }),
        ))
    }

    /// Slice `len` columns of the last axis starting at `start`.
    pub fn narrow_last(&self, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        let last = *shape.last().ok_or_else(|| Error::Domain {
            op: "narrow",
            message: "rank-0 tensor".into(),
        })?;
        if start + len > last {
            return Err(Error::Domain {
                op: "narrow",
                message: format!("range {start}..{} exceeds last dim {last}", start + len),
            });
        }
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let inner = self.inner.borrow();
        let mut out = vec![0.0; rows * len];
        for r in 0..rows {
            out[r * len..(r + 1) * len]
                .copy_from_slice(&inner.data[r * last + start..r * last + start + len]);
        }
        drop(inner);
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = len;
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |_, grad, parents| {
                let mut contrib = vec![0.0; rows * last];
                for r in 0..rows {
                    contrib[r * last + start..r * last + start + len]
                        .copy_from_slice(&grad[r * len..(r + 1) * len]);
                }
                parents[0].accumulate_grad(&contrib);
            }),
        ))
    }

    /// Gather rows of a rank-2 tensor; detached (used for minibatching).
    pub fn index_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::Domain {
                op: "index_rows",
                message: format!("expected rank-2 tensor, got {shape:?}"),
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        let inner = self.inner.borrow();
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &r in indices {
            if r >= rows {
                return Err(Error::Domain {
                    op: "index_rows",
                    message: format!("row {r} out of range {rows}"),
                });
            }
            out.extend_from_slice(&inner.data[r * cols..(r + 1) * cols]);
        }
        Tensor::new(&[indices.len(), cols], out)
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let sa = self.shape();
        let sb = other.shape();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let a = self.inner.borrow();
        let b = other.inner.borrow();
        let out = matmul_kernel(&a.data, &b.data, m, k, n);
        drop(a);
        drop(b);
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |_, grad, parents| {
                let (pa, pb) = (&parents[0], &parents[1]);
                let a = pa.inner.borrow().data.clone();
                let b = pb.inner.borrow().data.clone();
                // dA = dC . B^T, dB = A^T . dC
                let bt = transpose(&b, k, n);
                let ga = matmul_kernel(grad, &bt, m, n, k);
                let at = transpose(&a, m, k);
                let gb = matmul_kernel(&at, grad, k, m, n);
                pa.accumulate_grad(&ga);
                pb.accumulate_grad(&gb);
            }),
        ))
    }

    // ------------------------------------------------------------------
    // backward pass
    // ------------------------------------------------------------------

    /// Reverse-mode sweep from a scalar loss. Populates `grad` on every
    /// reachable tensor that participates in differentiation. Calling this
    /// twice without a grad reset is an error.
    pub fn backward(&self) -> Result<()> {
        {
            let inner = self.inner.borrow();
            if inner.data.len() != 1 {
                return Err(Error::NonScalarLoss(inner.shape.clone()));
            }
            if inner.grad.is_some() {
                return Err(Error::RepeatedBackward);
            }
        }
        let order = self.topological_order();
        self.accumulate_grad(&[1.0]);
        for node in order.iter().rev() {
            let (data, grad, has_backward) = {
                let inner = node.inner.borrow();
                match (&inner.grad, &inner.backward) {
                    (Some(g), Some(_)) => (inner.data.clone(), g.clone(), true),
                    _ => continue,
                }
            };
            if !has_backward {
                continue;
            }
            // Take the closure out while running it so the node itself can
            // appear among its own parents' ancestors without re-borrowing.
            let (backward, parents) = {
                let mut inner = node.inner.borrow_mut();
                (inner.backward.take(), inner.parents.clone())
            };
            if let Some(f) = backward {
                f(&data, &grad, &parents);
                node.inner.borrow_mut().backward = Some(f);
            }
        }
        Ok(())
    }

    fn topological_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<*const RefCell<Inner>> = HashSet::new();
        // Iterative DFS: (node, children_pushed)
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            let key = Rc::as_ptr(&node.inner);
            if expanded {
                order.push(node);
                continue;
            }
            if visited.contains(&key) {
                continue;
            }
            visited.insert(key);
            stack.push((node.clone(), true));
            let parents = node.inner.borrow().parents.clone();
            for p in parents {
                if p.needs_grad() && !visited.contains(&Rc::as_ptr(&p.inner)) {
                    stack.push((p, false));
                }
            }
        }
        order
    }
}

// ----------------------------------------------------------------------
// broadcasting helpers
// ----------------------------------------------------------------------

pub(crate) fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < a.len() { a[a.len() - 1 - i] } else { 1 };
        let db = if i < b.len() { b[b.len() - 1 - i] } else { 1 };
        out[rank - 1 - i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// Maps flat indices of a broadcast result back to flat indices of a source.
struct BroadcastMap {
    out_strides: Vec<usize>,
    src_strides: Vec<usize>,
    trivial: bool,
}

impl BroadcastMap {
    fn new(src: &[usize], out: &[usize]) -> Self {
        let rank = out.len();
        let mut out_strides = vec![1; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            out_strides[i] = out_strides[i + 1] * out[i + 1];
        }
        let mut src_full = vec![1; rank];
        src_full[rank - src.len()..].copy_from_slice(src);
        let mut strides = vec![1; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * src_full[i + 1];
        }
        let src_strides: Vec<usize> = (0..rank)
            .map(|i| if src_full[i] == 1 { 0 } else { strides[i] })
            .collect();
        let trivial = src_full == out;
        BroadcastMap {
            out_strides,
            src_strides,
            trivial,
        }
    }

    #[inline]
    fn source(&self, flat: usize) -> usize {
        if self.trivial {
            return flat;
        }
        let mut rem = flat;
        let mut idx = 0;
        for (os, ss) in self.out_strides.iter().zip(&self.src_strides) {
            let d = rem / os;
            rem %= os;
            idx += d * ss;
        }
        idx
    }
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

/// Row-major (m,k)x(k,n) product with an axpy inner loop over contiguous rows.
fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            let aval = a[i * k + l];
            if aval == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aval * bv;
            }
        }
    }
    c
}

/// Central finite-difference gradient of a scalar-valued function. Test
/// oracle for the backward pass; independent of the tape.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> Tensor, x: &Tensor, h: f64) -> Tensor {
    let shape = x.shape();
    let base = x.data();
    let mut grad = vec![0.0; base.len()];
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let fp = f(&Tensor::new(&shape, plus).expect("shape")).item();
        let fm = f(&Tensor::new(&shape, minus).expect("shape")).item();
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Tensor::new(&shape, grad).expect("shape")
}
