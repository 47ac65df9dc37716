//! Dense tensor with reverse-mode automatic differentiation.
//!
//! Tensors store `f64` values; a thread-local precision mode rounds every op
//! output through `f32` so the default 32-bit behavior and the 64-bit
//! verification mode share one code path. Feature maps are channels-last
//! (`[B, H, W, C]`), batch axis leading.

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

thread_local! {
    static PRECISION: Cell<Precision> = const { Cell::new(Precision::F32) };
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

pub fn set_precision(p: Precision) {
    PRECISION.with(|c| c.set(p));
}

pub fn precision() -> Precision {
    PRECISION.with(|c| c.get())
}

/// Runs `f` with the given precision, restoring the previous mode afterwards.
pub fn with_precision<R>(p: Precision, f: impl FnOnce() -> R) -> R {
    let prev = precision();
    set_precision(p);
    let out = f();
    set_precision(prev);
    out
}

/// Disables graph recording inside `f` (inference paths).
pub fn with_no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = NO_GRAD.with(|c| c.replace(true));
    let out = f();
    NO_GRAD.with(|c| c.set(prev));
    out
}

fn grad_enabled() -> bool {
    NO_GRAD.with(|c| !c.get())
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

fn quantize(data: &mut [f64]) {
    if precision() == Precision::F32 {
        for v in data.iter_mut() {
            *v = *v as f32 as f64;
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AutogradError {
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward called twice on a consumed graph")]
    GraphConsumed,
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

type BackFn = Box<dyn Fn(&[f64])>;

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: RefCell<Option<BackFn>>,
    consumed: Cell<bool>,
}

/// Dense n-dimensional array of reals with optional gradient tracking.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn new_leaf(shape: Vec<usize>, mut data: Vec<f64>, requires_grad: bool) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match data length {}",
            data.len()
        );
        quantize(&mut data);
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents: Vec::new(),
                backward: RefCell::new(None),
                consumed: Cell::new(false),
            }),
        }
    }

    /// Builds an op output node. `back` receives the output gradient and must
    /// accumulate into the parents. Parents and closure are dropped when no
    /// input requires grad or recording is disabled.
    pub fn from_op(
        shape: Vec<usize>,
        mut data: Vec<f64>,
        parents: Vec<Tensor>,
        back: impl Fn(&[f64]) + 'static,
    ) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        quantize(&mut data);
        let track = grad_enabled() && parents.iter().any(|p| p.inner.requires_grad);
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: track,
                parents: if track { parents } else { Vec::new() },
                backward: RefCell::new(if track { Some(Box::new(back)) } else { None }),
                consumed: Cell::new(false),
            }),
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new_leaf(shape.to_vec(), data, false)
    }

    pub fn param(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new_leaf(shape.to_vec(), data, true)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(shape, vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor::from_vec(shape, vec![v; shape.iter().product()])
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(&[], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.inner.data.borrow()[0]
    }

    pub fn grad_vec(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// In-place data update for optimizer steps. Detached from any graph.
    pub fn set_data(&self, new: &[f64]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), new.len());
        d.copy_from_slice(new);
        quantize(&mut d);
    }

    pub fn has_nan(&self) -> bool {
        self.inner.data.borrow().iter().any(|v| !v.is_finite())
    }

    /// Adds `g` into this tensor's gradient buffer. Intended for the backward
    /// closures of custom ops built with [`Tensor::from_op`]; no-op when the
    /// tensor does not require grad.
    pub fn accumulate_grad(&self, g: &[f64]) {
        self.accum_grad(g);
    }

    fn accum_grad(&self, g: &[f64]) {
        if !self.inner.requires_grad {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar loss. Populates `grad` on every
    /// `requires_grad` leaf and consumes the graph.
    pub fn backward(&self) -> Result<(), AutogradError> {
        if self.numel() != 1 {
            return Err(AutogradError::NonScalarLoss(self.inner.shape.clone()));
        }
        if self.inner.consumed.get() {
            return Err(AutogradError::GraphConsumed);
        }
        self.inner.consumed.set(true);

        // Iterative postorder DFS over parents.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.inner.id);
        while let Some((node, pi)) = stack.pop() {
            if pi < node.inner.parents.len() {
                let parent = node.inner.parents[pi].clone();
                stack.push((node, pi + 1));
                if parent.inner.requires_grad && visited.insert(parent.inner.id) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }

        self.accum_grad(&[1.0]);
        for node in order.iter().rev() {
            let back = node.inner.backward.borrow_mut().take();
            if let Some(back) = back {
                let g = node.inner.grad.borrow().clone();
                if let Some(g) = g {
                    back(&g);
                }
                // Intermediate grads are no longer needed once propagated.
                if !node.inner.parents.is_empty() {
                    *node.inner.grad.borrow_mut() = None;
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// broadcasting
// ---------------------------------------------------------------------------

/// Numpy-style broadcast of two shapes (which subsumes the trailing-dimension
/// rule). Panics on incompatible extents.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "shapes {a:?} and {b:?} are not broadcastable"
        );
        out[i] = da.max(db);
    }
    out
}

fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        s[i] = acc;
        acc *= shape[i];
    }
    s
}

/// Strides of `shape` expanded to `out` rank, with 0 on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides_for(shape);
    let off = out.len() - shape.len();
    let mut s = vec![0usize; out.len()];
    for i in 0..out.len() {
        if i >= off && shape[i - off] != 1 {
            s[i] = own[i - off];
        }
    }
    s
}

/// Sums `grad` (shaped `from`) down to `to` for broadcast backward.
pub fn reduce_grad_to(grad: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return grad.to_vec();
    }
    let to_len: usize = to.iter().product();
    let mut out = vec![0.0; to_len];
    let tstrides = broadcast_strides(to, from);
    let mut idx = vec![0usize; from.len()];
    let mut toff = 0usize;
    for &g in grad {
        out[toff] += g;
        // odometer increment
        for ax in (0..from.len()).rev() {
            idx[ax] += 1;
            toff += tstrides[ax];
            if idx[ax] < from[ax] {
                break;
            }
            toff -= tstrides[ax] * from[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn binary_map(
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> (Vec<usize>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let out_shape = broadcast_shape(a.shape(), b.shape());
    let n: usize = out_shape.iter().product();
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; n];
    let mut av = vec![0.0; n];
    let mut bv = vec![0.0; n];
    if a.shape() == out_shape.as_slice() && b.shape() == out_shape.as_slice() {
        for i in 0..n {
            av[i] = ad[i];
            bv[i] = bd[i];
            out[i] = f(ad[i], bd[i]);
        }
    } else {
        let sa = broadcast_strides(a.shape(), &out_shape);
        let sb = broadcast_strides(b.shape(), &out_shape);
        let mut idx = vec![0usize; out_shape.len()];
        let (mut ao, mut bo) = (0usize, 0usize);
        for i in 0..n {
            av[i] = ad[ao];
            bv[i] = bd[bo];
            out[i] = f(ad[ao], bd[bo]);
            for ax in (0..out_shape.len()).rev() {
                idx[ax] += 1;
                ao += sa[ax];
                bo += sb[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                ao -= sa[ax] * out_shape[ax];
                bo -= sb[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
    }
    (out_shape, out, av, bv)
}

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

impl Tensor {
    fn binary(
        &self,
        other: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        dfa: impl Fn(f64, f64) -> f64 + 'static,
        dfb: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Tensor {
        let (out_shape, out, av, bv) = binary_map(self, other, f);
        let (a, b) = (self.clone(), other.clone());
        let (ash, bsh) = (self.shape().to_vec(), other.shape().to_vec());
        let osh = out_shape.clone();
        Tensor::from_op(out_shape, out, vec![a.clone(), b.clone()], move |g| {
            if a.requires_grad() {
                let ga: Vec<f64> = g.iter().zip(&av).zip(&bv).map(|((g, &x), &y)| g * dfa(x, y)).collect();
                a.accum_grad(&reduce_grad_to(&ga, &osh, &ash));
            }
            if b.requires_grad() {
                let gb: Vec<f64> = g.iter().zip(&av).zip(&bv).map(|((g, &x), &y)| g * dfb(x, y)).collect();
                b.accum_grad(&reduce_grad_to(&gb, &osh, &bsh));
            }
        })
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.binary(other, |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.binary(other, |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.binary(other, |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        self.binary(other, |x, y| x / y, |_, y| 1.0 / y, |x, y| -x / (y * y))
    }

    fn unary(
        &self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static, // (x, y) -> dy/dx
    ) -> Tensor {
        let xd = self.to_vec();
        let out: Vec<f64> = xd.iter().map(|&v| f(v)).collect();
        let yv = out.clone();
        let x = self.clone();
        let xv = xd;
        Tensor::from_op(self.shape().to_vec(), out, vec![x.clone()], move |g| {
            let gx: Vec<f64> = g
                .iter()
                .zip(xv.iter().zip(&yv))
                .map(|(g, (&x, &y))| g * df(x, y))
                .collect();
            x.accum_grad(&gx);
        })
    }

    pub fn neg(&self) -> Tensor {
        self.unary(|x| -x, |_, _| -1.0)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn silu(&self) -> Tensor {
        self.unary(|x| x * sigmoid(x), |x, _| {
            let s = sigmoid(x);
            s + x * s * (1.0 - s)
        })
    }

    pub fn softplus(&self) -> Tensor {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    pub fn square(&self) -> Tensor {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

// ---------------------------------------------------------------------------
// matmul / linear
// ---------------------------------------------------------------------------

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a^T · g`: a is [m,k], g is [m,n], result [k,n].
fn matmul_at_b(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

/// `g · b^T`: g is [m,n], b is [k,n], result [m,k].
fn matmul_a_bt(g: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (gv, bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            orow[p] = acc;
        }
    }
    out
}

impl Tensor {
    /// Standard 2-D matrix product.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape().len(), 2, "matmul lhs must be 2-D");
        assert_eq!(other.shape().len(), 2, "matmul rhs must be 2-D");
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (other.shape()[0], other.shape()[1]);
        assert_eq!(k, k2, "matmul inner extents disagree: {k} vs {k2}");
        let out = matmul_raw(&self.data(), &other.data(), m, k, n);
        let (a, b) = (self.clone(), other.clone());
        let (av, bv) = (self.to_vec(), other.to_vec());
        Tensor::from_op(vec![m, n], out, vec![a.clone(), b.clone()], move |g| {
            if a.requires_grad() {
                a.accum_grad(&matmul_a_bt(g, &bv, m, k, n));
            }
            if b.requires_grad() {
                b.accum_grad(&matmul_at_b(&av, g, m, k, n));
            }
        })
    }

    /// Applies `w: [in, out]` over the last axis of an N-D tensor, plus bias.
    pub fn linear(&self, w: &Tensor, bias: Option<&Tensor>) -> Tensor {
        let rank = self.shape().len();
        assert!(rank >= 1);
        let d_in = self.shape()[rank - 1];
        assert_eq!(w.shape().len(), 2);
        assert_eq!(w.shape()[0], d_in, "linear: input width mismatch");
        let d_out = w.shape()[1];
        let rows: usize = self.numel() / d_in.max(1);
        let mut out = matmul_raw(&self.data(), &w.data(), rows, d_in, d_out);
        if let Some(b) = bias {
            assert_eq!(b.shape(), [d_out]);
            let bd = b.data();
            for r in 0..rows {
                for (o, bv) in out[r * d_out..(r + 1) * d_out].iter_mut().zip(bd.iter()) {
                    *o += bv;
                }
            }
        }
        let mut out_shape = self.shape().to_vec();
        out_shape[rank - 1] = d_out;
        let x = self.clone();
        let wt = w.clone();
        let bt = bias.cloned();
        let xv = self.to_vec();
        let wv = w.to_vec();
        let mut parents = vec![x.clone(), wt.clone()];
        if let Some(b) = &bt {
            parents.push(b.clone());
        }
        Tensor::from_op(out_shape, out, parents, move |g| {
            if x.requires_grad() {
                x.accum_grad(&matmul_a_bt(g, &wv, rows, d_in, d_out));
            }
            if wt.requires_grad() {
                wt.accum_grad(&matmul_at_b(&xv, g, rows, d_in, d_out));
            }
            if let Some(b) = &bt {
                if b.requires_grad() {
                    let mut gb = vec![0.0; d_out];
                    for r in 0..rows {
                        for (acc, gv) in gb.iter_mut().zip(&g[r * d_out..(r + 1) * d_out]) {
                            *acc += gv;
                        }
                    }
                    b.accum_grad(&gb);
                }
            }
        })
    }
}

// ---------------------------------------------------------------------------
// convolutions (channels-last)
// ---------------------------------------------------------------------------

impl Tensor {
    /// Cross-correlation: x `[B,H,W,Cin]`, w `[kh,kw,Cin,Cout]`, bias `[Cout]`.
    pub fn conv2d(&self, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
        assert!(stride >= 1, "conv2d: stride must be >= 1");
        let [b, h, wd, cin] = dims4(self.shape(), "conv2d input");
        let [kh, kw, cin2, cout] = dims4(w.shape(), "conv2d kernel");
        assert_eq!(cin, cin2, "conv2d: channel mismatch");
        let oh = out_extent(h, kh, pad, stride);
        let ow = out_extent(wd, kw, pad, stride);
        assert!(oh > 0 && ow > 0, "conv2d: nonpositive output extent");
        let xd = self.data();
        let wv = w.to_vec();
        let bd: Vec<f64> = bias.map(|b| b.to_vec()).unwrap_or_else(|| vec![0.0; cout]);
        let mut out = vec![0.0; b * oh * ow * cout];
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    let obase = ((bi * oh + oy) * ow + ox) * cout;
                    let acc = &mut out[obase..obase + cout];
                    acc.copy_from_slice(&bd);
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let xbase = ((bi * h + iy as usize) * wd + ix as usize) * cin;
                            let wbase = (ky * kw + kx) * cin * cout;
                            for ci in 0..cin {
                                let xv = xd[xbase + ci];
                                if xv == 0.0 {
                                    continue;
                                }
                                let wrow = &wv[wbase + ci * cout..wbase + (ci + 1) * cout];
                                for (a, &wvv) in acc.iter_mut().zip(wrow) {
                                    *a += xv * wvv;
                                }
                            }
                        }
                    }
                }
            }
        }
        drop(xd);
        let x = self.clone();
        let wt = w.clone();
        let bt = bias.cloned();
        let xv = self.to_vec();
        let mut parents = vec![x.clone(), wt.clone()];
        if let Some(bb) = &bt {
            parents.push(bb.clone());
        }
        Tensor::from_op(vec![b, oh, ow, cout], out, parents, move |g| {
            let mut gx = vec![0.0; xv.len()];
            let mut gw = vec![0.0; wv.len()];
            let mut gb = vec![0.0; cout];
            for bi in 0..b {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let grow = &g[((bi * oh + oy) * ow + ox) * cout..((bi * oh + oy) * ow + ox + 1) * cout];
                        for (gbv, gv) in gb.iter_mut().zip(grow) {
                            *gbv += gv;
                        }
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xbase = ((bi * h + iy as usize) * wd + ix as usize) * cin;
                                let wbase = (ky * kw + kx) * cin * cout;
                                for ci in 0..cin {
                                    let xvv = xv[xbase + ci];
                                    let wrow = &wv[wbase + ci * cout..wbase + (ci + 1) * cout];
                                    let gwrow = &mut gw[wbase + ci * cout..wbase + (ci + 1) * cout];
                                    let mut acc = 0.0;
                                    for ((gv, &wvv), gwv) in grow.iter().zip(wrow).zip(gwrow) {
                                        acc += gv * wvv;
                                        *gwv += gv * xvv;
                                    }
                                    gx[xbase + ci] += acc;
                                }
                            }
                        }
                    }
                }
            }
            if x.requires_grad() {
                x.accum_grad(&gx);
            }
            if wt.requires_grad() {
                wt.accum_grad(&gw);
            }
            if let Some(bb) = &bt {
                if bb.requires_grad() {
                    bb.accum_grad(&gb);
                }
            }
        })
    }

    /// Per-channel cross-correlation: x `[B,H,W,C]`, w `[k,k,C]`, odd k,
    /// same padding. No cross-channel mixing.
    pub fn conv2d_depthwise(&self, w: &Tensor, bias: Option<&Tensor>) -> Tensor {
        let [b, h, wd, c] = dims4(self.shape(), "depthwise input");
        let kdims = w.shape();
        assert_eq!(kdims.len(), 3, "depthwise kernel must be [k,k,C]");
        let k = kdims[0];
        assert_eq!(kdims[1], k);
        assert_eq!(kdims[2], c, "depthwise: channel mismatch");
        assert!(k % 2 == 1, "depthwise kernel size must be odd");
        let pad = (k - 1) / 2;
        let xd = self.data();
        let wv = w.to_vec();
        let bd: Vec<f64> = bias.map(|t| t.to_vec()).unwrap_or_else(|| vec![0.0; c]);
        let mut out = vec![0.0; b * h * wd * c];
        for bi in 0..b {
            for oy in 0..h {
                for ox in 0..wd {
                    let obase = ((bi * h + oy) * wd + ox) * c;
                    let acc = &mut out[obase..obase + c];
                    acc.copy_from_slice(&bd);
                    for ky in 0..k {
                        let iy = (oy + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let xbase = ((bi * h + iy as usize) * wd + ix as usize) * c;
                            let wbase = (ky * k + kx) * c;
                            for ci in 0..c {
                                acc[ci] += xd[xbase + ci] * wv[wbase + ci];
                            }
                        }
                    }
                }
            }
        }
        drop(xd);
        let x = self.clone();
        let wt = w.clone();
        let bt = bias.cloned();
        let xv = self.to_vec();
        let mut parents = vec![x.clone(), wt.clone()];
        if let Some(bb) = &bt {
            parents.push(bb.clone());
        }
        Tensor::from_op(vec![b, h, wd, c], out, parents, move |g| {
            let mut gx = vec![0.0; xv.len()];
            let mut gw = vec![0.0; wv.len()];
            let mut gb = vec![0.0; c];
            for bi in 0..b {
                for oy in 0..h {
                    for ox in 0..wd {
                        let grow = &g[((bi * h + oy) * wd + ox) * c..((bi * h + oy) * wd + ox + 1) * c];
                        for (a, gv) in gb.iter_mut().zip(grow) {
                            *a += gv;
                        }
                        for ky in 0..k {
                            let iy = (oy + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xbase = ((bi * h + iy as usize) * wd + ix as usize) * c;
                                let wbase = (ky * k + kx) * c;
                                for ci in 0..c {
                                    gx[xbase + ci] += grow[ci] * wv[wbase + ci];
                                    gw[wbase + ci] += grow[ci] * xv[xbase + ci];
                                }
                            }
                        }
                    }
                }
            }
            if x.requires_grad() {
                x.accum_grad(&gx);
            }
            if wt.requires_grad() {
                wt.accum_grad(&gw);
            }
            if let Some(bb) = &bt {
                if bb.requires_grad() {
                    bb.accum_grad(&gb);
                }
            }
        })
    }
}

fn dims4(shape: &[usize], what: &str) -> [usize; 4] {
    assert_eq!(shape.len(), 4, "{what} must be 4-D, got {shape:?}");
    [shape[0], shape[1], shape[2], shape[3]]
}

fn out_extent(input: usize, k: usize, pad: usize, stride: usize) -> usize {
    let padded = input + 2 * pad;
    if padded < k {
        0
    } else {
        (padded - k) / stride + 1
    }
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

impl Tensor {
    /// Reduces over `axes`. Max routes gradient to the first argmax occurrence
    /// in scan order.
    pub fn reduce(&self, kind: Reduce, axes: &[usize], keepdims: bool) -> Tensor {
        let rank = self.shape().len();
        for &ax in axes {
            assert!(ax < rank, "reduce: axis {ax} out of range for rank {rank}");
            assert!(self.shape()[ax] > 0, "reduce: empty reduction axis {ax}");
        }
        let reduced: Vec<bool> = (0..rank).map(|i| axes.contains(&i)).collect();
        let out_shape_kept: Vec<usize> = (0..rank)
            .map(|i| if reduced[i] { 1 } else { self.shape()[i] })
            .collect();
        let out_shape: Vec<usize> = if keepdims {
            out_shape_kept.clone()
        } else {
            (0..rank).filter(|&i| !reduced[i]).map(|i| self.shape()[i]).collect()
        };
        let n_out: usize = out_shape_kept.iter().product();
        let count: usize = (0..rank).filter(|&i| reduced[i]).map(|i| self.shape()[i]).product();
        let xd = self.data();
        let ostrides = broadcast_strides(&out_shape_kept, self.shape());
        let mut out = vec![
            match kind {
                Reduce::Max => f64::NEG_INFINITY,
                _ => 0.0,
            };
            n_out
        ];
        let mut argmax = if kind == Reduce::Max { vec![0usize; n_out] } else { Vec::new() };
        let mut idx = vec![0usize; rank];
        let mut ooff = 0usize;
        for (i, &v) in xd.iter().enumerate() {
            match kind {
                Reduce::Sum | Reduce::Mean => out[ooff] += v,
                Reduce::Max => {
                    if v > out[ooff] {
                        out[ooff] = v;
                        argmax[ooff] = i;
                    }
                }
            }
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                ooff += ostrides[ax];
                if idx[ax] < self.shape()[ax] {
                    break;
                }
                ooff -= ostrides[ax] * self.shape()[ax];
                idx[ax] = 0;
            }
        }
        if kind == Reduce::Mean {
            for v in out.iter_mut() {
                *v /= count as f64;
            }
        }
        drop(xd);
        let x = self.clone();
        let in_shape = self.shape().to_vec();
        let ostr = ostrides;
        Tensor::from_op(out_shape, out, vec![x.clone()], move |g| {
            let mut gx = vec![0.0; in_shape.iter().product()];
            match kind {
                Reduce::Max => {
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += g[o];
                    }
                }
                Reduce::Sum | Reduce::Mean => {
                    let scale = if kind == Reduce::Mean { 1.0 / count as f64 } else { 1.0 };
                    let mut idx = vec![0usize; in_shape.len()];
                    let mut ooff = 0usize;
                    for gv in gx.iter_mut() {
                        *gv = g[ooff] * scale;
                        for ax in (0..in_shape.len()).rev() {
                            idx[ax] += 1;
                            ooff += ostr[ax];
                            if idx[ax] < in_shape[ax] {
                                break;
                            }
                            ooff -= ostr[ax] * in_shape[ax];
                            idx[ax] = 0;
                        }
                    }
                }
            }
            x.accum_grad(&gx);
        })
    }

    pub fn mean_all(&self) -> Tensor {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.reduce(Reduce::Mean, &axes, false)
    }

    pub fn sum_all(&self) -> Tensor {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.reduce(Reduce::Sum, &axes, false)
    }
}

// ---------------------------------------------------------------------------
// layernorm, reshape, gather, concat
// ---------------------------------------------------------------------------

impl Tensor {
    /// LayerNorm over the last axis with learned scale/shift.
    pub fn layernorm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        let rank = self.shape().len();
        let d = self.shape()[rank - 1];
        assert_eq!(gamma.shape(), [d], "layernorm scale shape mismatch");
        assert_eq!(beta.shape(), [d], "layernorm shift shape mismatch");
        let rows = self.numel() / d;
        let xd = self.data();
        let gd = gamma.data();
        let bd = beta.data();
        let mut out = vec![0.0; rows * d];
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let xs = &xd[r * d..(r + 1) * d];
            let mean = xs.iter().sum::<f64>() / d as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for i in 0..d {
                let h = (xs[i] - mean) * istd;
                xhat[r * d + i] = h;
                out[r * d + i] = h * gd[i] + bd[i];
            }
        }
        drop(xd);
        drop(gd);
        drop(bd);
        let x = self.clone();
        let gt = gamma.clone();
        let bt = beta.clone();
        let gv = gamma.to_vec();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![x.clone(), gt.clone(), bt.clone()],
            move |g| {
                let mut gx = vec![0.0; rows * d];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for r in 0..rows {
                    let gs = &g[r * d..(r + 1) * d];
                    let hs = &xhat[r * d..(r + 1) * d];
                    let mut sum_gh = 0.0;
                    let mut sum_ghh = 0.0;
                    for i in 0..d {
                        let gy = gs[i] * gv[i];
                        sum_gh += gy;
                        sum_ghh += gy * hs[i];
                        gg[i] += gs[i] * hs[i];
                        gb[i] += gs[i];
                    }
                    let istd = inv_std[r];
                    for i in 0..d {
                        let gy = gs[i] * gv[i];
                        gx[r * d + i] =
                            istd * (gy - sum_gh / d as f64 - hs[i] * sum_ghh / d as f64);
                    }
                }
                if x.requires_grad() {
                    x.accum_grad(&gx);
                }
                if gt.requires_grad() {
                    gt.accum_grad(&gg);
                }
                if bt.requires_grad() {
                    bt.accum_grad(&gb);
                }
            },
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.numel(),
            "reshape: element count mismatch {:?} -> {shape:?}",
            self.shape()
        );
        let x = self.clone();
        Tensor::from_op(shape.to_vec(), self.to_vec(), vec![x.clone()], move |g| {
            x.accum_grad(g);
        })
    }

    /// Token gather on `[B, T, D]`: output row `i` is input token `idx[i]`.
    /// `usize::MAX` entries produce zero rows (padding) and route no gradient.
    pub fn gather_tokens(&self, idx: &[usize]) -> Tensor {
        let shape = self.shape();
        assert_eq!(shape.len(), 3, "gather_tokens expects [B,T,D]");
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let k = idx.len();
        let xd = self.data();
        let mut out = vec![0.0; b * k * d];
        for bi in 0..b {
            for (o, &src) in idx.iter().enumerate() {
                if src == usize::MAX {
                    continue;
                }
                assert!(src < t, "gather_tokens: index {src} out of range {t}");
                out[(bi * k + o) * d..(bi * k + o + 1) * d]
                    .copy_from_slice(&xd[(bi * t + src) * d..(bi * t + src + 1) * d]);
            }
        }
        drop(xd);
        let x = self.clone();
        let idxv = idx.to_vec();
        Tensor::from_op(vec![b, k, d], out, vec![x.clone()], move |g| {
            let mut gx = vec![0.0; b * t * d];
            for bi in 0..b {
                for (o, &src) in idxv.iter().enumerate() {
                    if src == usize::MAX {
                        continue;
                    }
                    let grow = &g[(bi * k + o) * d..(bi * k + o + 1) * d];
                    let gxrow = &mut gx[(bi * t + src) * d..(bi * t + src + 1) * d];
                    for (a, gv) in gxrow.iter_mut().zip(grow) {
                        *a += gv;
                    }
                }
            }
            x.accum_grad(&gx);
        })
    }

    /// Contiguous slice `[start, start+len)` of the last axis.
    pub fn slice_last(&self, start: usize, len: usize) -> Tensor {
        let rank = self.shape().len();
        let d = self.shape()[rank - 1];
        assert!(start + len <= d, "slice_last: [{start}, {}) exceeds width {d}", start + len);
        let rows = self.numel() / d;
        let xd = self.data();
        let mut out = vec![0.0; rows * len];
        for r in 0..rows {
            out[r * len..(r + 1) * len].copy_from_slice(&xd[r * d + start..r * d + start + len]);
        }
        drop(xd);
        let mut out_shape = self.shape().to_vec();
        out_shape[rank - 1] = len;
        let x = self.clone();
        Tensor::from_op(out_shape, out, vec![x.clone()], move |g| {
            let mut gx = vec![0.0; rows * d];
            for r in 0..rows {
                gx[r * d + start..r * d + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
            }
            x.accum_grad(&gx);
        })
    }

    /// Concatenation along the last axis.
    pub fn concat_last(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let rank = parts[0].shape().len();
        let lead = &parts[0].shape()[..rank - 1];
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                assert_eq!(&p.shape()[..rank - 1], lead, "concat_last: leading dims differ");
                p.shape()[rank - 1]
            })
            .collect();
        let d_out: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = vec![0.0; rows * d_out];
        let mut off = 0usize;
        for (p, &w) in parts.iter().zip(&widths) {
            let pd = p.data();
            for r in 0..rows {
                out[r * d_out + off..r * d_out + off + w].copy_from_slice(&pd[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut out_shape = lead.to_vec();
        out_shape.push(d_out);
        let owned: Vec<Tensor> = parts.to_vec();
        let widths2 = widths.clone();
        Tensor::from_op(out_shape, out, owned.clone(), move |g| {
            let mut off = 0usize;
            for (p, &w) in owned.iter().zip(&widths2) {
                if p.requires_grad() {
                    let mut gp = vec![0.0; rows * w];
                    for r in 0..rows {
                        gp[r * w..(r + 1) * w]
                            .copy_from_slice(&g[r * d_out + off..r * d_out + off + w]);
                    }
                    p.accum_grad(&gp);
                }
                off += w;
            }
        })
    }

    /// Mean softmax cross-entropy of `[B, K]` logits against integer labels.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Tensor {
        assert_eq!(self.shape().len(), 2, "cross-entropy expects [B,K] logits");
        let (b, k) = (self.shape()[0], self.shape()[1]);
        assert_eq!(labels.len(), b, "label count mismatch");
        for &l in labels {
            assert!(l < k, "label {l} out of range for {k} classes");
        }
        let xd = self.data();
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for r in 0..b {
            let row = &xd[r * k..(r + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for i in 0..k {
                let e = (row[i] - m).exp();
                probs[r * k + i] = e;
                z += e;
            }
            for i in 0..k {
                probs[r * k + i] /= z;
            }
            loss += z.ln() + m - row[labels[r]];
        }
        loss /= b as f64;
        drop(xd);
        let x = self.clone();
        let labels = labels.to_vec();
        Tensor::from_op(vec![], vec![loss], vec![x.clone()], move |g| {
            let scale = g[0] / b as f64;
            let mut gx = probs.clone();
            for (r, &l) in labels.iter().enumerate() {
                gx[r * k + l] -= 1.0;
            }
            for v in gx.iter_mut() {
                *v *= scale;
            }
            x.accum_grad(&gx);
        })
    }
}

// ---------------------------------------------------------------------------
// finite differences (test oracle support)
// ---------------------------------------------------------------------------

/// Central finite-difference gradient of a scalar function, h per coordinate.
pub fn finite_difference<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// `|a-b| <= tol * max(1, |a|, |b|)` elementwise; returns worst relative error.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}
