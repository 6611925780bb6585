//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a shared handle to a row-major buffer plus an optional
//! gradient buffer. Forward operations are methods on [`Tape`]; each call
//! computes the result eagerly and records a backward rule. Calling
//! [`Tape::backward`] consumes the tape and accumulates `dloss/dt` into the
//! gradient buffer of every tensor that requires one, so a second backward
//! pass over the same records is impossible by construction.
//!
//! Tensor data is immutable during a forward/backward pass; only gradient
//! buffers (during backward) and parameter values (between steps, via
//! [`Tensor::data_mut`]) change. All kernels are sequential, so results are
//! reproducible bit-for-bit for a fixed seed.

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: Cell<bool>,
    grad: RefCell<Option<Vec<f64>>>,
}

/// Shared handle to an n-dimensional f64 array. Cloning is cheap.
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad.get())
            .finish()
    }
}

impl Tensor {
    /// Builds a tensor from a shape and row-major data. The element count
    /// must match the shape product (an empty shape means a scalar).
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Self::raw(shape, data, false))
    }

    /// Trainable tensor: same as [`Tensor::new`] with `requires_grad` set.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::new(shape, data)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        Self::raw(shape, vec![0.0; n], false)
    }

    pub fn ones(shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        Self::raw(shape, vec![1.0; n], false)
    }

    pub fn scalar(v: f64) -> Tensor {
        Self::raw(vec![], vec![v], false)
    }

    /// I.i.d. uniform values on `[lo, hi)`.
    pub fn rand_uniform<R: Rng + ?Sized>(
        shape: Vec<usize>,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Self::raw(shape, data, false)
    }

    fn raw(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        Tensor(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            requires_grad: Cell::new(requires_grad),
            grad: RefCell::new(None),
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.get()
    }

    pub fn set_requires_grad(&self, flag: bool) {
        self.0.requires_grad.set(flag);
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    /// Mutable access to the raw buffer (optimizer updates, test probes).
    pub fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// The single element of a scalar (or one-element) tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::NotScalarLoss(self.0.shape.clone()));
        }
        Ok(self.0.data.borrow()[0])
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    /// Borrow of the raw gradient slot, for backward closures outside this
    /// module.
    pub(crate) fn grad_ref(&self) -> Ref<'_, Option<Vec<f64>>> {
        self.0.grad.borrow()
    }

    pub fn clear_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Adds `delta` into the gradient buffer, allocating zeros on first use.
    pub fn accum_grad(&self, delta: &[f64]) {
        let mut g = self.0.grad.borrow_mut();
        match g.as_mut() {
            Some(buf) => {
                for (gi, di) in buf.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *g = Some(delta.to_vec()),
        }
    }

    /// Independent copy of the data with a fresh identity. Gradients are not
    /// copied; `requires_grad` is preserved.
    pub fn deep_clone(&self) -> Tensor {
        Self::raw(
            self.0.shape.clone(),
            self.0.data.borrow().clone(),
            self.0.requires_grad.get(),
        )
    }

    fn same_handle(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }
}

// ── broadcasting helpers ─────────────────────────────────────────────

/// Broadcast two shapes, numpy-style (align right, extents 1 stretch).
fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for d in 0..nd {
        let ea = if d < nd - a.len() { 1 } else { a[d - (nd - a.len())] };
        let eb = if d < nd - b.len() { 1 } else { b[d - (nd - b.len())] };
        out[d] = if ea == eb || eb == 1 {
            ea
        } else if ea == 1 {
            eb
        } else {
            return Err(Error::shape(op, a, b));
        };
    }
    Ok(out)
}

/// Row-major strides of `shape` padded on the left to `nd` dims, with 0
/// wherever the extent is 1 (so the index ignores that dim).
fn broadcast_strides(shape: &[usize], nd: usize) -> Vec<usize> {
    let mut strides = vec![0usize; nd];
    let offset = nd - shape.len();
    let mut acc = 1usize;
    for d in (0..shape.len()).rev() {
        strides[offset + d] = if shape[d] == 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Walks every index of `out_shape`, yielding flat offsets into two
/// broadcast operands.
fn for_each_pair(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = out_shape.iter().product();
    if numel == 0 {
        return;
    }
    let nd = out_shape.len();
    let mut coords = vec![0usize; nd];
    let (mut ia, mut ib) = (0usize, 0usize);
    for flat in 0..numel {
        f(flat, ia, ib);
        for d in (0..nd).rev() {
            coords[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
        }
    }
}

/// Splits a matmul operand shape into (batch dims, rows, cols).
fn split_matrix(op: &'static str, shape: &[usize]) -> Result<(Vec<usize>, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(op, shape, &[]));
    }
    let (batch, mat) = shape.split_at(shape.len() - 2);
    Ok((batch.to_vec(), mat[0], mat[1]))
}

/// 2D kernels; all accumulate into `out` so broadcast reduction in backward
/// falls out of repeated slice visits.
fn mm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, p: usize, n: usize) {
    for i in 0..m {
        for k in 0..p {
            let aik = a[i * p + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * n..(k + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
}

fn mm_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, p: usize) {
    // out[m,p] += g[m,n] · b[p,n]ᵀ
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for k in 0..p {
            let brow = &b[k * n..(k + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += grow[j] * brow[j];
            }
            out[i * p + k] += s;
        }
    }
}

fn mm_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, p: usize, n: usize) {
    // out[p,n] += a[m,p]ᵀ · g[m,n]
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for k in 0..p {
            let aik = a[i * p + k];
            if aik == 0.0 {
                continue;
            }
            let orow = &mut out[k * n..(k + 1) * n];
            for j in 0..n {
                orow[j] += aik * grow[j];
            }
        }
    }
}

/// Lane decomposition for reductions/softmax along one axis.
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

// ── the tape ─────────────────────────────────────────────────────────

pub(crate) struct BackwardCtx {
    produced: HashSet<u64>,
}

impl BackwardCtx {
    /// Whether backward should spend time producing a gradient for `t`:
    /// either the caller asked for it or it is an intermediate the chain
    /// rule still has to pass through.
    pub(crate) fn wants(&self, t: &Tensor) -> bool {
        t.requires_grad() || self.produced.contains(&t.id())
    }
}

pub(crate) type BackwardFn = Box<dyn Fn(&BackwardCtx, &Tensor, &[Tensor])>;

struct Record {
    output: Tensor,
    inputs: Vec<Tensor>,
    backward: BackwardFn,
}

/// Records forward operations and replays them in reverse.
pub struct Tape {
    active: bool,
    check_finite: bool,
    records: Vec<Record>,
    produced: HashSet<u64>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A recording tape; every op pushes a backward rule.
    pub fn new() -> Tape {
        Tape {
            active: true,
            check_finite: false,
            records: Vec::new(),
            produced: HashSet::new(),
        }
    }

    /// Forward-only tape for evaluation: ops compute normally but record
    /// nothing, so backward is unavailable.
    pub fn disabled() -> Tape {
        Tape {
            active: false,
            ..Tape::new()
        }
    }

    /// Debug evaluation mode: panics if any op output contains NaN or an
    /// infinity. Intended for tests and the self-check suites.
    pub fn with_finite_checks(mut self) -> Tape {
        self.check_finite = true;
        self
    }

    pub fn num_records(&self) -> usize {
        self.records.len()
    }

    pub(crate) fn out(&mut self, op: &'static str, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        if self.check_finite {
            for &v in &data {
                assert!(v.is_finite(), "non-finite value {v} produced by {op}");
            }
        }
        Tensor::raw(shape, data, false)
    }

    pub(crate) fn push(&mut self, inputs: Vec<Tensor>, output: Tensor, backward: BackwardFn) {
        if !self.active {
            return;
        }
        self.produced.insert(output.id());
        self.records.push(Record {
            output,
            inputs,
            backward,
        });
    }

    /// Runs the chain rule from `loss` back through every recorded op,
    /// adding gradients into each tensor along the way. Consumes the tape:
    /// one backward pass per tape, by construction.
    pub fn backward(self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::NotScalarLoss(loss.shape().to_vec()));
        }
        if !self.produced.contains(&loss.id()) {
            return Err(Error::DetachedTensor);
        }
        loss.accum_grad(&[1.0]);
        let ctx = BackwardCtx {
            produced: self.produced,
        };
        for rec in self.records.iter().rev() {
            if rec.output.0.grad.borrow().is_none() {
                continue; // did not feed the loss
            }
            (rec.backward)(&ctx, &rec.output, &rec.inputs);
        }
        Ok(())
    }

    // ── primitive ops ────────────────────────────────────────────────

    /// Batched matrix product `a[..., m, p] · b[..., p, n]`, broadcasting
    /// leading batch dims.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (ab, m, p) = split_matrix("matmul", a.shape())?;
        let (bb, p2, n) = split_matrix("matmul", b.shape())?;
        if p != p2 {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        let batch = broadcast_shapes("matmul", &ab, &bb)?;
        let nd = batch.len();
        let sa = broadcast_strides(&ab, nd);
        let sb = broadcast_strides(&bb, nd);
        let nbatch: usize = batch.iter().product();

        let mut data = vec![0.0; nbatch * m * n];
        {
            let ad = a.data();
            let bd = b.data();
            for_each_pair(&batch, &sa, &sb, |flat, ia, ib| {
                mm_acc(
                    &ad[ia * m * p..(ia + 1) * m * p],
                    &bd[ib * p * n..(ib + 1) * p * n],
                    &mut data[flat * m * n..(flat + 1) * m * n],
                    m,
                    p,
                    n,
                );
            });
        }
        let mut shape = batch.clone();
        shape.push(m);
        shape.push(n);
        let out = self.out("matmul", shape, data);

        self.push(
            vec![a.clone(), b.clone()],
            out.clone(),
            Box::new(move |ctx, out, inputs| {
                let (a, b) = (&inputs[0], &inputs[1]);
                let og = out.0.grad.borrow();
                let g = og.as_ref().unwrap();
                if ctx.wants(a) {
                    let mut ga = vec![0.0; a.numel()];
                    let bd = b.data();
                    for_each_pair(&batch, &sa, &sb, |flat, ia, ib| {
                        mm_nt_acc(
                            &g[flat * m * n..(flat + 1) * m * n],
                            &bd[ib * p * n..(ib + 1) * p * n],
                            &mut ga[ia * m * p..(ia + 1) * m * p],
                            m,
                            n,
                            p,
                        );
                    });
                    drop(bd);
                    a.accum_grad(&ga);
                }
                if ctx.wants(b) {
                    let mut gb = vec![0.0; b.numel()];
                    let ad = a.data();
                    for_each_pair(&batch, &sa, &sb, |flat, ia, ib| {
                        mm_tn_acc(
                            &ad[ia * m * p..(ia + 1) * m * p],
                            &g[flat * m * n..(flat + 1) * m * n],
                            &mut gb[ib * p * n..(ib + 1) * p * n],
                            m,
                            p,
                            n,
                        );
                    });
                    drop(ad);
                    b.accum_grad(&gb);
                }
            }),
        );
        Ok(out)
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, a: &Tensor) -> Result<Tensor> {
        let (batch, m, n) = split_matrix("transpose", a.shape())?;
        let nbatch: usize = batch.iter().product();
        let mut data = vec![0.0; a.numel()];
        {
            let ad = a.data();
            for bix in 0..nbatch {
                let src = &ad[bix * m * n..(bix + 1) * m * n];
                let dst = &mut data[bix * m * n..(bix + 1) * m * n];
                for i in 0..m {
                    for j in 0..n {
                        dst[j * m + i] = src[i * n + j];
                    }
                }
            }
        }
        let mut shape = batch;
        shape.push(n);
        shape.push(m);
        let out = self.out("transpose", shape, data);

        self.push(
            vec![a.clone()],
            out.clone(),
            Box::new(move |ctx, out, inputs| {
                let a = &inputs[0];
                if !ctx.wants(a) {
                    return;
                }
                let og = out.0.grad.borrow();
                let g = og.as_ref().unwrap();
                let mut ga = vec![0.0; a.numel()];
                for bix in 0..nbatch {
                    let src = &g[bix * m * n..(bix + 1) * m * n];
                    let dst = &mut ga[bix * m * n..(bix + 1) * m * n];
                    for i in 0..m {
                        for j in 0..n {
                            dst[i * n + j] = src[j * m + i];
                        }
                    }
                }
                a.accum_grad(&ga);
            }),
        );
        Ok(out)
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: &Tensor,
        b: &Tensor,
        fwd: fn(f64, f64) -> f64,
        da: fn(f64, f64) -> f64,
        db: fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let shape = broadcast_shapes(op, a.shape(), b.shape())?;
        let nd = shape.len();
        let sa = broadcast_strides(a.shape(), nd);
        let sb = broadcast_strides(b.shape(), nd);
        let mut data = vec![0.0; shape.iter().product()];
        {
            let ad = a.data();
            let bd = b.data();
            for_each_pair(&shape, &sa, &sb, |flat, ia, ib| {
                data[flat] = fwd(ad[ia], bd[ib]);
            });
        }
        let out = self.out(op, shape.clone(), data);

        self.push(
            vec![a.clone(), b.clone()],
            out.clone(),
            Box::new(move |ctx, out, inputs| {
                let (a, b) = (&inputs[0], &inputs[1]);
                let og = out.0.grad.borrow();
                let g = og.as_ref().unwrap();
                let wa = ctx.wants(a);
                let wb = ctx.wants(b);
                if !wa && !wb {
                    return;
                }
                let mut ga = vec![0.0; if wa { a.numel() } else { 0 }];
                let mut gb = vec![0.0; if wb { b.numel() } else { 0 }];
                {
                    let ad = a.data();
                    let bd = b.data();
                    for_each_pair(&shape, &sa, &sb, |flat, ia, ib| {
                        if wa {
                            ga[ia] += g[flat] * da(ad[ia], bd[ib]);
                        }
                        if wb {
                            gb[ib] += g[flat] * db(ad[ia], bd[ib]);
                        }
                    });
                }
                if wa {
                    a.accum_grad(&ga);
                }
                if wb {
                    b.accum_grad(&gb);
                }
            }),
        );
        Ok(out)
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("add", a, b, |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("sub", a, b, |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("mul", a, b, |x, y| x * y, |_, y| y, |x, _| x)
    }

    /// Multiplies every element by the constant `c`.
    pub fn scale(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        let data = a.data().iter().map(|&x| c * x).collect();
        let out = self.out("scale", a.shape().to_vec(), data);
        self.push(
            vec![a.clone()],
            out.clone(),
            Box::new(move |ctx, out, inputs| {
                let a = &inputs[0];
                if !ctx.wants(a) {
                    return;
                }
                let og = out.0.grad.borrow();
                let g = og.as_ref().unwrap();
                let ga: Vec<f64> = g.iter().map(|&v| c * v).collect();
                a.accum_grad(&ga);
            }),
        );
        Ok(out)
    }

    /// Rectified linear unit. The subgradient at exactly 0 is taken as 0.
    pub fn relu(&mut self, a: &Tensor) -> Result<Tensor> {
        let data = a.data().iter().map(|&x| x.max(0.0)).collect();
        let out = self.out("relu", a.shape().to_vec(), data);
        self.push(
            vec![a.clone()],
            out.clone(),
            Box::new(|ctx, out, inputs| {
                let a = &inputs[0];
                if !ctx.wants(a) {
                    return;
                }
                let og = out.0.grad.borrow();
                let g = og.as_ref().unwrap();
                let ad = a.data();
                let ga: Vec<f64> = g
                    .iter()
                    .zip(ad.iter())
                    .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                drop(ad);
                a.accum_grad(&ga);
            }),
        );
        Ok(out)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: &Tensor, axis: usize) -> Result<Tensor> {
        if axis >= a.shape().len() {
            return Err(Error::shape("softmax", a.shape(), &[axis]));
        }
        let shape = a.shape().to_vec();
        let (outer, len, inner) = lanes(&shape, axis);
        let mut data = a.to_vec();
        for o in 0..outer {
            for inn in 0..inner {
                let base = o * len * inner + inn;
                let mut max = f64::NEG_INFINITY;
                for i in 0..len {
                    max = max.max(data[base + i * inner]);
                }
                let mut sum = 0.0;
                for i in 0..len {
                    let e = (data[base + i * inner] - max).exp();
                    data[base + i * inner] = e;
                    sum += e;
                }
                for i in 0..len {
                    data[base + i * inner] /= sum;
                }
            }
        }
        let out = self.out("softmax", shape, data);

        self.push(
            vec![a.clone()],
            out.clone(),
            Box::new(move |ctx, out, inputs| {
                let a = &inputs[0];
                if !ctx.wants(a) {
                    return;
                }
                let og = out.0.grad.borrow();
                let g = og.as_ref().unwrap();
                let sd = out.data();
                let mut ga = vec![0.0; a.numel()];
                for o in 0..outer {
                    for inn in 0..inner {
                        let base = o * len * inner + inn;
                        let mut dot = 0.0;
                        for i in 0..len {
                            let ix = base + i * inner;
                            dot += g[ix] * sd[ix];
                        }
                        for i in 0..len {
                            let ix = base + i * inner;
                            ga[ix] = sd[ix] * (g[ix] - dot);
                        }
                    }
                }
                drop(sd);
                a.accum_grad(&ga);
            }),
        );
        Ok(out)
    }

    fn reduce_axis(&mut self, op: &'static str, a: &Tensor, axis: usize, mean: bool) -> Result<Tensor> {
        if axis >= a.shape().len() {
            return Err(Error::shape(op, a.shape(), &[axis]));
        }
        let shape = a.shape().to_vec();
        let (outer, len, inner) = lanes(&shape, axis);
        let scale = if mean { 1.0 / len as f64 } else { 1.0 };
        let mut data = vec![0.0; outer * inner];
        {
            let ad = a.data();
            for o in 0..outer {
                for inn in 0..inner {
                    let mut s = 0.0;
                    for i in 0..len {
                        s += ad[o * len * inner + i * inner + inn];
                    }
                    data[o * inner + inn] = s * scale;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let out = self.out(op, out_shape, data);

        self.push(
            vec![a.clone()],
            out.clone(),
            Box::new(move |ctx, out, inputs| {
                let a = &inputs[0];
                if !ctx.wants(a) {
                    return;
                }
                let og = out.0.grad.borrow();
                let g = og.as_ref().unwrap();
                let mut ga = vec![0.0; a.numel()];
                for o in 0..outer {
                    for inn in 0..inner {
                        let gv = g[o * inner + inn] * scale;
                        for i in 0..len {
                            ga[o * len * inner + i * inner + inn] = gv;
                        }
                    }
                }
                a.accum_grad(&ga);
            }),
        );
        Ok(out)
    }

    /// Arithmetic mean along `axis`; the axis is removed from the shape.
    pub fn mean_axis(&mut self, a: &Tensor, axis: usize) -> Result<Tensor> {
        self.reduce_axis("mean", a, axis, true)
    }

    /// Sum along `axis`; the axis is removed from the shape.
    pub fn sum_axis(&mut self, a: &Tensor, axis: usize) -> Result<Tensor> {
        self.reduce_axis("sum", a, axis, false)
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum_all(&mut self, a: &Tensor) -> Result<Tensor> {
        let s: f64 = a.data().iter().sum();
        let out = self.out("sum_all", vec![], vec![s]);
        self.push(
            vec![a.clone()],
            out.clone(),
            Box::new(|ctx, out, inputs| {
                let a = &inputs[0];
                if !ctx.wants(a) {
                    return;
                }
                let og = out.0.grad.borrow();
                let g = og.as_ref().unwrap()[0];
                a.accum_grad(&vec![g; a.numel()]);
            }),
        );
        Ok(out)
    }

    /// Concatenates tensors along `axis`. All other extents must agree.
    pub fn concat(&mut self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidSpec("concat of zero tensors".into()))?;
        if axis >= first.shape().len() {
            return Err(Error::shape("concat", first.shape(), &[axis]));
        }
        let mut axis_total = 0;
        for p in parts {
            if p.shape().len() != first.shape().len() {
                return Err(Error::shape("concat", first.shape(), p.shape()));
            }
            for (d, (&ea, &eb)) in first.shape().iter().zip(p.shape()).enumerate() {
                if d != axis && ea != eb {
                    return Err(Error::shape("concat", first.shape(), p.shape()));
                }
            }
            axis_total += p.shape()[axis];
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = axis_total;
        let (outer, _, inner) = lanes(&shape, axis);

        let mut data = vec![0.0; shape.iter().product()];
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let out_row = axis_total * inner;
        {
            let mut offset = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                let pd = p.data();
                for o in 0..outer {
                    data[o * out_row + offset..o * out_row + offset + w]
                        .copy_from_slice(&pd[o * w..(o + 1) * w]);
                }
                offset += w;
            }
        }
        let out = self.out("concat", shape, data);

        let inputs: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        self.push(
            inputs,
            out.clone(),
            Box::new(move |ctx, out, inputs| {
                let og = out.0.grad.borrow();
                let g = og.as_ref().unwrap();
                let mut offset = 0;
                for (p, &w) in inputs.iter().zip(&widths) {
                    if ctx.wants(p) {
                        let mut gp = vec![0.0; p.numel()];
                        for o in 0..outer {
                            gp[o * w..(o + 1) * w]
                                .copy_from_slice(&g[o * out_row + offset..o * out_row + offset + w]);
                        }
                        p.accum_grad(&gp);
                    }
                    offset += w;
                }
            }),
        );
        Ok(out)
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(&mut self, a: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != a.numel() {
            return Err(Error::shape("reshape", a.shape(), &shape));
        }
        let out = self.out("reshape", shape, a.to_vec());
        self.push(
            vec![a.clone()],
            out.clone(),
            Box::new(|ctx, out, inputs| {
                let a = &inputs[0];
                if !ctx.wants(a) {
                    return;
                }
                let og = out.0.grad.borrow();
                a.accum_grad(og.as_ref().unwrap());
            }),
        );
        Ok(out)
    }

    /// Normalizes the last axis to zero mean and unit variance (population
    /// variance, `eps` inside the square root), then applies `gain` and
    /// `bias` per feature.
    pub fn layer_norm(
        &mut self,
        x: &Tensor,
        gain: &Tensor,
        bias: &Tensor,
        eps: f64,
    ) -> Result<Tensor> {
        let d = *x
            .shape()
            .last()
            .ok_or_else(|| Error::shape("layer_norm", x.shape(), &[]))?;
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::shape("layer_norm", x.shape(), gain.shape()));
        }
        let rows = x.numel() / d;
        let mut data = vec![0.0; x.numel()];
        {
            let xd = x.data();
            let gd = gain.data();
            let bd = bias.data();
            for r in 0..rows {
                let row = &xd[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..d {
                    data[r * d + j] = (row[j] - mean) * inv * gd[j] + bd[j];
                }
            }
        }
        let out = self.out("layer_norm", x.shape().to_vec(), data);

        self.push(
            vec![x.clone(), gain.clone(), bias.clone()],
            out.clone(),
            Box::new(move |ctx, out, inputs| {
                let (x, gain, bias) = (&inputs[0], &inputs[1], &inputs[2]);
                let og = out.0.grad.borrow();
                let g = og.as_ref().unwrap();
                let xd = x.data();
                let gd = gain.data();
                let wx = ctx.wants(x);
                let wg = ctx.wants(gain);
                let wb = ctx.wants(bias);
                let mut gx = vec![0.0; if wx { x.numel() } else { 0 }];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for r in 0..rows {
                    let row = &xd[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var =
                        row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    // xhat and the two lane means the input gradient needs
                    let mut dot_dxhat = 0.0;
                    let mut dot_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv;
                        let dxhat = grow[j] * gd[j];
                        dot_dxhat += dxhat;
                        dot_dxhat_xhat += dxhat * xhat;
                        if wg {
                            gg[j] += grow[j] * xhat;
                        }
                        if wb {
                            gb[j] += grow[j];
                        }
                    }
                    if wx {
                        let m1 = dot_dxhat / d as f64;
                        let m2 = dot_dxhat_xhat / d as f64;
                        for j in 0..d {
                            let xhat = (row[j] - mean) * inv;
                            let dxhat = grow[j] * gd[j];
                            gx[r * d + j] = inv * (dxhat - m1 - xhat * m2);
                        }
                    }
                }
                drop(xd);
                drop(gd);
                if wx {
                    x.accum_grad(&gx);
                }
                if wg {
                    gain.accum_grad(&gg);
                }
                if wb {
                    bias.accum_grad(&gb);
                }
            }),
        );
        Ok(out)
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1/(1-rate)`, so
    /// evaluation mode is an exact identity. `rate == 0` draws nothing from
    /// the RNG.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: &Tensor,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Tensor> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidRate(rate));
        }
        if !training || rate == 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - rate;
        let inv = 1.0 / keep;
        let mask: Vec<f64> = (0..x.numel())
            .map(|_| if rng.gen::<f64>() < keep { inv } else { 0.0 })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = self.out("dropout", x.shape().to_vec(), data);
        self.push(
            vec![x.clone()],
            out.clone(),
            Box::new(move |ctx, out, inputs| {
                let x = &inputs[0];
                if !ctx.wants(x) {
                    return;
                }
                let og = out.0.grad.borrow();
                let g = og.as_ref().unwrap();
                let gx: Vec<f64> = g.iter().zip(&mask).map(|(&gi, &m)| gi * m).collect();
                x.accum_grad(&gx);
            }),
        );
        Ok(out)
    }

    /// Keeps `x` where `keep` is nonzero and writes `fill` elsewhere.
    /// `keep` is a 0/1 tensor broadcastable to `x` and is treated as a
    /// constant.
    pub fn masked_fill(&mut self, x: &Tensor, keep: &Tensor, fill: f64) -> Result<Tensor> {
        let shape = broadcast_shapes("masked_fill", x.shape(), keep.shape())?;
        if shape != x.shape() {
            return Err(Error::shape("masked_fill", x.shape(), keep.shape()));
        }
        let nd = shape.len();
        let sx = broadcast_strides(x.shape(), nd);
        let sk = broadcast_strides(keep.shape(), nd);
        let mut data = vec![0.0; x.numel()];
        {
            let xd = x.data();
            let kd = keep.data();
            for_each_pair(&shape, &sx, &sk, |flat, ix, ik| {
                data[flat] = if kd[ik] != 0.0 { xd[ix] } else { fill };
            });
        }
        let out = self.out("masked_fill", shape.clone(), data);

        let keep_c = keep.clone();
        self.push(
            vec![x.clone()],
            out.clone(),
            Box::new(move |ctx, out, inputs| {
                let x = &inputs[0];
                if !ctx.wants(x) {
                    return;
                }
                let og = out.0.grad.borrow();
                let g = og.as_ref().unwrap();
                let kd = keep_c.data();
                let mut gx = vec![0.0; x.numel()];
                for_each_pair(&shape, &sx, &sk, |flat, ix, ik| {
                    if kd[ik] != 0.0 {
                        gx[ix] += g[flat];
                    }
                });
                drop(kd);
                x.accum_grad(&gx);
            }),
        );
        Ok(out)
    }

    /// Gathers rows of a `[rows, d]` matrix into `[ids.len(), d]`; backward
    /// scatter-adds into the matrix rows.
    pub fn gather_rows(&mut self, matrix: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let (rows, d) = match matrix.shape() {
            [r, d] => (*r, *d),
            s => return Err(Error::shape("gather_rows", s, &[])),
        };
        for &id in ids {
            if id >= rows {
                return Err(Error::shape("gather_rows", &[rows, d], &[id]));
            }
        }
        let mut data = vec![0.0; ids.len() * d];
        {
            let md = matrix.data();
            for (i, &id) in ids.iter().enumerate() {
                data[i * d..(i + 1) * d].copy_from_slice(&md[id * d..(id + 1) * d]);
            }
        }
        let out = self.out("gather_rows", vec![ids.len(), d], data);

        let ids = ids.to_vec();
        self.push(
            vec![matrix.clone()],
            out.clone(),
            Box::new(move |ctx, out, inputs| {
                let m = &inputs[0];
                if !ctx.wants(m) {
                    return;
                }
                let og = out.0.grad.borrow();
                let g = og.as_ref().unwrap();
                let mut gm = vec![0.0; m.numel()];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gm[id * d + j] += g[i * d + j];
                    }
                }
                m.accum_grad(&gm);
            }),
        );
        Ok(out)
    }
}

/// True when two tensors are the same handle (used in tests).
pub fn same_tensor(a: &Tensor, b: &Tensor) -> bool {
    a.same_handle(b)
}

/// Trainable `[rows, cols]` weight drawn uniform on
/// `±sqrt(6/(fan_in+fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let t = Tensor::rand_uniform(vec![rows, cols], -bound, bound, rng);
    t.set_requires_grad(true);
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_close(got: &[f64], want: &[f64], tol: f64) {
        assert_eq!(got.len(), want.len(), "length mismatch");
        for (i, (g, w)) in got.iter().zip(want).enumerate() {
            assert!(
                (g - w).abs() <= tol,
                "element {i}: got {g}, want {w} (tol {tol})"
            );
        }
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::disabled();
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = tape.matmul(&eye, &a).unwrap();
        assert_eq!(r.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_unit_vectors() {
        let mut tape = Tape::disabled();
        let a = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap();
        let r = tape.matmul(&a, &b).unwrap();
        assert_eq!(r.shape(), &[1, 1]);
        assert_eq!(r.to_vec(), vec![1.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::rand_uniform(vec![3, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(vec![4, 2], -1.0, 1.0, &mut rng);
        let mut tape = Tape::disabled();
        let r = tape.matmul(&a, &b).unwrap();

        // independent naive oracle
        let (ad, bd) = (a.to_vec(), b.to_vec());
        let mut want = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += ad[i * 4 + k] * bd[k * 2 + j];
                }
                want[i * 2 + j] = s;
            }
        }
        assert_close(&r.to_vec(), &want, 1e-12);
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::disabled();
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        let err = tape.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "message should carry shapes: {msg}");
    }

    #[test]
    fn matmul_broadcasts_batch_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::rand_uniform(vec![2, 3, 4], -1.0, 1.0, &mut rng);
        let w = Tensor::rand_uniform(vec![4, 5], -1.0, 1.0, &mut rng);
        let mut tape = Tape::disabled();
        let r = tape.matmul(&a, &w).unwrap();
        assert_eq!(r.shape(), &[2, 3, 5]);
        // slice 1 equals a[1] @ w computed separately
        let a1 = Tensor::new(vec![3, 4], a.to_vec()[12..].to_vec()).unwrap();
        let r1 = tape.matmul(&a1, &w).unwrap();
        assert_close(&r.to_vec()[15..], &r1.to_vec(), 0.0);
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut tape = Tape::disabled();
        let x = Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap();
        let s = tape.softmax(&x, 0).unwrap();
        assert_close(&s.to_vec(), &[1.0 / 3.0; 3], 1e-15);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut tape = Tape::disabled();
        let x = Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.0]).unwrap();
        let y = Tensor::new(vec![4], vec![0.3 + 37.5, -1.2 + 37.5, 2.0 + 37.5, 37.5]).unwrap();
        let sx = tape.softmax(&x, 0).unwrap();
        let sy = tape.softmax(&y, 0).unwrap();
        assert_close(&sx.to_vec(), &sy.to_vec(), 1e-12);
    }

    #[test]
    fn softmax_two_logit_hand_value() {
        // e^0.7071 / (e^0.7071 + 1) computed directly as the oracle
        let x = 0.7071_f64;
        let expect = x.exp() / (x.exp() + 1.0);
        let mut tape = Tape::disabled();
        let t = Tensor::new(vec![2], vec![x, 0.0]).unwrap();
        let s = tape.softmax(&t, 0).unwrap();
        assert_close(&s.to_vec(), &[expect, 1.0 - expect], 1e-12);
        assert_close(&s.to_vec(), &[0.6698, 0.3302], 1e-4);
    }

    #[test]
    fn softmax_rows_sum_to_one_many_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for shape in [vec![5], vec![3, 7], vec![2, 4, 6]] {
            let axis = shape.len() - 1;
            let x = Tensor::rand_uniform(shape.clone(), -10.0, 10.0, &mut rng);
            let mut tape = Tape::disabled();
            let s = tape.softmax(&x, axis).unwrap();
            let d = s.to_vec();
            let len = *shape.last().unwrap();
            for lane in d.chunks(len) {
                let sum: f64 = lane.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9, "lane sum {sum}");
                assert!(lane.iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::disabled();
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = tape.relu(&x).unwrap();
        assert_eq!(y.to_vec(), vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn mean_of_single_row_is_that_row() {
        let mut tape = Tape::disabled();
        let x = Tensor::new(vec![1, 4], vec![0.5, -2.0, 3.0, 7.0]).unwrap();
        let m = tape.mean_axis(&x, 0).unwrap();
        assert_eq!(m.shape(), &[4]);
        assert_eq!(m.to_vec(), vec![0.5, -2.0, 3.0, 7.0]);
    }

    #[test]
    fn concat_shape_arithmetic() {
        let mut tape = Tape::disabled();
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 1]);
        let c = tape.concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 4]);
    }

    #[test]
    fn layer_norm_constant_vector_collapses_to_bias() {
        let mut tape = Tape::disabled();
        let x = Tensor::new(vec![1, 4], vec![3.0; 4]).unwrap();
        let gain = Tensor::ones(vec![4]);
        let bias = Tensor::new(vec![4], vec![0.5, -0.5, 0.0, 1.0]).unwrap();
        let y = tape.layer_norm(&x, &gain, &bias, 1e-6).unwrap();
        assert_close(&y.to_vec(), &[0.5, -0.5, 0.0, 1.0], 1e-9);
    }

    #[test]
    fn layer_norm_two_point_hand_value() {
        // x = [1, -1]: mean 0, population variance 1, eps 0 → unchanged
        let mut tape = Tape::disabled();
        let x = Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap();
        let gain = Tensor::ones(vec![2]);
        let bias = Tensor::zeros(vec![2]);
        let y = tape.layer_norm(&x, &gain, &bias, 0.0).unwrap();
        assert_close(&y.to_vec(), &[1.0, -1.0], 1e-12);
    }

    #[test]
    fn layer_norm_output_mean_is_bias_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::rand_uniform(vec![5, 8], -2.0, 2.0, &mut rng);
        let gain = Tensor::new(vec![8], vec![1.7; 8]).unwrap();
        let bias = Tensor::rand_uniform(vec![8], -1.0, 1.0, &mut rng);
        let bias_mean: f64 = bias.to_vec().iter().sum::<f64>() / 8.0;
        let mut tape = Tape::disabled();
        let y = tape.layer_norm(&x, &gain, &bias, 1e-12).unwrap();
        for row in y.to_vec().chunks(8) {
            let m: f64 = row.iter().sum::<f64>() / 8.0;
            assert!((m - bias_mean).abs() < 1e-9);
        }
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap();
        let mut tape = Tape::new();
        let y = tape.dropout(&x, 0.0, true, &mut rng).unwrap();
        assert!(same_tensor(&x, &y));
    }

    #[test]
    fn dropout_eval_mode_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap();
        let mut tape = Tape::new();
        let y = tape.dropout(&x, 0.9, false, &mut rng).unwrap();
        assert!(same_tensor(&x, &y));
    }

    #[test]
    fn dropout_preserves_mean_at_high_rate() {
        // inverted dropout keeps E[output] = input
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Tensor::ones(vec![100_000]);
        let mut tape = Tape::new();
        let y = tape.dropout(&x, 0.7, true, &mut rng).unwrap();
        let mean: f64 = y.to_vec().iter().sum::<f64>() / 100_000.0;
        assert!((0.97..=1.03).contains(&mean), "mean {mean}");
    }

    #[test]
    fn dropout_invalid_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::ones(vec![3]);
        let mut tape = Tape::new();
        assert!(matches!(
            tape.dropout(&x, 1.0, true, &mut rng),
            Err(Error::InvalidRate(_))
        ));
        assert!(matches!(
            tape.dropout(&x, -0.1, true, &mut rng),
            Err(Error::InvalidRate(_))
        ));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let x = Tensor::param(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let mut tape = Tape::new();
        let loss = tape.sum_all(&x).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_two_x() {
        let x = Tensor::param(vec![3], vec![1.5, -2.0, 0.25]).unwrap();
        let mut tape = Tape::new();
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum_all(&sq).unwrap();
        tape.backward(&loss).unwrap();
        assert_close(&x.grad().unwrap(), &[3.0, -4.0, 0.5], 1e-12);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let x = Tensor::param(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut tape = Tape::new();
        let y = tape.relu(&x).unwrap();
        assert!(matches!(tape.backward(&y), Err(Error::NotScalarLoss(_))));
    }

    #[test]
    fn backward_rejects_detached_loss() {
        let x = Tensor::param(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut tape = Tape::new();
        let _ = tape.relu(&x).unwrap();
        let stray = Tensor::scalar(1.0);
        assert!(matches!(tape.backward(&stray), Err(Error::DetachedTensor)));
    }

    #[test]
    fn backward_through_broadcast_bias_add() {
        // loss = sum(x + b) with b broadcast over rows: db = row count
        let x = Tensor::param(vec![3, 2], vec![0.0; 6]).unwrap();
        let b = Tensor::param(vec![2], vec![1.0, -1.0]).unwrap();
        let mut tape = Tape::new();
        let y = tape.add(&x, &b).unwrap();
        let loss = tape.sum_all(&y).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(b.grad().unwrap(), vec![3.0, 3.0]);
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn backward_shared_input_accumulates() {
        // loss = sum(x ∘ x) via the same handle on both sides
        let x = Tensor::param(vec![2], vec![3.0, -1.0]).unwrap();
        let mut tape = Tape::new();
        let y = tape.mul(&x, &x).unwrap();
        let loss = tape.sum_all(&y).unwrap();
        tape.backward(&loss).unwrap();
        assert_close(&x.grad().unwrap(), &[6.0, -2.0], 1e-12);
    }

    #[test]
    fn gather_rows_scatter_adds_in_backward() {
        let m = Tensor::param(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut tape = Tape::new();
        let g = tape.gather_rows(&m, &[1, 1, 0]).unwrap();
        assert_eq!(g.to_vec(), vec![3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let loss = tape.sum_all(&g).unwrap();
        tape.backward(&loss).unwrap();
        // row 1 was gathered twice, row 2 never
        assert_eq!(m.grad().unwrap(), vec![1.0, 1.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn masked_fill_keeps_and_fills() {
        let mut tape = Tape::new();
        let x = Tensor::param(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let keep = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = tape.masked_fill(&x, &keep, -9.0).unwrap();
        assert_eq!(y.to_vec(), vec![1.0, -9.0, -9.0, 4.0]);
        let loss = tape.sum_all(&y).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn forward_determinism_same_seed() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let x = Tensor::rand_uniform(vec![4, 4], -1.0, 1.0, &mut rng);
            let w = Tensor::rand_uniform(vec![4, 4], -1.0, 1.0, &mut rng);
            let mut tape = Tape::new();
            let h = tape.matmul(&x, &w).unwrap();
            let r = tape.relu(&h).unwrap();
            let s = tape.softmax(&r, 1).unwrap();
            let d = tape.dropout(&s, 0.5, true, &mut rng).unwrap();
            d.to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "bit-identical forward under the same seed");
    }

    #[test]
    fn finite_checks_pass_on_finite_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::rand_uniform(vec![3, 3], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new().with_finite_checks();
        let y = tape.matmul(&x, &x).unwrap();
        let s = tape.softmax(&y, 1).unwrap();
        let _ = tape.sum_all(&s).unwrap();
    }
}
