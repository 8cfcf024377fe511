//! Reverse-mode autodiff over row-major dense tensors.
//!
//! A `Tensor` is a cheap handle onto a graph node. Forward primitives build
//! the graph; `backward` walks it once in reverse topological order and
//! accumulates (sums) gradients into every reachable node, so calling it
//! twice without zeroing doubles the gradients. Every backward rule lives in
//! the single `match` in [`Op::backward`].

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use thiserror::Error;

use super::rng::SeedRng;
use super::scalar::{sc, Scalar};
use super::MASK_FILL;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{primitive}: shape mismatch: {detail}")]
    Shape { primitive: &'static str, detail: String },
    #[error("backward: loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("optimizer_step: parameter '{0}' requires grad but has none")]
    MissingGrad(String),
    #[error("{primitive}: {detail}")]
    Invalid { primitive: &'static str, detail: String },
}

pub type NResult<T> = Result<T, NumericsError>;

fn shape_err(primitive: &'static str, detail: String) -> NumericsError {
    NumericsError::Shape { primitive, detail }
}

// ── graph node ──────────────────────────────────────────────────────────

struct Inner<F: Scalar> {
    shape: Vec<usize>,
    data: RefCell<Vec<F>>,
    grad: RefCell<Option<Vec<F>>>,
    /// Leaf flag: set on parameters. Mutable so encoders can be frozen after
    /// their optional toy pretraining.
    requires_grad: Cell<bool>,
    /// True when any ancestor leaf requires grad; fixed at construction.
    needs_grad: bool,
    op: Option<Op<F>>,
}

/// Handle to a tensor graph node. Clones share storage.
pub struct Tensor<F: Scalar>(Rc<Inner<F>>);

impl<F: Scalar> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<F: Scalar> std::fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad.get())
            .finish()
    }
}

// ── construction ────────────────────────────────────────────────────────

impl<F: Scalar> Tensor<F> {
    pub fn from_vec(data: Vec<F>, shape: &[usize]) -> NResult<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err(
                "from_vec",
                format!("shape {:?} wants {} values, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    pub fn scalar(v: F) -> Self {
        Self::leaf(vec![v], vec![1], false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::leaf(vec![F::zero(); numel], shape.to_vec(), false)
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        let numel = shape.iter().product();
        Self::leaf(vec![v; numel], shape.to_vec(), false)
    }

    /// Trainable leaf initialized from data.
    pub fn param(data: Vec<F>, shape: &[usize]) -> NResult<Self> {
        let t = Self::from_vec(data, shape)?;
        t.0.requires_grad.set(true);
        Ok(t)
    }

    /// Trainable leaf with normal(0, std) init.
    pub fn param_randn(shape: &[usize], std: f64, rng: &mut SeedRng) -> Self {
        let numel = shape.iter().product();
        Self::leaf(rng.normal_vec(numel, std), shape.to_vec(), true)
    }

    pub fn param_zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::leaf(vec![F::zero(); numel], shape.to_vec(), true)
    }

    fn leaf(data: Vec<F>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Tensor(Rc::new(Inner {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: Cell::new(requires_grad),
            needs_grad: false,
            op: None,
        }))
    }

    fn from_op(data: Vec<F>, shape: Vec<usize>, op: Op<F>) -> Self {
        let needs = op.parents().iter().any(|p| p.needs_grad_now());
        Tensor(Rc::new(Inner {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: Cell::new(false),
            needs_grad: needs,
            op: if needs { Some(op) } else { None },
        }))
    }

    /// New leaf holding a copy of this tensor's data, cut off from the graph.
    pub fn detach(&self) -> Self {
        Self::leaf(self.0.data.borrow().clone(), self.0.shape.clone(), false)
    }
}

// ── accessors ───────────────────────────────────────────────────────────

impl<F: Scalar> Tensor<F> {
    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.data.borrow().len()
    }

    pub fn data(&self) -> Ref<'_, Vec<F>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.0.data.borrow().clone()
    }

    /// Value of a scalar (single-element) tensor.
    pub fn item(&self) -> F {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar");
        self.0.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<F>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.get()
    }

    pub fn set_requires_grad(&self, v: bool) {
        self.0.requires_grad.set(v);
    }

    /// Overwrite data in place (optimizer update path).
    pub fn set_data(&self, data: Vec<F>) {
        debug_assert_eq!(data.len(), self.numel());
        *self.0.data.borrow_mut() = data;
    }

    /// Mutate one element in place (finite-difference probing).
    pub fn nudge(&self, idx: usize, delta: F) {
        self.0.data.borrow_mut()[idx] += delta;
    }

    pub fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    /// True when two handles share storage.
    pub fn same_storage(&self, other: &Self) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn needs_grad_now(&self) -> bool {
        self.0.requires_grad.get() || self.0.needs_grad
    }

    fn accumulate_grad(&self, g: &[F]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Rows × cols view of the last axis: (product of leading dims, last dim).
    fn row_view(&self) -> (usize, usize) {
        let n = *self.0.shape.last().unwrap_or(&1);
        (self.numel() / n.max(1), n)
    }
}

// ── backward driver ─────────────────────────────────────────────────────

impl<F: Scalar> Tensor<F> {
    /// Reverse-mode sweep from a scalar loss. Gradients from this call are
    /// summed into any gradients already present.
    pub fn backward(&self) -> NResult<()> {
        if self.numel() != 1 {
            return Err(NumericsError::NonScalarLoss(self.0.shape.clone()));
        }
        let order = self.topo_order();
        let mut local: HashMap<usize, Vec<F>> = HashMap::new();
        local.insert(self.ptr_id(), vec![F::one()]);
        for node in order.iter().rev() {
            let Some(g) = local.remove(&node.ptr_id()) else {
                continue;
            };
            node.accumulate_grad(&g);
            if let Some(op) = &node.0.op {
                op.backward(&g, node, &mut local);
            }
        }
        Ok(())
    }

    /// Parents-before-children order ending at `self`.
    fn topo_order(&self) -> Vec<Tensor<F>> {
        struct Frame<F: Scalar> {
            node: Tensor<F>,
            parents: Vec<Tensor<F>>,
            cursor: usize,
        }
        let frame = |node: Tensor<F>| {
            let parents = node.0.op.as_ref().map(Op::parents).unwrap_or_default();
            Frame { node, parents, cursor: 0 }
        };
        let mut order = Vec::new();
        let mut seen: HashSet<usize> = HashSet::new();
        seen.insert(self.ptr_id());
        let mut stack: Vec<Frame<F>> = vec![frame(self.clone())];
        while let Some(mut top) = stack.pop() {
            if top.cursor < top.parents.len() {
                let p = top.parents[top.cursor].clone();
                top.cursor += 1;
                stack.push(top);
                if seen.insert(p.ptr_id()) {
                    stack.push(frame(p));
                }
            } else {
                order.push(top.node);
            }
        }
        order
    }
}

fn add_local<F: Scalar>(local: &mut HashMap<usize, Vec<F>>, parent: &Tensor<F>, contrib: Vec<F>) {
    if !parent.needs_grad_now() {
        return;
    }
    match local.entry(parent.ptr_id()) {
        std::collections::hash_map::Entry::Occupied(mut e) => {
            for (a, b) in e.get_mut().iter_mut().zip(contrib) {
                *a += b;
            }
        }
        std::collections::hash_map::Entry::Vacant(e) => {
            e.insert(contrib);
        }
    }
}

// ── raw kernels ─────────────────────────────────────────────────────────

/// C[m,n] += A[m,k] · B[k,n]. ikj loop order keeps the inner loop contiguous.
pub fn matmul_raw<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn transpose_raw<F: Scalar>(x: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

fn softmax_rows<F: Scalar>(x: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mx = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut denom = F::zero();
        let orow = &mut out[r * cols..(r + 1) * cols];
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - mx).exp();
            denom += *o;
        }
        for o in orow.iter_mut() {
            *o = *o / denom;
        }
    }
    out
}

// ── ops and their backward rules ────────────────────────────────────────

enum Op<F: Scalar> {
    Add(Tensor<F>, Tensor<F>),
    AddBias(Tensor<F>, Tensor<F>),
    Mul(Tensor<F>, Tensor<F>),
    Scale(Tensor<F>, F),
    AddScalar(Tensor<F>),
    MatMul(Tensor<F>, Tensor<F>),
    TransposeLast(Tensor<F>),
    Reshape(Tensor<F>),
    Concat { inputs: Vec<Tensor<F>>, axis: usize },
    Slice { input: Tensor<F>, axis: usize, start: usize },
    RowSoftmax { input: Tensor<F>, out: Vec<F> },
    LayerNorm { x: Tensor<F>, gamma: Tensor<F>, beta: Tensor<F>, xhat: Vec<F>, inv_std: Vec<F> },
    Gelu(Tensor<F>),
    Relu(Tensor<F>),
    Sigmoid { input: Tensor<F>, out: Vec<F> },
    Embedding { table: Tensor<F>, ids: Vec<usize> },
    MaskedFill { input: Tensor<F>, keep: Vec<bool> },
    CrossEntropySum { logits: Tensor<F>, targets: Vec<usize>, weights: Vec<F>, probs: Vec<F> },
    BceWithLogitsSum { logits: Tensor<F>, targets: Vec<F> },
    RowL2Norm { input: Tensor<F>, out: Vec<F>, norms: Vec<F> },
    MeanAxis { input: Tensor<F>, axis: usize },
    MaxAxis { input: Tensor<F>, axis: usize, argmax: Vec<usize> },
    SumAll(Tensor<F>),
    GaussianBasis { widths: Tensor<F>, dists: Vec<F>, centers: Vec<F>, out: Vec<F> },
    Dropout { input: Tensor<F>, mask: Vec<F> },
}

impl<F: Scalar> Op<F> {
    fn parents(&self) -> Vec<Tensor<F>> {
        match self {
            Op::Add(a, b) | Op::AddBias(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => {
                vec![a.clone(), b.clone()]
            }
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::TransposeLast(a)
            | Op::Reshape(a)
            | Op::Gelu(a)
            | Op::Relu(a)
            | Op::SumAll(a) => vec![a.clone()],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Slice { input, .. }
            | Op::RowSoftmax { input, .. }
            | Op::Sigmoid { input, .. }
            | Op::MaskedFill { input, .. }
            | Op::RowL2Norm { input, .. }
            | Op::MeanAxis { input, .. }
            | Op::MaxAxis { input, .. }
            | Op::Dropout { input, .. } => vec![input.clone()],
            Op::LayerNorm { x, gamma, beta, .. } => vec![x.clone(), gamma.clone(), beta.clone()],
            Op::Embedding { table, .. } => vec![table.clone()],
            Op::CrossEntropySum { logits, .. } | Op::BceWithLogitsSum { logits, .. } => {
                vec![logits.clone()]
            }
            Op::GaussianBasis { widths, .. } => vec![widths.clone()],
        }
    }

    fn backward(&self, g: &[F], node: &Tensor<F>, local: &mut HashMap<usize, Vec<F>>) {
        match self {
            Op::Add(a, b) => {
                add_local(local, a, g.to_vec());
                add_local(local, b, g.to_vec());
            }
            Op::AddBias(a, b) => {
                add_local(local, a, g.to_vec());
                let n = b.numel();
                let mut db = vec![F::zero(); n];
                for (i, &gv) in g.iter().enumerate() {
                    db[i % n] += gv;
                }
                add_local(local, b, db);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (a.data(), b.data());
                add_local(local, a, g.iter().zip(bd.iter()).map(|(&gv, &bv)| gv * bv).collect());
                add_local(local, b, g.iter().zip(ad.iter()).map(|(&gv, &av)| gv * av).collect());
            }
            Op::Scale(a, c) => {
                add_local(local, a, g.iter().map(|&gv| gv * *c).collect());
            }
            Op::AddScalar(a) => {
                add_local(local, a, g.to_vec());
            }
            Op::MatMul(a, b) => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                // da = g · bᵀ ; db = aᵀ · g
                let bt = transpose_raw(&b.data(), k, n);
                let mut da = vec![F::zero(); m * k];
                matmul_raw(g, &bt, m, n, k, &mut da);
                add_local(local, a, da);
                let at = transpose_raw(&a.data(), m, k);
                let mut db = vec![F::zero(); k * n];
                matmul_raw(&at, g, k, m, n, &mut db);
                add_local(local, b, db);
            }
            Op::TransposeLast(a) => {
                let (m, n) = (a.shape()[0], a.shape()[1]);
                add_local(local, a, transpose_raw(g, n, m));
            }
            Op::Reshape(a) => {
                add_local(local, a, g.to_vec());
            }
            Op::Concat { inputs, axis } => {
                let out_shape = node.shape();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let outer: usize = out_shape[..*axis].iter().product();
                let total_axis = out_shape[*axis];
                let mut offset = 0usize;
                for inp in inputs {
                    let len = inp.shape()[*axis];
                    let mut di = vec![F::zero(); inp.numel()];
                    for o in 0..outer {
                        let src = (o * total_axis + offset) * inner;
                        let dst = o * len * inner;
                        di[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                    }
                    add_local(local, inp, di);
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let in_shape = input.shape();
                let out_shape = node.shape();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let outer: usize = in_shape[..*axis].iter().product();
                let (in_len, out_len) = (in_shape[*axis], out_shape[*axis]);
                let mut di = vec![F::zero(); input.numel()];
                for o in 0..outer {
                    let dst = (o * in_len + start) * inner;
                    let src = o * out_len * inner;
                    di[dst..dst + out_len * inner].copy_from_slice(&g[src..src + out_len * inner]);
                }
                add_local(local, input, di);
            }
            Op::RowSoftmax { input, out } => {
                let (rows, cols) = node.row_view();
                let mut dx = vec![F::zero(); out.len()];
                for r in 0..rows {
                    let y = &out[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: F = y.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                    for ((d, &yv), &gv) in dx[r * cols..(r + 1) * cols].iter_mut().zip(y).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                add_local(local, input, dx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (rows, n) = x.row_view();
                let gd = gamma.data();
                let nf = sc::<F>(n as f64);
                let mut dx = vec![F::zero(); x.numel()];
                let mut dgamma = vec![F::zero(); n];
                let mut dbeta = vec![F::zero(); n];
                for r in 0..rows {
                    let xh = &xhat[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let mut sum_dxhat = F::zero();
                    let mut sum_dxhat_xhat = F::zero();
                    for j in 0..n {
                        let dxh = gr[j] * gd[j];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xh[j];
                        dgamma[j] += gr[j] * xh[j];
                        dbeta[j] += gr[j];
                    }
                    let inv = inv_std[r];
                    for j in 0..n {
                        let dxh = gr[j] * gd[j];
                        dx[r * n + j] =
                            inv / nf * (nf * dxh - sum_dxhat - xh[j] * sum_dxhat_xhat);
                    }
                }
                add_local(local, x, dx);
                add_local(local, gamma, dgamma);
                add_local(local, beta, dbeta);
            }
            Op::Gelu(a) => {
                let c = sc::<F>((2.0 / std::f64::consts::PI).sqrt());
                let k = sc::<F>(0.044715);
                let half = sc::<F>(0.5);
                let three = sc::<F>(3.0);
                let ad = a.data();
                let dx = g
                    .iter()
                    .zip(ad.iter())
                    .map(|(&gv, &x)| {
                        let u = c * (x + k * x * x * x);
                        let t = u.tanh();
                        let du = c * (F::one() + three * k * x * x);
                        gv * (half * (F::one() + t) + half * x * (F::one() - t * t) * du)
                    })
                    .collect();
                add_local(local, a, dx);
            }
            Op::Relu(a) => {
                let ad = a.data();
                let dx = g
                    .iter()
                    .zip(ad.iter())
                    .map(|(&gv, &x)| if x > F::zero() { gv } else { F::zero() })
                    .collect();
                add_local(local, a, dx);
            }
            Op::Sigmoid { input, out } => {
                let dx = g
                    .iter()
                    .zip(out.iter())
                    .map(|(&gv, &s)| gv * s * (F::one() - s))
                    .collect();
                add_local(local, input, dx);
            }
            Op::Embedding { table, ids } => {
                let d = table.shape()[1];
                let mut dt = vec![F::zero(); table.numel()];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[row * d + j];
                    }
                }
                add_local(local, table, dt);
            }
            Op::MaskedFill { input, keep } => {
                let dx = g
                    .iter()
                    .zip(keep.iter())
                    .map(|(&gv, &k)| if k { gv } else { F::zero() })
                    .collect();
                add_local(local, input, dx);
            }
            Op::CrossEntropySum { logits, targets, weights, probs } => {
                let v = logits.shape()[1];
                let gs = g[0];
                let mut dl = vec![F::zero(); logits.numel()];
                for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    for j in 0..v {
                        let p = probs[i * v + j];
                        let ind = if j == t { F::one() } else { F::zero() };
                        dl[i * v + j] = gs * w * (p - ind);
                    }
                }
                add_local(local, logits, dl);
            }
            Op::BceWithLogitsSum { logits, targets } => {
                let gs = g[0];
                let ld = logits.data();
                let dz = ld
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| {
                        let s = F::one() / (F::one() + (-z).exp());
                        gs * (s - y)
                    })
                    .collect();
                drop(ld);
                add_local(local, logits, dz);
            }
            Op::RowL2Norm { input, out, norms } => {
                let (rows, cols) = node.row_view();
                let mut dx = vec![F::zero(); out.len()];
                for r in 0..rows {
                    let y = &out[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: F = y.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                    let n = norms[r];
                    for j in 0..cols {
                        dx[r * cols + j] = (gr[j] - y[j] * dot) / n;
                    }
                }
                add_local(local, input, dx);
            }
            Op::MeanAxis { input, axis } => {
                let in_shape = input.shape();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let outer: usize = in_shape[..*axis].iter().product();
                let len = in_shape[*axis];
                let inv = F::one() / sc::<F>(len as f64);
                let mut dx = vec![F::zero(); input.numel()];
                for o in 0..outer {
                    for x in 0..len {
                        for i in 0..inner {
                            dx[(o * len + x) * inner + i] = g[o * inner + i] * inv;
                        }
                    }
                }
                add_local(local, input, dx);
            }
            Op::MaxAxis { input, argmax, .. } => {
                let mut dx = vec![F::zero(); input.numel()];
                for (out_idx, &src) in argmax.iter().enumerate() {
                    dx[src] += g[out_idx];
                }
                add_local(local, input, dx);
            }
            Op::SumAll(a) => {
                add_local(local, a, vec![g[0]; a.numel()]);
            }
            Op::GaussianBasis { widths, dists, centers, out } => {
                let b = centers.len();
                let wd = widths.data();
                let mut dw = vec![F::zero(); b];
                for (i, &d) in dists.iter().enumerate() {
                    for j in 0..b {
                        let diff = d - centers[j];
                        let w = wd[j];
                        dw[j] += g[i * b + j] * out[i * b + j] * diff * diff / (w * w * w);
                    }
                }
                drop(wd);
                add_local(local, widths, dw);
            }
            Op::Dropout { input, mask } => {
                let dx = g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                add_local(local, input, dx);
            }
        }
    }
}

// ── forward primitives ──────────────────────────────────────────────────

impl<F: Scalar> Tensor<F> {
    fn check_same_shape(&self, other: &Self, primitive: &'static str) -> NResult<()> {
        if self.shape() != other.shape() {
            return Err(shape_err(
                primitive,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, other: &Self) -> NResult<Self> {
        self.check_same_shape(other, "add")?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Self::from_op(data, self.0.shape.clone(), Op::Add(self.clone(), other.clone())))
    }

    /// `[.., n] + [n]`: the only broadcast in the engine.
    pub fn add_bias(&self, bias: &Self) -> NResult<Self> {
        let n = *self.shape().last().unwrap_or(&0);
        if bias.shape() != [n] {
            return Err(shape_err(
                "add_bias",
                format!("input {:?} vs bias {:?}", self.shape(), bias.shape()),
            ));
        }
        let bd = bias.to_vec();
        let data = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| a + bd[i % n])
            .collect();
        Ok(Self::from_op(data, self.0.shape.clone(), Op::AddBias(self.clone(), bias.clone())))
    }

    pub fn mul(&self, other: &Self) -> NResult<Self> {
        self.check_same_shape(other, "mul")?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a * b)
            .collect();
        Ok(Self::from_op(data, self.0.shape.clone(), Op::Mul(self.clone(), other.clone())))
    }

    pub fn scale(&self, c: F) -> Self {
        let data = self.data().iter().map(|&a| a * c).collect();
        Self::from_op(data, self.0.shape.clone(), Op::Scale(self.clone(), c))
    }

    pub fn add_scalar(&self, c: F) -> Self {
        let data = self.data().iter().map(|&a| a + c).collect();
        Self::from_op(data, self.0.shape.clone(), Op::AddScalar(self.clone()))
    }

    pub fn sub(&self, other: &Self) -> NResult<Self> {
        self.add(&other.scale(-F::one()))
    }

    /// `[m,k] · [k,n] → [m,n]`.
    pub fn matmul(&self, other: &Self) -> NResult<Self> {
        if self.shape().len() != 2 || other.shape().len() != 2 {
            return Err(shape_err(
                "matmul",
                format!("need 2-D operands, got {:?} and {:?}", self.shape(), other.shape()),
            ));
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (other.shape()[0], other.shape()[1]);
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("inner dims differ: {:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        let mut out = vec![F::zero(); m * n];
        matmul_raw(&self.data(), &other.data(), m, k, n, &mut out);
        Ok(Self::from_op(out, vec![m, n], Op::MatMul(self.clone(), other.clone())))
    }

    /// 2-D transpose.
    pub fn t(&self) -> NResult<Self> {
        if self.shape().len() != 2 {
            return Err(shape_err("transpose", format!("need 2-D, got {:?}", self.shape())));
        }
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let out = transpose_raw(&self.data(), m, n);
        Ok(Self::from_op(out, vec![n, m], Op::TransposeLast(self.clone())))
    }

    pub fn reshape(&self, shape: &[usize]) -> NResult<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(shape_err(
                "reshape",
                format!("{:?} ({} values) to {:?} ({})", self.shape(), self.numel(), shape, numel),
            ));
        }
        Ok(Self::from_op(self.to_vec(), shape.to_vec(), Op::Reshape(self.clone())))
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn concat(inputs: &[Self], axis: usize) -> NResult<Self> {
        if inputs.is_empty() {
            return Err(shape_err("concat", "no inputs".into()));
        }
        let first = inputs[0].shape().to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {} of {:?}", axis, first)));
        }
        let mut axis_total = 0usize;
        for t in inputs {
            let s = t.shape();
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(shape_err(
                    "concat",
                    format!("incompatible {:?} vs {:?} along axis {}", s, first, axis),
                ));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let inner: usize = first[axis + 1..].iter().product();
        let outer: usize = first[..axis].iter().product();
        let mut data = vec![F::zero(); out_shape.iter().product()];
        for o in 0..outer {
            let mut offset = 0usize;
            for t in inputs {
                let len = t.shape()[axis];
                let src = o * len * inner;
                let dst = (o * axis_total + offset) * inner;
                data[dst..dst + len * inner]
                    .copy_from_slice(&t.data()[src..src + len * inner]);
                offset += len;
            }
        }
        Ok(Self::from_op(
            data,
            out_shape,
            Op::Concat { inputs: inputs.to_vec(), axis },
        ))
    }

    /// Copy `len` planes starting at `start` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> NResult<Self> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err(
                "slice",
                format!("range {}..{} on axis {} of {:?}", start, start + len, axis, shape),
            ));
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let in_len = shape[axis];
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let mut data = vec![F::zero(); outer * len * inner];
        for o in 0..outer {
            let src = (o * in_len + start) * inner;
            let dst = o * len * inner;
            data[dst..dst + len * inner].copy_from_slice(&self.data()[src..src + len * inner]);
        }
        Ok(Self::from_op(data, out_shape, Op::Slice { input: self.clone(), axis, start }))
    }

    /// Softmax along the last axis.
    pub fn row_softmax(&self) -> Self {
        let (rows, cols) = self.row_view();
        let out = softmax_rows(&self.data(), rows, cols);
        Self::from_op(
            out.clone(),
            self.0.shape.clone(),
            Op::RowSoftmax { input: self.clone(), out },
        )
    }

    /// Layer norm over the last axis with affine parameters.
    pub fn layer_norm(&self, gamma: &Self, beta: &Self, eps: f64) -> NResult<Self> {
        let (rows, n) = self.row_view();
        if gamma.shape() != [n] || beta.shape() != [n] {
            return Err(shape_err(
                "layer_norm",
                format!("input {:?}, gamma {:?}, beta {:?}", self.shape(), gamma.shape(), beta.shape()),
            ));
        }
        let xd = self.data();
        let gd = gamma.data();
        let bd = beta.data();
        let epsf = sc::<F>(eps);
        let nf = sc::<F>(n as f64);
        let mut out = vec![F::zero(); xd.len()];
        let mut xhat = vec![F::zero(); xd.len()];
        let mut inv_std = vec![F::zero(); rows];
        for r in 0..rows {
            let row = &xd[r * n..(r + 1) * n];
            let mean = row.iter().cloned().sum::<F>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let inv = F::one() / (var + epsf).sqrt();
            inv_std[r] = inv;
            for j in 0..n {
                let xh = (row[j] - mean) * inv;
                xhat[r * n + j] = xh;
                out[r * n + j] = xh * gd[j] + bd[j];
            }
        }
        drop(xd);
        drop(gd);
        drop(bd);
        Ok(Self::from_op(
            out,
            self.0.shape.clone(),
            Op::LayerNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                xhat,
                inv_std,
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Self {
        let c = sc::<F>((2.0 / std::f64::consts::PI).sqrt());
        let k = sc::<F>(0.044715);
        let half = sc::<F>(0.5);
        let data = self
            .data()
            .iter()
            .map(|&x| {
                let u = c * (x + k * x * x * x);
                half * x * (F::one() + u.tanh())
            })
            .collect();
        Self::from_op(data, self.0.shape.clone(), Op::Gelu(self.clone()))
    }

    pub fn relu(&self) -> Self {
        let data = self.data().iter().map(|&x| x.max(F::zero())).collect();
        Self::from_op(data, self.0.shape.clone(), Op::Relu(self.clone()))
    }

    pub fn sigmoid(&self) -> Self {
        let out: Vec<F> = self
            .data()
            .iter()
            .map(|&x| F::one() / (F::one() + (-x).exp()))
            .collect();
        Self::from_op(
            out.clone(),
            self.0.shape.clone(),
            Op::Sigmoid { input: self.clone(), out },
        )
    }

    /// Row lookup: `self` is a `[v, d]` table, output is `[ids.len(), d]`.
    pub fn embedding(&self, ids: &[usize]) -> NResult<Self> {
        if self.shape().len() != 2 {
            return Err(shape_err("embedding", format!("table must be 2-D, got {:?}", self.shape())));
        }
        let (v, d) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(shape_err("embedding", format!("id {} out of vocab {}", bad, v)));
        }
        let td = self.data();
        let mut data = vec![F::zero(); ids.len() * d];
        for (row, &id) in ids.iter().enumerate() {
            data[row * d..(row + 1) * d].copy_from_slice(&td[id * d..(id + 1) * d]);
        }
        drop(td);
        Ok(Self::from_op(
            data,
            vec![ids.len(), d],
            Op::Embedding { table: self.clone(), ids: ids.to_vec() },
        ))
    }

    /// Replace positions where `keep` is false with `fill`. Used with the
    /// crate-wide `MASK_FILL` constant ahead of softmax.
    pub fn masked_fill(&self, keep: &[bool], fill: F) -> NResult<Self> {
        if keep.len() != self.numel() {
            return Err(shape_err(
                "masked_fill",
                format!("mask len {} vs tensor {:?}", keep.len(), self.shape()),
            ));
        }
        let data = self
            .data()
            .iter()
            .zip(keep)
            .map(|(&x, &k)| if k { x } else { fill })
            .collect();
        Ok(Self::from_op(
            data,
            self.0.shape.clone(),
            Op::MaskedFill { input: self.clone(), keep: keep.to_vec() },
        ))
    }

    /// Convenience: mask with the standard large negative fill.
    pub fn masked_fill_neg(&self, keep: &[bool]) -> NResult<Self> {
        self.masked_fill(keep, sc::<F>(MASK_FILL))
    }

    /// Weighted sum over rows of `-log softmax(logits)[target]`.
    /// `logits` is `[n, v]`; the caller applies any normalization.
    pub fn cross_entropy_sum(&self, targets: &[usize], weights: &[F]) -> NResult<Self> {
        if self.shape().len() != 2 {
            return Err(shape_err(
                "cross_entropy",
                format!("logits must be 2-D, got {:?}", self.shape()),
            ));
        }
        let (n, v) = (self.shape()[0], self.shape()[1]);
        if targets.len() != n || weights.len() != n {
            return Err(shape_err(
                "cross_entropy",
                format!("{} rows vs {} targets / {} weights", n, targets.len(), weights.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(shape_err("cross_entropy", format!("target {} out of {} classes", bad, v)));
        }
        let ld = self.data();
        let mut probs = vec![F::zero(); n * v];
        let mut total = F::zero();
        for i in 0..n {
            let row = &ld[i * v..(i + 1) * v];
            let mx = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut denom = F::zero();
            for (j, &l) in row.iter().enumerate() {
                let e = (l - mx).exp();
                probs[i * v + j] = e;
                denom += e;
            }
            let lse = mx + denom.ln();
            for j in 0..v {
                probs[i * v + j] = probs[i * v + j] / denom;
            }
            total += weights[i] * (lse - row[targets[i]]);
        }
        drop(ld);
        Ok(Self::from_op(
            vec![total],
            vec![1],
            Op::CrossEntropySum {
                logits: self.clone(),
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        ))
    }

    /// Sum of binary cross-entropies over flat logits, numerically stable.
    pub fn bce_with_logits_sum(&self, targets: &[F]) -> NResult<Self> {
        if targets.len() != self.numel() {
            return Err(shape_err(
                "bce_with_logits",
                format!("{} logits vs {} targets", self.numel(), targets.len()),
            ));
        }
        let ld = self.data();
        let mut total = F::zero();
        for (&z, &y) in ld.iter().zip(targets) {
            // max(z,0) - z*y + ln(1 + exp(-|z|))
            total += z.max(F::zero()) - z * y + (F::one() + (-z.abs()).exp()).ln();
        }
        drop(ld);
        Ok(Self::from_op(
            vec![total],
            vec![1],
            Op::BceWithLogitsSum { logits: self.clone(), targets: targets.to_vec() },
        ))
    }

    /// L2-normalize each row of the last axis. Rows must be nonzero.
    pub fn row_l2norm(&self) -> Self {
        let (rows, cols) = self.row_view();
        let xd = self.data();
        let tiny = sc::<F>(1e-30);
        let mut out = vec![F::zero(); xd.len()];
        let mut norms = vec![F::zero(); rows];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let n = row.iter().map(|&v| v * v).sum::<F>().sqrt().max(tiny);
            norms[r] = n;
            for j in 0..cols {
                out[r * cols + j] = row[j] / n;
            }
        }
        drop(xd);
        Self::from_op(
            out.clone(),
            self.0.shape.clone(),
            Op::RowL2Norm { input: self.clone(), out, norms },
        )
    }

    pub fn mean_axis(&self, axis: usize) -> NResult<Self> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(shape_err("mean_axis", format!("axis {} of {:?}", axis, shape)));
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inv = F::one() / sc::<F>(len as f64);
        let xd = self.data();
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for x in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += xd[(o * len + x) * inner + i];
                }
            }
        }
        for v in out.iter_mut() {
            *v = *v * inv;
        }
        drop(xd);
        let mut out_shape: Vec<usize> = shape.to_vec();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(Self::from_op(out, out_shape, Op::MeanAxis { input: self.clone(), axis }))
    }

    /// Max along `axis`; ties resolve to the first (lowest) index.
    pub fn max_axis(&self, axis: usize) -> NResult<Self> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(shape_err("max_axis", format!("axis {} of {:?}", axis, shape)));
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        if len == 0 {
            return Err(shape_err("max_axis", "empty axis".into()));
        }
        let xd = self.data();
        let mut out = vec![F::neg_infinity(); outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for x in 0..len {
                for i in 0..inner {
                    let src = (o * len + x) * inner + i;
                    let dst = o * inner + i;
                    if xd[src] > out[dst] {
                        out[dst] = xd[src];
                        argmax[dst] = src;
                    }
                }
            }
        }
        drop(xd);
        let mut out_shape: Vec<usize> = shape.to_vec();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(Self::from_op(out, out_shape, Op::MaxAxis { input: self.clone(), axis, argmax }))
    }

    pub fn sum_all(&self) -> Self {
        let total = self.data().iter().cloned().sum();
        Self::from_op(vec![total], vec![1], Op::SumAll(self.clone()))
    }

    pub fn mean_all(&self) -> Self {
        let n = self.numel().max(1);
        self.sum_all().scale(F::one() / sc::<F>(n as f64))
    }

    /// Expand each distance into a Gaussian radial basis. `self` holds the
    /// (possibly learnable) widths `[b]`; output is `[dists.len(), b]`.
    pub fn gaussian_basis(&self, dists: &[F], centers: &[F]) -> NResult<Self> {
        let b = centers.len();
        if self.shape() != [b] {
            return Err(shape_err(
                "gaussian_basis",
                format!("widths {:?} vs {} centers", self.shape(), b),
            ));
        }
        let wd = self.data();
        let half = sc::<F>(0.5);
        let mut out = vec![F::zero(); dists.len() * b];
        for (i, &d) in dists.iter().enumerate() {
            for j in 0..b {
                let diff = d - centers[j];
                let w = wd[j];
                out[i * b + j] = (-half * diff * diff / (w * w)).exp();
            }
        }
        drop(wd);
        Ok(Self::from_op(
            out.clone(),
            vec![dists.len(), b],
            Op::GaussianBasis {
                widths: self.clone(),
                dists: dists.to_vec(),
                centers: centers.to_vec(),
                out,
            },
        ))
    }

    /// Inverted dropout: survivors are scaled by 1/(1-p). Callers skip this
    /// entirely in eval/deterministic mode.
    pub fn dropout(&self, p: f64, rng: &mut SeedRng) -> NResult<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(NumericsError::Invalid {
                primitive: "dropout",
                detail: format!("p = {p} outside [0, 1)"),
            });
        }
        if p == 0.0 {
            return Ok(self.clone());
        }
        let scale = sc::<F>(1.0 / (1.0 - p));
        let mask: Vec<F> = (0..self.numel())
            .map(|_| if rng.uniform() < p { F::zero() } else { scale })
            .collect();
        let data = self
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        Ok(Self::from_op(
            data,
            self.0.shape.clone(),
            Op::Dropout { input: self.clone(), mask },
        ))
    }
}

/// Cosine similarity of two equal-length 1-D tensors, on the graph.
pub fn cosine_sim<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> NResult<Tensor<F>> {
    if a.shape() != b.shape() || a.shape().len() != 1 {
        return Err(shape_err(
            "cosine_sim",
            format!("need equal 1-D shapes, got {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    let n = a.numel();
    let an = a.reshape(&[1, n])?.row_l2norm();
    let bn = b.reshape(&[1, n])?.row_l2norm();
    an.mul(&bn)?.sum_all().reshape(&[1])
}
