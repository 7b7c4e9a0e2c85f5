//! Tape-based reverse-mode automatic differentiation over dense row-major
//! tensors.
//!
//! The op set is exactly what the track transformer needs: matmul (plain and
//! batched), elementwise arithmetic, masked softmax, layer norm, GELU,
//! concatenation/slicing/permutation, and scalar reductions. There is no
//! broadcasting beyond bias addition over the last axis and explicit
//! [`Tape::repeat`]; every other shape mismatch is an error.
//!
//! The engine is generic over the element type: production code runs `f32`
//! (reductions still accumulate in f64), while gradient checks instantiate
//! the same graphs in `f64` so central finite differences have a clean
//! reference path.

// ==== SCALAR ====

/// Element type of a tape: `f32` for training/inference, `f64` for
/// finite-difference reference runs.
pub trait Scalar:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn tanh(self) -> Self {
        f32::tanh(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TapeError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss is not connected to any parameter")]
    DisconnectedGraph,
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

fn shape_err(op: &'static str, detail: String) -> TapeError {
    TapeError::ShapeMismatch { op, detail }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef(usize);

const EPS_LAYERNORM: f64 = 1e-5;

enum Op {
    Leaf { param: bool },
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Bmm { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddBias { a: usize, bias: usize, n: usize },
    Scale { a: usize, c: f64 },
    AddScalar { a: usize },
    Repeat { a: usize, axis: usize, times: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize, len: usize },
    Permute { a: usize, perm: Vec<usize> },
    Reshape { a: usize },
    MaskedSoftmax { a: usize },
    LayerNorm { a: usize, gamma: usize, beta: usize, cache: Vec<(f64, f64)> },
    Gelu { a: usize },
    Abs { a: usize },
    Sum { a: usize },
    Mean { a: usize },
}

struct Node<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
    op: Op,
}

/// An autodiff tape: append-only op record in topological order. Single-owner
/// during forward/backward; independent tapes may run on parallel batch
/// shards.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, t: TensorRef) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn value(&self, t: TensorRef) -> &[F] {
        &self.nodes[t.0].data
    }

    /// Gradient of the last backward pass, if the node required one.
    pub fn grad(&self, t: TensorRef) -> Option<&[F]> {
        self.nodes[t.0].grad.as_deref()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<F>, requires: bool, op: Op) -> Result<TensorRef, TapeError> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        #[cfg(debug_assertions)]
        {
            if !data.iter().all(|v| v.is_finite()) {
                return Err(TapeError::NonFinite(op_name(&op)));
            }
        }
        self.nodes.push(Node { shape, data, grad: None, requires_grad: requires, op });
        Ok(TensorRef(self.nodes.len() - 1))
    }

    fn requires(&self, t: TensorRef) -> bool {
        self.nodes[t.0].requires_grad
    }

    // ==== LEAVES ====

    /// A learnable leaf; its gradient is collected by [`Tape::backward`].
    pub fn param(&mut self, shape: &[usize], data: Vec<F>) -> Result<TensorRef, TapeError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(shape_err("param", format!("shape {shape:?} vs data length {}", data.len())));
        }
        self.push(shape.to_vec(), data, true, Op::Leaf { param: true })
    }

    /// A non-learnable input.
    pub fn constant(&mut self, shape: &[usize], data: Vec<F>) -> Result<TensorRef, TapeError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(shape_err("constant", format!("shape {shape:?} vs data length {}", data.len())));
        }
        self.push(shape.to_vec(), data, false, Op::Leaf { param: false })
    }

    // ==== MATRIX PRODUCTS ====

    /// 2D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef, TapeError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::ZERO; m * n];
        mm_nn(self.value(a), self.value(b), m, k, n, &mut out);
        let req = self.requires(a) || self.requires(b);
        self.push(vec![m, n], out, req, Op::Matmul { a: a.0, b: b.0, m, k, n })
    }

    /// Batched matrix product `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef, TapeError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![F::ZERO; batch * m * n];
        for i in 0..batch {
            mm_nn(
                &self.value(a)[i * m * k..(i + 1) * m * k],
                &self.value(b)[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let req = self.requires(a) || self.requires(b);
        self.push(vec![batch, m, n], out, req, Op::Bmm { a: a.0, b: b.0, batch, m, k, n })
    }

    // ==== ELEMENTWISE ====

    fn zip_op(
        &mut self,
        name: &'static str,
        a: TensorRef,
        b: TensorRef,
        f: impl Fn(F, F) -> F,
        op: Op,
    ) -> Result<TensorRef, TapeError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data: Vec<F> =
            self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let req = self.requires(a) || self.requires(b);
        self.push(shape, data, req, op)
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef, TapeError> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef, TapeError> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef, TapeError> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    /// Adds a `[n]` bias over the last axis of `a`.
    pub fn add_bias(&mut self, a: TensorRef, bias: TensorRef) -> Result<TensorRef, TapeError> {
        let n = *self.shape(a).last().unwrap_or(&0);
        if self.shape(bias) != [n] {
            return Err(shape_err("add_bias", format!("{:?} + {:?}", self.shape(a), self.shape(bias))));
        }
        let bv = self.value(bias).to_vec();
        let data: Vec<F> =
            self.value(a).iter().enumerate().map(|(i, &x)| x + bv[i % n]).collect();
        let shape = self.shape(a).to_vec();
        let req = self.requires(a) || self.requires(bias);
        self.push(shape, data, req, Op::AddBias { a: a.0, bias: bias.0, n })
    }

    /// Multiplies by a compile-time constant scalar.
    pub fn scale(&mut self, a: TensorRef, c: f64) -> Result<TensorRef, TapeError> {
        let cf = F::from_f64(c);
        let data: Vec<F> = self.value(a).iter().map(|&x| x * cf).collect();
        let shape = self.shape(a).to_vec();
        let req = self.requires(a);
        self.push(shape, data, req, Op::Scale { a: a.0, c })
    }

    pub fn add_scalar(&mut self, a: TensorRef, c: f64) -> Result<TensorRef, TapeError> {
        let cf = F::from_f64(c);
        let data: Vec<F> = self.value(a).iter().map(|&x| x + cf).collect();
        let shape = self.shape(a).to_vec();
        let req = self.requires(a);
        self.push(shape, data, req, Op::AddScalar { a: a.0 })
    }

    pub fn abs(&mut self, a: TensorRef) -> Result<TensorRef, TapeError> {
        let data: Vec<F> = self.value(a).iter().map(|&x| x.abs()).collect();
        let shape = self.shape(a).to_vec();
        let req = self.requires(a);
        self.push(shape, data, req, Op::Abs { a: a.0 })
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, a: TensorRef) -> Result<TensorRef, TapeError> {
        let data: Vec<F> = self.value(a).iter().map(|&x| gelu_fwd(x)).collect();
        let shape = self.shape(a).to_vec();
        let req = self.requires(a);
        self.push(shape, data, req, Op::Gelu { a: a.0 })
    }

    // ==== SHAPE MOVEMENT ====

    /// Tiles an axis of extent 1 to `times`.
    pub fn repeat(&mut self, a: TensorRef, axis: usize, times: usize) -> Result<TensorRef, TapeError> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || sa[axis] != 1 || times == 0 {
            return Err(shape_err("repeat", format!("axis {axis} of {sa:?} x{times}")));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * times * inner);
        let av = self.value(a);
        for o in 0..outer {
            let chunk = &av[o * inner..(o + 1) * inner];
            for _ in 0..times {
                data.extend_from_slice(chunk);
            }
        }
        let mut shape = sa.clone();
        shape[axis] = times;
        let req = self.requires(a);
        self.push(shape, data, req, Op::Repeat { a: a.0, axis, times })
    }

    /// Concatenates tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[TensorRef], axis: usize) -> Result<TensorRef, TapeError> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no inputs".into()));
        }
        let base = self.shape(parts[0]).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} of {base:?}")));
        }
        let mut total = 0usize;
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != base.len()
                || sp.iter().enumerate().any(|(i, &e)| i != axis && e != base[i])
            {
                return Err(shape_err("concat", format!("{base:?} vs {sp:?}")));
            }
            total += sp[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut shape = base.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let e = self.shape(p)[axis];
                let pv = self.value(p);
                data.extend_from_slice(&pv[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let req = parts.iter().any(|&p| self.requires(p));
        self.push(shape, data, req, Op::Concat { parts: parts.iter().map(|p| p.0).collect(), axis })
    }

    /// Takes `[start, start+len)` along `axis`.
    pub fn slice(&mut self, a: TensorRef, axis: usize, start: usize, len: usize) -> Result<TensorRef, TapeError> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || start + len > sa[axis] || len == 0 {
            return Err(shape_err("slice", format!("[{start}..{}] on axis {axis} of {sa:?}", start + len)));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let e = sa[axis];
        let av = self.value(a);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * e + start) * inner;
            data.extend_from_slice(&av[off..off + len * inner]);
        }
        let mut shape = sa.clone();
        shape[axis] = len;
        let req = self.requires(a);
        self.push(shape, data, req, Op::Slice { a: a.0, axis, start, len })
    }

    /// Reorders axes by `perm` (a permutation of 0..rank).
    pub fn permute(&mut self, a: TensorRef, perm: &[usize]) -> Result<TensorRef, TapeError> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if perm.len() != sa.len() || perm.iter().any(|&p| p >= sa.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", format!("perm {perm:?} on {sa:?}")));
        }
        let shape: Vec<usize> = perm.iter().map(|&p| sa[p]).collect();
        let data = permute_data(self.value(a), &sa, perm);
        let req = self.requires(a);
        self.push(shape, data, req, Op::Permute { a: a.0, perm: perm.to_vec() })
    }

    /// Reinterprets the buffer with a new shape of equal volume.
    pub fn reshape(&mut self, a: TensorRef, shape: &[usize]) -> Result<TensorRef, TapeError> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(a))));
        }
        let data = self.value(a).to_vec();
        let req = self.requires(a);
        self.push(shape.to_vec(), data, req, Op::Reshape { a: a.0 })
    }

    // ==== SOFTMAX / NORM ====

    /// Max-subtracted softmax over the last axis.
    pub fn softmax_lastdim(&mut self, a: TensorRef) -> Result<TensorRef, TapeError> {
        self.masked_softmax_lastdim(a, None)
    }

    /// Softmax over the last axis where only `mask == true` positions receive
    /// weight. A fully masked row yields all-zero weights (its gradient is
    /// zero), so callers can route around absent keys without NaNs.
    pub fn masked_softmax_lastdim(
        &mut self,
        a: TensorRef,
        mask: Option<&[bool]>,
    ) -> Result<TensorRef, TapeError> {
        let sa = self.shape(a).to_vec();
        let n = *sa.last().ok_or_else(|| shape_err("softmax", "rank-0 input".into()))?;
        if n == 0 {
            return Err(shape_err("softmax", "last extent must be >= 1".into()));
        }
        if let Some(m) = mask {
            if m.len() != self.value(a).len() {
                return Err(shape_err("softmax", format!("mask length {} vs data {}", m.len(), self.value(a).len())));
            }
        }
        let av = self.value(a);
        let rows = av.len() / n;
        let mut data = vec![F::ZERO; av.len()];
        for r in 0..rows {
            let row = &av[r * n..(r + 1) * n];
            let valid = |j: usize| mask.map_or(true, |m| m[r * n + j]);
            let mut mx = f64::NEG_INFINITY;
            for (j, &x) in row.iter().enumerate() {
                if valid(j) {
                    mx = mx.max(x.to_f64());
                }
            }
            if mx == f64::NEG_INFINITY {
                continue; // fully masked row stays zero
            }
            let mut denom = 0.0f64;
            let out = &mut data[r * n..(r + 1) * n];
            for (j, &x) in row.iter().enumerate() {
                if valid(j) {
                    let e = (x.to_f64() - mx).exp();
                    out[j] = F::from_f64(e);
                    denom += e;
                }
            }
            for v in out.iter_mut() {
                *v = F::from_f64(v.to_f64() / denom);
            }
        }
        let req = self.requires(a);
        self.push(sa, data, req, Op::MaskedSoftmax { a: a.0 })
    }

    /// Layer normalization over the last axis with affine parameters.
    /// Statistics accumulate in f64.
    pub fn layer_norm(
        &mut self,
        a: TensorRef,
        gamma: TensorRef,
        beta: TensorRef,
    ) -> Result<TensorRef, TapeError> {
        let sa = self.shape(a).to_vec();
        let n = *sa.last().ok_or_else(|| shape_err("layer_norm", "rank-0 input".into()))?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(shape_err(
                "layer_norm",
                format!("affine shapes {:?}/{:?} vs last extent {n}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let av = self.value(a);
        let rows = av.len() / n;
        let gv = self.value(gamma).to_vec();
        let bv = self.value(beta).to_vec();
        let mut data = vec![F::ZERO; av.len()];
        let mut cache = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &av[r * n..(r + 1) * n];
            let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + EPS_LAYERNORM).sqrt();
            cache.push((mean, rstd));
            for j in 0..n {
                let xhat = (row[j].to_f64() - mean) * rstd;
                data[r * n + j] = F::from_f64(xhat * gv[j].to_f64() + bv[j].to_f64());
            }
        }
        let req = self.requires(a) || self.requires(gamma) || self.requires(beta);
        self.push(sa, data, req, Op::LayerNorm { a: a.0, gamma: gamma.0, beta: beta.0, cache })
    }

    // ==== REDUCTIONS ====

    /// Full sum to a scalar `[1]`, accumulated in f64.
    pub fn sum(&mut self, a: TensorRef) -> Result<TensorRef, TapeError> {
        let s: f64 = self.value(a).iter().map(|v| v.to_f64()).sum();
        let req = self.requires(a);
        self.push(vec![1], vec![F::from_f64(s)], req, Op::Sum { a: a.0 })
    }

    /// Full mean to a scalar `[1]`, accumulated in f64.
    pub fn mean(&mut self, a: TensorRef) -> Result<TensorRef, TapeError> {
        let len = self.value(a).len();
        if len == 0 {
            return Err(shape_err("mean", "empty tensor".into()));
        }
        let s: f64 = self.value(a).iter().map(|v| v.to_f64()).sum();
        let req = self.requires(a);
        self.push(vec![1], vec![F::from_f64(s / len as f64)], req, Op::Mean { a: a.0 })
    }

    // ==== BACKWARD ====

    /// Reverse-mode sweep from a scalar loss. Fills gradients for every node
    /// that requires them; errors if no parameter leaf is reached.
    pub fn backward(&mut self, loss: TensorRef) -> Result<(), TapeError> {
        if self.value(loss).len() != 1 {
            return Err(TapeError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(TapeError::DisconnectedGraph);
        }
        self.nodes[loss.0].grad = Some(vec![F::ONE]);

        let mut touched_param = false;
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let grad = self.nodes[i].grad.take().unwrap();
            match &self.nodes[i].op {
                Op::Leaf { param } => {
                    touched_param |= *param;
                }
                Op::Matmul { a, b, m, k, n } => {
                    let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                    if self.nodes[a].requires_grad {
                        let mut da = self.take_grad(a);
                        mm_nt(&grad, &self.nodes[b].data, m, n, k, &mut da);
                        self.nodes[a].grad = Some(da);
                    }
                    if self.nodes[b].requires_grad {
                        let mut db = self.take_grad(b);
                        mm_tn(&self.nodes[a].data, &grad, m, k, n, &mut db);
                        self.nodes[b].grad = Some(db);
                    }
                }
                Op::Bmm { a, b, batch, m, k, n } => {
                    let (a, b, batch, m, k, n) = (*a, *b, *batch, *m, *k, *n);
                    if self.nodes[a].requires_grad {
                        let mut da = self.take_grad(a);
                        for i in 0..batch {
                            mm_nt(
                                &grad[i * m * n..(i + 1) * m * n],
                                &self.nodes[b].data[i * k * n..(i + 1) * k * n],
                                m,
                                n,
                                k,
                                &mut da[i * m * k..(i + 1) * m * k],
                            );
                        }
                        self.nodes[a].grad = Some(da);
                    }
                    if self.nodes[b].requires_grad {
                        let mut db = self.take_grad(b);
                        for i in 0..batch {
                            mm_tn(
                                &self.nodes[a].data[i * m * k..(i + 1) * m * k],
                                &grad[i * m * n..(i + 1) * m * n],
                                m,
                                k,
                                n,
                                &mut db[i * k * n..(i + 1) * k * n],
                            );
                        }
                        self.nodes[b].grad = Some(db);
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, |g, _| g.iter_mut().zip(&grad).for_each(|(d, &g)| *d = *d + g));
                    self.accumulate(b, |g, _| g.iter_mut().zip(&grad).for_each(|(d, &g)| *d = *d + g));
                }
                Op::Sub { a, b } => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, |g, _| g.iter_mut().zip(&grad).for_each(|(d, &g)| *d = *d + g));
                    self.accumulate(b, |g, _| g.iter_mut().zip(&grad).for_each(|(d, &g)| *d = *d - g));
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a].requires_grad {
                        let bv: Vec<F> = self.nodes[b].data.clone();
                        self.accumulate(a, |g, _| {
                            for (j, d) in g.iter_mut().enumerate() {
                                *d = *d + grad[j] * bv[j];
                            }
                        });
                    }
                    if self.nodes[b].requires_grad {
                        let av: Vec<F> = self.nodes[a].data.clone();
                        self.accumulate(b, |g, _| {
                            for (j, d) in g.iter_mut().enumerate() {
                                *d = *d + grad[j] * av[j];
                            }
                        });
                    }
                }
                Op::AddBias { a, bias, n } => {
                    let (a, bias, n) = (*a, *bias, *n);
                    self.accumulate(a, |g, _| g.iter_mut().zip(&grad).for_each(|(d, &g)| *d = *d + g));
                    self.accumulate(bias, |g, _| {
                        for (j, &gv) in grad.iter().enumerate() {
                            g[j % n] = g[j % n] + gv;
                        }
                    });
                }
                Op::Scale { a, c } => {
                    let (a, c) = (*a, F::from_f64(*c));
                    self.accumulate(a, |g, _| {
                        for (j, d) in g.iter_mut().enumerate() {
                            *d = *d + grad[j] * c;
                        }
                    });
                }
                Op::AddScalar { a } => {
                    let a = *a;
                    self.accumulate(a, |g, _| g.iter_mut().zip(&grad).for_each(|(d, &g)| *d = *d + g));
                }
                Op::Repeat { a, axis, times } => {
                    let (a, axis, times) = (*a, *axis, *times);
                    let sa = self.nodes[a].shape.clone();
                    let outer: usize = sa[..axis].iter().product();
                    let inner: usize = sa[axis + 1..].iter().product();
                    self.accumulate(a, |g, _| {
                        for o in 0..outer {
                            for r in 0..times {
                                let src = (o * times + r) * inner;
                                for j in 0..inner {
                                    g[o * inner + j] = g[o * inner + j] + grad[src + j];
                                }
                            }
                        }
                    });
                }
                Op::Concat { parts, axis } => {
                    let parts = parts.clone();
                    let axis = *axis;
                    let out_shape = self.nodes[i].shape.clone();
                    let outer: usize = out_shape[..axis].iter().product();
                    let inner: usize = out_shape[axis + 1..].iter().product();
                    let mut offset = 0usize;
                    let total = out_shape[axis];
                    for &p in &parts {
                        let e = self.nodes[p].shape[axis];
                        if self.nodes[p].requires_grad {
                            let off = offset;
                            self.accumulate(p, |g, _| {
                                for o in 0..outer {
                                    let src = (o * total + off) * inner;
                                    let dst = o * e * inner;
                                    for j in 0..e * inner {
                                        g[dst + j] = g[dst + j] + grad[src + j];
                                    }
                                }
                            });
                        }
                        offset += e;
                    }
                }
                Op::Slice { a, axis, start, len } => {
                    let (a, axis, start, len) = (*a, *axis, *start, *len);
                    let sa = self.nodes[a].shape.clone();
                    let outer: usize = sa[..axis].iter().product();
                    let inner: usize = sa[axis + 1..].iter().product();
                    let e = sa[axis];
                    self.accumulate(a, |g, _| {
                        for o in 0..outer {
                            let dst = (o * e + start) * inner;
                            let src = o * len * inner;
                            for j in 0..len * inner {
                                g[dst + j] = g[dst + j] + grad[src + j];
                            }
                        }
                    });
                }
                Op::Permute { a, perm } => {
                    let a = *a;
                    let perm = perm.clone();
                    let out_shape = self.nodes[i].shape.clone();
                    // Gradient flows through the inverse permutation.
                    let mut inv = vec![0usize; perm.len()];
                    for (j, &p) in perm.iter().enumerate() {
                        inv[p] = j;
                    }
                    let gperm = permute_data(&grad, &out_shape, &inv);
                    self.accumulate(a, |g, _| {
                        for (d, &v) in g.iter_mut().zip(&gperm) {
                            *d = *d + v;
                        }
                    });
                }
                Op::Reshape { a } => {
                    let a = *a;
                    self.accumulate(a, |g, _| g.iter_mut().zip(&grad).for_each(|(d, &g)| *d = *d + g));
                }
                Op::MaskedSoftmax { a } => {
                    let a = *a;
                    let y = self.nodes[i].data.clone();
                    let n = *self.nodes[i].shape.last().unwrap();
                    self.accumulate(a, |g, _| {
                        let rows = y.len() / n;
                        for r in 0..rows {
                            let ys = &y[r * n..(r + 1) * n];
                            let gs = &grad[r * n..(r + 1) * n];
                            let dot: f64 =
                                ys.iter().zip(gs).map(|(&yv, &gv)| yv.to_f64() * gv.to_f64()).sum();
                            for j in 0..n {
                                let dx = ys[j].to_f64() * (gs[j].to_f64() - dot);
                                g[r * n + j] = g[r * n + j] + F::from_f64(dx);
                            }
                        }
                    });
                }
                Op::LayerNorm { a, gamma, beta, cache } => {
                    let (a, gamma, beta) = (*a, *gamma, *beta);
                    let cache = cache.clone();
                    let n = *self.nodes[i].shape.last().unwrap();
                    let x = self.nodes[a].data.clone();
                    let gv = self.nodes[gamma].data.clone();
                    let rows = x.len() / n;
                    if self.nodes[a].requires_grad {
                        self.accumulate(a, |g, _| {
                            for r in 0..rows {
                                let (mean, rstd) = cache[r];
                                let xs = &x[r * n..(r + 1) * n];
                                let gs = &grad[r * n..(r + 1) * n];
                                let mut sum_dy = 0.0f64;
                                let mut sum_dy_xhat = 0.0f64;
                                for j in 0..n {
                                    let dy = gs[j].to_f64() * gv[j].to_f64();
                                    let xhat = (xs[j].to_f64() - mean) * rstd;
                                    sum_dy += dy;
                                    sum_dy_xhat += dy * xhat;
                                }
                                let inv_n = 1.0 / n as f64;
                                for j in 0..n {
                                    let dy = gs[j].to_f64() * gv[j].to_f64();
                                    let xhat = (xs[j].to_f64() - mean) * rstd;
                                    let dx = rstd * (dy - inv_n * sum_dy - xhat * inv_n * sum_dy_xhat);
                                    g[r * n + j] = g[r * n + j] + F::from_f64(dx);
                                }
                            }
                        });
                    }
                    if self.nodes[gamma].requires_grad {
                        self.accumulate(gamma, |g, _| {
                            for r in 0..rows {
                                let (mean, rstd) = cache[r];
                                for j in 0..n {
                                    let xhat = (x[r * n + j].to_f64() - mean) * rstd;
                                    g[j] = g[j] + F::from_f64(grad[r * n + j].to_f64() * xhat);
                                }
                            }
                        });
                    }
                    if self.nodes[beta].requires_grad {
                        self.accumulate(beta, |g, _| {
                            for r in 0..rows {
                                for j in 0..n {
                                    g[j] = g[j] + grad[r * n + j];
                                }
                            }
                        });
                    }
                }
                Op::Gelu { a } => {
                    let a = *a;
                    let x = self.nodes[a].data.clone();
                    self.accumulate(a, |g, _| {
                        for (j, d) in g.iter_mut().enumerate() {
                            *d = *d + grad[j] * gelu_bwd(x[j]);
                        }
                    });
                }
                Op::Abs { a } => {
                    let a = *a;
                    let x = self.nodes[a].data.clone();
                    self.accumulate(a, |g, _| {
                        for (j, d) in g.iter_mut().enumerate() {
                            let s = if x[j] > F::ZERO {
                                F::ONE
                            } else if x[j] < F::ZERO {
                                -F::ONE
                            } else {
                                F::ZERO
                            };
                            *d = *d + grad[j] * s;
                        }
                    });
                }
                Op::Sum { a } => {
                    let a = *a;
                    let g0 = grad[0];
                    self.accumulate(a, |g, _| g.iter_mut().for_each(|d| *d = *d + g0));
                }
                Op::Mean { a } => {
                    let a = *a;
                    let len = self.nodes[a].data.len();
                    let g0 = grad[0] * F::from_f64(1.0 / len as f64);
                    self.accumulate(a, |g, _| g.iter_mut().for_each(|d| *d = *d + g0));
                }
            }
            // Processed gradients stay readable via `grad()`.
            self.nodes[i].grad = Some(grad);
        }
        if !touched_param {
            return Err(TapeError::DisconnectedGraph);
        }
        Ok(())
    }

    fn take_grad(&mut self, idx: usize) -> Vec<F> {
        self.nodes[idx]
            .grad
            .take()
            .unwrap_or_else(|| vec![F::ZERO; self.nodes[idx].data.len()])
    }

    fn accumulate(&mut self, idx: usize, f: impl FnOnce(&mut [F], &[usize])) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        let mut g = self.take_grad(idx);
        let shape = self.nodes[idx].shape.clone();
        f(&mut g, &shape);
        self.nodes[idx].grad = Some(g);
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf { .. } => "leaf",
        Op::Matmul { .. } => "matmul",
        Op::Bmm { .. } => "bmm",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::AddBias { .. } => "add_bias",
        Op::Scale { .. } => "scale",
        Op::AddScalar { .. } => "add_scalar",
        Op::Repeat { .. } => "repeat",
        Op::Concat { .. } => "concat",
        Op::Slice { .. } => "slice",
        Op::Permute { .. } => "permute",
        Op::Reshape { .. } => "reshape",
        Op::MaskedSoftmax { .. } => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Gelu { .. } => "gelu",
        Op::Abs { .. } => "abs",
        Op::Sum { .. } => "sum",
        Op::Mean { .. } => "mean",
    }
}

// ==== KERNELS ====

/// C += A·B. The j-inner loop keeps accumulation order fixed per output
/// element, so results are bit-stable across SIMD widths.
fn mm_nn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &apv) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + apv * brow[j];
            }
        }
    }
}

/// C += A·Bᵀ where A is [m,n] and B is [k,n]; result [m,k].
fn mm_nt<F: Scalar>(a: &[F], b: &[F], m: usize, n: usize, k: usize, out: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = F::ZERO;
            for j in 0..n {
                acc = acc + arow[j] * brow[j];
            }
            orow[p] = orow[p] + acc;
        }
    }
}

/// C += Aᵀ·B where A is [m,k] and B is [m,n]; result [k,n].
fn mm_tn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &apv) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + apv * brow[j];
            }
        }
    }
}

fn permute_data<F: Scalar>(data: &[F], shape: &[usize], perm: &[usize]) -> Vec<F> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let mut off = 0usize;
        for d in 0..rank {
            off += idx[d] * in_strides[perm[d]];
        }
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_fwd<F: Scalar>(x: F) -> F {
    let u = F::from_f64(GELU_C) * (x + F::from_f64(GELU_A) * x * x * x);
    F::from_f64(0.5) * x * (F::ONE + u.tanh())
}

fn gelu_bwd<F: Scalar>(x: F) -> F {
    let xf = x.to_f64();
    let u = GELU_C * (xf + GELU_A * xf * xf * xf);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * xf * xf);
    F::from_f64(0.5 * (1.0 + t) + 0.5 * xf * (1.0 - t * t) * du)
}

// ==== FINITE DIFFERENCES ====

/// Central finite-difference gradient of `f` at `x` with step `h`; the
/// reference oracle for all gradient checks.
pub fn finite_diff_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        grad.push((fp - fm) / (2.0 * h));
    }
    grad
}

/// Asserts `got` against a finite-difference reference: absolute tolerance
/// `tol` for small entries, relative for large ones.
pub fn assert_grad_close(got: &[f64], reference: &[f64], tol: f64, what: &str) {
    assert_eq!(got.len(), reference.len(), "{what}: gradient length");
    for (i, (&g, &r)) in got.iter().zip(reference).enumerate() {
        let denom = r.abs().max(1.0);
        assert!(
            (g - r).abs() <= tol * denom,
            "{what}[{i}]: got {g}, reference {r} (tol {tol})"
        );
    }
}

// ==== TESTS ====
