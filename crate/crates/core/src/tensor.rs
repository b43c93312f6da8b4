//! Dense float tensors with reverse-mode automatic differentiation.
//!
//! Every operation that participates in differentiation records its parents
//! and a backward closure; calling [`Tensor::backward`] on a scalar walks the
//! recorded graph in reverse creation order and accumulates gradients into
//! every tensor marked `requires_grad`. Broadcasting is limited to leading
//! batch dimensions (the right operand's shape must be a suffix of the left's,
//! or its batch dimensions must match exactly for matmul).
//!
//! All arithmetic is in f64. Gradient verification via finite differences is
//! unreliable in f32, and at the model sizes this crate targets the memory
//! cost of doubling the width is irrelevant; training and checkpoints use the
//! same representation so resume is bit-exact.

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward requires a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("index {index} out of range (bound {bound})")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("cross entropy: every row is ignored")]
    AllRowsIgnored,
}

type Result<T> = std::result::Result<T, TensorError>;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

type BackwardFn = Box<dyn Fn(&[f64])>;

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    needs_grad: bool,
    parents: Vec<Tensor>,
    backward_fn: Option<BackwardFn>,
}

/// A handle to a node in the computation graph. Cloning is cheap and shares
/// the underlying storage.
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl Tensor {
    fn make(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward_fn: Option<BackwardFn>,
    ) -> Tensor {
        debug_assert_eq!(data.len(), numel_of(&shape));
        let needs_grad = requires_grad || parents.iter().any(|p| p.0.needs_grad);
        let (parents, backward_fn) = if needs_grad {
            (parents, backward_fn)
        } else {
            // eval-mode forward passes record no graph
            (Vec::new(), None)
        };
        Tensor(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            needs_grad,
            parents,
            backward_fn,
        }))
    }

    fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward_fn: impl Fn(&[f64]) + 'static,
    ) -> Tensor {
        Tensor::make(shape, data, false, parents, Some(Box::new(backward_fn)))
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(
            data.len(),
            numel_of(shape),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor::make(shape.to_vec(), data, false, Vec::new(), None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(shape, vec![0.0; numel_of(shape)])
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::from_vec(shape, vec![value; numel_of(shape)])
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![value])
    }

    /// Mark a leaf tensor as trainable. Gradients accumulate into it on
    /// backward passes.
    pub fn requires_grad(self) -> Tensor {
        assert!(
            self.0.parents.is_empty(),
            "requires_grad only applies to leaf tensors"
        );
        let data = self.0.data.borrow().clone();
        Tensor::make(self.0.shape.clone(), data, true, Vec::new(), None)
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
        let data = (0..numel_of(shape)).map(|_| rng.normal() * std).collect();
        Tensor::from_vec(shape, data)
    }

    /// Uniform Xavier/Glorot initialization for a [fan_in, fan_out] matrix.
    pub fn xavier_uniform(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.uniform(-limit, limit))
            .collect();
        Tensor::from_vec(&[fan_in, fan_out], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.0.shape)
    }

    pub fn is_requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn value(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// Read the forward values without cloning.
    pub fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.0.data.borrow())
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() requires a scalar");
        self.0.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Overwrite the stored values in place (optimizer updates).
    pub fn set_data(&self, data: &[f64]) {
        assert_eq!(data.len(), self.numel());
        self.0.data.borrow_mut().copy_from_slice(data);
    }

    /// Apply an in-place update to the stored values.
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.0.data.borrow_mut());
    }

    fn accumulate_grad(&self, g: &[f64]) {
        if !self.0.needs_grad {
            return;
        }
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar loss. Gradients sum over every use of
    /// a tensor; forward values are never mutated.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar(self.0.shape.clone()));
        }
        // Reachable subgraph, then reverse creation order (a valid reverse
        // topological order because parents are always created first).
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        let mut nodes: Vec<Tensor> = Vec::new();
        while let Some(node) = stack.pop() {
            if !seen.insert(node.0.id) {
                continue;
            }
            for p in &node.0.parents {
                if p.0.needs_grad {
                    stack.push(p.clone());
                }
            }
            nodes.push(node);
        }
        nodes.sort_by(|a, b| b.0.id.cmp(&a.0.id));
        self.accumulate_seed();
        for node in &nodes {
            let grad = node.0.grad.borrow().clone();
            if let (Some(grad), Some(backward)) = (grad, node.0.backward_fn.as_ref()) {
                backward(&grad);
            }
        }
        Ok(())
    }

    fn accumulate_seed(&self) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc[0] += 1.0,
            None => *slot = Some(vec![1.0]),
        }
    }

    // ---- elementwise ----

    fn broadcast_suffix(&self, rhs: &Tensor, op: &'static str) -> Result<usize> {
        let ls = &self.0.shape;
        let rs = &rhs.0.shape;
        if rs.len() > ls.len() || &ls[ls.len() - rs.len()..] != rs.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: ls.clone(),
                rhs: rs.clone(),
            });
        }
        Ok(rhs.numel())
    }

    /// Elementwise sum; `rhs` may have a shape that is a suffix of `self`'s,
    /// in which case it is broadcast over the leading dimensions.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        let rn = self.broadcast_suffix(rhs, "add")?;
        let a = self.0.data.borrow();
        let b = rhs.0.data.borrow();
        let out: Vec<f64> = a
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b[i % rn])
            .collect();
        drop(a);
        drop(b);
        let (pa, pb) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            self.0.shape.clone(),
            out,
            vec![self.clone(), rhs.clone()],
            move |g| {
                pa.accumulate_grad(g);
                if pb.0.needs_grad {
                    let mut gb = vec![0.0; rn];
                    for (i, &v) in g.iter().enumerate() {
                        gb[i % rn] += v;
                    }
                    pb.accumulate_grad(&gb);
                }
            },
        ))
    }

    /// Elementwise product with the same suffix-broadcast rule as `add`.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        let rn = self.broadcast_suffix(rhs, "mul")?;
        let a = self.0.data.borrow().clone();
        let b = rhs.0.data.borrow().clone();
        let out: Vec<f64> = a.iter().enumerate().map(|(i, &x)| x * b[i % rn]).collect();
        let (pa, pb) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            self.0.shape.clone(),
            out,
            vec![self.clone(), rhs.clone()],
            move |g| {
                if pa.0.needs_grad {
                    let ga: Vec<f64> = g.iter().enumerate().map(|(i, &v)| v * b[i % rn]).collect();
                    pa.accumulate_grad(&ga);
                }
                if pb.0.needs_grad {
                    let mut gb = vec![0.0; rn];
                    for (i, &v) in g.iter().enumerate() {
                        gb[i % rn] += v * a[i];
                    }
                    pb.accumulate_grad(&gb);
                }
            },
        ))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.add(&rhs.scale(-1.0))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.0.data.borrow().iter().map(|&x| x * c).collect();
        let p = self.clone();
        Tensor::from_op(self.0.shape.clone(), out, vec![self.clone()], move |g| {
            let gp: Vec<f64> = g.iter().map(|&v| v * c).collect();
            p.accumulate_grad(&gp);
        })
    }

    pub fn relu(&self) -> Tensor {
        let x = self.0.data.borrow().clone();
        let out: Vec<f64> = x.iter().map(|&v| v.max(0.0)).collect();
        let p = self.clone();
        Tensor::from_op(self.0.shape.clone(), out, vec![self.clone()], move |g| {
            let gp: Vec<f64> = g
                .iter()
                .zip(&x)
                .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                .collect();
            p.accumulate_grad(&gp);
        })
    }

    pub fn sum(&self) -> Tensor {
        let total: f64 = self.0.data.borrow().iter().sum();
        let n = self.numel();
        let p = self.clone();
        Tensor::from_op(vec![1], vec![total], vec![self.clone()], move |g| {
            p.accumulate_grad(&vec![g[0]; n]);
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    // ---- shape manipulation ----

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.0.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.0.data.borrow().clone();
        let p = self.clone();
        Ok(Tensor::from_op(
            shape.to_vec(),
            data,
            vec![self.clone()],
            move |g| p.accumulate_grad(g),
        ))
    }

    /// Reorder axes; backward applies the inverse permutation.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.0.shape.len();
        if axes.len() != rank {
            return Err(TensorError::InvalidAxis {
                axis: axes.len(),
                rank,
            });
        }
        let mut seen = vec![false; rank];
        for &a in axes {
            if a >= rank || seen[a] {
                return Err(TensorError::InvalidAxis { axis: a, rank });
            }
            seen[a] = true;
        }
        let (out, out_shape) = permute_copy(&self.0.data.borrow(), &self.0.shape, axes);
        let mut inverse = vec![0; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let p = self.clone();
        let gshape = out_shape.clone();
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            move |g| {
                let (gp, _) = permute_copy(g, &gshape, &inverse);
                p.accumulate_grad(&gp);
            },
        ))
    }

    // ---- matmul ----

    /// Batched matrix product. `self` is [.., m, k]; `rhs` is either [k, n]
    /// (broadcast over the batch) or [.., k, n] with identical leading
    /// dimensions.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let ls = &self.0.shape;
        let rs = &rhs.0.shape;
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: ls.clone(),
            rhs: rs.clone(),
        };
        if ls.len() < 2 || rs.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (ls[ls.len() - 2], ls[ls.len() - 1]);
        let (k2, n) = (rs[rs.len() - 2], rs[rs.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let batch_dims = &ls[..ls.len() - 2];
        let rhs_batched = rs.len() > 2;
        if rhs_batched && &rs[..rs.len() - 2] != batch_dims {
            return Err(mismatch());
        }
        let batch: usize = batch_dims.iter().product();
        let a = self.0.data.borrow().clone();
        let b = rhs.0.data.borrow().clone();
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            let bi = if rhs_batched { i } else { 0 };
            gemm(
                &mut out[i * m * n..(i + 1) * m * n],
                &a[i * m * k..(i + 1) * m * k],
                &b[bi * k * n..(bi + 1) * k * n],
                m,
                k,
                n,
                false,
                false,
            );
        }
        let mut out_shape = batch_dims.to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let (pa, pb) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone(), rhs.clone()],
            move |g| {
                if pa.0.needs_grad {
                    // dA_i = dC_i . B_i^T
                    let mut ga = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        let bi = if rhs_batched { i } else { 0 };
                        gemm(
                            &mut ga[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &b[bi * k * n..(bi + 1) * k * n],
                            m,
                            n,
                            k,
                            false,
                            true,
                        );
                    }
                    pa.accumulate_grad(&ga);
                }
                if pb.0.needs_grad {
                    // dB_i = A_i^T . dC_i, summed over the batch when broadcast
                    let slots = if rhs_batched { batch } else { 1 };
                    let mut gb = vec![0.0; slots * k * n];
                    for i in 0..batch {
                        let bi = if rhs_batched { i } else { 0 };
                        gemm(
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                            &a[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            k,
                            m,
                            n,
                            true,
                            false,
                        );
                    }
                    pb.accumulate_grad(&gb);
                }
            },
        ))
    }

    // ---- softmax ----

    /// Softmax along `axis` with max-subtraction so large inputs cannot
    /// overflow.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let rank = self.0.shape.len();
        if axis >= rank {
            return Err(TensorError::InvalidAxis { axis, rank });
        }
        let len = self.0.shape[axis];
        let inner: usize = self.0.shape[axis + 1..].iter().product();
        let outer: usize = self.0.shape[..axis].iter().product();
        let x = self.0.data.borrow();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut maxv = f64::NEG_INFINITY;
                for j in 0..len {
                    maxv = maxv.max(x[base + j * inner]);
                }
                let mut total = 0.0;
                for j in 0..len {
                    let e = (x[base + j * inner] - maxv).exp();
                    out[base + j * inner] = e;
                    total += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= total;
                }
            }
        }
        drop(x);
        let y = out.clone();
        let p = self.clone();
        Ok(Tensor::from_op(
            self.0.shape.clone(),
            out,
            vec![self.clone()],
            move |g| {
                // dx = y * (g - sum(g*y) along axis)
                let mut gp = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = 0.0;
                        for j in 0..len {
                            let idx = base + j * inner;
                            dot += g[idx] * y[idx];
                        }
                        for j in 0..len {
                            let idx = base + j * inner;
                            gp[idx] = y[idx] * (g[idx] - dot);
                        }
                    }
                }
                p.accumulate_grad(&gp);
            },
        ))
    }

    // ---- dropout ----

    /// Inverted dropout. In training mode each element is zeroed with
    /// probability `p` and survivors are scaled by 1/(1-p); the mask is a pure
    /// function of `seed`. Outside training this is the identity.
    pub fn dropout(&self, p: f64, training: bool, seed: u64) -> Tensor {
        assert!((0.0..1.0).contains(&p), "dropout probability {p}");
        if !training || p == 0.0 {
            return self.clone();
        }
        let mut rng = Rng::new(seed);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.numel())
            .map(|_| if rng.next_f64() < p { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = self
            .0
            .data
            .borrow()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let parent = self.clone();
        Tensor::from_op(self.0.shape.clone(), out, vec![self.clone()], move |g| {
            let gp: Vec<f64> = g.iter().zip(&mask).map(|(&gv, &m)| gv * m).collect();
            parent.accumulate_grad(&gp);
        })
    }
}

/// out += op(a) . op(b) where op(a) is (m,k) and op(b) is (k,n).
#[allow(clippy::too_many_arguments)]
fn gemm(
    out: &mut [f64],
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) {
    for i in 0..m {
        for p in 0..k {
            let av = if ta { a[p * m + i] } else { a[i * k + p] };
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            if tb {
                for (j, o) in row.iter_mut().enumerate() {
                    *o += av * b[j * k + p];
                }
            } else {
                for (j, o) in row.iter_mut().enumerate() {
                    *o += av * b[p * n + j];
                }
            }
        }
    }
}

fn permute_copy(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides_of(shape);
    let out_strides = strides_of(&out_shape);
    let mut out = vec![0.0; data.len()];
    for (out_idx, slot) in out.iter_mut().enumerate() {
        let mut rem = out_idx;
        let mut in_idx = 0;
        for d in 0..axes.len() {
            let coord = rem / out_strides[d];
            rem %= out_strides[d];
            in_idx += coord * in_strides[axes[d]];
        }
        *slot = data[in_idx];
    }
    (out, out_shape)
}

/// Per-last-dimension standardization followed by an affine transform.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    let d = *shape.last().ok_or(TensorError::InvalidAxis { axis: 0, rank: 0 })?;
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(TensorError::ShapeMismatch {
            op: "layer_norm",
            lhs: shape,
            rhs: gain.shape().to_vec(),
        });
    }
    let rows = x.numel() / d;
    let xv = x.value();
    let gv = gain.value();
    let bv = bias.value();
    let mut out = vec![0.0; xv.len()];
    let mut xhat = vec![0.0; xv.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &xv[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std[r] = istd;
        for j in 0..d {
            let h = (row[j] - mean) * istd;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gv[j] + bv[j];
        }
    }
    let (px, pg, pb) = (x.clone(), gain.clone(), bias.clone());
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        out,
        vec![x.clone(), gain.clone(), bias.clone()],
        move |g| {
            if px.0.needs_grad {
                let mut gx = vec![0.0; xhat.len()];
                for r in 0..rows {
                    let mut sum_dh = 0.0;
                    let mut sum_dh_xhat = 0.0;
                    for j in 0..d {
                        let dh = g[r * d + j] * gv[j];
                        sum_dh += dh;
                        sum_dh_xhat += dh * xhat[r * d + j];
                    }
                    let mean_dh = sum_dh / d as f64;
                    let mean_dh_xhat = sum_dh_xhat / d as f64;
                    for j in 0..d {
                        let dh = g[r * d + j] * gv[j];
                        gx[r * d + j] =
                            inv_std[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_xhat);
                    }
                }
                px.accumulate_grad(&gx);
            }
            if pg.0.needs_grad || pb.0.needs_grad {
                let mut ggain = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                for r in 0..rows {
                    for j in 0..d {
                        ggain[j] += g[r * d + j] * xhat[r * d + j];
                        gbias[j] += g[r * d + j];
                    }
                }
                pg.accumulate_grad(&ggain);
                pb.accumulate_grad(&gbias);
            }
        },
    ))
}

/// Mean over non-ignored rows of the label-smoothed negative log-likelihood:
/// (1-ls) * (-log p[target]) + ls * mean_v(-log p[v]).
pub fn cross_entropy(
    logits: &Tensor,
    targets: &[u32],
    label_smoothing: f64,
    ignore_id: u32,
) -> Result<Tensor> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(TensorError::ShapeMismatch {
            op: "cross_entropy",
            lhs: shape.to_vec(),
            rhs: vec![targets.len()],
        });
    }
    let (rows, v) = (shape[0], shape[1]);
    for &t in targets {
        if t != ignore_id && t as usize >= v {
            return Err(TensorError::IndexOutOfRange {
                index: t as usize,
                bound: v,
            });
        }
    }
    let active = targets.iter().filter(|&&t| t != ignore_id).count();
    if active == 0 {
        return Err(TensorError::AllRowsIgnored);
    }
    let x = logits.value();
    let mut probs = vec![0.0; rows * v];
    let mut total = 0.0;
    for r in 0..rows {
        let row = &x[r * v..(r + 1) * v];
        let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &lx in row {
            z += (lx - maxv).exp();
        }
        let log_z = z.ln() + maxv;
        for j in 0..v {
            probs[r * v + j] = (row[j] - log_z).exp();
        }
        let t = targets[r];
        if t == ignore_id {
            continue;
        }
        let nll_target = log_z - row[t as usize];
        let mean_nll: f64 = row.iter().map(|&lx| log_z - lx).sum::<f64>() / v as f64;
        total += (1.0 - label_smoothing) * nll_target + label_smoothing * mean_nll;
    }
    let loss = total / active as f64;
    let targets = targets.to_vec();
    let parent = logits.clone();
    Ok(Tensor::from_op(
        vec![1],
        vec![loss],
        vec![logits.clone()],
        move |g| {
            let scale = g[0] / active as f64;
            let mut gx = vec![0.0; rows * v];
            for r in 0..rows {
                let t = targets[r];
                if t == ignore_id {
                    continue;
                }
                for j in 0..v {
                    let mut q = label_smoothing / v as f64;
                    if j == t as usize {
                        q += 1.0 - label_smoothing;
                    }
                    gx[r * v + j] = scale * (probs[r * v + j] - q);
                }
            }
            parent.accumulate_grad(&gx);
        },
    ))
}

/// Row gather from an embedding table [V, d]; the output shape is
/// `prefix_shape + [d]`. Backward scatter-adds into the table.
pub fn embedding_lookup(table: &Tensor, ids: &[u32], prefix_shape: &[usize]) -> Result<Tensor> {
    let ts = table.shape();
    if ts.len() != 2 || numel_of(prefix_shape) != ids.len() {
        return Err(TensorError::ShapeMismatch {
            op: "embedding_lookup",
            lhs: ts.to_vec(),
            rhs: prefix_shape.to_vec(),
        });
    }
    let (v, d) = (ts[0], ts[1]);
    for &id in ids {
        if id as usize >= v {
            return Err(TensorError::IndexOutOfRange {
                index: id as usize,
                bound: v,
            });
        }
    }
    let tv = table.value();
    let mut out = vec![0.0; ids.len() * d];
    for (i, &id) in ids.iter().enumerate() {
        out[i * d..(i + 1) * d].copy_from_slice(&tv[id as usize * d..(id as usize + 1) * d]);
    }
    let mut out_shape = prefix_shape.to_vec();
    out_shape.push(d);
    let ids = ids.to_vec();
    let parent = table.clone();
    Ok(Tensor::from_op(
        out_shape,
        out,
        vec![table.clone()],
        move |g| {
            let mut gt = vec![0.0; v * d];
            for (i, &id) in ids.iter().enumerate() {
                for j in 0..d {
                    gt[id as usize * d + j] += g[i * d + j];
                }
            }
            parent.accumulate_grad(&gt);
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec())
    }

    #[test]
    fn matmul_identity() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(a.matmul(&eye).unwrap().value(), a.value());
    }

    #[test]
    fn matmul_hand() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[5.0, 6.0]);
        assert_eq!(a.matmul(&b).unwrap().value(), vec![17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        assert!(matches!(
            a.matmul(&b),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn matmul_grad_column_sums() {
        // d sum(a.b) / d a = row-broadcast of the column sums of b
        let a = t(&[2, 3], &[0.5, -1.0, 2.0, 0.0, 1.5, -0.5]).requires_grad();
        let b = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let loss = a.matmul(&b).unwrap().sum();
        loss.backward().unwrap();
        let g = a.grad().unwrap();
        assert_eq!(g, vec![3.0, 7.0, 11.0, 3.0, 7.0, 11.0]);
    }

    #[test]
    fn softmax_symmetry_and_shift() {
        let x = t(&[2], &[0.0, 0.0]);
        let y = x.softmax(0).unwrap().value();
        assert!((y[0] - 0.5).abs() < 1e-12 && (y[1] - 0.5).abs() < 1e-12);
        let big = t(&[2], &[1000.0, 1000.0]);
        let y = big.softmax(0).unwrap().value();
        assert!((y[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = t(&[3, 4], &[0.3, -2.0, 1.7, 0.0, 5.0, 5.0, -5.0, 0.1, 9.0, 8.0, 7.0, 6.0]);
        let y = x.softmax(1).unwrap();
        let v = y.value();
        for r in 0..3 {
            let s: f64 = v[r * 4..(r + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(v[r * 4..(r + 1) * 4].iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn layer_norm_constant_row() {
        let x = t(&[1, 4], &[3.0, 3.0, 3.0, 3.0]);
        let gain = Tensor::full(&[4], 1.0);
        let bias = Tensor::zeros(&[4]);
        let y = layer_norm(&x, &gain, &bias, 1e-5).unwrap();
        assert!(y.value().iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn layer_norm_standardizes() {
        let x = t(&[2, 8], &[1.0, -2.0, 0.5, 3.0, -1.5, 2.2, 0.0, -0.7, 4.0, 4.1, 3.9, 4.2, 3.8, 4.05, 3.95, 4.0]);
        let gain = Tensor::full(&[8], 1.0);
        let bias = Tensor::zeros(&[8]);
        let y = layer_norm(&x, &gain, &bias, 1e-5).unwrap().value();
        for r in 0..2 {
            let row = &y[r * 8..(r + 1) * 8];
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn cross_entropy_uniform_is_log_vocab() {
        let v = 32_000;
        let logits = Tensor::zeros(&[1, v]);
        let loss = cross_entropy(&logits, &[5], 0.0, u32::MAX).unwrap();
        assert!((loss.item() - (v as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_confident_goes_to_zero() {
        let mut data = vec![0.0; 10];
        data[3] = 50.0;
        let logits = t(&[1, 10], &data);
        let loss = cross_entropy(&logits, &[3], 0.0, u32::MAX).unwrap();
        assert!(loss.item() < 1e-9);
    }

    #[test]
    fn cross_entropy_all_ignored() {
        let logits = Tensor::zeros(&[2, 4]);
        assert!(matches!(
            cross_entropy(&logits, &[9, 9], 0.0, 9),
            Err(TensorError::AllRowsIgnored)
        ));
    }

    #[test]
    fn dropout_inference_identity() {
        let x = t(&[4], &[1.0, -2.0, 3.0, 0.25]);
        let y = x.dropout(0.5, false, 1);
        assert_eq!(x.value(), y.value());
        let z = x.dropout(0.0, true, 1);
        assert_eq!(x.value(), z.value());
    }

    #[test]
    fn dropout_preserves_mean() {
        let n = 1_000_000;
        let x = Tensor::full(&[n], 1.0);
        let y = x.dropout(0.1, true, 1234);
        let mean: f64 = y.value().iter().sum::<f64>() / n as f64;
        assert!((0.995..=1.005).contains(&mean), "mean {mean}");
    }

    #[test]
    fn backward_square() {
        let x = Tensor::scalar(3.0).requires_grad();
        let loss = x.mul(&x).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn backward_accumulates_over_uses() {
        let x = t(&[3], &[1.0, 2.0, 3.0]).requires_grad();
        let loss = x.sum().add(&x.sum()).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let x = t(&[2], &[1.0, 2.0]).requires_grad();
        let y = x.scale(2.0);
        assert!(matches!(y.backward(), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn backward_does_not_mutate_forward() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).requires_grad();
        let w = t(&[2, 2], &[0.5, -0.5, 1.0, 2.0]).requires_grad();
        let y = x.matmul(&w).unwrap();
        let before = y.value();
        y.sum().backward().unwrap();
        assert_eq!(y.value(), before);
        let y2 = x.matmul(&w).unwrap();
        assert_eq!(y2.value(), before);
    }

    #[test]
    fn permute_round_trip() {
        let x = t(&[2, 3, 4], &(0..24).map(|i| i as f64).collect::<Vec<_>>());
        let y = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        let z = y.permute(&[1, 2, 0]).unwrap();
        assert_eq!(z.value(), x.value());
    }

    #[test]
    fn embedding_lookup_and_grad() {
        let table = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).requires_grad();
        let out = embedding_lookup(&table, &[2, 0, 2], &[3]).unwrap();
        assert_eq!(out.value(), vec![5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        out.sum().backward().unwrap();
        assert_eq!(table.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }
}
