//! Dense row-major f64 tensors.
//!
//! Storage is `Arc`-backed so clones are cheap; mutation goes through
//! `Arc::make_mut` and copies only when the buffer is shared. All forward
//! kernels used by the autograd layer live here as plain functions on
//! `Tensor`, so the same code path serves graph ops, oracles and tests.

use crate::error::{TensorError, TensorResult};
use std::sync::Arc;

/// Dense real tensor, row-major, double precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Build a tensor from a shape and row-major data. Rejects length
    /// mismatches and non-finite entries.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> TensorResult<Self> {
        if numel(&shape) != data.len() {
            return Err(TensorError::InvalidShape {
                op: "new",
                shape,
                reason: format!("data length {} != product of dims", data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "new" });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    /// Like [`Tensor::new`] without the finiteness scan. For internal
    /// kernels whose inputs are already validated.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_parts(shape.to_vec(), vec![0.0; numel(shape)])
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::from_parts(shape.to_vec(), vec![v; numel(shape)])
    }

    pub fn scalar_value(v: f64) -> Self {
        Self::from_parts(vec![], vec![v])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = numel(shape);
        Self::from_parts(shape.to_vec(), (0..n).map(|i| f(i)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view of the buffer; copies first if the buffer is shared.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// The single element of a scalar (rank-0 or one-element) tensor.
    pub fn scalar(&self) -> TensorResult<f64> {
        if self.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(TensorError::NotScalar {
                op: "scalar",
                shape: self.shape.clone(),
            })
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn sum_value(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean_value(&self) -> f64 {
        self.sum_value() / self.len() as f64
    }

    /// Squared Frobenius / L2 norm of all entries.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// In-place `self += other` (shapes must match exactly).
    pub fn add_assign(&mut self, other: &Tensor) -> TensorResult<()> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add_assign",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let dst = self.data_mut();
        for (d, s) in dst.iter_mut().zip(other.data.iter()) {
            *d += s;
        }
        Ok(())
    }

    /// In-place `self += c * other`.
    pub fn add_scaled_assign(&mut self, other: &Tensor, c: f64) -> TensorResult<()> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add_scaled_assign",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let dst = self.data_mut();
        for (d, s) in dst.iter_mut().zip(other.data.iter()) {
            *d += c * s;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Broadcasting
// ---------------------------------------------------------------------------

/// Result shape of broadcasting `a` against `b` (numpy rules: align trailing
/// dims, a dim must match or be 1).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db {
            out[i] = da;
        } else if da == 1 {
            out[i] = db;
        } else if db == 1 {
            out[i] = da;
        } else {
            return None;
        }
    }
    Some(out)
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

/// Strides of `shape` embedded in `out_shape` with stride 0 on broadcast dims.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let own = strides_for(shape);
    let off = out_shape.len() - shape.len();
    let mut s = vec![0usize; out_shape.len()];
    for i in 0..shape.len() {
        s[off + i] = if shape[i] == 1 { 0 } else { own[i] };
    }
    s
}

pub(crate) fn binary_broadcast(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> TensorResult<Tensor> {
    if a.shape == b.shape {
        let data = a
            .data
            .iter()
            .zip(b.data.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Ok(Tensor::from_parts(a.shape.clone(), data));
    }
    // Fast path for the row-modulation pattern [.., d] op [d].
    if b.rank() == 1 && a.rank() >= 1 && a.shape[a.rank() - 1] == b.shape[0] {
        let d = b.shape[0];
        let mut data = Vec::with_capacity(a.len());
        for row in a.data.chunks_exact(d) {
            for (x, y) in row.iter().zip(b.data.iter()) {
                data.push(f(*x, *y));
            }
        }
        return Ok(Tensor::from_parts(a.shape.clone(), data));
    }
    let out_shape = broadcast_shape(&a.shape, &b.shape).ok_or(TensorError::ShapeMismatch {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    })?;
    let sa = broadcast_strides(&a.shape, &out_shape);
    let sb = broadcast_strides(&b.shape, &out_shape);
    let n = numel(&out_shape);
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let (mut ia, mut ib) = (0usize, 0usize);
    for _ in 0..n {
        data.push(f(a.data[ia], b.data[ib]));
        // odometer increment
        for k in (0..out_shape.len()).rev() {
            idx[k] += 1;
            ia += sa[k];
            ib += sb[k];
            if idx[k] < out_shape[k] {
                break;
            }
            idx[k] = 0;
            ia -= sa[k] * out_shape[k];
            ib -= sb[k] * out_shape[k];
        }
    }
    Ok(Tensor::from_parts(out_shape, data))
}

/// Sum-reduce `grad` (shaped like the broadcast output) back to `shape`.
/// Inverse of broadcasting for backward passes.
pub(crate) fn reduce_to_shape(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let out_rank = grad.rank();
    let off = out_rank - shape.len();
    let mut acc = Tensor::zeros(shape);
    let sg = strides_for(grad.shape());
    let st = strides_for(shape);
    let dst = acc.data_mut();
    let mut idx = vec![0usize; out_rank];
    for ig in 0..grad.len() {
        // map full index -> target index (broadcast dims collapse to 0)
        let mut it = 0usize;
        for k in 0..shape.len() {
            let full = idx[off + k];
            let t = if shape[k] == 1 { 0 } else { full };
            it += t * st[k];
        }
        dst[it] += grad.data[ig];
        for k in (0..out_rank).rev() {
            idx[k] += 1;
            if idx[k] < grad.shape[k] {
                break;
            }
            idx[k] = 0;
        }
        let _ = sg;
    }
    acc
}

// ---------------------------------------------------------------------------
// Elementwise and scalar kernels
// ---------------------------------------------------------------------------

impl Tensor {
    pub fn add(&self, other: &Tensor) -> TensorResult<Tensor> {
        binary_broadcast("add", self, other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> TensorResult<Tensor> {
        binary_broadcast("sub", self, other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> TensorResult<Tensor> {
        binary_broadcast("mul", self, other, |a, b| a * b)
    }
}

// ---------------------------------------------------------------------------
// Matmul
// ---------------------------------------------------------------------------

/// `C[m,n] = A[m,k] * B[k,n]`, ikj loop order for cache-friendly access.
pub fn matmul(a: &Tensor, b: &Tensor) -> TensorResult<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    let mut out = vec![0.0f64; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// 2-D transpose.
pub fn transpose2d(a: &Tensor) -> TensorResult<Tensor> {
    if a.rank() != 2 {
        return Err(TensorError::InvalidShape {
            op: "transpose2d",
            shape: a.shape.clone(),
            reason: "rank must be 2".into(),
        });
    }
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

pub fn reshape(a: &Tensor, shape: Vec<usize>) -> TensorResult<Tensor> {
    if numel(&shape) != a.len() {
        return Err(TensorError::InvalidShape {
            op: "reshape",
            shape,
            reason: format!("element count != {}", a.len()),
        });
    }
    Ok(Tensor {
        shape,
        data: a.data.clone(),
    })
}

/// Permute axes: `out[idx] = in[idx[perm]]` in the usual sense that output
/// axis `i` is input axis `perm[i]`.
pub fn permute(a: &Tensor, perm: &[usize]) -> TensorResult<Tensor> {
    let rank = a.rank();
    let mut seen = vec![false; rank];
    let valid = perm.len() == rank
        && perm.iter().all(|&p| {
            if p >= rank || seen[p] {
                false
            } else {
                seen[p] = true;
                true
            }
        });
    if !valid {
        return Err(TensorError::InvalidShape {
            op: "permute",
            shape: a.shape.clone(),
            reason: format!("invalid permutation {perm:?}"),
        });
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| a.shape[p]).collect();
    let in_strides = strides_for(&a.shape);
    let perm_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = a.len();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        data.push(a.data[src]);
        for k in (0..rank).rev() {
            idx[k] += 1;
            src += perm_strides[k];
            if idx[k] < out_shape[k] {
                break;
            }
            idx[k] = 0;
            src -= perm_strides[k] * out_shape[k];
        }
    }
    Ok(Tensor::from_parts(out_shape, data))
}

/// Inverse of `perm`: permuting by `perm` then `invert_perm(perm)` is identity.
pub fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub fn concat(tensors: &[&Tensor], axis: usize) -> TensorResult<Tensor> {
    let first = tensors.first().ok_or(TensorError::InvalidShape {
        op: "concat",
        shape: vec![],
        reason: "empty input list".into(),
    })?;
    let rank = first.rank();
    if axis >= rank {
        return Err(TensorError::AxisOutOfRange {
            op: "concat",
            axis,
            rank,
        });
    }
    let mut axis_total = 0usize;
    for t in tensors {
        if t.rank() != rank
            || t.shape[..axis] != first.shape[..axis]
            || t.shape[axis + 1..] != first.shape[axis + 1..]
        {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: first.shape.clone(),
                rhs: t.shape.clone(),
            });
        }
        axis_total += t.shape[axis];
    }
    let mut out_shape = first.shape.clone();
    out_shape[axis] = axis_total;
    let outer: usize = first.shape[..axis].iter().product();
    let inner: usize = first.shape[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(numel(&out_shape));
    for o in 0..outer {
        for t in tensors {
            let block = t.shape[axis] * inner;
            data.extend_from_slice(&t.data[o * block..(o + 1) * block]);
        }
    }
    Ok(Tensor::from_parts(out_shape, data))
}

/// Split along `axis` into chunks of the given sizes (must sum to the dim).
pub fn split(a: &Tensor, axis: usize, sizes: &[usize]) -> TensorResult<Vec<Tensor>> {
    let rank = a.rank();
    if axis >= rank {
        return Err(TensorError::AxisOutOfRange {
            op: "split",
            axis,
            rank,
        });
    }
    if sizes.iter().sum::<usize>() != a.shape[axis] {
        return Err(TensorError::InvalidShape {
            op: "split",
            shape: a.shape.clone(),
            reason: format!("split sizes {sizes:?} do not sum to dim {}", a.shape[axis]),
        });
    }
    let outer: usize = a.shape[..axis].iter().product();
    let inner: usize = a.shape[axis + 1..].iter().product();
    let full = a.shape[axis] * inner;
    let mut outs = Vec::with_capacity(sizes.len());
    let mut offset = 0usize;
    for &sz in sizes {
        let mut shape = a.shape.clone();
        shape[axis] = sz;
        let mut data = Vec::with_capacity(outer * sz * inner);
        for o in 0..outer {
            let start = o * full + offset * inner;
            data.extend_from_slice(&a.data[start..start + sz * inner]);
        }
        outs.push(Tensor::from_parts(shape, data));
        offset += sz;
    }
    Ok(outs)
}

// ---------------------------------------------------------------------------
// Normalization / activations (forward kernels; backwards live in autograd)
// ---------------------------------------------------------------------------

/// Per-row zero-mean unit-variance over the last dim, no learned affine.
/// `eps` sits inside the square root.
pub fn layer_norm(x: &Tensor, eps: f64) -> TensorResult<Tensor> {
    let d = *x.shape.last().ok_or(TensorError::InvalidShape {
        op: "layer_norm",
        shape: x.shape.clone(),
        reason: "rank must be >= 1".into(),
    })?;
    let mut data = Vec::with_capacity(x.len());
    for row in x.data.chunks_exact(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        data.extend(row.iter().map(|v| (v - mean) * inv));
    }
    Ok(Tensor::from_parts(x.shape.clone(), data))
}

/// Row-wise softmax over the last dim with max subtraction.
pub fn softmax_lastdim(x: &Tensor) -> TensorResult<Tensor> {
    let d = *x.shape.last().ok_or(TensorError::InvalidShape {
        op: "softmax",
        shape: x.shape.clone(),
        reason: "rank must be >= 1".into(),
    })?;
    let mut data = Vec::with_capacity(x.len());
    for row in x.data.chunks_exact(d) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        data.extend(exps.iter().map(|e| e / sum));
    }
    Ok(Tensor::from_parts(x.shape.clone(), data))
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_A: f64 = 0.044715;

/// Tanh-approximation GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `x * sigmoid(x)`.
pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad_scalar(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}
