//! Tape-style reverse-mode automatic differentiation.
//!
//! A [`Var`] is a handle to a node in an implicit computation DAG. Forward
//! values are cached at op time; `backward()` on a scalar root walks the
//! graph once in reverse topological order and accumulates gradients into
//! each node. First-order derivatives only.
//!
//! A graph is confined to one thread (`Rc`/`RefCell`); independent graphs
//! may run concurrently, sharing read-only `Tensor` buffers.

use crate::error::{TensorError, TensorResult};
use crate::tensor::{self, reduce_to_shape, Tensor};
use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Backward context: upstream gradient, this node's cached value, parents.
pub struct BackCtx<'a> {
    pub grad: &'a Tensor,
    pub value: &'a Tensor,
    pub parents: &'a [Var],
}

type BackFn = Box<dyn Fn(&BackCtx) -> TensorResult<Vec<Tensor>>>;

struct VarNode {
    id: u64,
    op: &'static str,
    value: Tensor,
    grad: RefCell<Option<Tensor>>,
    parents: Vec<Var>,
    backward: Option<BackFn>,
}

/// Handle to a node in the computation graph.
#[derive(Clone)]
pub struct Var {
    node: Rc<VarNode>,
}

impl Var {
    fn make(op: &'static str, value: Tensor, parents: Vec<Var>, backward: Option<BackFn>) -> Var {
        Var {
            node: Rc::new(VarNode {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                op,
                value,
                grad: RefCell::new(None),
                parents,
                backward,
            }),
        }
    }

    /// A leaf node wrapping an existing tensor (cheap: buffer is shared).
    pub fn leaf(value: Tensor) -> Var {
        Var::make("leaf", value, vec![], None)
    }

    pub fn value(&self) -> &Tensor {
        &self.node.value
    }

    pub fn op(&self) -> &'static str {
        self.node.op
    }

    /// Accumulated gradient, if `backward` has reached this node.
    pub fn grad(&self) -> Option<Tensor> {
        self.node.grad.borrow().clone()
    }

    pub fn shape(&self) -> &[usize] {
        self.node.value.shape()
    }

    fn accumulate(&self, g: Tensor) -> TensorResult<()> {
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.add_assign(&g)?,
            None => *slot = Some(g),
        }
        Ok(())
    }

    /// Reverse pass from a scalar root. Seeds the root gradient with 1 and
    /// accumulates into every reachable node exactly once per call.
    pub fn backward(&self) -> TensorResult<()> {
        if self.node.value.len() != 1 {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: self.shape().to_vec(),
            });
        }
        // Iterative postorder DFS: parents are appended before dependents,
        // so the reversed list is a valid reverse-topological visit order.
        let mut order: Vec<Var> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Var, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.node.id);
        while let Some((v, pi)) = stack.pop() {
            if pi < v.node.parents.len() {
                let parent = v.node.parents[pi].clone();
                stack.push((v, pi + 1));
                if visited.insert(parent.node.id) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(v);
            }
        }
        self.accumulate(Tensor::full(self.shape(), 1.0))?;
        for v in order.iter().rev() {
            let Some(back) = v.node.backward.as_ref() else {
                continue;
            };
            let grad = v.node.grad.borrow().clone();
            let Some(grad) = grad else { continue };
            let ctx = BackCtx {
                grad: &grad,
                value: &v.node.value,
                parents: &v.node.parents,
            };
            let parent_grads = back(&ctx)?;
            debug_assert_eq!(parent_grads.len(), v.node.parents.len());
            for (p, g) in v.node.parents.iter().zip(parent_grads) {
                p.accumulate(g)?;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

impl Var {
    pub fn add(&self, other: &Var) -> TensorResult<Var> {
        let value = self.value().add(other.value())?;
        Ok(Var::make(
            "add",
            value,
            vec![self.clone(), other.clone()],
            Some(Box::new(|ctx| {
                Ok(vec![
                    reduce_to_shape(ctx.grad, ctx.parents[0].shape()),
                    reduce_to_shape(ctx.grad, ctx.parents[1].shape()),
                ])
            })),
        ))
    }

    pub fn sub(&self, other: &Var) -> TensorResult<Var> {
        let value = self.value().sub(other.value())?;
        Ok(Var::make(
            "sub",
            value,
            vec![self.clone(), other.clone()],
            Some(Box::new(|ctx| {
                Ok(vec![
                    reduce_to_shape(ctx.grad, ctx.parents[0].shape()),
                    reduce_to_shape(&ctx.grad.scale(-1.0), ctx.parents[1].shape()),
                ])
            })),
        ))
    }

    pub fn mul(&self, other: &Var) -> TensorResult<Var> {
        let value = self.value().mul(other.value())?;
        Ok(Var::make(
            "mul",
            value,
            vec![self.clone(), other.clone()],
            Some(Box::new(|ctx| {
                let ga = ctx.grad.mul(ctx.parents[1].value())?;
                let gb = ctx.grad.mul(ctx.parents[0].value())?;
                Ok(vec![
                    reduce_to_shape(&ga, ctx.parents[0].shape()),
                    reduce_to_shape(&gb, ctx.parents[1].shape()),
                ])
            })),
        ))
    }

    pub fn neg(&self) -> TensorResult<Var> {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> TensorResult<Var> {
        let value = self.value().scale(c);
        Ok(Var::make(
            "scale",
            value,
            vec![self.clone()],
            Some(Box::new(move |ctx| Ok(vec![ctx.grad.scale(c)]))),
        ))
    }

    pub fn add_scalar(&self, c: f64) -> TensorResult<Var> {
        let value = self.value().map(|v| v + c);
        Ok(Var::make(
            "add_scalar",
            value,
            vec![self.clone()],
            Some(Box::new(|ctx| Ok(vec![ctx.grad.clone()]))),
        ))
    }

    pub fn matmul(&self, other: &Var) -> TensorResult<Var> {
        let value = tensor::matmul(self.value(), other.value())?;
        Ok(Var::make(
            "matmul",
            value,
            vec![self.clone(), other.clone()],
            Some(Box::new(|ctx| {
                let a = ctx.parents[0].value();
                let b = ctx.parents[1].value();
                let da = tensor::matmul(ctx.grad, &tensor::transpose2d(b)?)?;
                let db = tensor::matmul(&tensor::transpose2d(a)?, ctx.grad)?;
                Ok(vec![da, db])
            })),
        ))
    }

    pub fn transpose(&self) -> TensorResult<Var> {
        let value = tensor::transpose2d(self.value())?;
        Ok(Var::make(
            "transpose",
            value,
            vec![self.clone()],
            Some(Box::new(|ctx| Ok(vec![tensor::transpose2d(ctx.grad)?]))),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> TensorResult<Var> {
        let value = tensor::reshape(self.value(), shape.to_vec())?;
        Ok(Var::make(
            "reshape",
            value,
            vec![self.clone()],
            Some(Box::new(|ctx| {
                Ok(vec![tensor::reshape(
                    ctx.grad,
                    ctx.parents[0].shape().to_vec(),
                )?])
            })),
        ))
    }

    pub fn permute(&self, perm: &[usize]) -> TensorResult<Var> {
        let value = tensor::permute(self.value(), perm)?;
        let inv = tensor::invert_perm(perm);
        Ok(Var::make(
            "permute",
            value,
            vec![self.clone()],
            Some(Box::new(move |ctx| Ok(vec![tensor::permute(ctx.grad, &inv)?]))),
        ))
    }

    pub fn concat(parts: &[&Var], axis: usize) -> TensorResult<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|p| p.value()).collect();
        let value = tensor::concat(&values, axis)?;
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Ok(Var::make(
            "concat",
            value,
            parts.iter().map(|p| (*p).clone()).collect(),
            Some(Box::new(move |ctx| tensor::split(ctx.grad, axis, &sizes))),
        ))
    }

    /// Split along `axis` into chunks of the given sizes. Each chunk is its
    /// own graph node; gradients scatter back into the right slice.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> TensorResult<Vec<Var>> {
        let values = tensor::split(self.value(), axis, sizes)?;
        let mut offset = 0usize;
        let mut out = Vec::with_capacity(values.len());
        for value in values {
            let sz = value.shape()[axis];
            let start = offset;
            out.push(Var::make(
                "split",
                value,
                vec![self.clone()],
                Some(Box::new(move |ctx| {
                    let parent_shape = ctx.parents[0].shape();
                    let outer: usize = parent_shape[..axis].iter().product();
                    let inner: usize = parent_shape[axis + 1..].iter().product();
                    let full = parent_shape[axis] * inner;
                    let mut g = Tensor::zeros(parent_shape);
                    let dst = g.data_mut();
                    let src = ctx.grad.data();
                    for o in 0..outer {
                        let d0 = o * full + start * inner;
                        let s0 = o * sz * inner;
                        dst[d0..d0 + sz * inner].copy_from_slice(&src[s0..s0 + sz * inner]);
                    }
                    Ok(vec![g])
                })),
            ));
            offset += sz;
        }
        Ok(out)
    }

    pub fn sum_all(&self) -> TensorResult<Var> {
        let value = Tensor::scalar_value(self.value().sum_value());
        Ok(Var::make(
            "sum",
            value,
            vec![self.clone()],
            Some(Box::new(|ctx| {
                let g0 = ctx.grad.scalar()?;
                Ok(vec![Tensor::full(ctx.parents[0].shape(), g0)])
            })),
        ))
    }

    pub fn mean_all(&self) -> TensorResult<Var> {
        let n = self.value().len() as f64;
        let value = Tensor::scalar_value(self.value().mean_value());
        Ok(Var::make(
            "mean",
            value,
            vec![self.clone()],
            Some(Box::new(move |ctx| {
                let g0 = ctx.grad.scalar()? / n;
                Ok(vec![Tensor::full(ctx.parents[0].shape(), g0)])
            })),
        ))
    }

    /// Sum over one axis (the axis is removed from the shape).
    pub fn sum_axis(&self, axis: usize) -> TensorResult<Var> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "sum_axis",
                axis,
                rank: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let mid = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape: Vec<usize> = shape.to_vec();
        out_shape.remove(axis);
        let mut data = vec![0.0f64; outer * inner];
        let src = self.value().data();
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                let drow = &mut data[o * inner..(o + 1) * inner];
                for (d, s) in drow.iter_mut().zip(&src[base..base + inner]) {
                    *d += s;
                }
            }
        }
        Ok(Var::make(
            "sum_axis",
            Tensor::from_parts(out_shape, data),
            vec![self.clone()],
            Some(Box::new(move |ctx| {
                let parent_shape = ctx.parents[0].shape();
                let mut g = Tensor::zeros(parent_shape);
                let dst = g.data_mut();
                let src = ctx.grad.data();
                for o in 0..outer {
                    for m in 0..mid {
                        let base = (o * mid + m) * inner;
                        dst[base..base + inner].copy_from_slice(&src[o * inner..(o + 1) * inner]);
                    }
                }
                Ok(vec![g])
            })),
        ))
    }

    pub fn mean_axis(&self, axis: usize) -> TensorResult<Var> {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis)?.scale(1.0 / n)
    }

    /// Zero-mean unit-variance over the last dim, eps inside the sqrt,
    /// no learned affine.
    pub fn layer_norm(&self, eps: f64) -> TensorResult<Var> {
        let value = tensor::layer_norm(self.value(), eps)?;
        Ok(Var::make(
            "layer_norm",
            value,
            vec![self.clone()],
            Some(Box::new(move |ctx| {
                let x = ctx.parents[0].value();
                let y = ctx.value;
                let d = *x.shape().last().unwrap();
                let df = d as f64;
                let mut out = Vec::with_capacity(x.len());
                let g = ctx.grad.data();
                for r in 0..x.len() / d {
                    let xr = &x.data()[r * d..(r + 1) * d];
                    let yr = &y.data()[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mean = xr.iter().sum::<f64>() / df;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / df;
                    let inv = 1.0 / (var + eps).sqrt();
                    let g_mean = gr.iter().sum::<f64>() / df;
                    let gy_mean = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / df;
                    out.extend(
                        gr.iter()
                            .zip(yr)
                            .map(|(gi, yi)| inv * (gi - g_mean - yi * gy_mean)),
                    );
                }
                Ok(vec![Tensor::from_parts(x.shape().to_vec(), out)])
            })),
        ))
    }

    /// Row-wise softmax over the last dim (max-subtracted).
    pub fn softmax_lastdim(&self) -> TensorResult<Var> {
        let value = tensor::softmax_lastdim(self.value())?;
        Ok(Var::make(
            "softmax",
            value,
            vec![self.clone()],
            Some(Box::new(|ctx| {
                let y = ctx.value;
                let d = *y.shape().last().unwrap();
                let g = ctx.grad.data();
                let mut out = Vec::with_capacity(y.len());
                for r in 0..y.len() / d {
                    let yr = &y.data()[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let dot = yr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>();
                    out.extend(yr.iter().zip(gr).map(|(yi, gi)| yi * (gi - dot)));
                }
                Ok(vec![Tensor::from_parts(y.shape().to_vec(), out)])
            })),
        ))
    }

    /// Tanh-approximation GELU, elementwise.
    pub fn gelu(&self) -> TensorResult<Var> {
        let value = self.value().map(tensor::gelu_scalar);
        Ok(Var::make(
            "gelu",
            value,
            vec![self.clone()],
            Some(Box::new(|ctx| {
                let x = ctx.parents[0].value();
                let d = x.map(tensor::gelu_grad_scalar);
                Ok(vec![ctx.grad.mul(&d)?])
            })),
        ))
    }

    /// `x * sigmoid(x)`, elementwise.
    pub fn silu(&self) -> TensorResult<Var> {
        let value = self.value().map(tensor::silu_scalar);
        Ok(Var::make(
            "silu",
            value,
            vec![self.clone()],
            Some(Box::new(|ctx| {
                let x = ctx.parents[0].value();
                let d = x.map(tensor::silu_grad_scalar);
                Ok(vec![ctx.grad.mul(&d)?])
            })),
        ))
    }

    /// Elementwise absolute value. Nondifferentiable at 0; backward uses
    /// sign(x) with sign(0) = 0.
    pub fn abs(&self) -> TensorResult<Var> {
        let value = self.value().map(f64::abs);
        Ok(Var::make(
            "abs",
            value,
            vec![self.clone()],
            Some(Box::new(|ctx| {
                let x = ctx.parents[0].value();
                let d = x.map(|v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                Ok(vec![ctx.grad.mul(&d)?])
            })),
        ))
    }

    /// Mean of squared entries of `self - other`: the workhorse for losses.
    pub fn mse(&self, other: &Var) -> TensorResult<Var> {
        let d = self.sub(other)?;
        d.mul(&d)?.mean_all()
    }
}
