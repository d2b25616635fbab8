//! Differentiable primitives. Every vector-Jacobian product below is written
//! in terms of these same primitives, which is what makes double-backward work.

use std::sync::Arc;

use crate::error::{Error, Result};

use super::kernels::{self, ConvGeom, PoolGeom};
use super::tensor::{numel, Op, Tensor};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    fn unary(&self, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let data = self.values().iter().map(|&v| f(v)).collect();
        Tensor::from_op(op, vec![self.clone()], data, self.shape().to_vec(), name)
    }

    fn binary(
        &self,
        other: &Tensor,
        op: Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        same_shape(name, self, other)?;
        let data = self
            .values()
            .iter()
            .zip(other.values())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::from_op(
            op,
            vec![self.clone(), other.clone()],
            data,
            self.shape().to_vec(),
            name,
        )
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Add, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Sub, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Mul, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Div, "div", |a, b| a / b)
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.unary(Op::Neg, "neg", |v| -v)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        self.unary(Op::Scale(c), "scale", |v| v * c)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        self.unary(Op::AddScalar, "add_scalar", |v| v + c)
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary(Op::Exp, "exp", f64::exp)
    }

    pub fn ln(&self) -> Result<Tensor> {
        self.unary(Op::Ln, "ln", f64::ln)
    }

    pub fn tanh(&self) -> Result<Tensor> {
        self.unary(Op::Tanh, "tanh", f64::tanh)
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.unary(Op::Sigmoid, "sigmoid", sigmoid)
    }

    /// ReLU with subgradient 0 at 0.
    pub fn relu(&self) -> Result<Tensor> {
        self.unary(Op::Relu, "relu", |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn square(&self) -> Result<Tensor> {
        self.mul(self)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape()),
            ));
        }
        Tensor::from_op(
            Op::Reshape,
            vec![self.clone()],
            self.to_vec(),
            shape.to_vec(),
            "reshape",
        )
    }

    /// 2-D product `op(self) · op(other)`, where `op` optionally transposes.
    pub fn matmul_t(&self, other: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let (a0, a1) = (self.shape()[0], self.shape()[1]);
        let (b0, b1) = (other.shape()[0], other.shape()[1]);
        let (m, k) = if ta { (a1, a0) } else { (a0, a1) };
        let (kb, n) = if tb { (b1, b0) } else { (b0, b1) };
        if k != kb {
            return Err(Error::shape(
                "matmul",
                format!(
                    "inner dims differ: {:?}{} x {:?}{}",
                    self.shape(),
                    if ta { "ᵀ" } else { "" },
                    other.shape(),
                    if tb { "ᵀ" } else { "" }
                ),
            ));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.values(),
            ta,
            other.values(),
            tb,
            0.0,
            &mut out,
        );
        Tensor::from_op(
            Op::MatMul { ta, tb },
            vec![self.clone(), other.clone()],
            out,
            vec![m, n],
            "matmul",
        )
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.matmul_t(other, false, false)
    }

    /// Views `self` (length `c`) as the middle axis of an `[a, c, b]` block and
    /// repeats it along the outer axes. The result takes `out_shape`.
    pub fn broadcast_mid(&self, a: usize, b: usize, out_shape: &[usize]) -> Result<Tensor> {
        let c = self.numel();
        if numel(out_shape) != a * c * b {
            return Err(Error::shape(
                "broadcast_mid",
                format!("{a}x{c}x{b} into {out_shape:?}"),
            ));
        }
        let src = self.values();
        let mut out = Vec::with_capacity(a * c * b);
        for _ in 0..a {
            for &v in src {
                out.extend(std::iter::repeat_n(v, b));
            }
        }
        Tensor::from_op(
            Op::BroadcastMid { a, b },
            vec![self.clone()],
            out,
            out_shape.to_vec(),
            "broadcast_mid",
        )
    }

    /// Sums an `[a, c, b]` view of `self` over its outer axes, giving `c` values
    /// shaped `out_shape`. Summation runs in row-major order.
    pub fn sum_mid(&self, a: usize, c: usize, b: usize, out_shape: &[usize]) -> Result<Tensor> {
        if self.numel() != a * c * b || numel(out_shape) != c {
            return Err(Error::shape(
                "sum_mid",
                format!("{:?} as {a}x{c}x{b} into {out_shape:?}", self.shape()),
            ));
        }
        let src = self.values();
        let mut out = vec![0.0; c];
        for i in 0..a {
            for (j, o) in out.iter_mut().enumerate() {
                let base = (i * c + j) * b;
                for v in &src[base..base + b] {
                    *o += v;
                }
            }
        }
        Tensor::from_op(
            Op::SumMid { a, b },
            vec![self.clone()],
            out,
            out_shape.to_vec(),
            "sum_mid",
        )
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&self) -> Result<Tensor> {
        self.sum_mid(1, 1, self.numel(), &[])
    }

    pub fn mean(&self) -> Result<Tensor> {
        self.sum()?.scale(1.0 / self.numel() as f64)
    }

    /// `out[i] = self.flat[index[i]]`, shaped `out_shape`.
    pub fn gather(&self, index: Arc<Vec<usize>>, out_shape: &[usize]) -> Result<Tensor> {
        if numel(out_shape) != index.len() {
            return Err(Error::shape(
                "gather",
                format!("{} indices into {out_shape:?}", index.len()),
            ));
        }
        let src = self.values();
        let mut out = Vec::with_capacity(index.len());
        for &i in index.iter() {
            out.push(*src.get(i).ok_or_else(|| {
                Error::shape("gather", format!("index {i} out of {}", src.len()))
            })?);
        }
        Tensor::from_op(
            Op::Gather { index },
            vec![self.clone()],
            out,
            out_shape.to_vec(),
            "gather",
        )
    }

    /// `out.flat[index[i]] += self.flat[i]` into a zero tensor of `out_shape`.
    pub fn scatter_add(&self, index: Arc<Vec<usize>>, out_shape: &[usize]) -> Result<Tensor> {
        if self.numel() != index.len() {
            return Err(Error::shape(
                "scatter_add",
                format!("{} values, {} indices", self.numel(), index.len()),
            ));
        }
        let len = numel(out_shape);
        let mut out = vec![0.0; len];
        for (&i, &v) in index.iter().zip(self.values()) {
            if i >= len {
                return Err(Error::shape(
                    "scatter_add",
                    format!("index {i} out of {len}"),
                ));
            }
            out[i] += v;
        }
        Tensor::from_op(
            Op::ScatterAdd { index },
            vec![self.clone()],
            out,
            out_shape.to_vec(),
            "scatter_add",
        )
    }

    pub(crate) fn conv_raw(&self, weight: &Tensor, geom: ConvGeom) -> Result<Tensor> {
        if self.shape() != geom.input_shape() || weight.shape() != geom.weight_shape() {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input {:?} weight {:?} for {geom:?}",
                    self.shape(),
                    weight.shape()
                ),
            ));
        }
        let out = kernels::conv_forward(self.values(), weight.values(), &geom);
        Tensor::from_op(
            Op::Conv { geom },
            vec![self.clone(), weight.clone()],
            out,
            geom.output_shape(),
            "conv2d",
        )
    }

    pub(crate) fn conv_transpose_raw(&self, weight: &Tensor, geom: ConvGeom) -> Result<Tensor> {
        if self.shape() != geom.output_shape() || weight.shape() != geom.weight_shape() {
            return Err(Error::shape(
                "conv_transpose2d",
                format!(
                    "input {:?} weight {:?} for {geom:?}",
                    self.shape(),
                    weight.shape()
                ),
            ));
        }
        let out = kernels::conv_transpose(self.values(), weight.values(), &geom);
        Tensor::from_op(
            Op::ConvTranspose { geom },
            vec![self.clone(), weight.clone()],
            out,
            geom.input_shape(),
            "conv_transpose2d",
        )
    }

    /// `self` is the convolution input, `grad` has the convolution's output shape.
    pub(crate) fn conv_weight_grad_raw(&self, grad: &Tensor, geom: ConvGeom) -> Result<Tensor> {
        if self.shape() != geom.input_shape() || grad.shape() != geom.output_shape() {
            return Err(Error::shape("conv_weight_grad", format!("{geom:?}")));
        }
        let out = kernels::conv_weight_grad(self.values(), grad.values(), &geom);
        Tensor::from_op(
            Op::ConvWeightGrad { geom },
            vec![self.clone(), grad.clone()],
            out,
            geom.weight_shape(),
            "conv_weight_grad",
        )
    }

    pub(crate) fn avg_pool_raw(&self, geom: PoolGeom) -> Result<Tensor> {
        if self.shape() != geom.input_shape() {
            return Err(Error::shape(
                "avg_pool",
                format!("{:?} for {geom:?}", self.shape()),
            ));
        }
        let out = kernels::avg_pool(self.values(), &geom);
        Tensor::from_op(
            Op::AvgPool { geom },
            vec![self.clone()],
            out,
            geom.output_shape(),
            "avg_pool",
        )
    }

    pub(crate) fn avg_unpool_raw(&self, geom: PoolGeom) -> Result<Tensor> {
        if self.shape() != geom.output_shape() {
            return Err(Error::shape(
                "avg_unpool",
                format!("{:?} for {geom:?}", self.shape()),
            ));
        }
        let out = kernels::avg_unpool(self.values(), &geom);
        Tensor::from_op(
            Op::AvgUnpool { geom },
            vec![self.clone()],
            out,
            geom.input_shape(),
            "avg_unpool",
        )
    }
}

/// Gradient contributions of one recorded op, one per input (None when the
/// input does not need one). `output` is never referenced from the node
/// itself; values that depend on it are recomputed from the inputs.
pub(crate) fn vjp(
    op: &Op,
    inputs: &[Tensor],
    needs: &[bool],
    grad: &Tensor,
) -> Result<Vec<Option<Tensor>>> {
    let x = &inputs[0];
    let wants = |i: usize| needs[i];
    let one = |t: Result<Tensor>| -> Result<Vec<Option<Tensor>>> { Ok(vec![Some(t?)]) };
    match op {
        Op::Add => Ok(vec![Some(grad.clone()), Some(grad.clone())]),
        Op::Sub => Ok(vec![
            Some(grad.clone()),
            wants(1).then(|| grad.neg()).transpose()?,
        ]),
        Op::Mul => {
            let y = &inputs[1];
            Ok(vec![
                wants(0).then(|| grad.mul(y)).transpose()?,
                wants(1).then(|| grad.mul(x)).transpose()?,
            ])
        }
        Op::Div => {
            let y = &inputs[1];
            let gx = wants(0).then(|| grad.div(y)).transpose()?;
            let gy = if wants(1) {
                // d(x/y)/dy = -x / y²
                Some(grad.mul(x)?.div(&y.square()?)?.neg()?)
            } else {
                None
            };
            Ok(vec![gx, gy])
        }
        Op::Neg => one(grad.neg()),
        Op::Scale(c) => one(grad.scale(*c)),
        Op::AddScalar | Op::Reshape => one(grad.reshape(x.shape())),
        Op::Exp => one(grad.mul(&x.exp()?)),
        Op::Ln => one(grad.div(x)),
        Op::Tanh => {
            let t = x.tanh()?;
            one(grad.mul(&t.square()?.neg()?.add_scalar(1.0)?))
        }
        Op::Sigmoid => {
            let s = x.sigmoid()?;
            one(grad.mul(&s.mul(&s.neg()?.add_scalar(1.0)?)?))
        }
        Op::Relu => {
            let mask: Vec<f64> = x
                .values()
                .iter()
                .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
                .collect();
            one(grad.mul(&Tensor::new(mask, x.shape())?))
        }
        Op::MatMul { ta, tb } => {
            let (a, b) = (x, &inputs[1]);
            let ga = if wants(0) {
                Some(match (ta, tb) {
                    (false, false) => grad.matmul_t(b, false, true)?,
                    (true, false) => b.matmul_t(grad, false, true)?,
                    (false, true) => grad.matmul_t(b, false, false)?,
                    (true, true) => b.matmul_t(grad, true, true)?,
                })
            } else {
                None
            };
            let gb = if wants(1) {
                Some(match (ta, tb) {
                    (false, false) => a.matmul_t(grad, true, false)?,
                    (true, false) => a.matmul_t(grad, false, false)?,
                    (false, true) => grad.matmul_t(a, true, false)?,
                    (true, true) => grad.matmul_t(a, true, true)?,
                })
            } else {
                None
            };
            Ok(vec![ga, gb])
        }
        Op::BroadcastMid { a, b } => one(grad.sum_mid(*a, x.numel(), *b, x.shape())),
        Op::SumMid { a, b, .. } => one(grad.broadcast_mid(*a, *b, x.shape())),
        Op::Gather { index } => one(grad.scatter_add(Arc::clone(index), x.shape())),
        Op::ScatterAdd { index } => one(grad.gather(Arc::clone(index), x.shape())),
        Op::Conv { geom } => {
            let w = &inputs[1];
            Ok(vec![
                wants(0)
                    .then(|| grad.conv_transpose_raw(w, *geom))
                    .transpose()?,
                wants(1)
                    .then(|| x.conv_weight_grad_raw(grad, *geom))
                    .transpose()?,
            ])
        }
        Op::ConvTranspose { geom } => {
            // x here is the transposed conv's input (conv output shaped).
            let w = &inputs[1];
            Ok(vec![
                wants(0).then(|| grad.conv_raw(w, *geom)).transpose()?,
                wants(1)
                    .then(|| grad.conv_weight_grad_raw(x, *geom))
                    .transpose()?,
            ])
        }
        Op::ConvWeightGrad { geom } => {
            // inputs: conv input `x`, conv output-gradient `g`; grad is weight shaped.
            let g = &inputs[1];
            Ok(vec![
                wants(0)
                    .then(|| g.conv_transpose_raw(grad, *geom))
                    .transpose()?,
                wants(1).then(|| x.conv_raw(grad, *geom)).transpose()?,
            ])
        }
        Op::AvgPool { geom } => one(grad.avg_unpool_raw(*geom)),
        Op::AvgUnpool { geom } => one(grad.avg_pool_raw(*geom)),
    }
}
