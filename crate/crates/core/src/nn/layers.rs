use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::{self, ConvGeom, PoolGeom};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Shape of a 2-D convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn square(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride,
            padding,
        }
    }

    /// `floor((in + 2·padding − kernel) / stride) + 1`, which must be at least 1.
    pub fn output_dim(&self, input: usize, kernel: usize) -> Result<usize> {
        if self.stride == 0 {
            return Err(Error::invalid("convolution stride must be positive"));
        }
        let padded = input + 2 * self.padding;
        if padded < kernel {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kernel} exceeds padded input {padded}"),
            ));
        }
        Ok((padded - kernel) / self.stride + 1)
    }

    /// Output spatial size `(h, w)` of a forward convolution.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            self.output_dim(h, self.kernel.0)?,
            self.output_dim(w, self.kernel.1)?,
        ))
    }

    /// Output spatial size of the transposed convolution:
    /// `(in − 1)·stride − 2·padding + kernel`.
    pub fn transposed_output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let dim = |input: usize, kernel: usize| -> Result<usize> {
            let full = (input - 1) * self.stride + kernel;
            if full <= 2 * self.padding {
                return Err(Error::shape(
                    "conv2d_transposed",
                    format!("output dim < 1 for input {input}"),
                ));
            }
            Ok(full - 2 * self.padding)
        };
        Ok((dim(h, self.kernel.0)?, dim(w, self.kernel.1)?))
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel.0,
            self.kernel.1,
        ]
    }

    /// Weight layout for [`conv2d_transposed`]: `[in, out, kh, kw]`.
    pub fn transposed_weight_shape(&self) -> [usize; 4] {
        [
            self.in_channels,
            self.out_channels,
            self.kernel.0,
            self.kernel.1,
        ]
    }
}

fn nchw(op: &'static str, input: &Tensor, channels: usize) -> Result<(usize, usize, usize)> {
    match *input.shape() {
        [n, c, h, w] if c == channels => Ok((n, h, w)),
        _ => Err(Error::shape(
            op,
            format!("expected [N, {channels}, H, W], got {:?}", input.shape()),
        )),
    }
}

fn add_channel_bias(y: Tensor, bias: Option<&Tensor>, channels: usize) -> Result<Tensor> {
    let Some(b) = bias else { return Ok(y) };
    if b.shape() != [channels] {
        return Err(Error::shape(
            "bias",
            format!("expected [{channels}], got {:?}", b.shape()),
        ));
    }
    let (n, plane) = (y.shape()[0], y.shape()[2] * y.shape()[3]);
    let shape = y.shape().to_vec();
    y.add(&b.broadcast_mid(n, plane, &shape)?)
}

/// Cross-correlation (no kernel flip) of `[N, C, H, W]` input with
/// `[C', C, kh, kw]` weights, plus an optional per-channel bias.
pub fn conv2d(
    input: &Tensor,
    spec: &ConvSpec,
    weight: &Tensor,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    let (n, h, w) = nchw("conv2d", input, spec.in_channels)?;
    if weight.shape() != spec.weight_shape() {
        return Err(Error::shape(
            "conv2d",
            format!(
                "weight {:?}, spec wants {:?}",
                weight.shape(),
                spec.weight_shape()
            ),
        ));
    }
    let (ho, wo) = spec.output_hw(h, w)?;
    let geom = ConvGeom {
        n,
        c_in: spec.in_channels,
        h,
        w,
        c_out: spec.out_channels,
        kh: spec.kernel.0,
        kw: spec.kernel.1,
        stride: spec.stride,
        pad: spec.padding,
        ho,
        wo,
    };
    add_channel_bias(input.conv_raw(weight, geom)?, bias, spec.out_channels)
}

/// Transposed convolution ("deconvolution"): the input-gradient of
/// [`conv2d`], with weights laid out `[in, out, kh, kw]`.
pub fn conv2d_transposed(
    input: &Tensor,
    spec: &ConvSpec,
    weight: &Tensor,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    let (n, h, w) = nchw("conv2d_transposed", input, spec.in_channels)?;
    if weight.shape() != spec.transposed_weight_shape() {
        return Err(Error::shape(
            "conv2d_transposed",
            format!(
                "weight {:?}, spec wants {:?}",
                weight.shape(),
                spec.transposed_weight_shape()
            ),
        ));
    }
    let (ho, wo) = spec.transposed_output_hw(h, w)?;
    // The equivalent forward convolution maps the (ho, wo) output back to (h, w).
    let geom = ConvGeom {
        n,
        c_in: spec.out_channels,
        h: ho,
        w: wo,
        c_out: spec.in_channels,
        kh: spec.kernel.0,
        kw: spec.kernel.1,
        stride: spec.stride,
        pad: spec.padding,
        ho: h,
        wo: w,
    };
    add_channel_bias(
        input.conv_transpose_raw(weight, geom)?,
        bias,
        spec.out_channels,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Mean,
}

/// Square-window pooling. Windows that would extend past the edge are
/// dropped, so the output size is `floor((in − window) / stride) + 1`.
pub fn pool2d(input: &Tensor, kind: PoolKind, window: usize, stride: usize) -> Result<Tensor> {
    let [n, c, h, w] = *input.shape() else {
        return Err(Error::shape(
            "pool2d",
            format!("expected rank 4, got {:?}", input.shape()),
        ));
    };
    if window == 0 || stride == 0 {
        return Err(Error::invalid("pool window and stride must be positive"));
    }
    if window > h || window > w {
        return Err(Error::shape(
            "pool2d",
            format!("window {window} larger than input {h}x{w}"),
        ));
    }
    let geom = PoolGeom {
        n,
        c,
        h,
        w,
        kh: window,
        kw: window,
        stride,
        ho: (h - window) / stride + 1,
        wo: (w - window) / stride + 1,
    };
    match kind {
        PoolKind::Mean => input.avg_pool_raw(geom),
        PoolKind::Max => {
            let index = kernels::max_pool_indices(input.values(), &geom);
            input.gather(Arc::new(index), &geom.output_shape())
        }
    }
}

/// Mean over the full spatial extent: `[N, C, H, W] → [N, C]`.
pub fn global_mean_pool(input: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = *input.shape() else {
        return Err(Error::shape(
            "global_mean_pool",
            format!("expected rank 4, got {:?}", input.shape()),
        ));
    };
    input
        .sum_mid(1, n * c, h * w, &[n, c])?
        .scale(1.0 / (h * w) as f64)
}

/// `input · weights + bias` for `[N, D] · [D, K]`.
pub fn linear(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let y = input.matmul(weights)?;
    let (n, k) = (y.shape()[0], y.shape()[1]);
    if bias.shape() != [k] {
        return Err(Error::shape(
            "linear",
            format!("bias {:?} for {k} outputs", bias.shape()),
        ));
    }
    y.add(&bias.broadcast_mid(n, 1, &[n, k])?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

pub fn activation(input: &Tensor, kind: Activation) -> Result<Tensor> {
    match kind {
        Activation::Relu => input.relu(),
        Activation::Tanh => input.tanh(),
        Activation::Sigmoid => input.sigmoid(),
    }
}

/// Concatenates `[N, D_i]` matrices along columns.
pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat of nothing"))?;
    if first.rank() != 2 {
        return Err(Error::shape(
            "concat_cols",
            format!("expected rank 2, got {:?}", first.shape()),
        ));
    }
    let n = first.shape()[0];
    if parts.iter().any(|p| p.rank() != 2 || p.shape()[0] != n) {
        return Err(Error::shape("concat_cols", "row counts differ".to_string()));
    }
    let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut offset = 0;
    let mut out: Option<Tensor> = None;
    for part in parts {
        let d = part.shape()[1];
        let index: Vec<usize> = (0..n)
            .flat_map(|r| (0..d).map(move |j| r * total + offset + j))
            .collect();
        let placed = part.scatter_add(Arc::new(index), &[n, total])?;
        out = Some(match out {
            Some(acc) => acc.add(&placed)?,
            None => placed,
        });
        offset += d;
    }
    Ok(out.expect("non-empty"))
}

/// Columns `start .. start + len` of an `[N, D]` matrix.
pub fn slice_cols(input: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let [n, d] = *input.shape() else {
        return Err(Error::shape(
            "slice_cols",
            format!("expected rank 2, got {:?}", input.shape()),
        ));
    };
    if start + len > d || len == 0 {
        return Err(Error::shape(
            "slice_cols",
            format!("columns {start}..{} of {d}", start + len),
        ));
    }
    let index: Vec<usize> = (0..n)
        .flat_map(|r| (start..start + len).map(move |j| r * d + j))
        .collect();
    input.gather(Arc::new(index), &[n, len])
}
