//! Raw numeric kernels over flat row-major buffers. No graph bookkeeping here.

use rayon::prelude::*;

/// `c = op(a) · op(b) + beta · c` where `op(a)` is `m × k` and `op(b)` is `k × n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // extents whose lengths were checked against the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry shared by a convolution, its input adjoint and its weight adjoint.
///
/// Input is `[n, c_in, h, w]`, weights `[c_out, c_in, kh, kw]`, output
/// `[n, c_out, ho, wo]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn input_shape(&self) -> Vec<usize> {
        vec![self.n, self.c_in, self.h, self.w]
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.c_out, self.c_in, self.kh, self.kw]
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.n, self.c_out, self.ho, self.wo]
    }

    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        dst[oy * g.wo + ox] =
                            if iy >= 0 && (iy as usize) < g.h && ix >= 0 && (ix as usize) < g.w {
                                x[(c * g.h + iy as usize) * g.w + ix as usize]
                            } else {
                                0.0
                            };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.w {
                            continue;
                        }
                        out[(c * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.wo + ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward(x: &[f64], weight: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (k, p) = (g.patch(), g.positions());
    let in_len = g.c_in * g.h * g.w;
    let mut out = vec![0.0; g.n * g.c_out * p];
    out.par_chunks_mut(g.c_out * p)
        .zip(x.par_chunks(in_len))
        .for_each(|(y, xn)| {
            let mut cols = vec![0.0; k * p];
            im2col(xn, g, &mut cols);
            gemm(g.c_out, k, p, weight, false, &cols, false, 0.0, y);
        });
    out
}

/// Adjoint of [`conv_forward`] with respect to its input.
pub(crate) fn conv_transpose(grad: &[f64], weight: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (k, p) = (g.patch(), g.positions());
    let in_len = g.c_in * g.h * g.w;
    let mut out = vec![0.0; g.n * in_len];
    out.par_chunks_mut(in_len)
        .zip(grad.par_chunks(g.c_out * p))
        .for_each(|(xn, gn)| {
            let mut cols = vec![0.0; k * p];
            gemm(k, g.c_out, p, weight, true, gn, false, 0.0, &mut cols);
            col2im(&cols, g, xn);
        });
    out
}

/// Adjoint of [`conv_forward`] with respect to its weights.
pub(crate) fn conv_weight_grad(x: &[f64], grad: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (k, p) = (g.patch(), g.positions());
    let in_len = g.c_in * g.h * g.w;
    let partials: Vec<Vec<f64>> = x
        .par_chunks(in_len)
        .zip(grad.par_chunks(g.c_out * p))
        .map(|(xn, gn)| {
            let mut cols = vec![0.0; k * p];
            im2col(xn, g, &mut cols);
            let mut dw = vec![0.0; g.c_out * k];
            gemm(g.c_out, p, k, gn, false, &cols, true, 0.0, &mut dw);
            dw
        })
        .collect();
    let mut out = vec![0.0; g.c_out * k];
    for part in &partials {
        for (o, v) in out.iter_mut().zip(part) {
            *o += v;
        }
    }
    out
}

/// Pooling window geometry over `[n, c, h, w]`; windows that would run past
/// the edge are dropped (floor semantics).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct PoolGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

impl PoolGeom {
    pub fn input_shape(&self) -> Vec<usize> {
        vec![self.n, self.c, self.h, self.w]
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.n, self.c, self.ho, self.wo]
    }

    fn windows(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        (0..self.n * self.c).flat_map(move |plane| {
            (0..self.ho).flat_map(move |oy| (0..self.wo).map(move |ox| (plane, oy, ox)))
        })
    }
}

pub(crate) fn avg_pool(x: &[f64], g: &PoolGeom) -> Vec<f64> {
    let scale = 1.0 / (g.kh * g.kw) as f64;
    g.windows()
        .map(|(plane, oy, ox)| {
            let mut acc = 0.0;
            for i in 0..g.kh {
                let row = (plane * g.h + oy * g.stride + i) * g.w + ox * g.stride;
                for j in 0..g.kw {
                    acc += x[row + j];
                }
            }
            acc * scale
        })
        .collect()
}

pub(crate) fn avg_unpool(grad: &[f64], g: &PoolGeom) -> Vec<f64> {
    let scale = 1.0 / (g.kh * g.kw) as f64;
    let mut out = vec![0.0; g.n * g.c * g.h * g.w];
    for ((plane, oy, ox), gv) in g.windows().zip(grad) {
        for i in 0..g.kh {
            let row = (plane * g.h + oy * g.stride + i) * g.w + ox * g.stride;
            for j in 0..g.kw {
                out[row + j] += gv * scale;
            }
        }
    }
    out
}

/// Flat input index of each window's maximum; the first maximum wins ties.
pub(crate) fn max_pool_indices(x: &[f64], g: &PoolGeom) -> Vec<usize> {
    g.windows()
        .map(|(plane, oy, ox)| {
            let mut best = (plane * g.h + oy * g.stride) * g.w + ox * g.stride;
            for i in 0..g.kh {
                let row = (plane * g.h + oy * g.stride + i) * g.w + ox * g.stride;
                for j in 0..g.kw {
                    if x[row + j] > x[best] {
                        best = row + j;
                    }
                }
            }
            best
        })
        .collect()
}
