use serde::{Deserialize, Serialize};

use super::{Shape4, Tensor4};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvParams {
    /// Stride-`stride` convolution with symmetric `k / 2` zero padding.
    pub fn same(kernel: usize, stride: usize, groups: usize) -> Self {
        ConvParams {
            stride,
            padding: kernel / 2,
            groups,
        }
    }
}

impl Default for ConvParams {
    fn default() -> Self {
        ConvParams {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

/// `floor((len + 2·pad − k) / stride) + 1`, or `None` when the kernel does not fit.
pub fn conv_output_size(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output positions `o` along one axis whose input `o·stride + k − pad` lands
/// inside `[0, in_len)`, as `(first_o, end_o, first_input)`.
#[inline]
fn valid_span(in_len: usize, out_len: usize, stride: usize, pad: usize, k: usize) -> Option<(usize, usize, usize)> {
    let start = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    if in_len + pad < k + 1 {
        return None;
    }
    let end = ((in_len - 1 + pad - k) / stride + 1).min(out_len);
    if start >= end {
        return None;
    }
    Some((start, end, start * stride + k - pad))
}

struct Geometry {
    input: Shape4,
    output: Shape4,
    kh: usize,
    kw: usize,
    cin_per_group: usize,
    cout_per_group: usize,
    params: ConvParams,
}

fn geometry(x: Shape4, weight: Shape4, params: ConvParams) -> Result<Geometry> {
    let ConvParams { stride, padding, groups } = params;
    if groups == 0 || stride == 0 {
        return Err(Error::invalid("conv2d needs groups ≥ 1 and stride ≥ 1"));
    }
    if !x.c.is_multiple_of(groups) || !weight.n.is_multiple_of(groups) {
        return Err(Error::invalid(format!(
            "conv2d: {} input / {} output channels not divisible by groups={groups}",
            x.c, weight.n
        )));
    }
    if weight.c != x.c / groups {
        return Err(Error::invalid(format!(
            "conv2d: weight {weight} expects {} channels per group, input {x} with groups={groups} has {}",
            weight.c,
            x.c / groups
        )));
    }
    let oh = conv_output_size(x.h, weight.h, stride, padding);
    let ow = conv_output_size(x.w, weight.w, stride, padding);
    let (Some(oh), Some(ow)) = (oh, ow) else {
        return Err(Error::invalid(format!(
            "conv2d: kernel {}×{} larger than padded input {x}",
            weight.h, weight.w
        )));
    };
    Ok(Geometry {
        input: x,
        output: Shape4::new(x.n, weight.n, oh, ow),
        kh: weight.h,
        kw: weight.w,
        cin_per_group: weight.c,
        cout_per_group: weight.n / groups,
        params,
    })
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.params.stride == 1 && self.params.padding == 0
    }

    fn is_dense_pointwise(&self) -> bool {
        self.is_pointwise() && self.params.groups == 1
    }

    /// Calls `f(out_offset, in_offset, len)` for each contiguous-in-output run
    /// touched by kernel tap `(ky, kx)`; inputs advance by `stride` per output.
    #[inline]
    fn for_each_run(&self, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (s, p) = (self.params.stride, self.params.padding);
        let Some((oy0, oy1, iy0)) = valid_span(self.input.h, self.output.h, s, p, ky) else {
            return;
        };
        let Some((ox0, ox1, ix0)) = valid_span(self.input.w, self.output.w, s, p, kx) else {
            return;
        };
        for (step, oy) in (oy0..oy1).enumerate() {
            let iy = iy0 + step * s;
            f(oy * self.output.w + ox0, iy * self.input.w + ix0, ox1 - ox0);
        }
    }
}

/// Direct grouped 2-D convolution. `weight` is `C_out×(C_in/groups)×kH×kW`,
/// `bias` is `1×C_out×1×1`.
pub fn conv2d(x: &Tensor4, weight: &Tensor4, bias: Option<&Tensor4>, params: ConvParams) -> Result<Tensor4> {
    let g = geometry(x.shape(), weight.shape(), params)?;
    if let Some(b) = bias {
        if b.shape() != Shape4::new(1, g.output.c, 1, 1) {
            return Err(Error::invalid(format!(
                "conv2d: bias {} does not match {} output channels",
                b.shape(),
                g.output.c
            )));
        }
    }
    let mut out = Tensor4::zeros(g.output);
    if g.is_dense_pointwise() {
        pointwise_forward(&g, x, weight, bias, &mut out);
        return Ok(out);
    }
    let s = params.stride;
    let w = weight.data();
    for n in 0..g.input.n {
        for co in 0..g.output.c {
            let group = co / g.cout_per_group;
            let out_plane = out.plane_mut(n, co);
            if let Some(b) = bias {
                out_plane.fill(b.data()[co]);
            }
            for cl in 0..g.cin_per_group {
                let in_plane = x.plane(n, group * g.cin_per_group + cl);
                let wbase = (co * g.cin_per_group + cl) * g.kh * g.kw;
                if g.is_pointwise() {
                    let wv = w[wbase];
                    for (o, i) in out_plane.iter_mut().zip(in_plane) {
                        *o += wv * i;
                    }
                    continue;
                }
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = w[wbase + ky * g.kw + kx];
                        g.for_each_run(ky, kx, |oo, io, len| {
                            let dst = &mut out_plane[oo..oo + len];
                            if s == 1 {
                                for (o, i) in dst.iter_mut().zip(&in_plane[io..io + len]) {
                                    *o += wv * i;
                                }
                            } else {
                                for (j, o) in dst.iter_mut().enumerate() {
                                    *o += wv * in_plane[io + j * s];
                                }
                            }
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `C += A·B` for row-major `A: m×k`, `B: k×n`, `C: m×n`, with explicit
/// element strides for `A` and `B` so transposes need no copies.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], a_strides: (isize, isize), b: &[f64], b_strides: (isize, isize), c: &mut [f64]) {
    let span = |rows: usize, cols: usize, (rs, cs): (isize, isize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
        }
    };
    assert!(a.len() >= span(m, k, a_strides) && b.len() >= span(k, n, b_strides) && c.len() >= m * n);
    // SAFETY: the assertion above keeps every strided access inside the slices,
    // and `c` does not alias `a` or `b` because it is borrowed mutably.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Per batch item: `Y (C_out×P) = W (C_out×C_in) · X (C_in×P)`.
fn pointwise_forward(g: &Geometry, x: &Tensor4, weight: &Tensor4, bias: Option<&Tensor4>, out: &mut Tensor4) {
    let (cin, cout) = (g.input.c, g.output.c);
    let p = g.input.plane();
    for n in 0..g.input.n {
        let xs = &x.data()[n * cin * p..(n + 1) * cin * p];
        let ys = &mut out.data_mut()[n * cout * p..(n + 1) * cout * p];
        if let Some(b) = bias {
            for (row, &bv) in ys.chunks_mut(p).zip(b.data()) {
                row.fill(bv);
            }
        }
        gemm_acc(cout, cin, p, weight.data(), (cin as isize, 1), xs, (p as isize, 1), ys);
    }
}

/// `dX = Wᵀ·dY` and `dW = Σₙ dY·Xᵀ` per batch item.
fn pointwise_backward(
    g: &Geometry,
    x: &Tensor4,
    weight: &Tensor4,
    gy: &Tensor4,
    gx: &mut Tensor4,
    gw: &mut Tensor4,
    gb: &mut Tensor4,
) {
    let (cin, cout) = (g.input.c, g.output.c);
    let p = g.input.plane();
    for n in 0..g.input.n {
        let xs = &x.data()[n * cin * p..(n + 1) * cin * p];
        let gys = &gy.data()[n * cout * p..(n + 1) * cout * p];
        for (acc, row) in gb.data_mut().iter_mut().zip(gys.chunks(p)) {
            *acc += row.iter().sum::<f64>();
        }
        let gxs = &mut gx.data_mut()[n * cin * p..(n + 1) * cin * p];
        gemm_acc(cin, cout, p, weight.data(), (1, cin as isize), gys, (p as isize, 1), gxs);
        gemm_acc(cout, p, cin, gys, (p as isize, 1), xs, (1, p as isize), gw.data_mut());
    }
}

/// Gradients of [`conv2d`] given the upstream gradient `gy`:
/// `(d input, d weight, d bias)`.
pub fn conv2d_backward(
    x: &Tensor4,
    weight: &Tensor4,
    gy: &Tensor4,
    params: ConvParams,
) -> Result<(Tensor4, Tensor4, Tensor4)> {
    let g = geometry(x.shape(), weight.shape(), params)?;
    if gy.shape() != g.output {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward",
            lhs: gy.shape(),
            rhs: g.output,
        });
    }
    let s = params.stride;
    let mut gx = Tensor4::zeros(g.input);
    let mut gw = Tensor4::zeros(weight.shape());
    let mut gb = Tensor4::zeros(Shape4::new(1, g.output.c, 1, 1));
    if g.is_dense_pointwise() {
        pointwise_backward(&g, x, weight, gy, &mut gx, &mut gw, &mut gb);
        return Ok((gx, gw, gb));
    }
    let w = weight.data();
    for n in 0..g.input.n {
        for co in 0..g.output.c {
            let group = co / g.cout_per_group;
            let gy_plane = gy.plane(n, co);
            gb.data_mut()[co] += gy_plane.iter().sum::<f64>();
            for cl in 0..g.cin_per_group {
                let ci = group * g.cin_per_group + cl;
                let in_plane = x.plane(n, ci);
                let wbase = (co * g.cin_per_group + cl) * g.kh * g.kw;
                if g.is_pointwise() {
                    let wv = w[wbase];
                    let mut dot = 0.0;
                    for ((gxv, &gyv), &xv) in gx.plane_mut(n, ci).iter_mut().zip(gy_plane).zip(in_plane) {
                        *gxv += wv * gyv;
                        dot += gyv * xv;
                    }
                    gw.data_mut()[wbase] += dot;
                    continue;
                }
                let gx_plane = gx.plane_mut(n, ci);
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wi = wbase + ky * g.kw + kx;
                        let wv = w[wi];
                        let mut dot = 0.0;
                        g.for_each_run(ky, kx, |oo, io, len| {
                            let src = &gy_plane[oo..oo + len];
                            if s == 1 {
                                let xs = &in_plane[io..io + len];
                                let gxs = &mut gx_plane[io..io + len];
                                for j in 0..len {
                                    gxs[j] += wv * src[j];
                                    dot += src[j] * xs[j];
                                }
                            } else {
                                for (j, &gyv) in src.iter().enumerate() {
                                    gx_plane[io + j * s] += wv * gyv;
                                    dot += gyv * in_plane[io + j * s];
                                }
                            }
                        });
                        gw.data_mut()[wi] += dot;
                    }
                }
            }
        }
    }
    Ok((gx, gw, gb))
}
