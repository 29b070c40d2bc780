//! Forward and backward kernels on plain tensors. The autograd graph wires
//! these together; they are public so they can be tested against direct
//! loop implementations.

use rayon::prelude::*;

use crate::error::{shape_err, NnError, Result};
use crate::scalar::{matmul, Scalar};
use crate::tensor::Tensor;

/// Stride and zero padding of a 2D convolution, as `(height, width)` pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvSpec {
    pub const UNIT: ConvSpec = ConvSpec {
        stride: (1, 1),
        padding: (0, 0),
    };

    pub fn same3x3() -> Self {
        ConvSpec {
            stride: (1, 1),
            padding: (1, 1),
        }
    }

    pub fn new(stride: (usize, usize), padding: (usize, usize)) -> Self {
        ConvSpec { stride, padding }
    }

    /// Output extent along one axis, `None` when the kernel does not fit.
    fn axis_out(input: usize, k: usize, s: usize, p: usize) -> Option<usize> {
        if s == 0 || input + 2 * p < k {
            None
        } else {
            Some((input + 2 * p - k) / s + 1)
        }
    }

    pub fn output_hw(&self, h: usize, w: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        Some((
            Self::axis_out(h, kh, self.stride.0, self.padding.0)?,
            Self::axis_out(w, kw, self.stride.1, self.padding.1)?,
        ))
    }

    fn is_pointwise(&self, kh: usize, kw: usize) -> bool {
        kh == 1 && kw == 1 && self.stride == (1, 1) && self.padding == (0, 0)
    }
}

/// Valid output index range `[lo, hi)` along one axis for kernel offset `k`.
#[inline]
fn valid_range(out: usize, input: usize, k: usize, s: usize, p: usize) -> (usize, usize) {
    // need 0 <= o*s + k - p < input
    let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
    let hi = if input + p > k {
        ((input + p - k - 1) / s + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: ConvSpec,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Unrolls one sample `[cin, h, w]` into `[cin*kh*kw, oh*ow]`.
    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T]) {
        let (sh, sw) = self.spec.stride;
        let (ph, pw) = self.spec.padding;
        let n = self.col_cols();
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                let (ylo, yhi) = valid_range(self.oh, self.h, ky, sh, ph);
                for kx in 0..self.kw {
                    let (xlo, xhi) = valid_range(self.ow, self.w, kx, sw, pw);
                    let row = ((ci * self.kh + ky) * self.kw + kx) * n;
                    let dst = &mut col[row..row + n];
                    dst.iter_mut().for_each(|v| *v = T::zero());
                    for oy in ylo..yhi {
                        let iy = oy * sh + ky - ph;
                        let src_row = &plane[iy * self.w..(iy + 1) * self.w];
                        let d = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if sw == 1 && xhi > xlo {
                            let ix0 = xlo + kx - pw;
                            d[xlo..xhi].copy_from_slice(&src_row[ix0..ix0 + (xhi - xlo)]);
                        } else {
                            for ox in xlo..xhi {
                                d[ox] = src_row[ox * sw + kx - pw];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Geometry::im2col`]: accumulates columns back into `[cin, h, w]`.
    fn col2im<T: Scalar>(&self, col: &[T], x: &mut [T]) {
        let (sh, sw) = self.spec.stride;
        let (ph, pw) = self.spec.padding;
        let n = self.col_cols();
        x.iter_mut().for_each(|v| *v = T::zero());
        for ci in 0..self.cin {
            let plane = &mut x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                let (ylo, yhi) = valid_range(self.oh, self.h, ky, sh, ph);
                for kx in 0..self.kw {
                    let (xlo, xhi) = valid_range(self.ow, self.w, kx, sw, pw);
                    let row = ((ci * self.kh + ky) * self.kw + kx) * n;
                    let src = &col[row..row + n];
                    for oy in ylo..yhi {
                        let iy = oy * sh + ky - ph;
                        let dst_row = &mut plane[iy * self.w..(iy + 1) * self.w];
                        let s = &src[oy * self.ow..(oy + 1) * self.ow];
                        for ox in xlo..xhi {
                            dst_row[ox * sw + kx - pw] += s[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 convolutions computed on register tiles of a few output
/// channels by a short run of columns, without unrolling the input. Much
/// faster than a matrix product when the channel counts are small.
mod direct {
    use super::Geometry;
    use crate::scalar::Scalar;

    /// Output channels per tile.
    const CO: usize = 4;
    /// Output columns per tile.
    const LANES: usize = 16;

    /// Copies `[c, h, w]` into a zeroed `[c, rows, cols]` at offset `(top, left)`.
    #[allow(clippy::too_many_arguments)]
    fn pad<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, top: usize, left: usize, rows: usize, cols: usize) -> Vec<T> {
        let mut out = vec![T::zero(); c * rows * cols];
        for ch in 0..c {
            for r in 0..h {
                let dst = (ch * rows + r + top) * cols + left;
                out[dst..dst + w].copy_from_slice(&x[(ch * h + r) * w..(ch * h + r + 1) * w]);
            }
        }
        out
    }

    struct Layout {
        rows: usize,
        cols: usize,
        owr: usize,
        blocks: usize,
        /// Offset of each kernel tap into the padded input, in `(ci, ky, kx)` order.
        offsets: Vec<usize>,
    }

    fn layout(g: &Geometry, cout: usize) -> Layout {
        let owr = g.ow.div_ceil(LANES) * LANES;
        let (rows, cols) = (g.oh + g.kh - 1, owr + g.kw - 1);
        let mut offsets = Vec::with_capacity(g.cin * g.kh * g.kw);
        for ci in 0..g.cin {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    offsets.push((ci * rows + ky) * cols + kx);
                }
            }
        }
        Layout {
            rows,
            cols,
            owr,
            blocks: cout.div_ceil(CO),
            offsets,
        }
    }

    #[inline(always)]
    fn lanes<T: Scalar>(v: &[T], at: usize) -> [T; LANES] {
        v[at..at + LANES].try_into().unwrap()
    }

    // The AVX2 copies run the same operations in the same order (no fused
    // multiply-add), so results do not depend on which path is taken.
    macro_rules! dispatch {
        ($body:ident, $wide:ident, ($($arg:ident: $ty:ty),*)) => {
            #[cfg(target_arch = "x86_64")]
            #[target_feature(enable = "avx2")]
            unsafe fn $wide<T: Scalar>($($arg: $ty),*) {
                $body($($arg),*)
            }

            #[cfg(target_arch = "x86_64")]
            if std::arch::is_x86_feature_detected!("avx2") {
                // SAFETY: the feature was detected at runtime.
                return unsafe { $wide($($arg),*) };
            }
            $body($($arg),*)
        };
    }

    /// One sample: `x [cin, h, w]`, `kernel [cout, cin, kh, kw]` -> `y [cout, oh, ow]`.
    pub(super) fn forward<T: Scalar>(g: &Geometry, cout: usize, kernel: &[T], x: &[T], y: &mut [T]) {
        dispatch!(forward_body, forward_avx2, (g: &Geometry, cout: usize, kernel: &[T], x: &[T], y: &mut [T]));
    }

    #[inline(always)]
    fn forward_body<T: Scalar>(g: &Geometry, cout: usize, kernel: &[T], x: &[T], y: &mut [T]) {
        let (ph, pw) = g.spec.padding;
        let l = layout(g, cout);
        let taps = l.offsets.len();
        let xp = pad(x, g.cin, g.h, g.w, ph, pw, l.rows, l.cols);
        // [block][tap][CO]
        let mut packed = vec![[T::zero(); CO]; l.blocks * taps];
        for co in 0..cout {
            for t in 0..taps {
                packed[(co / CO) * taps + t][co % CO] = kernel[co * taps + t];
            }
        }
        for oy in 0..g.oh {
            for b in 0..l.blocks {
                let wb = &packed[b * taps..(b + 1) * taps];
                for x0 in (0..l.owr).step_by(LANES) {
                    let base = oy * l.cols + x0;
                    let mut acc = [[T::zero(); LANES]; CO];
                    for (w, &off) in wb.iter().zip(&l.offsets) {
                        let src = lanes(&xp, base + off);
                        for c in 0..CO {
                            for i in 0..LANES {
                                acc[c][i] += w[c] * src[i];
                            }
                        }
                    }
                    let n = LANES.min(g.ow - x0);
                    for (c, a) in acc.iter().enumerate().take(cout - b * CO) {
                        let o = ((b * CO + c) * g.oh + oy) * g.ow + x0;
                        y[o..o + n].copy_from_slice(&a[..n]);
                    }
                }
            }
        }
    }

    /// Kernel gradient of one sample, accumulated into `dw` (f64).
    pub(super) fn weight_grad<T: Scalar>(g: &Geometry, cout: usize, x: &[T], dy: &[T], dw: &mut [f64]) {
        dispatch!(weight_grad_body, weight_grad_avx2, (g: &Geometry, cout: usize, x: &[T], dy: &[T], dw: &mut [f64]));
    }

    #[inline(always)]
    fn weight_grad_body<T: Scalar>(g: &Geometry, cout: usize, x: &[T], dy: &[T], dw: &mut [f64]) {
        let (ph, pw) = g.spec.padding;
        let l = layout(g, cout);
        let taps = l.offsets.len();
        let xp = pad(x, g.cin, g.h, g.w, ph, pw, l.rows, l.cols);
        // [oh][block][owr / LANES] tiles of [CO][LANES]
        let chunks = l.owr / LANES;
        let mut dyp = vec![[[T::zero(); LANES]; CO]; g.oh * l.blocks * chunks];
        for co in 0..cout {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    dyp[(oy * l.blocks + co / CO) * chunks + ox / LANES][co % CO][ox % LANES] =
                        dy[(co * g.oh + oy) * g.ow + ox];
                }
            }
        }
        for oy in 0..g.oh {
            for b in 0..l.blocks {
                let drow = &dyp[(oy * l.blocks + b) * chunks..(oy * l.blocks + b + 1) * chunks];
                for (t, &off) in l.offsets.iter().enumerate() {
                    let base = oy * l.cols + off;
                    let mut acc = [[T::zero(); LANES]; CO];
                    for (k, d) in drow.iter().enumerate() {
                        let src = lanes(&xp, base + k * LANES);
                        for c in 0..CO {
                            for i in 0..LANES {
                                acc[c][i] += d[c][i] * src[i];
                            }
                        }
                    }
                    for (c, a) in acc.iter().enumerate().take(cout - b * CO) {
                        dw[(b * CO + c) * taps + t] += a.iter().fold(0.0, |s, v| s + v.as_f64());
                    }
                }
            }
        }
    }

    /// Kernel for the input gradient: channels swapped, taps reversed.
    pub(super) fn flipped<T: Scalar>(kernel: &[T], cout: usize, cin: usize, kh: usize, kw: usize) -> Vec<T> {
        let mut f = vec![T::zero(); kernel.len()];
        for co in 0..cout {
            for ci in 0..cin {
                for ky in 0..kh {
                    for kx in 0..kw {
                        f[((ci * cout + co) * kh + kh - 1 - ky) * kw + kw - 1 - kx] =
                            kernel[((co * cin + ci) * kh + ky) * kw + kx];
                    }
                }
            }
        }
        f
    }
}

/// Direct path for stride-1 convolutions whose output width is small
/// enough that a matrix product would be dominated by packing.
fn use_direct(g: &Geometry, cout: usize) -> bool {
    g.spec.stride == (1, 1)
        && g.spec.padding.0 < g.kh
        && g.spec.padding.1 < g.kw
        && g.cin * cout <= DIRECT_MAX_CHANNEL_PRODUCT
}

/// Largest `cin * cout` routed to the direct path.
pub const DIRECT_MAX_CHANNEL_PRODUCT: usize = 64;

fn conv_geometry(
    op: &'static str,
    x_shape: (usize, usize, usize),
    w: &[usize],
    spec: ConvSpec,
) -> Result<(usize, Geometry)> {
    let (cin, h, wd) = x_shape;
    let &[cout, wcin, kh, kw] = w else {
        return Err(shape_err(op, format!("kernel must be 4D, got {w:?}")));
    };
    if wcin != cin {
        return Err(shape_err(
            op,
            format!("kernel expects {wcin} input channels, input has {cin}"),
        ));
    }
    let (oh, ow) = spec
        .output_hw(h, wd, kh, kw)
        .ok_or_else(|| shape_err(op, format!("kernel {kh}x{kw} {spec:?} gives empty output on {h}x{wd}")))?;
    Ok((
        cout,
        Geometry {
            cin,
            h,
            w: wd,
            kh,
            kw,
            oh,
            ow,
            spec,
        },
    ))
}

/// Cross-correlation of `x [n, cin, h, w]` with `kernel [cout, cin, kh, kw]`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>, spec: ConvSpec) -> Result<Tensor<T>> {
    let (n, cin, h, w) = x.dims4()?;
    let (cout, g) = conv_geometry("conv2d", (cin, h, w), kernel.shape(), spec)?;
    let (k, cols) = (g.col_rows(), g.col_cols());
    let mut out = Tensor::zeros(&[n, cout, g.oh, g.ow]);
    let pointwise = spec.is_pointwise(g.kh, g.kw);
    out.data_mut()
        .par_chunks_mut(cout * cols)
        .enumerate()
        .for_each(|(i, y)| {
            let xs = x.sample(i);
            if use_direct(&g, cout) {
                direct::forward(&g, cout, kernel.data(), xs, y);
            } else if pointwise {
                matmul(cout, k, cols, kernel.data(), false, xs, false, y, false);
            } else {
                let mut col = vec![T::zero(); k * cols];
                g.im2col(xs, &mut col);
                matmul(cout, k, cols, kernel.data(), false, &col, false, y, false);
            }
        });
    Ok(out)
}

/// Input and kernel gradients, each present when requested.
pub type GradPair<T> = (Option<Tensor<T>>, Option<Tensor<T>>);
type SampleGrads<T> = (Option<Vec<T>>, Option<Vec<T>>);

/// Gradients of [`conv2d`] with respect to its input and/or kernel.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: ConvSpec,
    need_input: bool,
    need_kernel: bool,
) -> Result<GradPair<T>> {
    let (n, cin, h, w) = x.dims4()?;
    let (cout, g) = conv_geometry("conv2d_backward", (cin, h, w), kernel.shape(), spec)?;
    if grad_out.shape() != [n, cout, g.oh, g.ow] {
        return Err(shape_err(
            "conv2d_backward",
            format!("output gradient {:?} for output [{n}, {cout}, {}, {}]", grad_out.shape(), g.oh, g.ow),
        ));
    }
    if use_direct(&g, cout) {
        return direct_backward(x, kernel, grad_out, &g, cout, need_input, need_kernel);
    }
    let (k, cols) = (g.col_rows(), g.col_cols());
    let pointwise = spec.is_pointwise(g.kh, g.kw);
    let per_sample: Vec<SampleGrads<T>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let dy = grad_out.sample(i);
            let dw = need_kernel.then(|| {
                let mut dw = vec![T::zero(); cout * k];
                if pointwise {
                    matmul(cout, cols, k, dy, false, x.sample(i), true, &mut dw, false);
                } else {
                    let mut col = vec![T::zero(); k * cols];
                    g.im2col(x.sample(i), &mut col);
                    matmul(cout, cols, k, dy, false, &col, true, &mut dw, false);
                }
                dw
            });
            let dx = need_input.then(|| {
                let mut dx = vec![T::zero(); cin * h * w];
                if pointwise {
                    matmul(k, cout, cols, kernel.data(), true, dy, false, &mut dx, false);
                } else {
                    let mut dcol = vec![T::zero(); k * cols];
                    matmul(k, cout, cols, kernel.data(), true, dy, false, &mut dcol, false);
                    g.col2im(&dcol, &mut dx);
                }
                dx
            });
            (dx, dw)
        })
        .collect();
    let dx = need_input.then(|| {
        let mut data = Vec::with_capacity(n * cin * h * w);
        per_sample.iter().for_each(|(dx, _)| data.extend_from_slice(dx.as_ref().unwrap()));
        Tensor::new(vec![n, cin, h, w], data).unwrap()
    });
    let dw = need_kernel.then(|| {
        let mut acc = Tensor::zeros(kernel.shape());
        // fixed summation order keeps results independent of thread count
        for (_, dw) in &per_sample {
            acc.data_mut()
                .iter_mut()
                .zip(dw.as_ref().unwrap())
                .for_each(|(a, &b)| *a += b);
        }
        acc
    });
    Ok((dx, dw))
}

fn direct_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    g: &Geometry,
    cout: usize,
    need_input: bool,
    need_kernel: bool,
) -> Result<GradPair<T>> {
    let (n, cin, h, w) = x.dims4()?;
    let dx = if need_input {
        let flipped = direct::flipped(kernel.data(), cout, cin, g.kh, g.kw);
        let back = Geometry {
            cin: cout,
            h: g.oh,
            w: g.ow,
            kh: g.kh,
            kw: g.kw,
            oh: h,
            ow: w,
            spec: ConvSpec::new((1, 1), (g.kh - 1 - g.spec.padding.0, g.kw - 1 - g.spec.padding.1)),
        };
        let mut dx = Tensor::zeros(&[n, cin, h, w]);
        dx.data_mut()
            .par_chunks_mut(cin * h * w)
            .enumerate()
            .for_each(|(i, d)| direct::forward(&back, cin, &flipped, grad_out.sample(i), d));
        Some(dx)
    } else {
        None
    };
    let dw = if need_kernel {
        let partials: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut acc = vec![0.0; kernel.len()];
                direct::weight_grad(g, cout, x.sample(i), grad_out.sample(i), &mut acc);
                acc
            })
            .collect();
        let mut total = vec![0.0; kernel.len()];
        for p in &partials {
            total.iter_mut().zip(p).for_each(|(t, v)| *t += v);
        }
        Some(Tensor::new(kernel.shape().to_vec(), total.into_iter().map(T::from_f64).collect())?)
    } else {
        None
    };
    Ok((dx, dw))
}

fn transposed_output_hw(h: usize, w: usize, kh: usize, kw: usize, spec: ConvSpec) -> Option<(usize, usize)> {
    let oh = ((h.checked_sub(1)?) * spec.stride.0 + kh).checked_sub(2 * spec.padding.0)?;
    let ow = ((w.checked_sub(1)?) * spec.stride.1 + kw).checked_sub(2 * spec.padding.1)?;
    (oh > 0 && ow > 0).then_some((oh, ow))
}

/// Transposed convolution: the adjoint of [`conv2d`] with the same kernel
/// and spec. `kernel` is `[cin, cout, kh, kw]`, i.e. shaped for the forward
/// convolution that maps `cout` channels back to `cin`.
pub fn conv_transpose2d<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>, spec: ConvSpec) -> Result<Tensor<T>> {
    let (n, cin, h, w) = x.dims4()?;
    let &[kin, cout, kh, kw] = kernel.shape() else {
        return Err(shape_err("conv_transpose2d", format!("kernel must be 4D, got {:?}", kernel.shape())));
    };
    if kin != cin {
        return Err(shape_err(
            "conv_transpose2d",
            format!("kernel expects {kin} input channels, input has {cin}"),
        ));
    }
    let (oh, ow) = transposed_output_hw(h, w, kh, kw, spec)
        .ok_or_else(|| shape_err("conv_transpose2d", "empty output"))?;
    let (_, g) = conv_geometry("conv_transpose2d", (cout, oh, ow), &[cin, cout, kh, kw], spec)?;
    assert_eq!((g.oh, g.ow), (h, w));
    let (k, cols) = (g.col_rows(), g.col_cols());
    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    out.data_mut()
        .par_chunks_mut(cout * oh * ow)
        .enumerate()
        .for_each(|(i, y)| {
            let mut dcol = vec![T::zero(); k * cols];
            matmul(k, cin, cols, kernel.data(), true, x.sample(i), false, &mut dcol, false);
            g.col2im(&dcol, y);
        });
    Ok(out)
}

/// Gradients of [`conv_transpose2d`] with respect to its input and/or kernel.
pub fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: ConvSpec,
    need_input: bool,
    need_kernel: bool,
) -> Result<GradPair<T>> {
    // the transposed op is conv2d's input-gradient, so its own gradients are
    // conv2d applied to the output gradient and conv2d's kernel gradient with
    // input and output swapped
    let dx = if need_input {
        Some(conv2d(grad_out, kernel, spec)?)
    } else {
        None
    };
    let dk = if need_kernel {
        conv2d_backward(grad_out, kernel, x, spec, false, true)?.1
    } else {
        None
    };
    Ok((dx, dk))
}

/// NaN passes through so a poisoned input shows up in the loss.
pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v <= T::zero() { T::zero() } else { v })
}

/// `grad * 1[x > 0]`.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v <= T::zero() { T::zero() } else { g })
        .collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

/// 2x2 max pooling with stride 2. Returns the output and, per output entry,
/// the flat input index of the first maximum in row-major window order.
pub fn max_pool2x2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(shape_err("max_pool2x2", format!("spatial size {h}x{w} must be even and nonzero")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    let xd = x.data();
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * oy + dy) * w + 2 * ox + dx;
                    // strict comparison keeps the first occurrence on ties
                    if xd[j] > xd[best] {
                        best = j;
                    }
                }
                out.push(xd[best]);
                idx.push(best as u32);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, idx))
}

pub fn max_pool2x2_backward<T: Scalar>(input_shape: &[usize], argmax: &[u32], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&j, &g) in argmax.iter().zip(grad_out.data()) {
        d[j as usize] += g;
    }
    dx
}

/// Per-axis interpolation taps `(i0, i1, t)` for corner-aligned resizing.
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    (0..output)
        .map(|o| {
            let src = if output > 1 {
                o as f64 * (input - 1) as f64 / (output - 1) as f64
            } else {
                0.0
            };
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize with corner alignment: output corners coincide with input corners.
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(NnError::InvalidArgument(format!("cannot resize {h}x{w} to {out_h}x{out_w}")));
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    let xd = x.data();
    for p in 0..n * c {
        let plane = &xd[p * h * w..(p + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = (1.0 - fx) * plane[y0 * w + x0].as_f64() + fx * plane[y0 * w + x1].as_f64();
                let bot = (1.0 - fx) * plane[y1 * w + x0].as_f64() + fx * plane[y1 * w + x1].as_f64();
                out.push(T::from_f64((1.0 - fy) * top + fy * bot));
            }
        }
    }
    Tensor::new(vec![n, c, out_h, out_w], out)
}

pub fn resize_bilinear_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let &[n, c, h, w] = input_shape else {
        return Err(shape_err("resize_backward", format!("{input_shape:?}")));
    };
    let (_, _, out_h, out_w) = grad_out.dims4()?;
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut acc = vec![0.0f64; n * c * h * w];
    let gd = grad_out.data();
    for p in 0..n * c {
        let plane = &mut acc[p * h * w..(p + 1) * h * w];
        let g = &gd[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = g[oy * out_w + ox].as_f64();
                plane[y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * v;
                plane[y0 * w + x1] += (1.0 - fy) * fx * v;
                plane[y1 * w + x0] += fy * (1.0 - fx) * v;
                plane[y1 * w + x1] += fy * fx * v;
            }
        }
    }
    Tensor::new(input_shape.to_vec(), acc.into_iter().map(T::from_f64).collect())
}

/// Mean over non-overlapping blocks; output size must divide the input.
pub fn area_downsample<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if out_h == 0 || out_w == 0 || h % out_h != 0 || w % out_w != 0 {
        return Err(shape_err(
            "area_downsample",
            format!("{out_h}x{out_w} does not evenly divide {h}x{w}"),
        ));
    }
    let (bh, bw) = (h / out_h, w / out_w);
    let inv = 1.0 / (bh * bw) as f64;
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for p in 0..n * c {
        let plane = &xd[p * h * w..(p + 1) * h * w];
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut s = 0.0;
                for y in oy * bh..(oy + 1) * bh {
                    for xx in ox * bw..(ox + 1) * bw {
                        s += plane[y * w + xx].as_f64();
                    }
                }
                out.push(T::from_f64(s * inv));
            }
        }
    }
    Tensor::new(vec![n, c, out_h, out_w], out)
}

/// Concatenation along the channel axis.
pub fn concat_channels<T: Scalar>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
    let (n, _, h, w) = first.dims4()?;
    let mut total_c = 0;
    for x in xs {
        let (xn, xc, xh, xw) = x.dims4()?;
        if (xn, xh, xw) != (n, h, w) {
            return Err(shape_err(
                "concat",
                format!("{:?} does not match batch/spatial dims of {:?}", x.shape(), first.shape()),
            ));
        }
        total_c += xc;
    }
    let mut data = Vec::with_capacity(n * total_c * h * w);
    for i in 0..n {
        for x in xs {
            data.extend_from_slice(x.sample(i));
        }
    }
    Tensor::new(vec![n, total_c, h, w], data)
}

/// Splits a channel-concatenated gradient back into pieces of `channels`.
pub fn split_channels<T: Scalar>(grad: &Tensor<T>, channels: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (n, c, h, w) = grad.dims4()?;
    if channels.iter().sum::<usize>() != c {
        return Err(shape_err("split", format!("{channels:?} does not sum to {c}")));
    }
    let hw = h * w;
    let mut outs: Vec<Vec<T>> = channels.iter().map(|&k| Vec::with_capacity(n * k * hw)).collect();
    for i in 0..n {
        let s = grad.sample(i);
        let mut off = 0;
        for (o, &k) in outs.iter_mut().zip(channels) {
            o.extend_from_slice(&s[off * hw..(off + k) * hw]);
            off += k;
        }
    }
    outs.into_iter()
        .zip(channels)
        .map(|(d, &k)| Tensor::new(vec![n, k, h, w], d))
        .collect()
}

/// Per-channel batch statistics from a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance used for normalization.
    pub var: Vec<f64>,
    /// Number of values per channel.
    pub count: usize,
}

impl BatchStats {
    /// Unbiased variance, the estimate kept in running statistics.
    pub fn unbiased_var(&self) -> Vec<f64> {
        let m = self.count as f64;
        let f = if self.count > 1 { m / (m - 1.0) } else { 1.0 };
        self.var.iter().map(|v| v * f).collect()
    }
}

fn check_affine<T: Scalar>(c: usize, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    if gamma.len() != c || beta.len() != c {
        return Err(shape_err(
            "batch_norm",
            format!("{c} channels but scale {} and shift {}", gamma.len(), beta.len()),
        ));
    }
    Ok(())
}

/// Output of a training-mode batch norm: result, normalized input, and
/// per-channel `1/sqrt(var + eps)`.
pub struct BatchNormTrain<T> {
    pub output: Tensor<T>,
    pub normalized: Tensor<T>,
    pub inv_std: Vec<f64>,
    pub stats: BatchStats,
}

/// `sum f(a_i, b_i)` in f64 over eight interleaved partial sums, so the loop
/// vectorizes while the summation order stays fixed.
#[inline]
fn lane_sum<T: Scalar>(a: &[T], b: &[T], f: impl Fn(f64, f64) -> f64) -> f64 {
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += f(x[l].as_f64(), y[l].as_f64());
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| f(x.as_f64(), y.as_f64())).sum();
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

pub fn batch_norm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<BatchNormTrain<T>> {
    let (n, c, h, w) = x.dims4()?;
    check_affine(c, gamma, beta)?;
    let hw = h * w;
    let count = n * hw;
    let xd = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for i in 0..n {
            let plane = &xd[(i * c + ch) * hw..(i * c + ch + 1) * hw];
            s += lane_sum(plane, plane, |v, _| v);
        }
        let mu = s / count as f64;
        let mut ss = 0.0;
        for i in 0..n {
            let plane = &xd[(i * c + ch) * hw..(i * c + ch + 1) * hw];
            ss += lane_sum(plane, plane, |v, _| (v - mu) * (v - mu));
        }
        mean[ch] = mu;
        var[ch] = ss / count as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = vec![T::zero(); xd.len()];
    let mut norm = vec![T::zero(); xd.len()];
    for i in 0..n {
        for ch in 0..c {
            let (g, b) = (gamma.data()[ch].as_f64(), beta.data()[ch].as_f64());
            let range = (i * c + ch) * hw..(i * c + ch + 1) * hw;
            let (mu, is) = (mean[ch], inv_std[ch]);
            for ((o, nv), v) in out[range.clone()].iter_mut().zip(&mut norm[range.clone()]).zip(&xd[range]) {
                let xh = (v.as_f64() - mu) * is;
                *nv = T::from_f64(xh);
                *o = T::from_f64(g * xh + b);
            }
        }
    }
    Ok(BatchNormTrain {
        output: Tensor::new(x.shape().to_vec(), out)?,
        normalized: Tensor::new(x.shape().to_vec(), norm)?,
        inv_std,
        stats: BatchStats { mean, var, count },
    })
}

/// Gradients `(dx, dscale, dshift)` of a training-mode batch norm.
pub fn batch_norm_train_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    normalized: &Tensor<T>,
    gamma: &Tensor<T>,
    inv_std: &[f64],
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = grad_out.dims4()?;
    let hw = h * w;
    let m = (n * hw) as f64;
    let gd = grad_out.data();
    let nd = normalized.data();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
            dbeta[ch] += lane_sum(&gd[r.clone()], &gd[r.clone()], |g, _| g);
            dgamma[ch] += lane_sum(&gd[r.clone()], &nd[r], |g, v| g * v);
        }
    }
    let mut dx = vec![T::zero(); gd.len()];
    for i in 0..n {
        for ch in 0..c {
            let k = gamma.data()[ch].as_f64() * inv_std[ch] / m;
            let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
            let (db, dg) = (dbeta[ch], dgamma[ch]);
            for ((d, g), v) in dx[r.clone()].iter_mut().zip(&gd[r.clone()]).zip(&nd[r]) {
                *d = T::from_f64(k * (m * g.as_f64() - db - v.as_f64() * dg));
            }
        }
    }
    Ok((
        Tensor::new(grad_out.shape().to_vec(), dx)?,
        Tensor::new(vec![c], dgamma.into_iter().map(T::from_f64).collect())?,
        Tensor::new(vec![c], dbeta.into_iter().map(T::from_f64).collect())?,
    ))
}

/// Inference-mode batch norm with fixed statistics.
pub fn batch_norm_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    check_affine(c, gamma, beta)?;
    check_affine(c, running_mean, running_var)?;
    let hw = h * w;
    let mut out = x.data().to_vec();
    for i in 0..n {
        for ch in 0..c {
            let is = 1.0 / (running_var.data()[ch].as_f64() + eps).sqrt();
            let (g, b, mu) = (
                gamma.data()[ch].as_f64(),
                beta.data()[ch].as_f64(),
                running_mean.data()[ch].as_f64(),
            );
            for v in &mut out[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                *v = T::from_f64(g * (v.as_f64() - mu) * is + b);
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Gradients `(dx, dscale, dshift)` of [`batch_norm_eval`].
pub fn batch_norm_eval_backward<T: Scalar>(
    x: &Tensor<T>,
    grad_out: &Tensor<T>,
    gamma: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let (xd, gd) = (x.data(), grad_out.data());
    let mut dx = vec![T::zero(); xd.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            let is = 1.0 / (running_var.data()[ch].as_f64() + eps).sqrt();
            let mu = running_mean.data()[ch].as_f64();
            let k = gamma.data()[ch].as_f64() * is;
            for j in (i * c + ch) * hw..(i * c + ch + 1) * hw {
                let g = gd[j].as_f64();
                dx[j] = T::from_f64(g * k);
                dgamma[ch] += g * (xd[j].as_f64() - mu) * is;
                dbeta[ch] += g;
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(vec![c], dgamma.into_iter().map(T::from_f64).collect())?,
        Tensor::new(vec![c], dbeta.into_iter().map(T::from_f64).collect())?,
    ))
}

/// Adds `bias[c]` to every element of channel `c`.
pub fn add_channel_bias<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if bias.len() != c {
        return Err(shape_err("add_channel_bias", format!("{} biases for {c} channels", bias.len())));
    }
    let hw = h * w;
    let mut out = x.data().to_vec();
    for i in 0..n {
        for ch in 0..c {
            let b = bias.data()[ch];
            out[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter_mut().for_each(|v| *v += b);
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn channel_sums<T: Scalar>(grad: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = grad.dims4()?;
    let hw = h * w;
    let mut s = vec![0.0; c];
    for i in 0..n {
        for (ch, acc) in s.iter_mut().enumerate() {
            *acc += grad.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw]
                .iter()
                .map(|v| v.as_f64())
                .sum::<f64>();
        }
    }
    Tensor::new(vec![c], s.into_iter().map(T::from_f64).collect())
}
