//! Low-level numeric kernels: 3D convolution with hand-derived backward pass,
//! pixel shuffle/unshuffle, pointwise activation and deterministic reductions.
//!
//! All kernels are deterministic: parallel paths split work into disjoint
//! output regions, each filled with a fixed accumulation order, so results are
//! bit-identical regardless of thread count.

use ndarray::{Array1, Array3, Array4, Array5, ArrayView1, ArrayView4, ArrayView5};
use num_traits::Float;
use rayon::prelude::*;

use crate::error::{Result, VigError};

/// Scalar element type for all tensors. `f32` is the training/
/// checkpoint precision, `f64` is used by the gradient-check oracles.
pub trait Elem:
    Float
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Elem for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Elem for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Work size (in multiply-accumulates) below which kernels stay serial.
const PAR_THRESHOLD: usize = 1 << 19;

#[inline]
fn axpy<T: Elem>(alpha: T, src: &[T], dst: &mut [T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + alpha * s;
    }
}

/// Dot product with eight striped accumulators; fixed reassociation order so
/// the result is reproducible and the loop vectorizes.
#[inline]
fn dot<T: Elem>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let mut acc = [T::zero(); 8];
    let chunks = n / 8;
    for k in 0..chunks {
        let i = k * 8;
        for (j, slot) in acc.iter_mut().enumerate() {
            *slot = *slot + a[i + j] * b[i + j];
        }
    }
    let mut s = T::zero();
    for slot in &acc {
        s = s + *slot;
    }
    for i in chunks * 8..n {
        s = s + a[i] * b[i];
    }
    s
}

/// Pairwise sum with a base case of two elements. For arrays whose length is a
/// power of two and whose elements are all equal this is exact in floating
/// point: every partial sum is the shared value times a power of two.
pub fn pairwise_sum<T: Elem>(v: &[T]) -> T {
    match v.len() {
        0 => T::zero(),
        1 => v[0],
        2 => v[0] + v[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
        }
    }
}

/// Valid output extent along one spatial axis.
#[inline]
fn out_extent(input: usize, k: usize, pad: usize) -> Option<usize> {
    (input + 2 * pad + 1).checked_sub(k)
}

struct ConvDims {
    t_in: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kt: usize,
    kh: usize,
    kw: usize,
    t_out: usize,
    h_out: usize,
    w_out: usize,
    pad: usize,
}

fn conv_dims<T: Elem>(x: &ArrayView4<T>, wgt: &ArrayView5<T>, pad: usize) -> Result<ConvDims> {
    let (t_in, c_in, h, w) = x.dim();
    let (c_out, c_in_w, kt, kh, kw) = wgt.dim();
    if c_in_w != c_in {
        return Err(VigError::shape(
            "conv3d input channels",
            format!("{c_in_w}"),
            format!("{c_in}"),
        ));
    }
    if t_in < kt {
        return Err(VigError::shape(
            "conv3d temporal extent",
            format!(">= {kt}"),
            format!("{t_in}"),
        ));
    }
    let h_out = out_extent(h, kh, pad).filter(|&v| v > 0).ok_or_else(|| {
        VigError::shape("conv3d height", format!(">= {}", kh.saturating_sub(2 * pad)), format!("{h}"))
    })?;
    let w_out = out_extent(w, kw, pad).filter(|&v| v > 0).ok_or_else(|| {
        VigError::shape("conv3d width", format!(">= {}", kw.saturating_sub(2 * pad)), format!("{w}"))
    })?;
    Ok(ConvDims {
        t_in,
        c_in,
        h,
        w,
        c_out,
        kt,
        kh,
        kw,
        t_out: t_in - kt + 1,
        h_out,
        w_out,
        pad,
    })
}

#[allow(clippy::too_many_arguments)]
fn conv3d_fill_plane<T: Elem>(plane: &mut [T], xs: &[T], ws: &[T], bias: T, to: usize, co: usize, d: &ConvDims) {
    plane.fill(bias);
    for dt in 0..d.kt {
        for ci in 0..d.c_in {
            let x_base = ((to + dt) * d.c_in + ci) * d.h * d.w;
            let w_base = (((co * d.c_in + ci) * d.kt + dt) * d.kh) * d.kw;
            for dy in 0..d.kh {
                let oy0 = d.pad.saturating_sub(dy);
                let oy1 = (d.h + d.pad).saturating_sub(dy).min(d.h_out);
                if oy0 >= oy1 {
                    continue;
                }
                for dx in 0..d.kw {
                    let wv = ws[w_base + dy * d.kw + dx];
                    let ox0 = d.pad.saturating_sub(dx);
                    let ox1 = (d.w + d.pad).saturating_sub(dx).min(d.w_out);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let run = ox1 - ox0;
                    let sx0 = ox0 + dx - d.pad;
                    if run == d.w && d.w_out == d.w {
                        // Full-width rows are contiguous in both buffers:
                        // fold the row loop into one long axpy.
                        let sy0 = oy0 + dy - d.pad;
                        let len = (oy1 - oy0) * d.w;
                        let src = &xs[x_base + sy0 * d.w..x_base + sy0 * d.w + len];
                        let dst = &mut plane[oy0 * d.w..oy0 * d.w + len];
                        axpy(wv, src, dst);
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let sy = oy + dy - d.pad;
                        let src = &xs[x_base + sy * d.w + sx0..x_base + sy * d.w + sx0 + run];
                        let dst = &mut plane[oy * d.w_out + ox0..oy * d.w_out + ox0 + run];
                        axpy(wv, src, dst);
                    }
                }
            }
        }
    }
}

/// 3D convolution: input `(T, C, H, W)`, weights `(Co, Ci, Kt, Kh, Kw)`.
/// Valid (no padding) along the temporal axis, zero padding of `pad` along
/// both spatial axes.
pub fn conv3d<T: Elem>(
    x: ArrayView4<T>,
    wgt: ArrayView5<T>,
    bias: ArrayView1<T>,
    pad: usize,
) -> Result<Array4<T>> {
    let d = conv_dims(&x, &wgt, pad)?;
    if bias.len() != d.c_out {
        return Err(VigError::shape("conv3d bias", format!("{}", d.c_out), format!("{}", bias.len())));
    }
    let xs = x.as_slice().expect("conv3d input must be contiguous");
    let ws = wgt.as_slice().expect("conv3d weights must be contiguous");
    let bs = bias.as_slice().expect("conv3d bias must be contiguous");

    let plane = d.h_out * d.w_out;
    let mut out = vec![T::zero(); d.t_out * d.c_out * plane];
    let work = d.t_out * d.c_out * plane * d.c_in * d.kt * d.kh * d.kw;

    let fill = |(p, chunk): (usize, &mut [T])| {
        let to = p / d.c_out;
        let co = p % d.c_out;
        conv3d_fill_plane(chunk, xs, ws, bs[co], to, co, &d);
    };
    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(plane).enumerate().for_each(fill);
    } else {
        out.chunks_mut(plane).enumerate().for_each(fill);
    }
    Ok(Array4::from_shape_vec((d.t_out, d.c_out, d.h_out, d.w_out), out).expect("conv3d output shape"))
}

/// Gradients of [`conv3d`] with respect to input, weights and bias.
pub fn conv3d_backward<T: Elem>(
    x: ArrayView4<T>,
    wgt: ArrayView5<T>,
    grad_out: &Array4<T>,
    pad: usize,
) -> Result<(Array4<T>, Array5<T>, Array1<T>)> {
    let d = conv_dims(&x, &wgt, pad)?;
    let go_dim = grad_out.dim();
    if go_dim != (d.t_out, d.c_out, d.h_out, d.w_out) {
        return Err(VigError::shape(
            "conv3d grad_out",
            format!("{:?}", (d.t_out, d.c_out, d.h_out, d.w_out)),
            format!("{go_dim:?}"),
        ));
    }
    let xs = x.as_slice().expect("conv3d input must be contiguous");
    let ws = wgt.as_slice().expect("conv3d weights must be contiguous");
    let gos = grad_out.as_slice().expect("conv3d grad_out must be contiguous");

    let out_plane = d.h_out * d.w_out;
    let work = d.t_out * d.c_out * out_plane * d.c_in * d.kt * d.kh * d.kw;
    let parallel = work >= PAR_THRESHOLD;

    // Bias gradient: sum of grad_out over (t, y, x) per output channel.
    let mut grad_b = Array1::zeros(d.c_out);
    for to in 0..d.t_out {
        for co in 0..d.c_out {
            let base = (to * d.c_out + co) * out_plane;
            grad_b[co] = grad_b[co] + pairwise_sum(&gos[base..base + out_plane]);
        }
    }

    // Weight gradient: one task per output channel.
    let w_stride = d.c_in * d.kt * d.kh * d.kw;
    let mut grad_w = vec![T::zero(); d.c_out * w_stride];
    let fill_w = |(co, chunk): (usize, &mut [T])| {
        for ci in 0..d.c_in {
            for dt in 0..d.kt {
                for dy in 0..d.kh {
                    let oy0 = d.pad.saturating_sub(dy);
                    let oy1 = (d.h + d.pad).saturating_sub(dy).min(d.h_out);
                    if oy0 >= oy1 {
                        continue;
                    }
                    for dx in 0..d.kw {
                        let ox0 = d.pad.saturating_sub(dx);
                        let ox1 = (d.w + d.pad).saturating_sub(dx).min(d.w_out);
                        if ox0 >= ox1 {
                            continue;
                        }
                        let run = ox1 - ox0;
                        let sx0 = ox0 + dx - d.pad;
                        let merged = run == d.w && d.w_out == d.w;
                        let mut acc = T::zero();
                        for to in 0..d.t_out {
                            let go_base = (to * d.c_out + co) * out_plane;
                            let x_base = ((to + dt) * d.c_in + ci) * d.h * d.w;
                            if merged {
                                let sy0 = oy0 + dy - d.pad;
                                let len = (oy1 - oy0) * d.w;
                                let g = &gos[go_base + oy0 * d.w..go_base + oy0 * d.w + len];
                                let xv = &xs[x_base + sy0 * d.w..x_base + sy0 * d.w + len];
                                acc = acc + dot(g, xv);
                                continue;
                            }
                            for oy in oy0..oy1 {
                                let sy = oy + dy - d.pad;
                                let g = &gos[go_base + oy * d.w_out + ox0..go_base + oy * d.w_out + ox0 + run];
                                let xv = &xs[x_base + sy * d.w + sx0..x_base + sy * d.w + sx0 + run];
                                acc = acc + dot(g, xv);
                            }
                        }
                        chunk[((ci * d.kt + dt) * d.kh + dy) * d.kw + dx] = acc;
                    }
                }
            }
        }
    };
    if parallel {
        grad_w.par_chunks_mut(w_stride).enumerate().for_each(fill_w);
    } else {
        grad_w.chunks_mut(w_stride).enumerate().for_each(fill_w);
    }

    // Input gradient, accumulated channel-major so tasks own disjoint chunks,
    // then transposed back to (T, C, H, W).
    let in_plane = d.h * d.w;
    let mut gxt = vec![T::zero(); d.c_in * d.t_in * in_plane];
    let fill_x = |(ci, chunk): (usize, &mut [T])| {
        for to in 0..d.t_out {
            for co in 0..d.c_out {
                let go_base = (to * d.c_out + co) * out_plane;
                for dt in 0..d.kt {
                    let t_base = (to + dt) * in_plane;
                    let w_base = (((co * d.c_in + ci) * d.kt + dt) * d.kh) * d.kw;
                    for dy in 0..d.kh {
                        let oy0 = d.pad.saturating_sub(dy);
                        let oy1 = (d.h + d.pad).saturating_sub(dy).min(d.h_out);
                        if oy0 >= oy1 {
                            continue;
                        }
                        for dx in 0..d.kw {
                            let wv = ws[w_base + dy * d.kw + dx];
                            let ox0 = d.pad.saturating_sub(dx);
                            let ox1 = (d.w + d.pad).saturating_sub(dx).min(d.w_out);
                            if ox0 >= ox1 {
                                continue;
                            }
                            let run = ox1 - ox0;
                            let sx0 = ox0 + dx - d.pad;
                            for oy in oy0..oy1 {
                                let sy = oy + dy - d.pad;
                                let src = &gos[go_base + oy * d.w_out + ox0..go_base + oy * d.w_out + ox0 + run];
                                let dst = &mut chunk[t_base + sy * d.w + sx0..t_base + sy * d.w + sx0 + run];
                                axpy(wv, src, dst);
                            }
                        }
                    }
                }
            }
        }
    };
    if parallel {
        gxt.par_chunks_mut(d.t_in * in_plane).enumerate().for_each(fill_x);
    } else {
        gxt.chunks_mut(d.t_in * in_plane).enumerate().for_each(fill_x);
    }

    let gxt = Array4::from_shape_vec((d.c_in, d.t_in, d.h, d.w), gxt).expect("grad_x shape");
    let grad_x = gxt.permuted_axes([1, 0, 2, 3]).as_standard_layout().into_owned();
    let grad_w = Array5::from_shape_vec((d.c_out, d.c_in, d.kt, d.kh, d.kw), grad_w).expect("grad_w shape");
    Ok((grad_x, grad_w, grad_b))
}

/// Leaky rectifier, slope applied to negative inputs.
pub fn leaky_relu<T: Elem>(x: &Array4<T>, slope: T) -> Array4<T> {
    x.mapv(|v| if v >= T::zero() { v } else { slope * v })
}

/// Backward pass of [`leaky_relu`]; `x` is the pre-activation input.
pub fn leaky_relu_backward<T: Elem>(x: &Array4<T>, grad_out: &Array4<T>, slope: T) -> Array4<T> {
    let mut g = grad_out.clone();
    g.zip_mut_with(x, |gv, &xv| {
        if xv < T::zero() {
            *gv = *gv * slope;
        }
    });
    g
}

/// Space-to-depth: `(C, H, W)` to `(C*f*f, H/f, W/f)`. Pure rearrangement.
pub fn pixel_unshuffle3<T: Elem>(x: &Array3<T>, f: usize) -> Result<Array3<T>> {
    let (c, h, w) = x.dim();
    if f == 0 || h % f != 0 {
        return Err(VigError::divisibility("pixel_unshuffle height", h, f));
    }
    if w % f != 0 {
        return Err(VigError::divisibility("pixel_unshuffle width", w, f));
    }
    let (ho, wo) = (h / f, w / f);
    let mut out = Array3::zeros((c * f * f, ho, wo));
    for ci in 0..c {
        for fy in 0..f {
            for fx in 0..f {
                let co = ci * f * f + fy * f + fx;
                for y in 0..ho {
                    for x_ in 0..wo {
                        out[[co, y, x_]] = x[[ci, y * f + fy, x_ * f + fx]];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Depth-to-space: `(C*f*f, H, W)` to `(C, H*f, W*f)`. Exact inverse of
/// [`pixel_unshuffle3`].
pub fn pixel_shuffle3<T: Elem>(x: &Array3<T>, f: usize) -> Result<Array3<T>> {
    let (c, h, w) = x.dim();
    if f == 0 || c % (f * f) != 0 {
        return Err(VigError::divisibility("pixel_shuffle channels", c, f * f));
    }
    let co_n = c / (f * f);
    let mut out = Array3::zeros((co_n, h * f, w * f));
    for co in 0..co_n {
        for fy in 0..f {
            for fx in 0..f {
                let ci = co * f * f + fy * f + fx;
                for y in 0..h {
                    for x_ in 0..w {
                        out[[co, y * f + fy, x_ * f + fx]] = x[[ci, y, x_]];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Per-frame space-to-depth over a `(T, C, H, W)` stack.
pub fn pixel_unshuffle4<T: Elem>(x: &Array4<T>, f: usize) -> Result<Array4<T>> {
    let (t, c, h, w) = x.dim();
    if f == 0 || h % f != 0 {
        return Err(VigError::divisibility("pixel_unshuffle height", h, f));
    }
    if w % f != 0 {
        return Err(VigError::divisibility("pixel_unshuffle width", w, f));
    }
    let (ho, wo) = (h / f, w / f);
    let mut out = Array4::zeros((t, c * f * f, ho, wo));
    for ti in 0..t {
        let frame = pixel_unshuffle3(&x.index_axis(ndarray::Axis(0), ti).to_owned(), f)?;
        out.index_axis_mut(ndarray::Axis(0), ti).assign(&frame);
    }
    Ok(out)
}

/// Per-frame depth-to-space over a `(T, C, H, W)` stack.
pub fn pixel_shuffle4<T: Elem>(x: &Array4<T>, f: usize) -> Result<Array4<T>> {
    let (t, c, h, w) = x.dim();
    if f == 0 || c % (f * f) != 0 {
        return Err(VigError::divisibility("pixel_shuffle channels", c, f * f));
    }
    let mut out = Array4::zeros((t, c / (f * f), h * f, w * f));
    for ti in 0..t {
        let frame = pixel_shuffle3(&x.index_axis(ndarray::Axis(0), ti).to_owned(), f)?;
        out.index_axis_mut(ndarray::Axis(0), ti).assign(&frame);
    }
    Ok(out)
}

/// Mean over the temporal axis: `(T, C, H, W)` to `(C, H, W)`.
pub fn temporal_mean_pool<T: Elem>(x: &Array4<T>) -> Array3<T> {
    let (t, c, h, w) = x.dim();
    let inv = T::from_f64(1.0 / t as f64);
    let mut out = Array3::zeros((c, h, w));
    for ti in 0..t {
        out.zip_mut_with(&x.index_axis(ndarray::Axis(0), ti), |o, &v| *o = *o + v);
    }
    out.mapv_inplace(|v| v * inv);
    out
}

/// Backward pass of [`temporal_mean_pool`]: broadcast `grad / T` over time.
pub fn temporal_mean_pool_backward<T: Elem>(grad_out: &Array3<T>, t: usize) -> Array4<T> {
    let (c, h, w) = grad_out.dim();
    let inv = T::from_f64(1.0 / t as f64);
    let mut out = Array4::zeros((t, c, h, w));
    for ti in 0..t {
        out.index_axis_mut(ndarray::Axis(0), ti)
            .assign(&grad_out.mapv(|v| v * inv));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng;

    fn random4(rng: &mut impl Rng, dim: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_fn(dim, |_| rng.gen_range(-1.0..1.0))
    }

    fn random5(rng: &mut impl Rng, dim: (usize, usize, usize, usize, usize)) -> Array5<f64> {
        Array5::from_shape_fn(dim, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct seven-loop convolution, the independent oracle for `conv3d`.
    fn naive_conv3d(x: &Array4<f64>, w: &Array5<f64>, b: &Array1<f64>, pad: usize) -> Array4<f64> {
        let (t_in, c_in, h, wd) = x.dim();
        let (c_out, _, kt, kh, kw) = w.dim();
        let t_out = t_in - kt + 1;
        let h_out = h + 2 * pad + 1 - kh;
        let w_out = wd + 2 * pad + 1 - kw;
        let mut out = Array4::zeros((t_out, c_out, h_out, w_out));
        for to in 0..t_out {
            for co in 0..c_out {
                for oy in 0..h_out {
                    for ox in 0..w_out {
                        let mut acc = b[co];
                        for ci in 0..c_in {
                            for dt in 0..kt {
                                for dy in 0..kh {
                                    for dx in 0..kw {
                                        let sy = oy + dy;
                                        let sx = ox + dx;
                                        if sy < pad || sx < pad {
                                            continue;
                                        }
                                        let (sy, sx) = (sy - pad, sx - pad);
                                        if sy >= h || sx >= wd {
                                            continue;
                                        }
                                        acc += x[[to + dt, ci, sy, sx]] * w[[co, ci, dt, dy, dx]];
                                    }
                                }
                            }
                        }
                        out[[to, co, oy, ox]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv3d_matches_naive_oracle() {
        for (seed, dim, kdim, pad) in [
            (1u64, (5, 3, 8, 8), (4, 3, 2, 3, 3), 1),
            (2, (3, 2, 6, 10), (5, 2, 3, 1, 1), 0),
            (3, (2, 4, 4, 4), (2, 4, 2, 3, 3), 1),
            (4, (1, 1, 7, 5), (3, 1, 1, 3, 3), 1),
        ] {
            let mut rng = rng_from(seed);
            let x = random4(&mut rng, dim);
            let w = random5(&mut rng, kdim);
            let b = Array1::from_shape_fn(kdim.0, |_| rng.gen_range(-1.0..1.0));
            let fast = conv3d(x.view(), w.view(), b.view(), pad).unwrap();
            let slow = naive_conv3d(&x, &w, &b, pad);
            let max = fast
                .iter()
                .zip(slow.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max < 1e-12, "seed {seed}: max abs diff {max}");
        }
    }

    #[test]
    fn conv3d_gradients_match_finite_differences() {
        let step = 1e-5;
        for seed in [10u64, 11, 12] {
            let mut rng = rng_from(seed);
            let x = random4(&mut rng, (3, 2, 6, 6));
            let w = random5(&mut rng, (3, 2, 2, 3, 3));
            let b = Array1::from_shape_fn(3, |_| rng.gen_range(-1.0..1.0));
            // Loss: weighted sum of outputs with fixed random coefficients.
            let out = conv3d(x.view(), w.view(), b.view(), 1).unwrap();
            let coeffs = random4(&mut rng, out.dim());
            let (gx, gw, gb) = conv3d_backward(x.view(), w.view(), &coeffs, 1).unwrap();

            let loss = |x: &Array4<f64>, w: &Array5<f64>, b: &Array1<f64>| -> f64 {
                (&conv3d(x.view(), w.view(), b.view(), 1).unwrap() * &coeffs).sum()
            };
            let mut check = |analytic: f64, plus: f64, minus: f64, what: &str| {
                let numeric = (plus - minus) / (2.0 * step);
                let denom = analytic.abs().max(numeric.abs()).max(1e-8);
                let rel = (analytic - numeric).abs() / denom;
                assert!(rel < 1e-6, "{what}: rel err {rel}");
            };
            // Spot-check a deterministic subset of coordinates in each tensor.
            for k in 0..8 {
                let (i0, i1, i2, i3) = (k % 3, (k + 1) % 2, k % 6, (k * 2) % 6);
                let mut xp = x.clone();
                xp[[i0, i1, i2, i3]] += step;
                let mut xm = x.clone();
                xm[[i0, i1, i2, i3]] -= step;
                check(gx[[i0, i1, i2, i3]], loss(&xp, &w, &b), loss(&xm, &w, &b), "grad_x");

                let (j0, j1, j2, j3, j4) = (k % 3, k % 2, k % 2, k % 3, (k + 1) % 3);
                let mut wp = w.clone();
                wp[[j0, j1, j2, j3, j4]] += step;
                let mut wm = w.clone();
                wm[[j0, j1, j2, j3, j4]] -= step;
                check(gw[[j0, j1, j2, j3, j4]], loss(&x, &wp, &b), loss(&x, &wm, &b), "grad_w");

                let mut bp = b.clone();
                bp[k % 3] += step;
                let mut bm = b.clone();
                bm[k % 3] -= step;
                check(gb[k % 3], loss(&x, &w, &bp), loss(&x, &w, &bm), "grad_b");
            }
        }
    }

    #[test]
    fn leaky_relu_gradient_away_from_kink() {
        let mut rng = rng_from(5);
        // Keep magnitudes above the FD step so the kink is never crossed.
        let x = Array4::from_shape_fn((2, 2, 3, 3), |_| {
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        });
        let coeffs = random4(&mut rng, x.dim());
        let g = leaky_relu_backward(&x, &coeffs, 0.1);
        let step = 1e-5;
        for idx in [(0, 0, 0, 0), (1, 1, 2, 2), (0, 1, 1, 0)] {
            let mut xp = x.clone();
            xp[idx] += step;
            let mut xm = x.clone();
            xm[idx] -= step;
            let lp = (&leaky_relu(&xp, 0.1) * &coeffs).sum();
            let lm = (&leaky_relu(&xm, 0.1) * &coeffs).sum();
            let numeric = (lp - lm) / (2.0 * step);
            assert!((g[idx] - numeric).abs() < 1e-9);
        }
    }

    #[test]
    fn shuffle_round_trip_is_identity() {
        for seed in 0..20u64 {
            let mut rng = rng_from(seed);
            let c = rng.gen_range(1..4usize);
            let f = *[2usize, 4].get(rng.gen_range(0..2)).unwrap();
            let h = f * rng.gen_range(1..5usize);
            let w = f * rng.gen_range(1..5usize);
            let x = Array3::from_shape_fn((c, h, w), |_| rng.gen_range(-1.0..1.0f64));
            let back = pixel_shuffle3(&pixel_unshuffle3(&x, f).unwrap(), f).unwrap();
            assert_eq!(x, back, "seed {seed}");
        }
    }

    #[test]
    fn unshuffle_shapes_and_value_preservation() {
        let x = Array3::from_shape_fn((1, 4, 4), |(_, y, x)| (y * 4 + x) as f64);
        let u = pixel_unshuffle3(&x, 2).unwrap();
        assert_eq!(u.dim(), (4, 2, 2));
        let mut a: Vec<f64> = x.iter().copied().collect();
        let mut b: Vec<f64> = u.iter().copied().collect();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
        // Constant input stays constant.
        let c = Array3::from_elem((2, 6, 6), 0.25);
        assert!(pixel_unshuffle3(&c, 2).unwrap().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn unshuffle_rejects_indivisible() {
        let x = Array3::<f64>::zeros((1, 5, 4));
        assert!(matches!(
            pixel_unshuffle3(&x, 2),
            Err(VigError::Divisibility { .. })
        ));
        let y = Array3::<f64>::zeros((3, 4, 4));
        assert!(matches!(
            pixel_shuffle3(&y, 2),
            Err(VigError::Divisibility { .. })
        ));
    }

    #[test]
    fn mean_pool_backward_matches_finite_differences() {
        let mut rng = rng_from(42);
        let x = random4(&mut rng, (3, 2, 4, 4));
        let coeffs = Array3::from_shape_fn((2, 4, 4), |_| rng.gen_range(-1.0..1.0));
        let g = temporal_mean_pool_backward(&coeffs, 3);
        let step = 1e-5;
        for idx in [(0, 0, 0, 0), (1, 1, 2, 3), (2, 0, 3, 1)] {
            let mut xp = x.clone();
            xp[idx] += step;
            let mut xm = x.clone();
            xm[idx] -= step;
            let lp = (&temporal_mean_pool(&xp) * &coeffs).sum();
            let lm = (&temporal_mean_pool(&xm) * &coeffs).sum();
            let numeric = (lp - lm) / (2.0 * step);
            assert!((g[idx] - numeric).abs() < 1e-9);
        }
    }

    #[test]
    fn pairwise_sum_of_equal_values_is_exact_for_pow2() {
        let v = vec![1e-3f64; 16384];
        assert_eq!(pairwise_sum(&v) / 16384.0, 1e-3);
        let v32 = vec![1e-3f32; 4096];
        assert_eq!(pairwise_sum(&v32) / 4096.0, 1e-3f32);
    }
}
