//! Patch extraction (im2col) and bilinear resampling on channels-last images.

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;

/// Sliding-window geometry of an unfold. Reads outside the input are zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PatchGeometry {
    /// Convolution-style geometry: `out = floor((in + 2p - k) / s) + 1`.
    pub fn conv(
        in_h: usize,
        in_w: usize,
        channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(dim_err("unfold", "kernel and stride must be >= 1"));
        }
        let span_h = in_h + 2 * pad;
        let span_w = in_w + 2 * pad;
        if span_h < kernel || span_w < kernel {
            return Err(dim_err(
                "unfold",
                format!(
                    "non-positive output size for input {in_h}x{in_w}, k={kernel}, s={stride}, p={pad}"
                ),
            ));
        }
        Ok(Self {
            in_h,
            in_w,
            channels,
            kernel,
            stride,
            pad_top: pad,
            pad_left: pad,
            out_h: (span_h - kernel) / stride + 1,
            out_w: (span_w - kernel) / stride + 1,
        })
    }

    /// Non-overlapping `r x r` blocks; the input is zero-padded at the bottom
    /// and right up to a multiple of `r`.
    pub fn blocks(in_h: usize, in_w: usize, channels: usize, r: usize) -> Result<Self> {
        if r == 0 || in_h == 0 || in_w == 0 {
            return Err(dim_err("unfold", "block size and input must be non-empty"));
        }
        Ok(Self {
            in_h,
            in_w,
            channels,
            kernel: r,
            stride: r,
            pad_top: 0,
            pad_left: 0,
            out_h: in_h.div_ceil(r),
            out_w: in_w.div_ceil(r),
        })
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w * self.patch_len()
    }

    /// Source row for output row `oy` and kernel row `ky`, if in bounds.
    #[inline]
    fn src(&self, o: usize, k: usize, pad: usize, limit: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(pad).filter(|&v| v < limit)
    }
}

/// Output layout `[out_h * out_w, k * k * c]`, patch entries ordered `(ky, kx, c)`.
pub(crate) fn unfold<T: Scalar>(x: &[T], g: &PatchGeometry, out: &mut [T]) {
    let c = g.channels;
    let mut idx = 0;
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            for ky in 0..g.kernel {
                let sy = g.src(oy, ky, g.pad_top, g.in_h);
                for kx in 0..g.kernel {
                    let dst = &mut out[idx..idx + c];
                    idx += c;
                    match (sy, g.src(ox, kx, g.pad_left, g.in_w)) {
                        (Some(sy), Some(sx)) => {
                            let s = (sy * g.in_w + sx) * c;
                            dst.copy_from_slice(&x[s..s + c]);
                        }
                        _ => dst.fill(T::ZERO),
                    }
                }
            }
        }
    }
}

pub(crate) fn unfold_backward<T: Scalar>(dy: &[T], g: &PatchGeometry, dx: &mut [T]) {
    let c = g.channels;
    let mut idx = 0;
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            for ky in 0..g.kernel {
                let sy = g.src(oy, ky, g.pad_top, g.in_h);
                for kx in 0..g.kernel {
                    if let (Some(sy), Some(sx)) = (sy, g.src(ox, kx, g.pad_left, g.in_w)) {
                        let s = (sy * g.in_w + sx) * c;
                        for (d, &v) in dx[s..s + c].iter_mut().zip(&dy[idx..idx + c]) {
                            *d += v;
                        }
                    }
                    idx += c;
                }
            }
        }
    }
}

/// Per-axis interpolation table for half-pixel (align-corners = false) resizing.
#[derive(Debug, Clone)]
pub(crate) struct AxisTaps<T> {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub w_hi: Vec<T>,
}

pub(crate) fn axis_taps<T: Scalar>(in_len: usize, out_len: usize) -> AxisTaps<T> {
    let scale = in_len as f64 / out_len as f64;
    let mut taps = AxisTaps {
        lo: Vec::with_capacity(out_len),
        hi: Vec::with_capacity(out_len),
        w_hi: Vec::with_capacity(out_len),
    };
    for o in 0..out_len {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(in_len - 1);
        let hi = (lo + 1).min(in_len - 1);
        taps.lo.push(lo);
        taps.hi.push(hi);
        taps.w_hi.push(T::from_f64(src - lo as f64));
    }
    taps
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResizeGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub channels: usize,
    pub out_h: usize,
    pub out_w: usize,
}

pub(crate) fn bilinear<T: Scalar>(x: &[T], g: &ResizeGeometry, out: &mut [T]) {
    let ty = axis_taps::<T>(g.in_h, g.out_h);
    let tx = axis_taps::<T>(g.in_w, g.out_w);
    let c = g.channels;
    for oy in 0..g.out_h {
        let (y0, y1, wy) = (ty.lo[oy], ty.hi[oy], ty.w_hi[oy]);
        for ox in 0..g.out_w {
            let (x0, x1, wx) = (tx.lo[ox], tx.hi[ox], tx.w_hi[ox]);
            let w00 = (T::ONE - wy) * (T::ONE - wx);
            let w01 = (T::ONE - wy) * wx;
            let w10 = wy * (T::ONE - wx);
            let w11 = wy * wx;
            let p00 = &x[(y0 * g.in_w + x0) * c..][..c];
            let p01 = &x[(y0 * g.in_w + x1) * c..][..c];
            let p10 = &x[(y1 * g.in_w + x0) * c..][..c];
            let p11 = &x[(y1 * g.in_w + x1) * c..][..c];
            let o = &mut out[(oy * g.out_w + ox) * c..][..c];
            for ch in 0..c {
                o[ch] = w00 * p00[ch] + w01 * p01[ch] + w10 * p10[ch] + w11 * p11[ch];
            }
        }
    }
}

pub(crate) fn bilinear_backward<T: Scalar>(dy: &[T], g: &ResizeGeometry, dx: &mut [T]) {
    let ty = axis_taps::<T>(g.in_h, g.out_h);
    let tx = axis_taps::<T>(g.in_w, g.out_w);
    let c = g.channels;
    for oy in 0..g.out_h {
        let (y0, y1, wy) = (ty.lo[oy], ty.hi[oy], ty.w_hi[oy]);
        for ox in 0..g.out_w {
            let (x0, x1, wx) = (tx.lo[ox], tx.hi[ox], tx.w_hi[ox]);
            let taps = [
                ((y0 * g.in_w + x0) * c, (T::ONE - wy) * (T::ONE - wx)),
                ((y0 * g.in_w + x1) * c, (T::ONE - wy) * wx),
                ((y1 * g.in_w + x0) * c, wy * (T::ONE - wx)),
                ((y1 * g.in_w + x1) * c, wy * wx),
            ];
            let g_out = &dy[(oy * g.out_w + ox) * c..][..c];
            for (base, w) in taps {
                for (d, &v) in dx[base..base + c].iter_mut().zip(g_out) {
                    *d += w * v;
                }
            }
        }
    }
}
