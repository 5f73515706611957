//! Slice-level kernels shared by the tape ops and the forward-only helpers.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (&[n, c, h, w], &[co, ci, kh, kw]) = (input, weight) else {
            return Err(Error::shape(
                "conv2d",
                "input/weight",
                format!("expected rank-4 input and weight, got {input:?} and {weight:?}"),
            ));
        };
        if stride == 0 {
            return Err(Error::Contract("conv2d: stride must be >= 1".into()));
        }
        if ci != c {
            return Err(Error::shape(
                "conv2d",
                "channels (input axis 1, weight axis 1)",
                format!("input has {c}, weight expects {ci}"),
            ));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::shape(
                "conv2d",
                "spatial (axes 2, 3)",
                format!("kernel {kh}x{kw} does not fit padded input {}x{}", h + 2 * padding, w + 2 * padding),
            ));
        }
        Ok(Self {
            batch: n,
            in_ch: c,
            in_h: h,
            in_w: w,
            out_ch: co,
            k_h: kh,
            k_w: kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.in_ch * self.k_h * self.k_w
    }

    pub fn out_positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinate read by kernel offset `k` at output coordinate `o`.
    #[inline]
    fn src(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let p = (o * self.stride + k) as isize - self.padding as isize;
        (p >= 0 && (p as usize) < limit).then_some(p as usize)
    }
}

/// Lays out every receptive field as a column: `[C*kh*kw, N*Ho*Wo]`.
pub fn im2col<T: Scalar>(input: &[T], g: &ConvGeometry) -> Vec<T> {
    let l = g.out_positions();
    let cols_w = g.batch * l;
    let mut cols = vec![T::zero(); g.patch_len() * cols_w];
    for n in 0..g.batch {
        for c in 0..g.in_ch {
            let plane = &input[(n * g.in_ch + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
            for ky in 0..g.k_h {
                for kx in 0..g.k_w {
                    let row = (c * g.k_h + ky) * g.k_w + kx;
                    let dst = &mut cols[row * cols_w + n * l..][..l];
                    for oy in 0..g.out_h {
                        let Some(iy) = g.src(oy, ky, g.in_h) else { continue };
                        for ox in 0..g.out_w {
                            if let Some(ix) = g.src(ox, kx, g.in_w) {
                                dst[oy * g.out_w + ox] = plane[iy * g.in_w + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input grid.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let l = g.out_positions();
    let cols_w = g.batch * l;
    let mut out = vec![T::zero(); g.batch * g.in_ch * g.in_h * g.in_w];
    for n in 0..g.batch {
        for c in 0..g.in_ch {
            let plane = &mut out[(n * g.in_ch + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
            for ky in 0..g.k_h {
                for kx in 0..g.k_w {
                    let row = (c * g.k_h + ky) * g.k_w + kx;
                    let src = &cols[row * cols_w + n * l..][..l];
                    for oy in 0..g.out_h {
                        let Some(iy) = g.src(oy, ky, g.in_h) else { continue };
                        for ox in 0..g.out_w {
                            if let Some(ix) = g.src(ox, kx, g.in_w) {
                                plane[iy * g.in_w + ix] += src[oy * g.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// `[Co, N*L]` (gemm layout) to `[N, Co, L]` (tensor layout).
pub fn channel_major_to_batch_major<T: Scalar>(src: &[T], batch: usize, ch: usize, l: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for c in 0..ch {
        for n in 0..batch {
            out[(n * ch + c) * l..][..l].copy_from_slice(&src[c * batch * l + n * l..][..l]);
        }
    }
    out
}

pub fn batch_major_to_channel_major<T: Scalar>(src: &[T], batch: usize, ch: usize, l: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for n in 0..batch {
        for c in 0..ch {
            out[c * batch * l + n * l..][..l].copy_from_slice(&src[(n * ch + c) * l..][..l]);
        }
    }
    out
}

/// Bilinear resize of the two trailing axes using half-pixel centers:
/// output pixel `i` samples source coordinate `(i + 0.5) * in / out - 0.5`,
/// clamped to the valid range.
pub fn bilinear_resize<T: Scalar>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Contract("bilinear_resize: output size must be >= 1".into()));
    }
    let nd = input.ndim();
    if nd < 2 {
        return Err(Error::shape("bilinear_resize", "input", "needs at least two axes"));
    }
    let (in_h, in_w) = (input.shape()[nd - 2], input.shape()[nd - 1]);
    if in_h == out_h && in_w == out_w {
        return Ok(input.clone());
    }
    let planes = input.numel() / (in_h * in_w);
    let ys = sample_axis(in_h, out_h);
    let xs = sample_axis(in_w, out_w);
    let mut data = Vec::with_capacity(planes * out_h * out_w);
    for p in 0..planes {
        let plane = &input.data()[p * in_h * in_w..][..in_h * in_w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = lerp(plane[y0 * in_w + x0], plane[y0 * in_w + x1], fx);
                let bottom = lerp(plane[y1 * in_w + x0], plane[y1 * in_w + x1], fx);
                data.push(lerp(top, bottom, fy));
            }
        }
    }
    let mut shape = input.shape().to_vec();
    shape[nd - 2] = out_h;
    shape[nd - 1] = out_w;
    Tensor::new(&shape, data)
}

#[inline]
fn lerp<T: Scalar>(a: T, b: T, t: T) -> T {
    if t == T::zero() {
        a
    } else {
        a * (T::one() - t) + b * t
    }
}

fn sample_axis<T: Scalar>(len_in: usize, len_out: usize) -> Vec<(usize, usize, T)> {
    let scale = len_in as f64 / len_out as f64;
    (0..len_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (len_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(len_in - 1);
            (i0, i1, T::lit(src - i0 as f64))
        })
        .collect()
}

/// Per-(batch, channel) spatial maximum and its first row-major argmax.
pub fn max_pool_planes<T: Scalar>(data: &[T], planes: usize, plane_len: usize) -> (Vec<T>, Vec<usize>) {
    let mut maxima = Vec::with_capacity(planes);
    let mut argmax = Vec::with_capacity(planes);
    for p in 0..planes {
        let plane = &data[p * plane_len..][..plane_len];
        let mut best = 0;
        for (i, &v) in plane.iter().enumerate().skip(1) {
            if v > plane[best] {
                best = i;
            }
        }
        maxima.push(plane[best]);
        argmax.push(p * plane_len + best);
    }
    (maxima, argmax)
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
