//! Raw array kernels used by the graph primitives. Everything here works on
//! flat row-major slices; shape checking happens in the callers.

use super::tensor::Real;

/// `c (m×n) (+)= a (m×k) · b (k×n)`, all dense row-major. `ta`/`tb` read the
/// stored operand as its transpose (the stored matrix is then k×m / n×k).
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: slice lengths were checked against the declared dimensions and
    // `c` is a distinct mutable borrow.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        Some(Self {
            c_in,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            h_out: (h + 2 * pad - kh) / stride + 1,
            w_out: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds channels `[c0, c0+cg)` of one CHW image into a
/// `(cg·kh·kw) × (h_out·w_out)` column matrix.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom, c0: usize, cg: usize, cols: &mut [T]) {
    let plane = g.h * g.w;
    let out_plane = g.h_out * g.w_out;
    for ci in 0..cg {
        let src = &x[(c0 + ci) * plane..(c0 + ci + 1) * plane];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (ci * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * out_plane..(row + 1) * out_plane];
                for oh in 0..g.h_out {
                    let ih = (oh * g.stride + i) as isize - g.pad as isize;
                    let line = &mut dst[oh * g.w_out..(oh + 1) * g.w_out];
                    if ih < 0 || ih >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let srow = &src[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, v) in line.iter_mut().enumerate() {
                        let iw = (ow * g.stride + j) as isize - g.pad as isize;
                        *v = if iw < 0 || iw >= g.w as isize {
                            T::zero()
                        } else {
                            srow[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a column matrix back onto the image.
pub(crate) fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, c0: usize, cg: usize, dx: &mut [T]) {
    let plane = g.h * g.w;
    let out_plane = g.h_out * g.w_out;
    for ci in 0..cg {
        let dst = &mut dx[(c0 + ci) * plane..(c0 + ci + 1) * plane];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (ci * g.kh + i) * g.kw + j;
                let src = &cols[row * out_plane..(row + 1) * out_plane];
                for oh in 0..g.h_out {
                    let ih = (oh * g.stride + i) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dst[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..g.w_out {
                        let iw = (ow * g.stride + j) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            drow[iw as usize] += src[oh * g.w_out + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `[lo, hi)` whose input column `ow·stride + tap - pad`
/// lies inside `[0, extent)`.
#[inline]
fn valid_range(tap: usize, pad: usize, stride: usize, extent: usize, out: usize) -> (usize, usize) {
    let lo = if pad > tap { (pad - tap).div_ceil(stride) } else { 0 };
    let hi = if extent + pad > tap {
        ((extent - 1 + pad - tap) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Depthwise convolution of one CHW image, one filter per channel.
pub(crate) fn depthwise_forward<T: Real>(x: &[T], w: &[T], g: &ConvGeom, out: &mut [T]) {
    let plane = g.h * g.w;
    let out_plane = g.h_out * g.w_out;
    let kk = g.kh * g.kw;
    for c in 0..g.c_in {
        let src = &x[c * plane..(c + 1) * plane];
        let filt = &w[c * kk..(c + 1) * kk];
        let dst = &mut out[c * out_plane..(c + 1) * out_plane];
        dst.iter_mut().for_each(|v| *v = T::zero());
        for i in 0..g.kh {
            let (oh_lo, oh_hi) = valid_range(i, g.pad, g.stride, g.h, g.h_out);
            for j in 0..g.kw {
                let f = filt[i * g.kw + j];
                let (ow_lo, ow_hi) = valid_range(j, g.pad, g.stride, g.w, g.w_out);
                if ow_lo >= ow_hi {
                    continue;
                }
                let n = ow_hi - ow_lo;
                for oh in oh_lo..oh_hi {
                    let ih = oh * g.stride + i - g.pad;
                    let iw0 = ow_lo * g.stride + j - g.pad;
                    let srow = &src[ih * g.w..(ih + 1) * g.w];
                    let drow = &mut dst[oh * g.w_out + ow_lo..oh * g.w_out + ow_hi];
                    if g.stride == 1 {
                        for (d, &sv) in drow.iter_mut().zip(&srow[iw0..iw0 + n]) {
                            *d += f * sv;
                        }
                    } else {
                        for (k, d) in drow.iter_mut().enumerate() {
                            *d += f * srow[iw0 + k * g.stride];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn depthwise_backward<T: Real>(
    x: &[T],
    w: &[T],
    g: &ConvGeom,
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let plane = g.h * g.w;
    let out_plane = g.h_out * g.w_out;
    let kk = g.kh * g.kw;
    // Per-column partial sums of a tap's weight gradient; reduced once per tap.
    let mut acc = vec![T::zero(); g.w_out];
    for c in 0..g.c_in {
        let src = &x[c * plane..(c + 1) * plane];
        let filt = &w[c * kk..(c + 1) * kk];
        let gout = &dout[c * out_plane..(c + 1) * out_plane];
        for i in 0..g.kh {
            let (oh_lo, oh_hi) = valid_range(i, g.pad, g.stride, g.h, g.h_out);
            for j in 0..g.kw {
                let f = filt[i * g.kw + j];
                let (ow_lo, ow_hi) = valid_range(j, g.pad, g.stride, g.w, g.w_out);
                if ow_lo >= ow_hi {
                    continue;
                }
                let n = ow_hi - ow_lo;
                let acc = &mut acc[..n];
                acc.iter_mut().for_each(|v| *v = T::zero());
                for oh in oh_lo..oh_hi {
                    let ih = oh * g.stride + i - g.pad;
                    let iw0 = ow_lo * g.stride + j - g.pad;
                    let grow = &gout[oh * g.w_out + ow_lo..oh * g.w_out + ow_hi];
                    if g.stride == 1 {
                        let srow = &src[ih * g.w + iw0..ih * g.w + iw0 + n];
                        for ((a, &gv), &sv) in acc.iter_mut().zip(grow).zip(srow) {
                            *a += gv * sv;
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            let drow = &mut dx[c * plane + ih * g.w + iw0..c * plane + ih * g.w + iw0 + n];
                            for (d, &gv) in drow.iter_mut().zip(grow) {
                                *d += f * gv;
                            }
                        }
                    } else {
                        let base = ih * g.w + iw0;
                        for (k, (a, &gv)) in acc.iter_mut().zip(grow).enumerate() {
                            *a += gv * src[base + k * g.stride];
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            let drow = &mut dx[c * plane..(c + 1) * plane];
                            for (k, &gv) in grow.iter().enumerate() {
                                drow[base + k * g.stride] += f * gv;
                            }
                        }
                    }
                }
                if let Some(dw) = dw.as_deref_mut() {
                    dw[c * kk + i * g.kw + j] += acc.iter().copied().sum::<T>();
                }
            }
        }
    }
}

/// General axis permutation: `out` has shape `shape[perm[i]]` along axis `i`.
pub(crate) fn permute<T: Real>(x: &[T], shape: &[usize], perm: &[usize], out: &mut [T]) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    if rank == 0 || x.is_empty() {
        return;
    }
    // Innermost output axis is copied as a strided run.
    let last = rank - 1;
    let run = out_shape[last];
    let run_stride = src_strides[last];
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    let mut o = 0;
    while o < out.len() {
        let mut s = offset;
        for v in &mut out[o..o + run] {
            *v = x[s];
            s += run_stride;
        }
        o += run;
        // Advance the multi-index over the outer axes.
        let mut ax = last;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

pub(crate) fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu<T: Real>(x: T) -> T {
    let k = T::c(GELU_K);
    let c = T::c(GELU_C);
    let half = T::c(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh_fast())
}

#[inline]
pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::c(GELU_K);
    let c = T::c(GELU_C);
    let half = T::c(0.5);
    let t = (k * (x + c * x * x * x)).tanh_fast();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::c(3.0) * c * x * x)
}

#[inline]
pub(crate) fn huber<T: Real>(d: T) -> T {
    let a = d.abs();
    if a < T::one() {
        T::c(0.5) * d * d
    } else {
        a - T::c(0.5)
    }
}

#[inline]
pub(crate) fn huber_grad<T: Real>(d: T) -> T {
    if d.abs() < T::one() {
        d
    } else {
        d.signum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_matches_index_formula() {
        let shape = [2usize, 3, 4];
        let x: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let perm = [2usize, 0, 1];
        let mut out = vec![0.0; 24];
        permute(&x, &shape, &perm, &mut out);
        for a in 0..4 {
            for b in 0..2 {
                for c in 0..3 {
                    let src = b * 12 + c * 4 + a;
                    assert_eq!(out[(a * 2 + b) * 3 + c], x[src]);
                }
            }
        }
    }

    #[test]
    fn fast_tanh_tracks_libm() {
        let mut worst = 0.0f32;
        for i in -20_000..=20_000 {
            let x = i as f32 * 5e-4;
            worst = worst.max((x.tanh_fast() - x.tanh()).abs());
        }
        assert!(worst < 2e-6, "max error {worst}");
        assert_eq!(100.0f32.tanh_fast(), 1.0);
    }

    #[test]
    fn gelu_grad_matches_difference_quotient() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }
}
