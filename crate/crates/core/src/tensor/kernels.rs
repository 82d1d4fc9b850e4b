//! Dense kernels shared by the graph ops.

use super::Float;

/// Strided matrix view: `(row stride, column stride)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    pub fn row_major(cols: usize) -> Self {
        Self { rs: cols, cs: 1 }
    }

    /// Row-major `[cols, rows]` storage read as its transpose.
    pub fn transposed(stored_cols: usize) -> Self {
        Self { rs: 1, cs: stored_cols }
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.rs + (cols - 1) * self.cs
        }
    }
}

/// `c[m×n] = alpha · a[m×k] · b[k×n] + beta · c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<F: Float>(
    m: usize,
    k: usize,
    n: usize,
    alpha: F,
    a: &[F],
    la: Layout,
    b: &[F],
    lb: Layout,
    beta: F,
    c: &mut [F],
    lc: Layout,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = i * lc.rs + j * lc.cs;
                c[idx] = if beta == F::zero() { F::zero() } else { beta * c[idx] };
            }
        }
        return;
    }
    assert!(la.last_index(m, k) < a.len(), "gemm: lhs out of bounds");
    assert!(lb.last_index(k, n) < b.len(), "gemm: rhs out of bounds");
    assert!(lc.last_index(m, n) < c.len(), "gemm: output out of bounds");
    // SAFETY: the asserts above bound every reachable index of all three views.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr(),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr(),
            lc.rs as isize,
            lc.cs as isize,
        );
    }
}

/// Geometry of a 2-D convolution over one NCHW sample.
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

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.h_out * self.w_out
    }

    /// True when the columns matrix is the input itself.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfold one sample `[C, H, W]` into `[C·kh·kw, H_out·W_out]`.
pub(crate) fn im2col<F: Float>(x: &[F], g: &ConvGeom, cols: &mut [F]) {
    let p = g.out_pixels();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(F::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { F::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate columns back into `[C, H, W]`.
pub(crate) fn col2im_add<F: Float>(cols: &[F], g: &ConvGeom, x: &mut [F]) {
    let p = g.out_pixels();
    for c in 0..g.c_in {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Two-tap linear interpolation weights for one axis, half-pixel centers
/// (the `align_corners = false` convention).
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct AxisTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub w_hi: Vec<f64>,
}

impl AxisTaps {
    pub fn new(n_in: usize, n_out: usize) -> Self {
        let scale = n_in as f64 / n_out as f64;
        let mut lo = Vec::with_capacity(n_out);
        let mut hi = Vec::with_capacity(n_out);
        let mut w_hi = Vec::with_capacity(n_out);
        for o in 0..n_out {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            lo.push(i0);
            hi.push(i1);
            w_hi.push(if i1 == i0 { 0.0 } else { src - i0 as f64 });
        }
        Self { lo, hi, w_hi }
    }
}

/// Bilinear resize of `planes` stacked `[h_in, w_in]` planes.
pub(crate) fn resize_planes<F: Float>(
    x: &[F],
    planes: usize,
    (h_in, w_in): (usize, usize),
    ty: &AxisTaps,
    tx: &AxisTaps,
) -> Vec<F> {
    let (h_out, w_out) = (ty.lo.len(), tx.lo.len());
    let mut out = vec![F::zero(); planes * h_out * w_out];
    for p in 0..planes {
        let src = &x[p * h_in * w_in..(p + 1) * h_in * w_in];
        let dst = &mut out[p * h_out * w_out..(p + 1) * h_out * w_out];
        for oy in 0..h_out {
            let wy = F::of(ty.w_hi[oy]);
            let r0 = &src[ty.lo[oy] * w_in..(ty.lo[oy] + 1) * w_in];
            let r1 = &src[ty.hi[oy] * w_in..(ty.hi[oy] + 1) * w_in];
            for ox in 0..w_out {
                let wx = F::of(tx.w_hi[ox]);
                let (a, b) = (tx.lo[ox], tx.hi[ox]);
                let top = r0[a] + (r0[b] - r0[a]) * wx;
                let bot = r1[a] + (r1[b] - r1[a]) * wx;
                dst[oy * w_out + ox] = top + (bot - top) * wy;
            }
        }
    }
    out
}

/// Adjoint of [`resize_planes`].
pub(crate) fn resize_planes_backward<F: Float>(
    dy: &[F],
    planes: usize,
    (h_in, w_in): (usize, usize),
    ty: &AxisTaps,
    tx: &AxisTaps,
    dx: &mut [F],
) {
    let (h_out, w_out) = (ty.lo.len(), tx.lo.len());
    let one = F::one();
    for p in 0..planes {
        let src = &dy[p * h_out * w_out..(p + 1) * h_out * w_out];
        let dst = &mut dx[p * h_in * w_in..(p + 1) * h_in * w_in];
        for oy in 0..h_out {
            let wy = F::of(ty.w_hi[oy]);
            let (y0, y1) = (ty.lo[oy], ty.hi[oy]);
            for ox in 0..w_out {
                let wx = F::of(tx.w_hi[ox]);
                let (x0, x1) = (tx.lo[ox], tx.hi[ox]);
                let g = src[oy * w_out + ox];
                dst[y0 * w_in + x0] += g * (one - wy) * (one - wx);
                dst[y0 * w_in + x1] += g * (one - wy) * wx;
                dst[y1 * w_in + x0] += g * wy * (one - wx);
                dst[y1 * w_in + x1] += g * wy * wx;
            }
        }
    }
}

/// Logistic function, evaluated without overflow for large `|x|`.
pub(crate) fn sigmoid<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// `log(1 + exp(x))` without overflow.
pub(crate) fn softplus<F: Float>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}
