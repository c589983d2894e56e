//! Dense kernels: GEMM wrapper, im2col convolution, batch norm, pooling.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive};

/// Real scalar the network can run in.
pub trait Scalar: Float + FromPrimitive + Debug + Default + Send + Sync + 'static + std::iter::Sum {
    /// `C = α·A·B + β·C` with explicit element strides.
    ///
    /// # Safety
    /// Pointers and strides must describe in-bounds `m×k`, `k×n` and `m×n`
    /// matrices, with `c` not aliasing `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        unsafe { matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc) }
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        unsafe { matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc) }
    }
}

/// Row-major `C (m×n) = op(A)·op(B) (+ C if accumulate)`.
///
/// `a` holds `m×k` (or `k×m` when `a_t`), `b` holds `k×n` (or `n×k` when `b_t`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too short");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above bound every index the strides can reach and
    // `c` is a distinct &mut borrow.
    unsafe {
        T::gemm_raw(
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
        )
    }
}

/// Convolution geometry for one (C, H, W) plane stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvShape {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.kw
    }

    /// Rows of the column matrix, `C·kh·kw`.
    pub fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Unfolds `x` (C×H×W) into `cols` (C·kh·kw × out_h·out_w), zero padded.
pub fn im2col<T: Scalar>(x: &[T], s: &ConvShape, cols: &mut [T]) {
    let (oh, ow) = (s.out_h(), s.out_w());
    let pad = s.pad as isize;
    let mut row = 0;
    for ci in 0..s.c {
        let plane = &x[ci * s.h * s.w..(ci + 1) * s.h * s.w];
        for ki in 0..s.kh {
            for kj in 0..s.kw {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize + ki as isize - pad;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= s.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                    let shift = kj as isize - pad;
                    // valid ox: 0 ≤ ox + shift < w
                    let lo = (-shift).clamp(0, ow as isize) as usize;
                    let hi = (s.w as isize - shift).clamp(0, ow as isize) as usize;
                    out_row[..lo].fill(T::zero());
                    if hi > lo {
                        let s0 = (lo as isize + shift) as usize;
                        out_row[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                    }
                    out_row[hi.max(lo)..].fill(T::zero());
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `cols` back into `dx` (C×H×W).
pub fn col2im<T: Scalar>(cols: &[T], s: &ConvShape, dx: &mut [T]) {
    let (oh, ow) = (s.out_h(), s.out_w());
    let pad = s.pad as isize;
    let mut row = 0;
    for ci in 0..s.c {
        for ki in 0..s.kh {
            for kj in 0..s.kw {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize + ki as isize - pad;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let shift = kj as isize - pad;
                    let lo = (-shift).clamp(0, ow as isize) as usize;
                    let hi = (s.w as isize - shift).clamp(0, ow as isize) as usize;
                    if hi > lo {
                        let base = ci * s.h * s.w + iy as usize * s.w;
                        let d0 = base + (lo as isize + shift) as usize;
                        let dst = &mut dx[d0..d0 + (hi - lo)];
                        for (d, &v) in dst.iter_mut().zip(&src[oy * ow + lo..oy * ow + hi]) {
                            *d = *d + v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Per-sample convolution `z_n = W·im2col(x_n)` for a batch; `w` is
/// `c_out × C·kh·kw` and `cols` is scratch.
pub fn conv_forward<T: Scalar>(x: &[T], n: usize, s: &ConvShape, w: &[T], c_out: usize, z: &mut [T], cols: &mut Vec<T>) {
    let (k, hw) = (s.patch(), s.out_len());
    let in_len = s.c * s.h * s.w;
    cols.resize(k * hw, T::zero());
    for i in 0..n {
        im2col(&x[i * in_len..(i + 1) * in_len], s, cols);
        gemm(c_out, k, hw, w, false, cols, false, &mut z[i * c_out * hw..(i + 1) * c_out * hw], false);
    }
}

/// Reusable im2col buffers for [`conv_backward_sample`].
#[derive(Debug, Clone, Default)]
pub struct ConvScratch<T> {
    cols: Vec<T>,
    dcols: Vec<T>,
}

impl<T: Scalar> ConvScratch<T> {
    pub fn new(s: &ConvShape) -> Self {
        let mut scratch = Self {
            cols: Vec::new(),
            dcols: Vec::new(),
        };
        scratch.fit(s);
        scratch
    }

    /// Sizes both buffers for `s`.
    pub fn fit(&mut self, s: &ConvShape) {
        let len = s.patch() * s.out_len();
        self.cols.resize(len, T::zero());
        self.dcols.resize(len, T::zero());
    }
}

/// One sample's share of the convolution backward pass: accumulates into
/// `dw` and, if given, overwrites `dx` with the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward_sample<T: Scalar>(
    x: &[T],
    s: &ConvShape,
    w: &[T],
    c_out: usize,
    dz: &[T],
    dw: &mut [T],
    dx: Option<&mut [T]>,
    scratch: &mut ConvScratch<T>,
) {
    let (k, hw) = (s.patch(), s.out_len());
    im2col(x, s, &mut scratch.cols);
    gemm(c_out, hw, k, dz, false, &scratch.cols, true, dw, true);
    if let Some(dx) = dx {
        gemm(k, c_out, hw, w, true, dz, false, &mut scratch.dcols, false);
        dx.fill(T::zero());
        col2im(&scratch.dcols, s, dx);
    }
}

/// Weight gradient (accumulated into `dw`) and, if `dx` is given, input
/// gradient of [`conv_forward`].
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Scalar>(
    x: &[T],
    n: usize,
    s: &ConvShape,
    w: &[T],
    c_out: usize,
    dz: &[T],
    dw: &mut [T],
    mut dx: Option<&mut [T]>,
) {
    let hw = s.out_len();
    let in_len = s.c * s.h * s.w;
    let mut scratch = ConvScratch::new(s);
    for i in 0..n {
        let dxi = dx.as_deref_mut().map(|d| &mut d[i * in_len..(i + 1) * in_len]);
        conv_backward_sample(
            &x[i * in_len..(i + 1) * in_len],
            s,
            w,
            c_out,
            &dz[i * c_out * hw..(i + 1) * c_out * hw],
            dw,
            dxi,
            &mut scratch,
        );
    }
}

const LANES: usize = 16;

fn fold<T: Scalar>(acc: [T; LANES]) -> T {
    let mut w = LANES;
    let mut a = acc;
    while w > 1 {
        w /= 2;
        for j in 0..w {
            a[j] = a[j] + a[j + w];
        }
    }
    a[0]
}

/// Σ f(x_i) with `LANES` independent accumulators, so the loop vectorizes
/// in a fixed summation order.
fn lane_sum<T: Scalar>(x: &[T], f: impl Fn(T) -> T) -> T {
    let mut acc = [T::zero(); LANES];
    let chunks = x.chunks_exact(LANES);
    let rem = chunks.remainder();
    for a in chunks {
        for j in 0..LANES {
            acc[j] = acc[j] + f(a[j]);
        }
    }
    for (j, &a) in rem.iter().enumerate() {
        acc[j] = acc[j] + f(a);
    }
    fold(acc)
}

/// Batch statistics of an (N, C, HW) tensor: per-channel mean and biased
/// variance.
pub fn channel_stats<T: Scalar>(z: &[T], n: usize, c: usize, hw: usize) -> (Vec<T>, Vec<T>) {
    let count = T::from_usize(n * hw).expect("count fits");
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let plane = |i: usize| &z[(i * c + ch) * hw..(i * c + ch + 1) * hw];
        let mut s = T::zero();
        for i in 0..n {
            s = s + lane_sum(plane(i), |a| a);
        }
        let mu = s / count;
        let mut q = T::zero();
        for i in 0..n {
            q = q + lane_sum(plane(i), |a| (a - mu) * (a - mu));
        }
        mean[ch] = mu;
        var[ch] = q / count;
    }
    (mean, var)
}

/// Fused per-channel affine, ReLU and 2×2 stride-2 max-pool (floor) over
/// an (N, C, H, W) tensor: `out = max(0, max_window(scale·z + shift))`.
/// `arg` receives the flat index into `z` of each window's maximum (first
/// on ties) and `zmax` the raw `z` there.
#[allow(clippy::too_many_arguments)]
pub fn affine_relu_pool<T: Scalar>(
    z: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    scale: &[T],
    shift: &[T],
    out: &mut [T],
    arg: &mut [u32],
    zmax: &mut [T],
) {
    let (oh, ow) = (h / 2, w / 2);
    for p in 0..n * c {
        let (sc, sh) = (scale[p % c], shift[p % c]);
        let base = p * h * w;
        for oy in 0..oh {
            let r0 = base + 2 * oy * w;
            let top = &z[r0..r0 + 2 * ow];
            let bot = &z[r0 + w..r0 + w + 2 * ow];
            let o0 = p * oh * ow + oy * ow;
            let rows = out[o0..o0 + ow].iter_mut().zip(&mut arg[o0..o0 + ow]).zip(&mut zmax[o0..o0 + ow]);
            for (ox, ((o, a), zm)) in rows.enumerate() {
                let cand = [top[2 * ox], top[2 * ox + 1], bot[2 * ox], bot[2 * ox + 1]];
                let offs = [0, 1, w, w + 1];
                let (mut bz, mut bv, mut bo) = (cand[0], cand[0] * sc + sh, 0);
                for j in 1..4 {
                    let v = cand[j] * sc + sh;
                    let up = v > bv;
                    bz = if up { cand[j] } else { bz };
                    bo = if up { offs[j] } else { bo };
                    bv = if up { v } else { bv };
                }
                *o = bv.max(T::zero());
                *zm = bz;
                *a = (r0 + 2 * ox + bo) as u32;
            }
        }
    }
}
