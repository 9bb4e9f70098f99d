//! Dense row-major storage and the handful of matrix products the network needs.

use num_traits::{Float, NumAssign};
use std::fmt::Debug;
use std::iter::Sum;

const TANH_CLAMP: f32 = 7.905_311;
const TANH_P: [f32; 7] = [
    4.893_524_6e-3,
    6.372_619_3e-4,
    1.485_722_4e-5,
    5.122_297e-8,
    -8.604_671_5e-11,
    2.000_188e-13,
    -2.760_768_5e-16,
];
const TANH_Q: [f32; 4] = [4.893_525e-3, 2.268_434_6e-3, 1.185_347_1e-4, 1.198_258_4e-6];

/// Scalar type the network can run in. Training and gradient checks use `f64`;
/// batched inference may use `f32`, the precision weights are stored in.
pub trait Real: Float + NumAssign + Sum + Default + Debug + Send + Sync + 'static {
    fn of(v: f64) -> Self;

    /// Hyperbolic tangent accurate to the type's precision.
    fn tanh_fast(self) -> Self;

    /// Exponential accurate to the type's precision, inlined.
    fn exp_fast(self) -> Self;

    /// `x (rows×k) · w (k×n)` plus `bias` on every row, row-major.
    fn affine(rows: usize, k: usize, n: usize, x: &[Self], w: &[Self], bias: &[Self]) -> Vec<Self> {
        affine_generic(rows, k, n, x, w, bias)
    }

    /// `c = a·b + beta·c` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize, k: usize, n: usize,
        a: &[Self], rsa: isize, csa: isize,
        b: &[Self], rsb: isize, csb: isize,
        beta: Self,
        c: &mut [Self], rsc: isize, csc: isize,
    );
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn tanh_fast(self) -> Self {
        self.tanh()
    }

    #[inline]
    fn exp_fast(self) -> Self {
        self.exp()
    }

    fn gemm(
        m: usize, k: usize, n: usize,
        a: &[f64], rsa: isize, csa: isize,
        b: &[f64], rsb: isize, csb: isize,
        beta: f64,
        c: &mut [f64], rsc: isize, csc: isize,
    ) {
        // SAFETY: callers pass buffers covering the strided extents (checked by
        // the assertions in the wrappers below).
        unsafe {
            matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, csc)
        }
    }
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    /// Odd rational approximation (degree 13/6), within a few ulp of `f32::tanh`.
    #[inline(always)]
    fn tanh_fast(self) -> Self {
        let x = self.clamp(-TANH_CLAMP, TANH_CLAMP);
        let x2 = x * x;
        let mut p = TANH_P[6];
        for &a in TANH_P[..6].iter().rev() {
            p = p * x2 + a;
        }
        let q = ((TANH_Q[3] * x2 + TANH_Q[2]) * x2 + TANH_Q[1]) * x2 + TANH_Q[0];
        x * p / q
    }

    /// Uses a register-blocked kernel when the CPU has AVX2 and FMA. The
    /// matrices here are too small for packing to pay off.
    fn affine(rows: usize, k: usize, n: usize, x: &[f32], w: &[f32], bias: &[f32]) -> Vec<f32> {
        #[cfg(target_arch = "x86_64")]
        {
            if n % 16 == 0 && std::arch::is_x86_feature_detected!("avx512f") {
                assert!(x.len() >= rows * k && w.len() >= k * n && bias.len() >= n);
                let mut out = Vec::with_capacity(rows * n);
                // SAFETY: as below.
                unsafe {
                    fma::affine512(rows, k, n, x.as_ptr(), w.as_ptr(), bias.as_ptr(), out.as_mut_ptr());
                    out.set_len(rows * n);
                }
                return out;
            }
            if n % 8 == 0 && std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
                assert!(x.len() >= rows * k && w.len() >= k * n && bias.len() >= n);
                let mut out = Vec::with_capacity(rows * n);
                // SAFETY: features detected above; the kernel reads within the
                // asserted extents and writes exactly `rows * n` values.
                unsafe {
                    fma::affine(rows, k, n, x.as_ptr(), w.as_ptr(), bias.as_ptr(), out.as_mut_ptr());
                    out.set_len(rows * n);
                }
                return out;
            }
        }
        affine_generic(rows, k, n, x, w, bias)
    }

    /// Range reduction to `r ∈ [-ln2/2, ln2/2]` and a degree-6 polynomial,
    /// within about one ulp. Rounding uses the 1.5·2²³ shift so no library
    /// call is needed; results below e⁻⁸⁷ are flushed to that value.
    #[inline(always)]
    fn exp_fast(self) -> Self {
        const SHIFT: f32 = 12_582_912.0;
        const LN2_HI: f32 = 0.693_359_4;
        const LN2_LO: f32 = -2.121_944_4e-4;
        const P: [f32; 6] = [1.987_569_1e-4, 1.398_199_9e-3, 8.333_452e-3, 4.166_579_6e-2, 0.166_666_65, 0.5];
        let x = if self > 88.5 { 88.5 } else if self < -87.0 { -87.0 } else { self };
        let t = x * std::f32::consts::LOG2_E + SHIFT;
        let n = t - SHIFT;
        let r = x - n * LN2_HI - n * LN2_LO;
        let mut y = P[0];
        for &c in &P[1..] {
            y = y * r + c;
        }
        let y = y * r * r + r + 1.0;
        let bits = (t.to_bits() as i32 - SHIFT.to_bits() as i32 + 127) << 23;
        y * f32::from_bits(bits as u32)
    }

    fn gemm(
        m: usize, k: usize, n: usize,
        a: &[f32], rsa: isize, csa: isize,
        b: &[f32], rsb: isize, csb: isize,
        beta: f32,
        c: &mut [f32], rsc: isize, csc: isize,
    ) {
        // SAFETY: as for f64.
        unsafe {
            matrixmultiply::sgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, csc)
        }
    }
}

fn affine_generic<T: Real>(rows: usize, k: usize, n: usize, x: &[T], w: &[T], bias: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * n);
    for _ in 0..rows {
        out.extend_from_slice(&bias[..n]);
    }
    gemm_nn(rows, k, n, x, w, T::one(), &mut out);
    out
}

#[cfg(target_arch = "x86_64")]
mod fma {
    use std::arch::x86_64::*;

    /// `out = x·w + bias` for `n % 8 == 0`. Tiles of four rows by sixteen
    /// columns keep eight accumulators in registers across the `k` loop;
    /// leftovers go eight columns of one row at a time. Pointer arithmetic
    /// uses `wrapping_add` so debug builds carry no per-access checks.
    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn affine(rows: usize, k: usize, n: usize, x: *const f32, w: *const f32, bias: *const f32, out: *mut f32) {
        let full = if n % 16 == 0 { rows - rows % 4 } else { 0 };
        let mut r = 0;
        while r < full {
            let mut j = 0;
            while j < n {
                tile4x16(r, j, k, n, x, w, bias, out);
                j += 16;
            }
            r += 4;
        }
        while r < rows {
            let mut j = 0;
            while j < n {
                row1x8(r, j, k, n, x, w, bias, out);
                j += 8;
            }
            r += 1;
        }
    }

    /// Unaligned load through `lddqu`, which maps directly to the instruction
    /// (the `loadu` intrinsic goes through a checked copy in debug builds).
    #[inline(always)]
    unsafe fn load(p: *const f32) -> __m256 {
        _mm256_castsi256_ps(_mm256_lddqu_si256(p as *const __m256i))
    }

    #[inline(always)]
    unsafe fn broadcast(p: *const f32) -> __m256 {
        _mm256_broadcastss_ps(_mm_load_ss(p))
    }

    /// The same computation with 512-bit registers, for `n % 16 == 0`: tiles
    /// of eight rows by thirty-two columns (sixteen accumulators). Each output
    /// is accumulated in the same order as in [`affine`], so the results agree
    /// bit for bit.
    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn affine512(rows: usize, k: usize, n: usize, x: *const f32, w: *const f32, bias: *const f32, out: *mut f32) {
        let full = if n % 32 == 0 { rows - rows % 8 } else { 0 };
        let mut r = 0;
        while r < full {
            let mut j = 0;
            while j < n {
                tile8x32(r, j, k, n, x, w, bias, out);
                j += 32;
            }
            r += 8;
        }
        while r < rows {
            let mut j = 0;
            while j < n {
                row1x16(r, j, k, n, x, w, bias, out);
                j += 16;
            }
            r += 1;
        }
    }

    #[inline(always)]
    unsafe fn load16(p: *const f32) -> __m512 {
        _mm512_maskz_loadu_ps(0xffff, p)
    }

    #[inline(always)]
    unsafe fn broadcast16(p: *const f32) -> __m512 {
        _mm512_broadcastss_ps(_mm_load_ss(p))
    }

    #[allow(clippy::too_many_arguments)]
    #[inline(always)]
    unsafe fn tile8x32(r: usize, j: usize, k: usize, n: usize, x: *const f32, w: *const f32, bias: *const f32, out: *mut f32) {
        let b0 = load16(bias.wrapping_add(j));
        let b1 = load16(bias.wrapping_add(j + 16));
        let mut c = [[b0, b1]; 8];
        let mut xp = x.wrapping_add(r * k);
        let xend = xp.wrapping_add(k);
        let mut wp = w.wrapping_add(j);
        while xp != xend {
            let w0 = load16(wp);
            let w1 = load16(wp.wrapping_add(16));
            wp = wp.wrapping_add(n);
            let mut xi = xp;
            for row in c.iter_mut() {
                let a = broadcast16(xi);
                row[0] = _mm512_fmadd_ps(a, w0, row[0]);
                row[1] = _mm512_fmadd_ps(a, w1, row[1]);
                xi = xi.wrapping_add(k);
            }
            xp = xp.wrapping_add(1);
        }
        let mut o = out.wrapping_add(r * n + j);
        for row in &c {
            _mm512_mask_storeu_ps(o, 0xffff, row[0]);
            _mm512_mask_storeu_ps(o.wrapping_add(16), 0xffff, row[1]);
            o = o.wrapping_add(n);
        }
    }

    #[allow(clippy::too_many_arguments)]
    #[inline(always)]
    unsafe fn row1x16(r: usize, j: usize, k: usize, n: usize, x: *const f32, w: *const f32, bias: *const f32, out: *mut f32) {
        let mut c = load16(bias.wrapping_add(j));
        let mut xp = x.wrapping_add(r * k);
        let xend = xp.wrapping_add(k);
        let mut wp = w.wrapping_add(j);
        while xp != xend {
            c = _mm512_fmadd_ps(broadcast16(xp), load16(wp), c);
            wp = wp.wrapping_add(n);
            xp = xp.wrapping_add(1);
        }
        _mm512_mask_storeu_ps(out.wrapping_add(r * n + j), 0xffff, c);
    }

    #[allow(clippy::too_many_arguments)]
    #[inline(always)]
    unsafe fn tile4x16(r: usize, j: usize, k: usize, n: usize, x: *const f32, w: *const f32, bias: *const f32, out: *mut f32) {
        let b0 = load(bias.wrapping_add(j));
        let b1 = load(bias.wrapping_add(j + 8));
        let (mut c00, mut c01, mut c10, mut c11) = (b0, b1, b0, b1);
        let (mut c20, mut c21, mut c30, mut c31) = (b0, b1, b0, b1);
        let mut xp = x.wrapping_add(r * k);
        let xend = xp.wrapping_add(k);
        let (k2, k3) = (2 * k, 3 * k);
        let mut wp = w.wrapping_add(j);
        while xp != xend {
            let w0 = load(wp);
            let w1 = load(wp.wrapping_add(8));
            wp = wp.wrapping_add(n);
            let a = broadcast(xp);
            c00 = _mm256_fmadd_ps(a, w0, c00);
            c01 = _mm256_fmadd_ps(a, w1, c01);
            let a = broadcast(xp.wrapping_add(k));
            c10 = _mm256_fmadd_ps(a, w0, c10);
            c11 = _mm256_fmadd_ps(a, w1, c11);
            let a = broadcast(xp.wrapping_add(k2));
            c20 = _mm256_fmadd_ps(a, w0, c20);
            c21 = _mm256_fmadd_ps(a, w1, c21);
            let a = broadcast(xp.wrapping_add(k3));
            c30 = _mm256_fmadd_ps(a, w0, c30);
            c31 = _mm256_fmadd_ps(a, w1, c31);
            xp = xp.wrapping_add(1);
        }
        let o = out.wrapping_add(r * n + j);
        _mm256_storeu_ps(o, c00);
        _mm256_storeu_ps(o.wrapping_add(8), c01);
        _mm256_storeu_ps(o.wrapping_add(n), c10);
        _mm256_storeu_ps(o.wrapping_add(n + 8), c11);
        _mm256_storeu_ps(o.wrapping_add(2 * n), c20);
        _mm256_storeu_ps(o.wrapping_add(2 * n + 8), c21);
        _mm256_storeu_ps(o.wrapping_add(3 * n), c30);
        _mm256_storeu_ps(o.wrapping_add(3 * n + 8), c31);
    }

    #[allow(clippy::too_many_arguments)]
    #[inline(always)]
    unsafe fn row1x8(r: usize, j: usize, k: usize, n: usize, x: *const f32, w: *const f32, bias: *const f32, out: *mut f32) {
        let mut c = load(bias.wrapping_add(j));
        let mut xp = x.wrapping_add(r * k);
        let xend = xp.wrapping_add(k);
        let mut wp = w.wrapping_add(j);
        while xp != xend {
            c = _mm256_fmadd_ps(broadcast(xp), load(wp), c);
            wp = wp.wrapping_add(n);
            xp = xp.wrapping_add(1);
        }
        _mm256_storeu_ps(out.wrapping_add(r * n + j), c);
    }
}

/// A parameter tensor. `f64` tensors hold values exactly representable in `f32`,
/// the on-disk type.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f64> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor shape/data mismatch");
        Self { shape: shape.to_vec(), data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

impl Tensor<f64> {
    /// Rounds every value to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }
}

/// A row-major activation matrix.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn add_assign(&mut self, other: &Mat<T>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `c (m×n) = a (m×k) · b (k×n) + beta·c`.
pub(crate) fn gemm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    T::gemm(m, k, n, a, k as isize, 1, b, n as isize, 1, beta, c, n as isize, 1);
}

/// `c (k×n) += aᵀ · b` where `a` is `m×k` and `b` is `m×n`.
pub(crate) fn gemm_tn_acc<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    if k == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= m * n && c.len() >= k * n);
    T::gemm(k, m, n, a, 1, k as isize, b, n as isize, 1, T::one(), c, n as isize, 1);
}

/// `c (m×k) = a · bᵀ` where `a` is `m×n` and `b` is `k×n`.
pub(crate) fn gemm_nt<T: Real>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    if m == 0 || k == 0 {
        return;
    }
    assert!(a.len() >= m * n && b.len() >= k * n && c.len() >= m * k);
    T::gemm(m, n, k, a, n as isize, 1, b, 1, n as isize, T::zero(), c, k as isize, 1);
}
