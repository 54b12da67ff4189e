//! Scalar abstraction shared by every numeric module.
//!
//! All flow math is written against [`Real`], implemented for `f32` and `f64`.
//! Tolerances quoted throughout the crate assume `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Raw strided GEMM: `C = alpha * A * B + beta * C` with `A: m x k`, `B: k x n`.
    ///
    /// # Safety
    /// Every strided index into `a`, `b` and `c` implied by the shapes must be in bounds.
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

    /// Lossy conversion from `f64`; panics only for values the type cannot represent at all.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal not representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// In-place hyperbolic tangent over a slice. Hot path of every coupling layer.
    fn tanh_in_place(xs: &mut [Self]) {
        for x in xs.iter_mut() {
            *x = x.tanh();
        }
    }
}

impl Real for f64 {
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn tanh_in_place(xs: &mut [f64]) {
        #[cfg(target_arch = "x86_64")]
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            unsafe { tanh_slice_avx2(xs) };
            return;
        }
        tanh_slice(xs);
    }
}

#[inline(always)]
fn tanh_slice(xs: &mut [f64]) {
    for x in xs.iter_mut() {
        *x = fast_tanh_f64(*x);
    }
}

// Same arithmetic as `tanh_slice` (no contraction), only wider vectors.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn tanh_slice_avx2(xs: &mut [f64]) {
    tanh_slice(xs)
}

impl Real for f32 {
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Branch-light `tanh` that the compiler can vectorize.
///
/// Uses `tanh(x) = sign(x) * (1 - e) / (1 + e)` with `e = exp(-2|x|)` and a
/// Cody-Waite reduced polynomial `exp`. Matches `f64::tanh` to a few ulp; for
/// `|x| < 0.04` a short odd Taylor series avoids cancellation in `1 - e`.
#[inline(always)]
pub fn fast_tanh_f64(x: f64) -> f64 {
    let ax = x.abs();
    // exp(-2|x|) with clamped argument; beyond 20 tanh is 1 to double precision.
    let t = (-2.0 * ax).max(-40.0);
    let e = exp_poly(t);
    let big = (1.0 - e) / (1.0 + e);
    let x2 = ax * ax;
    // tanh(x) = x - x^3/3 + 2x^5/15 - 17x^7/315 + 62x^9/2835
    let small = ax
        * (1.0 + x2 * (-1.0 / 3.0 + x2 * (2.0 / 15.0 + x2 * (-17.0 / 315.0 + x2 * (62.0 / 2835.0)))));
    let r = if ax < 0.04 { small } else { big };
    r.copysign(x)
}

/// `exp(t)` for `t` in roughly `[-40, 0]`.
#[inline(always)]
fn exp_poly(t: f64) -> f64 {
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    const INV_LN2: f64 = std::f64::consts::LOG2_E;
    // round-to-nearest via the 1.5 * 2^52 shift; k ends up in the low mantissa bits
    const SHIFT: f64 = 6_755_399_441_055_744.0;
    let shifted = t * INV_LN2 + SHIFT;
    let kf = shifted - SHIFT;
    let r = (t - kf * LN2_HI) - kf * LN2_LO;
    // Taylor series to degree 13 on |r| <= ln2/2 gives < 1e-17 truncation error.
    let mut p = 1.0 / 6_227_020_800.0;
    p = p * r + 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    let scale = f64::from_bits(shifted.to_bits().wrapping_add(1023) << 52);
    p * scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_tanh_matches_libm() {
        let mut worst = 0.0f64;
        let mut x = -25.0;
        while x <= 25.0 {
            let a = fast_tanh_f64(x);
            let b = x.tanh();
            let rel = (a - b).abs() / b.abs().max(1e-300);
            worst = worst.max(rel);
            x += 0.000_731;
        }
        assert!(worst < 1e-14, "worst relative error {worst}");
        assert_eq!(fast_tanh_f64(0.0), 0.0);
        assert_eq!(fast_tanh_f64(50.0), 1.0);
        assert_eq!(fast_tanh_f64(-50.0), -1.0);
    }

    #[test]
    fn fast_tanh_tiny_arguments() {
        for &x in &[1e-300, 1e-20, 1e-8, 1e-3, 0.039_999, 0.04, 0.041] {
            let rel = (fast_tanh_f64(x) - x.tanh()).abs() / x.tanh();
            assert!(rel < 1e-15, "x={x} rel={rel}");
        }
    }
}
