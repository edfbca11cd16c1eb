//! Floating point abstraction shared by every numerical module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar used for network parameters and field queries: `f32` or `f64`.
///
/// Besides the usual float arithmetic, a scalar knows how to run a strided
/// general matrix multiply, which is where almost all training time goes.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Short type tag written into checkpoints and reports.
    const NAME: &'static str;

    /// `C = alpha * A * B + beta * C` with `A: m x k`, `B: k x n`, `C: m x n`,
    /// all addressed through row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
    );

    /// `sin(omega * z)` into `sin_out` and, when requested, `cos(omega * z)`
    /// into `cos_out`.
    fn sin_cos_scaled(omega: Self, z: &[Self], sin_out: &mut [Self], mut cos_out: Option<&mut [Self]>) {
        const BLOCK: usize = 256;
        let mut zf = [0.0; BLOCK];
        let mut s = [0.0; BLOCK];
        let mut c = [0.0; BLOCK];
        for start in (0..z.len()).step_by(BLOCK) {
            let end = (start + BLOCK).min(z.len());
            let n = end - start;
            for (d, v) in zf.iter_mut().zip(&z[start..end]) {
                *d = v.f64();
            }
            sin_cos_f64(omega.f64(), &zf[..n], &mut s[..n], &mut c[..n]);
            for (o, v) in sin_out[start..end].iter_mut().zip(&s) {
                *o = Self::of(*v);
            }
            if let Some(cos_out) = cos_out.as_deref_mut() {
                for (o, v) in cos_out[start..end].iter_mut().zip(&c) {
                    *o = Self::of(*v);
                }
            }
        }
    }

    #[inline]
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 is representable")
    }

    #[inline]
    fn of_usize(v: usize) -> Self {
        <Self as FromPrimitive>::from_usize(v).expect("usize is representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("scalar converts to f64")
    }
}

const FRAC_2_PI: f64 = std::f64::consts::FRAC_2_PI;
// pi/2 split into a 33-bit head and a tail, so k * head is exact for |k| < 2^20.
const PIO2_HI: f64 = 1.570_796_326_734_125_6;
const PIO2_LO: f64 = 6.077_100_506_506_192e-11;
const ROUND_MAGIC: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52
const REDUCTION_LIMIT: f64 = 1.0e5;

const S1: f64 = -1.666_666_666_666_663_2e-1;
const S2: f64 = 8.333_333_333_322_49e-3;
const S3: f64 = -1.984_126_982_985_795e-4;
const S4: f64 = 2.755_731_370_707_006_8e-6;
const S5: f64 = -2.505_076_025_340_686_3e-8;
const S6: f64 = 1.589_690_995_211_55e-10;
const C1: f64 = 4.166_666_666_666_66e-2;
const C2: f64 = -1.388_888_888_887_411e-3;
const C3: f64 = 2.480_158_728_947_673e-5;
const C4: f64 = -2.755_731_435_139_066_3e-7;
const C5: f64 = 2.087_572_321_298_175e-9;
const C6: f64 = -1.135_964_755_778_819_5e-11;

/// Batched `sin`/`cos` of `omega * z` with quadrant reduction and minimax
/// polynomials on `[-pi/4, pi/4]`; within a few ulp of libm for the argument
/// range a sine layer produces. Large arguments fall back to libm.
pub fn sin_cos_f64(omega: f64, z: &[f64], sin_out: &mut [f64], cos_out: &mut [f64]) {
    assert!(sin_out.len() >= z.len() && cos_out.len() >= z.len());
    let (s, c) = (&mut sin_out[..z.len()], &mut cos_out[..z.len()]);
    #[cfg(target_arch = "x86_64")]
    let in_range = if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
        // SAFETY: the required CPU features were just detected.
        unsafe { sin_cos_avx2(omega, z, s, c) }
    } else {
        sin_cos_kernel::<false>(omega, z, s, c)
    };
    #[cfg(not(target_arch = "x86_64"))]
    let in_range = sin_cos_kernel::<false>(omega, z, s, c);

    if !in_range {
        for ((&zi, so), co) in z.iter().zip(s.iter_mut()).zip(c.iter_mut()) {
            let x = omega * zi;
            if !(x.abs() <= REDUCTION_LIMIT) {
                (*so, *co) = x.sin_cos();
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn sin_cos_avx2(omega: f64, z: &[f64], s: &mut [f64], c: &mut [f64]) -> bool {
    sin_cos_kernel::<true>(omega, z, s, c)
}

#[inline(always)]
fn madd<const FMA: bool>(a: f64, b: f64, c: f64) -> f64 {
    if FMA {
        a.mul_add(b, c)
    } else {
        a * b + c
    }
}

// Branch-free so it vectorizes. Returns false if any argument was out of
// range; those lanes hold garbage and must be recomputed.
#[inline(always)]
fn sin_cos_kernel<const FMA: bool>(omega: f64, z: &[f64], sin_out: &mut [f64], cos_out: &mut [f64]) -> bool {
    let mut bad = false;
    for ((&zi, so), co) in z.iter().zip(sin_out.iter_mut()).zip(cos_out.iter_mut()) {
        let x = omega * zi;
        bad |= !(x.abs() <= REDUCTION_LIMIT);
        let shifted = madd::<FMA>(x, FRAC_2_PI, ROUND_MAGIC);
        let q = shifted.to_bits();
        let k = shifted - ROUND_MAGIC;
        let r = madd::<FMA>(-k, PIO2_LO, madd::<FMA>(-k, PIO2_HI, x));
        let r2 = r * r;
        let r3 = r2 * r;
        let sp = madd::<FMA>(
            r3,
            madd::<FMA>(r2, madd::<FMA>(r2, madd::<FMA>(r2, madd::<FMA>(r2, madd::<FMA>(r2, S6, S5), S4), S3), S2), S1),
            r,
        );
        let r4 = r2 * r2;
        let cp = madd::<FMA>(
            r4,
            madd::<FMA>(r2, madd::<FMA>(r2, madd::<FMA>(r2, madd::<FMA>(r2, madd::<FMA>(r2, C6, C5), C4), C3), C2), C1),
            madd::<FMA>(-0.5, r2, 1.0),
        );
        let swap = 0u64.wrapping_sub(q & 1);
        let (sb, cb) = (sp.to_bits(), cp.to_bits());
        let sin_bits = (cb & swap) | (sb & !swap);
        let cos_bits = (sb & swap) | (cb & !swap);
        *so = f64::from_bits(sin_bits ^ ((q & 2) << 62));
        *co = f64::from_bits(cos_bits ^ ((q.wrapping_add(1) & 2) << 62));
    }
    !bad
}

// Largest element touched by a strided `rows x cols` view, plus one.
fn extent(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $kernel:path, { $($extra:item)* }) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

            $($extra)*

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
                rsc: usize,
                csc: usize,
            ) {
                assert!(a.len() >= extent(m, k, rsa, csa), "gemm: A too short");
                assert!(b.len() >= extent(k, n, rsb, csb), "gemm: B too short");
                assert!(c.len() >= extent(m, n, rsc, csc), "gemm: C too short");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the asserts above bound every strided access.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        csc as isize,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm, {});
impl_scalar!(f64, "f64", matrixmultiply::dgemm, {
    fn sin_cos_scaled(omega: f64, z: &[f64], sin_out: &mut [f64], cos_out: Option<&mut [f64]>) {
        match cos_out {
            Some(c) => sin_cos_f64(omega, z, sin_out, c),
            None => {
                let mut scratch = vec![0.0; z.len()];
                sin_cos_f64(omega, z, sin_out, &mut scratch);
            }
        }
    }
});
