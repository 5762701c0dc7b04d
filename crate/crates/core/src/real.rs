//! Floating-point element types the tensor engine runs on.
//!
//! Training defaults to `f32`; `f64` is the high-precision mode used by
//! gradient checks and the bit-reproducibility guarantees.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + LowerExp
    + Sum
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    /// `c = a·b + beta·c` over strided row/column layouts.
    ///
    /// `a` is `m×k`, `b` is `k×n`, `c` is `m×n`; strides are in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    );

    /// Hyperbolic tangent used by the tape. Exact for `f64`; a rational
    /// approximation within a few ulp for `f32`.
    fn tanh_kernel(self) -> Self;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

macro_rules! impl_real {
    ($t:ty, $dtype:expr, $gemm:path, $tanh:path) => {
        impl Real for $t {
            const DTYPE: DType = $dtype;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: callers pass slices whose extents cover the strided
                // views; `c` is a dense row-major m×n buffer checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            #[inline]
            fn tanh_kernel(self) -> Self {
                $tanh(self)
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("element width"))
            }
        }
    };
}

impl_real!(f32, DType::F32, matrixmultiply::sgemm, tanh_f32);
impl_real!(f64, DType::F64, matrixmultiply::dgemm, f64::tanh);

/// Odd rational minimax fit (degree 13 over 6) on the clamped range; it
/// vectorizes where `f32::tanh` does not.
#[inline]
fn tanh_f32(x: f32) -> f32 {
    if x.abs() < 4e-4 {
        return x;
    }
    let x = x.clamp(-7.905_311, 7.905_311);
    let x2 = x * x;
    let mut p = x2 * -2.760_768_5e-16 + 2.000_188e-13;
    p = x2 * p + -8.604_672e-11;
    p = x2 * p + 5.122_297e-8;
    p = x2 * p + 1.485_722_4e-5;
    p = x2 * p + 6.372_619e-4;
    p = x2 * p + 4.893_524_6e-3;
    let mut q = x2 * 1.198_258_4e-6 + 1.185_347_1e-4;
    q = x2 * q + 2.268_434_6e-3;
    q = x2 * q + 4.893_525e-3;
    x * p / q
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_tanh_close_to_exact() {
        let mut worst = 0.0f64;
        for i in 0..400_000 {
            let x = i as f32 * 5e-5 - 10.0;
            let exact = (x as f64).tanh();
            let got = x.tanh_kernel() as f64;
            worst = worst.max((got - exact).abs() / exact.abs().max(1e-30));
        }
        assert!(worst < 1e-6, "max relative error {worst:e}");
        assert_eq!(0.0f32.tanh_kernel(), 0.0);
        assert!(f32::NAN.tanh_kernel().is_nan());
    }

    #[test]
    fn gemm_strided_transpose() {
        // aᵀ with a = [[1,2],[3,4]] stored row-major, times identity
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [1.0, 0.0, 0.0, 1.0];
        let mut c = [0.0; 4];
        f64::gemm(2, 2, 2, &a, (1, 2), &b, (2, 1), 0.0, &mut c);
        assert_eq!(c, [1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn le_round_trip() {
        let mut buf = Vec::new();
        (-1.5f32).write_le(&mut buf);
        assert_eq!(f32::read_le(&buf), -1.5);
        assert_eq!(DType::from_tag(DType::F64.tag()), Some(DType::F64));
    }
}
