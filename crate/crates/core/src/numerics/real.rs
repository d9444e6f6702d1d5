//! Floating-point element types.
//!
//! Training runs in `f32`; gradient checks and the exact-algebra tests run in
//! `f64`. Everything above the numerics layer is generic over [`Real`], so the
//! precision is picked once at the top of a computation.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Element type codes shared by the checkpoint and dataset containers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    U8 = 2,
    U64 = 3,
}

impl DType {
    pub fn from_code(code: u8) -> Option<DType> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::U8),
            3 => Some(DType::U64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
            DType::U64 => 8,
        }
    }
}

pub trait Real:
    Float + Debug + Display + Default + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + DivAssign + 'static
{
    const DTYPE: DType;

    /// Lossy conversion from an `f64` literal or statistic.
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn of_usize(v: usize) -> Self {
        Self::of(v as f64)
    }

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// `c = a · b + beta · c` for row/column-strided matrices.
    ///
    /// `a` is `m×k`, `b` is `k×n`, `c` is `m×n` and row-major contiguous.
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
}

macro_rules! impl_real {
    ($t:ty, $dtype:expr, $gemm:path) => {
        impl Real for $t {
            const DTYPE: DType = $dtype;

            #[inline]
            fn of(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$t>()];
                buf.copy_from_slice(&bytes[..std::mem::size_of::<$t>()]);
                <$t>::from_le_bytes(buf)
            }

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
                if m == 0 || n == 0 {
                    return;
                }
                assert!(c.len() >= m * n);
                if k == 0 {
                    for v in c[..m * n].iter_mut() {
                        *v *= beta;
                    }
                    return;
                }
                let span = |rows: usize, cols: usize, (rs, cs): (isize, isize)| {
                    (rows as isize - 1) * rs + (cols as isize - 1) * cs + 1
                };
                assert!(span(m, k, a_strides) as usize <= a.len());
                assert!(span(k, n, b_strides) as usize <= b.len());
                // SAFETY: the extents of all three operands were checked above
                // and `c` does not alias `a` or `b` (distinct borrows).
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
        }
    };
}

impl_real!(f32, DType::F32, matrixmultiply::sgemm);
impl_real!(f64, DType::F64, matrixmultiply::dgemm);
