use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type of every tensor.
///
/// `f32` is the working precision; `f64` exists for tight gradient checks.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    const NAME: &'static str;

    /// `c = a·b` (or `c += a·b` when `accumulate`) for row-major `a` [m×k],
    /// `b` [k×n], `c` [m×n]. A transposed flag means the buffer holds the
    /// transpose, i.e. `a` stored as [k×m] or `b` stored as [n×k].
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn erf(self) -> Self;

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to every scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $gemm:path, $erf:path) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_trans: bool,
                b: &[Self],
                b_trans: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(m, k, a_trans);
                let (rsb, csb) = strides(k, n, b_trans);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the asserts above guarantee every index the kernel
                // touches lies inside the three slices.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
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

            fn erf(self) -> Self {
                $erf(self)
            }
        }
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm, libm::erff);
impl_scalar!(f64, "f64", matrixmultiply::dgemm, libm::erf);

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; x.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = x[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn gemm_handles_transposed_operands() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.5).collect();
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect();
        let want = naive(2, 3, 4, &a, &b);
        for (at, bt) in [(false, false), (true, false), (false, true), (true, true)] {
            let aa = if at { transpose(2, 3, &a) } else { a.clone() };
            let bb = if bt { transpose(3, 4, &b) } else { b.clone() };
            let mut c = vec![f64::NAN; 8];
            f64::gemm(2, 3, 4, &aa, at, &bb, bt, &mut c, false);
            assert_eq!(c, want, "a_trans={at} b_trans={bt}");
        }
    }

    #[test]
    fn gemm_accumulates() {
        let mut c = vec![1.0f32; 4];
        f32::gemm(
            2,
            1,
            2,
            &[1.0, 2.0],
            false,
            &[3.0, 4.0],
            false,
            &mut c,
            true,
        );
        assert_eq!(c, vec![4.0, 5.0, 7.0, 9.0]);
    }
}
