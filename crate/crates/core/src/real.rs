//! Floating-point abstraction shared by the autodiff engine.
//!
//! Training runs in `f32`; gradient checks and oracles run the same code in
//! `f64`.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::exec;

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    /// Raw strided GEMM: `c = alpha * a * b + beta * c`.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing (for `c`)
    /// matrices of the given sizes.
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

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite")
    }
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major operand for [`gemm`]: `transposed` means the stored matrix is
/// the transpose of the logical operand.
#[derive(Clone, Copy)]
pub struct Operand<'a, T> {
    pub data: &'a [T],
    pub transposed: bool,
}

impl<'a, T> Operand<'a, T> {
    pub fn plain(data: &'a [T]) -> Self {
        Self {
            data,
            transposed: false,
        }
    }

    pub fn t(data: &'a [T]) -> Self {
        Self { data, transposed: true }
    }

    /// (row stride, col stride) of the logical `rows x cols` operand.
    fn strides(&self, rows: usize, cols: usize) -> (isize, isize) {
        if self.transposed {
            (1, rows as isize)
        } else {
            (cols as isize, 1)
        }
    }
}

const PAR_MIN_WORK: usize = 1 << 18;

/// `c (m x n) = a (m x k) * b (k x n) + (accumulate ? c : 0)`, all row-major.
///
/// In parallel mode the larger output dimension is split into blocks. The
/// inner-product order of each output element is the same either way.
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: Operand<'_, T>,
    b: Operand<'_, T>,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.data.len() >= m * k, "gemm: lhs too short");
    assert!(b.data.len() >= k * n, "gemm: rhs too short");
    assert_eq!(c.len(), m * n, "gemm: output size");
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    let (rsa, csa) = a.strides(m, k);
    let (rsb, csb) = b.strides(k, n);

    if !exec::is_parallel() || m * n * k < PAR_MIN_WORK {
        // SAFETY: bounds asserted above; c is uniquely borrowed.
        unsafe {
            T::gemm_raw(
                m,
                k,
                n,
                T::one(),
                a.data.as_ptr(),
                rsa,
                csa,
                b.data.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        return;
    }

    let workers = exec::threads();
    if m >= n {
        let rows_per = m.div_ceil(workers).max(1);
        exec::for_each_chunk(c, rows_per * n, |bi, block| {
            let r0 = bi * rows_per;
            let rows = block.len() / n;
            // SAFETY: offsets index rows r0..r0+rows of the logical lhs.
            unsafe {
                T::gemm_raw(
                    rows,
                    k,
                    n,
                    T::one(),
                    a.data.as_ptr().offset(r0 as isize * rsa),
                    rsa,
                    csa,
                    b.data.as_ptr(),
                    rsb,
                    csb,
                    beta,
                    block.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        });
    } else {
        let cols_per = n.div_ceil(workers).max(1);
        let blocks = n.div_ceil(cols_per);
        let c_ref: &[T] = c;
        let parts: Vec<Vec<T>> = exec::map_range(blocks, |bi| {
            let c0 = bi * cols_per;
            let cols = cols_per.min(n - c0);
            let mut out = vec![T::zero(); m * cols];
            if accumulate {
                for r in 0..m {
                    out[r * cols..(r + 1) * cols].copy_from_slice(&c_ref[r * n + c0..r * n + c0 + cols]);
                }
            }
            // SAFETY: offsets index cols c0..c0+cols of the logical rhs.
            unsafe {
                T::gemm_raw(
                    m,
                    k,
                    cols,
                    T::one(),
                    a.data.as_ptr(),
                    rsa,
                    csa,
                    b.data.as_ptr().offset(c0 as isize * csb),
                    rsb,
                    csb,
                    beta,
                    out.as_mut_ptr(),
                    cols as isize,
                    1,
                );
            }
            out
        });
        for (bi, part) in parts.into_iter().enumerate() {
            let c0 = bi * cols_per;
            let cols = part.len() / m;
            for r in 0..m {
                c[r * n + c0..r * n + c0 + cols].copy_from_slice(&part[r * cols..(r + 1) * cols]);
            }
        }
    }
}
