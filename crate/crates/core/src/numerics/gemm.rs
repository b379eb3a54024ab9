/// Storage order of a matrix operand relative to its logical shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Layout {
    /// Operand stored row-major with its logical shape.
    RowMajor,
    /// Operand stored row-major as the transpose of its logical shape.
    Transposed,
}

/// `C += A·B` where `A` is logically `m×k`, `B` is `k×n` and `C` is `m×n` row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], la: Layout, b: &[f64], lb: Layout, c: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (rsa, csa) = match la {
        Layout::RowMajor => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match lb {
        Layout::RowMajor => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
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
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
