//! Thin safe wrapper over `matrixmultiply::dgemm`.

/// `c = op(a) · op(b) + beta · c` with `op(a)` of shape `[m, k]` and `op(b)` of shape `[k, n]`.
///
/// `a` is stored row-major as `[m, k]` (or `[k, m]` when `a_t`), `b` as `[k, n]`
/// (or `[n, k]` when `b_t`), `c` as `[m, n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index dgemm can touch through
    // these strides: a spans m*k, b spans k*n, c spans m*n.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
