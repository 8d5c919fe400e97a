//! Low-level numeric kernels: SGEMM entry points and fast transcendentals.
//!
//! All kernels are deterministic for fixed inputs: parallel splits partition
//! output rows so every element is produced by exactly one thread with a
//! fixed accumulation order.

/// Minimum FLOP count before a GEMM is split across threads.
const PAR_GEMM_FLOPS: usize = 4_000_000;

/// `c = alpha * a @ b + beta * c` with explicit element strides.
///
/// `c` is always row-major `(m, n)`. Strides for `a` and `b` are in elements,
/// which lets the callers express transposed views without materializing them.
#[allow(clippy::too_many_arguments)]
fn sgemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    let split = m >= 128 && 2 * m * k * n >= PAR_GEMM_FLOPS && n < 512 && rayon::current_num_threads() > 1;
    if split {
        let half = m / 2;
        let (c0, c1) = c.split_at_mut(half * n);
        let a1 = &a[half * rsa as usize..];
        rayon::join(
            || sgemm_strided(half, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c0),
            || sgemm_strided(m - half, k, n, alpha, a1, rsa, csa, b, rsb, csb, beta, c1),
        );
        return;
    }
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
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

/// `c = a (m,k) @ b (k,n) + beta * c`.
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    sgemm_strided(m, k, n, 1.0, a, k as isize, 1, b, n as isize, 1, beta, c);
}

/// `c = a (m,k) @ b^T + beta * c`, where `b` is stored `(n,k)`.
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    sgemm_strided(m, k, n, 1.0, a, k as isize, 1, b, 1, k as isize, beta, c);
}

/// `c = a^T @ b + beta * c`, where `a` is stored `(k,m)` and `b` is `(k,n)`.
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    sgemm_strided(m, k, n, 1.0, a, 1, m as isize, b, n as isize, 1, beta, c);
}

/// Fast `exp` for f32.
///
/// Splits `x * log2(e)` into integer and fractional parts; the integer part
/// becomes the float exponent, the fraction is a degree-5 polynomial.
/// Relative error is below 3e-7 on the supported range. Inputs below -87
/// return exactly 0.0, so additive masks of -1e9 produce exact zeros after
/// softmax (this is what makes causality testable bit-for-bit).
#[inline]
pub fn fast_exp(x: f32) -> f32 {
    if x < -87.0 {
        return 0.0;
    }
    let x = if x > 88.0 { 88.0 } else { x };
    // Cody-Waite reduction: x = f*ln2 + r with r in [-ln2/2, ln2/2].
    // The magic-number add rounds to nearest without an explicit round call.
    const MAGIC: f32 = 12_582_912.0; // 1.5 * 2^23
    const LN2_HI: f32 = 0.693_359_375;
    const LN2_LO: f32 = -2.121_944_4e-4;
    let f = (x * std::f32::consts::LOG2_E + MAGIC) - MAGIC;
    let r = (x - f * LN2_HI) - f * LN2_LO;
    // e^r Taylor, degree 6; |r| <= 0.347 keeps the remainder below 2e-7.
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    let bits = ((f as i32 + 127) as u32) << 23;
    f32::from_bits(bits) * p
}

/// Numerically stable logistic function built on [`fast_exp`].
#[inline]
pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + fast_exp(-x))
    } else {
        let e = fast_exp(x);
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_exp_matches_std() {
        let mut x = -86.5f32;
        while x < 80.0 {
            let got = fast_exp(x);
            let want = x.exp();
            let rel = ((got - want) / want).abs();
            assert!(rel < 1e-6, "exp({x}): got {got}, want {want}, rel {rel}");
            x += 0.37;
        }
    }

    #[test]
    fn fast_exp_underflows_to_exact_zero() {
        assert_eq!(fast_exp(-1e9), 0.0);
        assert_eq!(fast_exp(-87.5), 0.0);
    }

    #[test]
    fn sigmoid_symmetry() {
        assert_eq!(sigmoid(0.0), 0.5);
        for &x in &[-5.0f32, -0.7, 0.3, 2.0, 9.0] {
            let s = sigmoid(x) + sigmoid(-x);
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn gemm_identity() {
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let id = vec![1.0, 0.0, 0.0, 1.0];
        let mut c = vec![0.0; 4];
        gemm_nn(2, 2, 2, &a, &id, 0.0, &mut c);
        assert_eq!(c, a);
    }

    #[test]
    fn gemm_transposed_variants_agree() {
        // a (2,3), b (3,2)
        let a = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c_nn = vec![0.0; 4];
        gemm_nn(2, 3, 2, &a, &b, 0.0, &mut c_nn);

        // b^T stored (2,3)
        let bt = vec![7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c_nt = vec![0.0; 4];
        gemm_nt(2, 3, 2, &a, &bt, 0.0, &mut c_nt);
        assert_eq!(c_nn, c_nt);

        // a^T stored (3,2)
        let at = vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c_tn = vec![0.0; 4];
        gemm_tn(2, 3, 2, &at, &b, 0.0, &mut c_tn);
        assert_eq!(c_nn, c_tn);
    }
}
