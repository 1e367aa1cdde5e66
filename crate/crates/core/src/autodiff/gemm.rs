//! Row-major matrix products with optional transposition of either operand.

/// Below this many multiply-adds the packing overhead of the blocked kernel
/// dominates and a plain loop is faster.
const SMALL: usize = 4096;

/// `c = a · b + beta · c` where `a` is logically `[m, k]` and `b` is `[k, n]`.
///
/// With `a_t` set, `a` is stored as `[k, m]`; with `b_t`, `b` is stored as `[n, k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_t { (1, k) } else { (n, 1) };
    if m * k * n <= SMALL {
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * rsa + p * csa] * b[p * rsb + j * csb];
                }
                let out = &mut c[i * n + j];
                *out = if beta == 0.0 { acc } else { acc + beta * *out };
            }
        }
        return;
    }
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

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
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = x[r * cols + c];
            }
        }
        t
    }

    #[test]
    fn both_paths_agree_with_naive() {
        for &(m, k, n) in &[(3, 4, 5), (40, 33, 21)] {
            let a: Vec<f64> = (0..m * k).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
            let b: Vec<f64> = (0..k * n).map(|i| ((i * 3) % 13) as f64 - 6.0).collect();
            let want = naive(m, k, n, &a, &b);
            let at = transpose(m, k, &a);
            let bt = transpose(k, n, &b);
            for (aa, a_t) in [(&a, false), (&at, true)] {
                for (bb, b_t) in [(&b, false), (&bt, true)] {
                    let mut c = vec![1.0; m * n];
                    gemm(m, k, n, aa, a_t, bb, b_t, &mut c, 1.0);
                    for (x, w) in c.iter().zip(&want) {
                        assert!((x - (w + 1.0)).abs() < 1e-9);
                    }
                }
            }
        }
    }
}
