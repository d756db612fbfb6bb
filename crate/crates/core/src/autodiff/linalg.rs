//! Dense f64 kernels shared by the graph ops.
//!
//! All loops accumulate in a fixed order, so results are bitwise
//! reproducible and independent of batch composition: row `i` of a product
//! depends only on row `i` of the left operand.

/// C = A·B with A: m×k, B: k×n, all row-major.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += s * bv;
            }
        }
    }
    c
}

/// Row-major transpose of an m×n matrix.
pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

/// dA = dC·Bᵀ with dC: m×n, B: k×n. Result m×k.
pub fn matmul_bt(dc: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let bt = transpose(b, k, n);
    matmul(dc, &bt, m, n, k)
}

/// dB = Aᵀ·dC with A: m×k, dC: m×n. Result k×n.
pub fn matmul_at(a: &[f64], dc: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let at = transpose(a, m, k);
    matmul(&at, dc, k, m, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
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

    #[test]
    fn matmul_matches_naive_triple_loop() {
        let mut x = 0.3_f64;
        let mut next = || {
            x = (x * 997.0 + 0.123).fract();
            x - 0.5
        };
        for &(m, k, n) in &[(1, 1, 1), (2, 3, 4), (5, 7, 3), (8, 8, 8)] {
            let a: Vec<f64> = (0..m * k).map(|_| next()).collect();
            let b: Vec<f64> = (0..k * n).map(|_| next()).collect();
            let got = matmul(&a, &b, m, k, n);
            let want = naive(&a, &b, m, k, n);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn row_independence_is_bitwise() {
        let a: Vec<f64> = (0..6).map(|i| (i as f64).sin()).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|i| (i as f64).cos()).collect(); // 3x4
        let full = matmul(&a, &b, 2, 3, 4);
        let row1 = matmul(&a[3..6], &b, 1, 3, 4);
        assert_eq!(&full[4..8], row1.as_slice());
    }
}
