//! Raw 2-D matrix kernels shared by graph ops and their backward passes.
//! Accumulation runs in f64 for stability; outputs are f32. Every kernel
//! visits elements in a fixed order, so results are bit-reproducible.

/// C(m,n) = A(m,k) * B(k,n)
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.fill(0.0);
        for p in 0..k {
            let aip = a[i * k + p] as f64;
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (j, &bpj) in brow.iter().enumerate() {
                acc[j] += aip * bpj as f64;
            }
        }
        for j in 0..n {
            out[i * n + j] = acc[j] as f32;
        }
    }
    out
}

/// C(m,n) = A(m,k) * B(n,k)^T
pub fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f64;
            for p in 0..k {
                acc += arow[p] as f64 * brow[p] as f64;
            }
            out[i * n + j] = acc as f32;
        }
    }
    out
}

/// C(k,n) = A(m,k)^T * B(m,n)
pub fn matmul_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut acc = vec![0.0f64; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let aip = aip as f64;
            if aip == 0.0 {
                continue;
            }
            let dst = &mut acc[p * n..(p + 1) * n];
            for (j, &bij) in brow.iter().enumerate() {
                dst[j] += aip * bij as f64;
            }
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small_case() {
        // [[1,2]] * [[3],[4]] = [[11]]
        let out = matmul(&[1.0, 2.0], &[3.0, 4.0], 1, 2, 1);
        assert_eq!(out, vec![11.0]);
    }

    #[test]
    fn variants_agree_with_naive_loops() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.71).cos()).collect();
        let c = matmul(&a, &b, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let mut want = 0.0f64;
                for p in 0..k {
                    want += a[i * k + p] as f64 * b[p * n + j] as f64;
                }
                assert!((c[i * n + j] as f64 - want).abs() < 1e-6);
            }
        }
        // A * B == nt(A, B^T) == tn(A^T, B)
        let mut bt = vec![0.0f32; k * n];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        assert_eq!(c, matmul_nt(&a, &bt, m, k, n));
        let mut at = vec![0.0f32; m * k];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        assert_eq!(c, matmul_tn(&at, &b, k, m, n));
    }
}
