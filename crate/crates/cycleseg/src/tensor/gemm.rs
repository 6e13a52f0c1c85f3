//! Small dense matrix kernels used by conv2d / matmul and their backward
//! passes. Row-major. Loops are blocked so the streamed operand stays in
//! cache; per-element accumulation order is fixed, so results are
//! deterministic for a given shape.

const NB: usize = 256;

/// c[m,n] += a[m,k] * b[k,n]
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut j0 = 0;
    while j0 < n {
        let j1 = (j0 + NB).min(n);
        for p in 0..k {
            let bblk = &b[p * n + j0..p * n + j1];
            for i in 0..m {
                let aip = a[i * k + p];
                let cblk = &mut c[i * n + j0..i * n + j1];
                for (cv, bv) in cblk.iter_mut().zip(bblk) {
                    *cv += aip * bv;
                }
            }
        }
        j0 = j1;
    }
}

/// c[m,n] += a[m,k] * b[n,k]^T  (b stored row-major as n x k)
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let mut p0 = 0;
    while p0 < k {
        let p1 = (p0 + NB).min(k);
        for i in 0..m {
            let ablk = &a[i * k + p0..i * k + p1];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                let bblk = &b[j * k + p0..j * k + p1];
                let mut acc = 0.0;
                for (av, bv) in ablk.iter().zip(bblk) {
                    acc += av * bv;
                }
                crow[j] += acc;
            }
        }
        p0 = p1;
    }
}

/// c[m,n] += a[k,m]^T * b[k,n]  (a stored row-major as k x m)
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut j0 = 0;
    while j0 < n {
        let j1 = (j0 + NB).min(n);
        for p in 0..k {
            let arow = &a[p * m..(p + 1) * m];
            let bblk = &b[p * n + j0..p * n + j1];
            for i in 0..m {
                let aip = arow[i];
                let cblk = &mut c[i * n + j0..i * n + j1];
                for (cv, bv) in cblk.iter_mut().zip(bblk) {
                    *cv += aip * bv;
                }
            }
        }
        j0 = j1;
    }
}
