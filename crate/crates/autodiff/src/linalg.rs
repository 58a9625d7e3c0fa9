//! Small dense complex kernels shared by the tape and by plain callers.

use crate::C64;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// `A (m×q) · B (q×r)`.
pub fn matmul(a: &[C64], b: &[C64], m: usize, q: usize, r: usize) -> Vec<C64> {
    let mut out = vec![ZERO; m * r];
    matmul_acc(a, b, m, q, r, &mut out);
    out
}

/// `out += A (m×q) · B (q×r)`.
pub fn matmul_acc(a: &[C64], b: &[C64], m: usize, q: usize, r: usize, out: &mut [C64]) {
    debug_assert_eq!(a.len(), m * q);
    debug_assert_eq!(b.len(), q * r);
    for i in 0..m {
        let row = &mut out[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == ZERO {
                continue;
            }
            let brow = &b[k * r..(k + 1) * r];
            for (o, &bkj) in row.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
}

/// `out += G (m×r) · B^H` where `B` is q×r; result is m×q.
pub fn matmul_a_bh_acc(g: &[C64], b: &[C64], m: usize, r: usize, q: usize, out: &mut [C64]) {
    for i in 0..m {
        let grow = &g[i * r..(i + 1) * r];
        for k in 0..q {
            let brow = &b[k * r..(k + 1) * r];
            let mut acc = ZERO;
            for (&x, &y) in grow.iter().zip(brow) {
                acc += x * y.conj();
            }
            out[i * q + k] += acc;
        }
    }
}

/// `out += A^H · G` where `A` is m×q and `G` is m×r; result is q×r.
pub fn matmul_ah_b_acc(a: &[C64], g: &[C64], m: usize, q: usize, r: usize, out: &mut [C64]) {
    for i in 0..m {
        let grow = &g[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k].conj();
            if aik == ZERO {
                continue;
            }
            let orow = &mut out[k * r..(k + 1) * r];
            for (o, &x) in orow.iter_mut().zip(grow) {
                *o += aik * x;
            }
        }
    }
}

/// Conjugate transpose of an m×n matrix.
pub fn hermitian(a: &[C64], m: usize, n: usize) -> Vec<C64> {
    let mut out = vec![ZERO; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j].conj();
        }
    }
    out
}

/// Inverse of an n×n matrix by Gauss-Jordan elimination with partial
/// pivoting. Returns `None` when a pivot is exactly zero.
pub fn invert(a: &[C64], n: usize) -> Option<Vec<C64>> {
    let mut work = a.to_vec();
    let mut inv = vec![ZERO; n * n];
    for i in 0..n {
        inv[i * n + i] = C64::new(1.0, 0.0);
    }
    for col in 0..n {
        let pivot = (col..n).max_by(|&x, &y| {
            work[x * n + col]
                .norm()
                .total_cmp(&work[y * n + col].norm())
        })?;
        if work[pivot * n + col] == ZERO {
            return None;
        }
        if pivot != col {
            for j in 0..n {
                work.swap(pivot * n + j, col * n + j);
                inv.swap(pivot * n + j, col * n + j);
            }
        }
        let scale = work[col * n + col].inv();
        for j in 0..n {
            work[col * n + j] *= scale;
            inv[col * n + j] *= scale;
        }
        for row in 0..n {
            if row == col {
                continue;
            }
            let factor = work[row * n + col];
            if factor == ZERO {
                continue;
            }
            for j in 0..n {
                let w = work[col * n + j];
                let v = inv[col * n + j];
                work[row * n + j] -= factor * w;
                inv[row * n + j] -= factor * v;
            }
        }
    }
    Some(inv)
}

/// Induced 1-norm (max column absolute sum).
pub fn norm1(a: &[C64], n: usize) -> f64 {
    (0..n)
        .map(|j| (0..n).map(|i| a[i * n + j].norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Largest deviation from Hermitian symmetry.
pub fn hermitian_asymmetry(a: &[C64], n: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in i..n {
            worst = worst.max((a[i * n + j] - a[j * n + i].conj()).norm());
        }
    }
    worst
}

/// Outcome of [`hermitian_pd_inverse`].
#[derive(Clone, Debug)]
pub struct PdInverse {
    pub inverse: Vec<C64>,
    /// Ridge added to the diagonal, zero when the plain inverse was used.
    pub ridge: f64,
}

/// Condition-number threshold above which the inverse is regularized.
pub const CONDITION_LIMIT: f64 = 1e12;
/// Ridge scale relative to the mean diagonal entry.
pub const RIDGE_SCALE: f64 = 1e-9;

/// Inverse of a Hermitian positive-definite matrix, falling back to
/// `(A + εI)^{-1}` with `ε = 1e-9·tr(A)/n` when the 1-norm condition estimate
/// exceeds [`CONDITION_LIMIT`].
pub fn hermitian_pd_inverse(a: &[C64], n: usize) -> PdInverse {
    if let Some(inv) = invert(a, n) {
        let cond = norm1(a, n) * norm1(&inv, n);
        if cond.is_finite() && cond <= CONDITION_LIMIT {
            return PdInverse {
                inverse: inv,
                ridge: 0.0,
            };
        }
    }
    let trace: f64 = (0..n).map(|i| a[i * n + i].re).sum();
    let ridge = RIDGE_SCALE * trace / n as f64;
    let mut reg = a.to_vec();
    for i in 0..n {
        reg[i * n + i] += ridge;
    }
    let inverse = invert(&reg, n).unwrap_or_else(|| vec![C64::new(f64::NAN, f64::NAN); n * n]);
    PdInverse { inverse, ridge }
}
