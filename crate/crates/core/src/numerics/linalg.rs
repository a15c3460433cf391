//! Small dense linear-algebra kernels over row-major `n × n` buffers.

/// Lower Cholesky factor of a symmetric matrix, or `None` if a pivot is not
/// strictly positive.
pub fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    debug_assert_eq!(a.len(), n * n);
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut diag = a[j * n + j];
        for k in 0..j {
            diag -= l[j * n + k] * l[j * n + k];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return None;
        }
        let d = diag.sqrt();
        l[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / d;
        }
    }
    Some(l)
}

/// Cholesky of `a + jitter·I`, multiplying the jitter by 10 up to
/// `escalations` times. Returns the factor and the jitter that succeeded.
pub fn cholesky_with_jitter(
    a: &[f64],
    n: usize,
    jitter: f64,
    escalations: usize,
) -> Result<(Vec<f64>, f64), f64> {
    let mut current = jitter;
    let mut work = a.to_vec();
    for attempt in 0..=escalations {
        if attempt > 0 {
            current *= 10.0;
        }
        work.copy_from_slice(a);
        for i in 0..n {
            work[i * n + i] += current;
        }
        if let Some(l) = cholesky(&work, n) {
            return Ok((l, current));
        }
    }
    Err(current)
}

/// Solves `L z = b` in place.
pub fn solve_lower(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Solves `Lᵀ z = b` in place.
pub fn solve_upper_t(l: &[f64], n: usize, b: &mut [f64]) {
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Solves `(L Lᵀ) z = b`.
pub fn cholesky_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut z = b.to_vec();
    solve_lower(l, n, &mut z);
    solve_upper_t(l, n, &mut z);
    z
}

/// `(L Lᵀ)⁻¹` as a dense row-major matrix.
pub fn cholesky_inverse(l: &[f64], n: usize) -> Vec<f64> {
    let mut inv = vec![0.0; n * n];
    let mut col = vec![0.0; n];
    for j in 0..n {
        col.iter_mut().for_each(|v| *v = 0.0);
        col[j] = 1.0;
        solve_lower(l, n, &mut col);
        solve_upper_t(l, n, &mut col);
        for i in 0..n {
            inv[i * n + j] = col[i];
        }
    }
    // symmetrize away round-off
    for i in 0..n {
        for j in i + 1..n {
            let avg = 0.5 * (inv[i * n + j] + inv[j * n + i]);
            inv[i * n + j] = avg;
            inv[j * n + i] = avg;
        }
    }
    inv
}

/// `Σ ln L_ii`, i.e. half the log-determinant of `L Lᵀ`.
pub fn half_log_det(l: &[f64], n: usize) -> f64 {
    (0..n).map(|i| l[i * n + i].ln()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_reconstructs_spd_matrix() {
        let a = [4.0, 2.0, 0.4, 2.0, 5.0, 1.0, 0.4, 1.0, 3.0];
        let l = cholesky(&a, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| l[i * 3 + k] * l[j * 3 + k]).sum();
                assert!((v - a[i * 3 + j]).abs() < 1e-12);
            }
        }
        let inv = cholesky_inverse(&l, 3);
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| a[i * 3 + k] * inv[k * 3 + j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((v - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn jitter_escalates_on_singular_matrix() {
        // rank-one matrix: plain Cholesky fails, jitter rescues it
        let a = [1.0, 1.0, 1.0, 1.0];
        assert!(cholesky(&a, 2).is_none());
        let (_, used) = cholesky_with_jitter(&a, 2, 1e-6, 3).unwrap();
        assert!(used >= 1e-6);
        let bad = [-1.0, 0.0, 0.0, -1.0];
        assert_eq!(cholesky_with_jitter(&bad, 2, 1e-6, 3).unwrap_err(), 1e-6 * 10.0 * 10.0 * 10.0);
    }
}
