use auxbo::gp::{KernelConfig, KernelFamily};
use auxbo::numerics::Tensor;
use rand::Rng;

pub fn random_points(rng: &mut impl Rng, n: usize, d: usize) -> Tensor {
    Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect())
}

pub fn random_kernel(rng: &mut impl Rng, d: usize) -> KernelConfig {
    KernelConfig {
        family: if rng.random_bool(0.5) { KernelFamily::Rbf } else { KernelFamily::Matern52 },
        lengthscales: (0..d).map(|_| rng.random_range(0.2..2.0)).collect(),
        signal_variance: rng.random_range(0.3..3.0),
        noise_variance: rng.random_range(1e-3..0.3),
        jitter: 1e-6,
    }
}

/// Closed-form kernel written independently of the library.
pub fn oracle_kernel(cfg: &KernelConfig, a: &[f64], b: &[f64]) -> f64 {
    let r2: f64 = a.iter().zip(b).zip(&cfg.lengthscales).map(|((p, q), l)| ((p - q) / l).powi(2)).sum();
    let r = r2.sqrt();
    let c = match cfg.family {
        KernelFamily::Rbf => (-0.5 * r2).exp(),
        KernelFamily::Matern52 => (1.0 + 5f64.sqrt() * r + 5.0 * r2 / 3.0) * (-(5f64.sqrt()) * r).exp(),
    };
    cfg.signal_variance * c
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn dense_inverse(a: &[f64], n: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs())).unwrap();
        for k in 0..n {
            m.swap(col * n + k, piv * n + k);
            inv.swap(col * n + k, piv * n + k);
        }
        let p = m[col * n + col];
        for k in 0..n {
            m[col * n + k] /= p;
            inv[col * n + k] /= p;
        }
        for r in 0..n {
            if r != col {
                let f = m[r * n + col];
                for k in 0..n {
                    m[r * n + k] -= f * m[col * n + k];
                    inv[r * n + k] -= f * inv[col * n + k];
                }
            }
        }
    }
    inv
}
