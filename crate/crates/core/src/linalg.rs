//! Small dense helpers: cyclic Jacobi for symmetric eigenproblems (used on
//! compression blocks and on the exhaustive-search oracles at small depth)
//! and a deterministic power iteration for largest singular values.

/// Symmetric eigendecomposition by cyclic Jacobi. `a` is row-major `n x n`
/// and is destroyed. Returns (eigenvalues, eigenvectors as columns).
pub fn jacobi_eigh(a: &mut [f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let max_sweeps = 100;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + frobenius(a, n)) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig = (0..n).map(|i| a[i * n + i]).collect();
    (eig, v)
}

fn frobenius(a: &[f64], n: usize) -> f64 {
    a[..n * n].iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Largest eigenvalue of a symmetric PSD matrix, via Jacobi.
pub fn max_eig_sym(a: &mut [f64], n: usize) -> f64 {
    let (eig, _) = jacobi_eigh(a, n);
    eig.into_iter().fold(0.0f64, f64::max)
}

/// Largest eigenvalue and its eigenvector.
pub fn max_eig_sym_with_vec(a: &mut [f64], n: usize) -> (f64, Vec<f64>) {
    let (eig, v) = jacobi_eigh(a, n);
    let mut best = 0usize;
    for i in 1..n {
        if eig[i] > eig[best] {
            best = i;
        }
    }
    (eig[best], (0..n).map(|k| v[k * n + best]).collect())
}

/// Largest singular value of a rectangular matrix given as a multiply
/// closure pair, via power iteration on `AᵀA`. Deterministic start.
/// Returns `(sigma, converged)`.
pub fn power_sigma_max<FA, FT>(
    rows: usize,
    cols: usize,
    apply: FA,
    apply_t: FT,
    rel_tol: f64,
    max_iter: usize,
) -> (f64, bool)
where
    FA: Fn(&[f64]) -> Vec<f64>,
    FT: Fn(&[f64]) -> Vec<f64>,
{
    if rows == 0 || cols == 0 {
        return (0.0, true);
    }
    // Deterministic pseudo-random start with全 positive overlap.
    let mut v: Vec<f64> = (0..cols)
        .map(|i| {
            let mut x = (i as u64).wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(0x2545f4914f6cdd1d);
            x ^= x >> 33;
            x = x.wrapping_mul(0xff51afd7ed558ccd);
            x ^= x >> 33;
            1.0 + (x as f64 / u64::MAX as f64)
        })
        .collect();
    normalize(&mut v);
    let mut lambda_prev = -1.0f64;
    let mut lambda = 0.0f64;
    for it in 0..max_iter {
        let av = apply(&v);
        let mut atav = apply_t(&av);
        lambda = av.iter().map(|x| x * x).sum::<f64>();
        if lambda == 0.0 {
            return (0.0, true);
        }
        let nrm = normalize(&mut atav);
        if nrm == 0.0 {
            return (lambda.max(0.0).sqrt(), true);
        }
        v = atav;
        if it > 0 && (lambda - lambda_prev).abs() <= rel_tol * lambda.max(1e-300) {
            return (lambda.max(0.0).sqrt(), true);
        }
        lambda_prev = lambda;
    }
    (lambda.max(0.0).sqrt(), false)
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    n
}
