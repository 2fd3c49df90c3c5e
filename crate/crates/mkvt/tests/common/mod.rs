//! Independent oracles shared by the integration suites. Everything here is
//! deliberately written against the problem definitions, not against the
//! library's implementation paths, so the two routes stay independent.

#![allow(dead_code)]

use mkvt::numerics::Matrix;

/// Maximizes the SVM dual `sum(a) - 1/2 a' Q a` with `Q_ij = y_i y_j K_ij`
/// subject to `0 <= a_i <= c` and `y' a = 0`, by projected gradient ascent
/// with a Lipschitz step size. Dense, slow, and independent of SMO.
pub fn qp_dual_oracle(kernel: &Matrix, ys: &[f64], c: f64, iters: usize) -> (Vec<f64>, f64) {
    let n = ys.len();
    assert_eq!(kernel.rows(), n);
    let q = Matrix::from_fn(n, n, |i, j| ys[i] * ys[j] * kernel[(i, j)]);

    // Step size from an upper bound on the largest eigenvalue of Q.
    let lip = (0..n)
        .map(|i| q.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
        .max(1e-12);
    let step = 1.0 / lip;

    let mut alpha = vec![0.0; n];
    let mut last_obj = f64::NEG_INFINITY;
    for it in 0..iters {
        // gradient of the maximization objective: 1 - Q a
        let mut grad = vec![1.0; n];
        for i in 0..n {
            let row = q.row(i);
            let dot: f64 = row.iter().zip(&alpha).map(|(a, b)| a * b).sum();
            grad[i] -= dot;
        }
        let proposal: Vec<f64> = alpha.iter().zip(&grad).map(|(a, g)| a + step * g).collect();
        alpha = project_box_hyperplane(&proposal, ys, c);
        if it % 200 == 199 {
            let obj = dual_objective(kernel, ys, &alpha);
            if obj - last_obj < 1e-13 {
                break;
            }
            last_obj = obj;
        }
    }
    let obj = dual_objective(kernel, ys, &alpha);
    (alpha, obj)
}

/// Projects `v` onto `{0 <= a <= c, y' a = 0}` by bisecting the multiplier of
/// the equality constraint; the constraint residual is monotone in it.
pub fn project_box_hyperplane(v: &[f64], ys: &[f64], c: f64) -> Vec<f64> {
    let clip = |lambda: f64| -> Vec<f64> {
        v.iter()
            .zip(ys)
            .map(|(&vi, &yi)| (vi - lambda * yi).clamp(0.0, c))
            .collect()
    };
    let residual = |alpha: &[f64]| -> f64 { alpha.iter().zip(ys).map(|(&a, &y)| a * y).sum() };

    let bound = v.iter().map(|x| x.abs()).fold(0.0, f64::max) + c + 1.0;
    let (mut lo, mut hi) = (-bound, bound);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if residual(&clip(mid)) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    clip(0.5 * (lo + hi))
}

/// Dual objective evaluated from its definition.
pub fn dual_objective(kernel: &Matrix, ys: &[f64], alpha: &[f64]) -> f64 {
    let n = ys.len();
    let linear: f64 = alpha.iter().sum();
    let mut quad = 0.0;
    for i in 0..n {
        for j in 0..n {
            quad += alpha[i] * alpha[j] * ys[i] * ys[j] * kernel[(i, j)];
        }
    }
    linear - 0.5 * quad
}

/// Eigenvalues of a symmetric matrix by the cyclic Jacobi rotation method.
pub fn jacobi_eigenvalues(m: &Matrix) -> Vec<f64> {
    let n = m.rows();
    assert_eq!(n, m.cols());
    let mut a: Vec<Vec<f64>> = (0..n).map(|i| m.row(i).to_vec()).collect();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i][j] * a[i][j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() < 1e-18 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let cos = 1.0 / (t * t + 1.0).sqrt();
                let sin = t * cos;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = cos * akp - sin * akq;
                    a[k][q] = sin * akp + cos * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = cos * apk - sin * aqk;
                    a[q][k] = sin * apk + cos * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

pub fn min_eigenvalue(m: &Matrix) -> f64 {
    jacobi_eigenvalues(m).into_iter().fold(f64::INFINITY, f64::min)
}

/// Average precision by brute-force rank enumeration: precision at each rank
/// is recounted from scratch over the prefix.
pub fn average_precision_oracle<T: Ord>(ranked: &[T], relevant: &std::collections::BTreeSet<T>) -> f64 {
    assert!(!relevant.is_empty());
    let mut total = 0.0;
    for (idx, id) in ranked.iter().enumerate() {
        if relevant.contains(id) {
            let rank = idx + 1;
            let hits_in_prefix = ranked[..rank].iter().filter(|r| relevant.contains(r)).count();
            total += hits_in_prefix as f64 / rank as f64;
        }
    }
    total / relevant.len() as f64
}
