//! Kernel evaluation, Gram matrix construction, and convex combination of
//! Gram matrices under simplex weights. Feature maps stay implicit; all
//! computation happens in Gram form.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Symmetry tolerance for Gram matrices.
pub const SYMMETRY_TOL: f64 = 1e-10;
/// A Gram matrix is accepted as positive semidefinite when its minimum
/// eigenvalue is at least `-PSD_TOL`.
pub const PSD_TOL: f64 = 1e-8;
const PSD_JITTER: f64 = 1e-10;

/// A kernel function family with its parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KernelSpec {
    Linear,
    Rbf { gamma: f64 },
    Polynomial { degree: u32, coef0: f64 },
    Cosine,
}

impl KernelSpec {
    pub fn rbf(gamma: f64) -> Result<KernelSpec> {
        if gamma <= 0.0 || !gamma.is_finite() {
            return Err(Error::InvalidInput(format!("rbf gamma must be positive, got {gamma}")));
        }
        Ok(KernelSpec::Rbf { gamma })
    }

    pub fn polynomial(degree: u32, coef0: f64) -> Result<KernelSpec> {
        if degree < 1 {
            return Err(Error::InvalidInput("polynomial degree must be at least 1".into()));
        }
        if !coef0.is_finite() {
            return Err(Error::InvalidInput(format!("polynomial coef0 must be finite, got {coef0}")));
        }
        Ok(KernelSpec::Polynomial { degree, coef0 })
    }

    /// The bank used when no kernels are configured.
    pub fn default_bank() -> Vec<KernelSpec> {
        vec![
            KernelSpec::Linear,
            KernelSpec::Rbf { gamma: 0.5 },
            KernelSpec::Polynomial { degree: 2, coef0: 1.0 },
        ]
    }
}

impl std::fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KernelSpec::Linear => write!(f, "linear"),
            KernelSpec::Rbf { gamma } => write!(f, "rbf:{gamma}"),
            KernelSpec::Polynomial { degree, coef0 } => write!(f, "poly:{degree}:{coef0}"),
            KernelSpec::Cosine => write!(f, "cosine"),
        }
    }
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Evaluates a kernel on a pair of equal-length vectors.
pub fn eval_kernel(spec: &KernelSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "kernel arguments have dimensions {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::InvalidInput("kernel arguments must have dimension >= 1".into()));
    }
    Ok(match spec {
        KernelSpec::Linear => dot(x, y),
        KernelSpec::Rbf { gamma } => {
            let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
            (-gamma * sq).exp()
        }
        KernelSpec::Polynomial { degree, coef0 } => (dot(x, y) + coef0).powi(*degree as i32),
        KernelSpec::Cosine => {
            let sx = dot(x, x);
            let sy = dot(y, y);
            if sx == 0.0 || sy == 0.0 {
                0.0
            } else {
                // sqrt(sx * sy) rather than sqrt(sx) * sqrt(sy): IEEE sqrt of a
                // rounded square reproduces the factor, so k(x, x) is exactly 1.
                dot(x, y) / (sx * sy).sqrt()
            }
        }
    })
}

/// N x N table of pairwise kernel evaluations, symmetric and positive
/// semidefinite within the module tolerances.
#[derive(Clone, Debug)]
pub struct GramMatrix {
    values: Matrix,
    kernel: Option<KernelSpec>,
}

impl GramMatrix {
    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn size(&self) -> usize {
        self.values.rows()
    }

    /// The kernel this Gram matrix was built from; `None` for combinations.
    pub fn kernel(&self) -> Option<&KernelSpec> {
        self.kernel.as_ref()
    }

    /// Validates symmetry and positive semidefiniteness, with one jittered
    /// retry before rejecting. Used by every constructor in this module.
    fn validated(values: Matrix, kernel: Option<KernelSpec>) -> Result<GramMatrix> {
        let n = values.rows();
        if n != values.cols() {
            return Err(Error::Shape(format!(
                "Gram matrix must be square, got {}x{}",
                values.rows(),
                values.cols()
            )));
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let d = (values[(i, j)] - values[(j, i)]).abs();
                if d > SYMMETRY_TOL {
                    return Err(Error::Invariant(format!(
                        "Gram asymmetry {d:.3e} at ({i}, {j}) exceeds {SYMMETRY_TOL:.0e}"
                    )));
                }
            }
        }
        if !psd_within(&values, PSD_TOL) && !psd_within(&values, PSD_TOL + PSD_JITTER) {
            return Err(Error::Invariant(format!(
                "Gram matrix is not positive semidefinite within -{PSD_TOL:.0e}"
            )));
        }
        Ok(GramMatrix { values, kernel })
    }
}

/// True when `m + shift*I` admits a Cholesky factorization, i.e. the minimum
/// eigenvalue of `m` is at least `-shift`.
fn psd_within(m: &Matrix, shift: f64) -> bool {
    let n = m.rows();
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = m[(i, j)];
            if i == j {
                sum += shift;
            }
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= 0.0 {
                    return false;
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    true
}

/// Builds the Gram matrix of a vector set. The upper triangle is computed
/// and mirrored, so symmetry is exact.
pub fn gram_matrix(spec: &KernelSpec, xs: &[Vec<f64>]) -> Result<GramMatrix> {
    if xs.is_empty() {
        return Err(Error::InvalidInput("gram_matrix of an empty vector set".into()));
    }
    let dim = xs[0].len();
    if let Some(bad) = xs.iter().position(|x| x.len() != dim) {
        return Err(Error::Shape(format!(
            "vector {bad} has dimension {}, expected {dim}",
            xs[bad].len()
        )));
    }
    let n = xs.len();
    let mut values = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = eval_kernel(spec, &xs[i], &xs[j])?;
            values[(i, j)] = v;
            values[(j, i)] = v;
        }
    }
    GramMatrix::validated(values, Some(*spec))
}

/// Nonnegative kernel mixing coefficients summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelWeights {
    beta: Vec<f64>,
}

impl KernelWeights {
    /// Simplex tolerance on the weight sum.
    pub const SUM_TOL: f64 = 1e-10;

    pub fn new(beta: Vec<f64>) -> Result<KernelWeights> {
        if beta.is_empty() {
            return Err(Error::InvalidInput("kernel weights must be nonempty".into()));
        }
        if let Some(pos) = beta.iter().position(|&b| b < 0.0 || !b.is_finite()) {
            return Err(Error::Invariant(format!(
                "kernel weight {} at index {pos} is not a nonnegative real",
                beta[pos]
            )));
        }
        let sum: f64 = beta.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOL {
            return Err(Error::Invariant(format!(
                "kernel weights sum to {sum}, expected 1 within {:.0e}",
                Self::SUM_TOL
            )));
        }
        Ok(KernelWeights { beta })
    }

    pub fn uniform(m: usize) -> KernelWeights {
        assert!(m > 0, "uniform weights over zero kernels");
        KernelWeights { beta: vec![1.0 / m as f64; m] }
    }

    /// Normalizes nonnegative scores onto the simplex. Returns `None` when
    /// every score is zero.
    pub fn from_scores(scores: &[f64]) -> Option<KernelWeights> {
        let sum: f64 = scores.iter().sum();
        if sum <= 0.0 {
            return None;
        }
        // Renormalize exactly so the simplex invariant holds to tolerance.
        let mut beta: Vec<f64> = scores.iter().map(|s| s / sum).collect();
        let total: f64 = beta.iter().sum();
        for b in &mut beta {
            *b /= total;
        }
        Some(KernelWeights { beta })
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn max_abs_diff(&self, other: &KernelWeights) -> f64 {
        self.beta
            .iter()
            .zip(&other.beta)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Entrywise convex combination of Gram matrices. A convex combination of
/// positive semidefinite matrices stays positive semidefinite.
pub fn combine_grams(grams: &[GramMatrix], w: &KernelWeights) -> Result<GramMatrix> {
    if grams.is_empty() {
        return Err(Error::InvalidInput("combine_grams of an empty list".into()));
    }
    if grams.len() != w.len() {
        return Err(Error::Shape(format!(
            "{} Gram matrices but {} weights",
            grams.len(),
            w.len()
        )));
    }
    let n = grams[0].size();
    if let Some(bad) = grams.iter().position(|g| g.size() != n) {
        return Err(Error::Shape(format!(
            "Gram matrix {bad} has size {}, expected {n}",
            grams[bad].size()
        )));
    }
    let mut values = Matrix::zeros(n, n);
    for (g, &b) in grams.iter().zip(w.beta()) {
        values.add_scaled(g.values(), b);
    }
    GramMatrix::validated(values, None)
}
