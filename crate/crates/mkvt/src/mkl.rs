//! Multiple-kernel SVM training: an SMO solver for the dual at fixed kernel
//! weights, alternated with a closed-form norm-proportional weight update.

use crate::error::{Error, Result};
use crate::kernels::{combine_grams, eval_kernel, gram_matrix, GramMatrix, KernelSpec, KernelWeights};

/// Default SMO stopping tolerance on the KKT residual.
pub const DEFAULT_SMO_TOL: f64 = 1e-3;
/// Default outer-loop tolerance on the weight change.
pub const DEFAULT_OUTER_TOL: f64 = 1e-4;
/// Default outer-loop iteration cap.
pub const DEFAULT_MAX_OUTER: usize = 50;
/// Dual coefficients above this threshold mark support vectors.
pub const SUPPORT_THRESHOLD: f64 = 1e-8;

/// Curvature floor for the two-variable subproblem.
const TAU: f64 = 1e-12;

/// A binary classification problem over a bank of candidate kernels.
#[derive(Clone, Debug)]
pub struct MklProblem {
    xs: Vec<Vec<f64>>,
    ys: Vec<f64>,
    kernel_bank: Vec<KernelSpec>,
    c: f64,
}

impl MklProblem {
    pub fn new(xs: Vec<Vec<f64>>, ys: Vec<f64>, kernel_bank: Vec<KernelSpec>, c: f64) -> Result<MklProblem> {
        if xs.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 training samples, got {}",
                xs.len()
            )));
        }
        if xs.len() != ys.len() {
            return Err(Error::Shape(format!(
                "{} feature vectors but {} labels",
                xs.len(),
                ys.len()
            )));
        }
        if let Some(bad) = ys.iter().position(|&y| y != 1.0 && y != -1.0) {
            return Err(Error::InvalidInput(format!(
                "label at index {bad} is {}, expected -1 or +1",
                ys[bad]
            )));
        }
        if kernel_bank.is_empty() {
            return Err(Error::InvalidInput("kernel bank must be nonempty".into()));
        }
        if c <= 0.0 || !c.is_finite() {
            return Err(Error::InvalidInput(format!("regularization C must be positive, got {c}")));
        }
        Ok(MklProblem { xs, ys, kernel_bank, c })
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn labels(&self) -> &[f64] {
        &self.ys
    }

    pub fn kernel_bank(&self) -> &[KernelSpec] {
        &self.kernel_bank
    }

    pub fn regularization(&self) -> f64 {
        self.c
    }
}

/// Solution of the SVM dual at fixed kernel weights.
#[derive(Clone, Debug)]
pub struct SvmSolution {
    pub alpha: Vec<f64>,
    pub bias: f64,
    pub dual_objective: f64,
    /// Maximum KKT residual at termination.
    pub kkt_violation: f64,
    /// Set when the problem had only one label sign and the solver returned
    /// the constant classifier.
    pub degenerate: bool,
}

/// Maximizes the SVM dual `sum(alpha) - 1/2 sum_ij alpha_i alpha_j y_i y_j K_ij`
/// subject to `0 <= alpha_i <= C` and `sum_i alpha_i y_i = 0`.
///
/// Working pairs are chosen as the maximal KKT-violating pair; the run stops
/// once the violation falls to `tol` or errs after `max_passes` sweeps (of n
/// pair updates each) without reaching it. The bias is the mean of
/// `y_i - sum_j alpha_j y_j K_ij` over free support vectors, falling back to
/// the midpoint of the interval the bound samples admit.
pub fn solve_smo(
    gram: &GramMatrix,
    ys: &[f64],
    c: f64,
    tol: f64,
    max_passes: usize,
) -> Result<SvmSolution> {
    let n = ys.len();
    if gram.size() != n {
        return Err(Error::Shape(format!(
            "Gram matrix of size {} does not match {} labels",
            gram.size(),
            n
        )));
    }
    if c <= 0.0 {
        return Err(Error::InvalidInput(format!("C must be positive, got {c}")));
    }
    if tol <= 0.0 {
        return Err(Error::InvalidInput(format!("tolerance must be positive, got {tol}")));
    }
    if let Some(bad) = ys.iter().position(|&y| y != 1.0 && y != -1.0) {
        return Err(Error::InvalidInput(format!(
            "label at index {bad} is {}, expected -1 or +1",
            ys[bad]
        )));
    }

    // With a single label sign, the equality constraint forces alpha = 0 and
    // the classifier degenerates to that constant sign.
    let has_pos = ys.iter().any(|&y| y > 0.0);
    let has_neg = ys.iter().any(|&y| y < 0.0);
    if !(has_pos && has_neg) {
        return Ok(SvmSolution {
            alpha: vec![0.0; n],
            bias: if has_pos { 1.0 } else { -1.0 },
            dual_objective: 0.0,
            kkt_violation: 0.0,
            degenerate: true,
        });
    }

    let k = gram.values();
    let mut alpha = vec![0.0; n];
    // Gradient of the minimization form: g_i = sum_j alpha_j y_i y_j K_ij - 1.
    let mut grad = vec![-1.0; n];

    let max_iters = max_passes.saturating_mul(n).max(1);
    let mut violation = f64::INFINITY;
    let mut converged = false;

    for _ in 0..max_iters {
        // Maximal violating pair: i maximizes -y g over the set that can move
        // up, j minimizes -y g over the set that can move down.
        let mut up_score = f64::NEG_INFINITY;
        let mut low_score = f64::INFINITY;
        let mut i_up = usize::MAX;
        let mut j_low = usize::MAX;
        for t in 0..n {
            let score = -ys[t] * grad[t];
            let movable_up = (ys[t] > 0.0 && alpha[t] < c) || (ys[t] < 0.0 && alpha[t] > 0.0);
            let movable_down = (ys[t] > 0.0 && alpha[t] > 0.0) || (ys[t] < 0.0 && alpha[t] < c);
            if movable_up && score > up_score {
                up_score = score;
                i_up = t;
            }
            if movable_down && score < low_score {
                low_score = score;
                j_low = t;
            }
        }
        violation = up_score - low_score;
        if violation <= tol {
            converged = true;
            break;
        }

        let (i, j) = (i_up, j_low);
        let eta = (k[(i, i)] + k[(j, j)] - 2.0 * k[(i, j)]).max(TAU);
        let mut step = violation / eta;

        // Clip so both coordinates stay inside the box; feasibility of the
        // pair guarantees strictly positive headroom.
        let room_i = if ys[i] > 0.0 { c - alpha[i] } else { alpha[i] };
        let room_j = if ys[j] > 0.0 { alpha[j] } else { c - alpha[j] };
        step = step.min(room_i).min(room_j);

        let delta_i = ys[i] * step;
        let delta_j = -ys[j] * step;
        alpha[i] += delta_i;
        alpha[j] += delta_j;
        // Snap exactly to the box to keep membership tests crisp.
        alpha[i] = alpha[i].clamp(0.0, c);
        alpha[j] = alpha[j].clamp(0.0, c);

        for t in 0..n {
            grad[t] += ys[t] * (ys[i] * k[(t, i)] * delta_i + ys[j] * k[(t, j)] * delta_j);
        }
    }

    if !converged {
        return Err(Error::Convergence(format!(
            "SMO did not reach tolerance {tol} within {max_passes} sweeps; last KKT violation {violation:.6e}"
        )));
    }

    // Dual objective from the maintained gradient:
    // sum(alpha) - 1/2 alpha' Q alpha = 1/2 sum_i alpha_i (1 - g_i).
    let dual_objective = 0.5
        * alpha
            .iter()
            .zip(&grad)
            .map(|(&a, &g)| a * (1.0 - g))
            .sum::<f64>();

    let bound_eps = 1e-8 * c.max(1.0);
    let mut free_sum = 0.0;
    let mut free_count = 0usize;
    let mut b_low = f64::NEG_INFINITY;
    let mut b_up = f64::INFINITY;
    for t in 0..n {
        let value = -ys[t] * grad[t];
        if alpha[t] > bound_eps && alpha[t] < c - bound_eps {
            free_sum += value;
            free_count += 1;
        } else if (ys[t] > 0.0 && alpha[t] <= bound_eps) || (ys[t] < 0.0 && alpha[t] >= c - bound_eps) {
            b_low = b_low.max(value);
        } else {
            b_up = b_up.min(value);
        }
    }
    let bias = if free_count > 0 {
        free_sum / free_count as f64
    } else if b_low.is_finite() && b_up.is_finite() {
        0.5 * (b_low + b_up)
    } else if b_low.is_finite() {
        b_low
    } else {
        b_up
    };

    Ok(SvmSolution {
        alpha,
        bias,
        dual_objective,
        kkt_violation: violation.max(0.0),
        degenerate: false,
    })
}

/// Norm-proportional kernel weight update: with `s_j = beta_j^2 (a.y)' K_j (a.y)`,
/// the new weight of kernel j is `sqrt(s_j) / sum_k sqrt(s_k)`. When every
/// score is zero the old weights are kept.
pub fn update_weights(
    grams: &[GramMatrix],
    sol: &SvmSolution,
    ys: &[f64],
    old: &KernelWeights,
) -> Result<KernelWeights> {
    if grams.len() != old.len() {
        return Err(Error::Shape(format!(
            "{} Gram matrices but {} weights",
            grams.len(),
            old.len()
        )));
    }
    let n = ys.len();
    if sol.alpha.len() != n || grams.iter().any(|g| g.size() != n) {
        return Err(Error::Shape(
            "solution, labels, and Gram matrices disagree on sample count".into(),
        ));
    }
    let coef: Vec<f64> = sol.alpha.iter().zip(ys).map(|(&a, &y)| a * y).collect();
    let scores: Vec<f64> = grams
        .iter()
        .zip(old.beta())
        .map(|(g, &b)| {
            let mut quad = 0.0;
            for i in 0..n {
                if coef[i] == 0.0 {
                    continue;
                }
                let row = g.values().row(i);
                for j in 0..n {
                    quad += coef[i] * coef[j] * row[j];
                }
            }
            // The quadratic form is nonnegative for PSD kernels; clamp rounding.
            (b * b * quad.max(0.0)).sqrt()
        })
        .collect();
    Ok(KernelWeights::from_scores(&scores).unwrap_or_else(|| old.clone()))
}

/// A trained multiple-kernel classifier.
#[derive(Clone, Debug)]
pub struct MklModel {
    pub solution: SvmSolution,
    pub weights: KernelWeights,
    pub support_xs: Vec<Vec<f64>>,
    pub support_ys: Vec<f64>,
    pub support_alphas: Vec<f64>,
    pub kernel_bank: Vec<KernelSpec>,
    pub outer_iterations: usize,
    pub weight_trajectory: Vec<KernelWeights>,
    pub converged: bool,
}

/// Alternates the SMO dual solve with the closed-form weight update, starting
/// from uniform weights, until the weights move less than `tol` in the max
/// norm or `max_outer` rounds elapse. The combined-kernel dual objective is
/// kept non-increasing: an update that would raise it ends the loop on the
/// previous iterate.
pub fn train_mkl(problem: &MklProblem, tol: f64, max_outer: usize) -> Result<MklModel> {
    if tol <= 0.0 {
        return Err(Error::InvalidInput(format!("outer tolerance must be positive, got {tol}")));
    }
    if max_outer == 0 {
        return Err(Error::InvalidInput("max_outer must be at least 1".into()));
    }
    let n = problem.len();
    let m = problem.kernel_bank.len();

    let has_pos = problem.ys.iter().any(|&y| y > 0.0);
    let has_neg = problem.ys.iter().any(|&y| y < 0.0);
    if !(has_pos && has_neg) {
        let weights = KernelWeights::uniform(m);
        return Ok(MklModel {
            solution: SvmSolution {
                alpha: vec![0.0; n],
                bias: if has_pos { 1.0 } else { -1.0 },
                dual_objective: 0.0,
                kkt_violation: 0.0,
                degenerate: true,
            },
            weights: weights.clone(),
            support_xs: Vec::new(),
            support_ys: Vec::new(),
            support_alphas: Vec::new(),
            kernel_bank: problem.kernel_bank.clone(),
            outer_iterations: 0,
            weight_trajectory: vec![weights],
            converged: true,
        });
    }

    let grams: Vec<GramMatrix> = problem
        .kernel_bank
        .iter()
        .map(|spec| gram_matrix(spec, &problem.xs))
        .collect::<Result<_>>()?;

    let mut weights = KernelWeights::uniform(m);
    let mut trajectory = vec![weights.clone()];
    let mut best: Option<(SvmSolution, KernelWeights)> = None;
    let mut converged = false;
    let mut outer_iterations = 0;

    for _ in 0..max_outer {
        let combined = combine_grams(&grams, &weights)?;
        let sol = solve_smo(&combined, &problem.ys, problem.c, DEFAULT_SMO_TOL, 10 * n)?;
        outer_iterations += 1;

        if let Some((ref best_sol, _)) = best {
            if sol.dual_objective > best_sol.dual_objective + 1e-8 {
                // The weight step made the combined objective worse; keep the
                // previous iterate and stop.
                trajectory.pop();
                break;
            }
        }

        let next = update_weights(&grams, &sol, &problem.ys, &weights)?;
        let delta = next.max_abs_diff(&weights);
        best = Some((sol, weights.clone()));
        trajectory.push(next.clone());
        if delta < tol {
            converged = true;
            break;
        }
        weights = next;
    }

    let (solution, weights) = best.expect("at least one outer iteration ran");
    let mut support_xs = Vec::new();
    let mut support_ys = Vec::new();
    let mut support_alphas = Vec::new();
    for (i, &a) in solution.alpha.iter().enumerate() {
        if a > SUPPORT_THRESHOLD {
            support_xs.push(problem.xs[i].clone());
            support_ys.push(problem.ys[i]);
            support_alphas.push(a);
        }
    }

    Ok(MklModel {
        solution,
        weights,
        support_xs,
        support_ys,
        support_alphas,
        kernel_bank: problem.kernel_bank.clone(),
        outer_iterations,
        weight_trajectory: trajectory,
        converged,
    })
}

/// Combined-kernel decision value
/// `f(x) = sum_i alpha_i y_i sum_j beta_j k_j(x_i, x) + b` over the support set.
pub fn decision_function(model: &MklModel, x: &[f64]) -> Result<f64> {
    if let Some(first) = model.support_xs.first() {
        if first.len() != x.len() {
            return Err(Error::Shape(format!(
                "query has dimension {}, support vectors have {}",
                x.len(),
                first.len()
            )));
        }
    }
    let mut value = model.solution.bias;
    for ((sx, &sy), &sa) in model
        .support_xs
        .iter()
        .zip(&model.support_ys)
        .zip(&model.support_alphas)
    {
        let mut mixed = 0.0;
        for (spec, &beta) in model.kernel_bank.iter().zip(model.weights.beta()) {
            if beta > 0.0 {
                mixed += beta * eval_kernel(spec, sx, x)?;
            }
        }
        value += sa * sy * mixed;
    }
    Ok(value)
}

/// Sign of the decision value; an exact zero maps to +1.
pub fn predict(model: &MklModel, x: &[f64]) -> Result<f64> {
    Ok(if decision_function(model, x)? >= 0.0 { 1.0 } else { -1.0 })
}
