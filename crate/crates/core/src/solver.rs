//! L2-regularized binary classification on restricted instance sets.
//!
//! Hinge and squared hinge are solved by dual coordinate descent; logistic
//! by primal coordinate descent with a backtracking line search. Both cycle
//! in a seeded shuffled order per epoch and stop when the maximal projected
//! gradient violation over an epoch drops below `tol`. The per-epoch
//! objective trace (dual for the hinge family, primal for logistic) never
//! increases.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::{CsrMatrix, SparseVec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Hinge,
    SquaredHinge,
    Logistic,
}

/// A binary problem over a subset of the rows of X: target signs are +-1
/// (y mapped from {0,1} by 2y - 1).
#[derive(Debug, Clone)]
pub struct BinaryProblem {
    pub instances: Vec<u32>,
    pub signs: Vec<i8>,
    pub loss: LossKind,
    pub lambda: f64,
}

impl BinaryProblem {
    pub fn new(instances: Vec<u32>, signs: Vec<i8>, loss: LossKind, lambda: f64) -> Result<Self> {
        if instances.is_empty() {
            return Err(Error::arg("binary problem needs at least one instance"));
        }
        if instances.len() != signs.len() {
            return Err(Error::arg("instances and signs must have equal length"));
        }
        if signs.iter().any(|&s| s != 1 && s != -1) {
            return Err(Error::arg("signs must be +1 or -1"));
        }
        if lambda.is_nan() || lambda <= 0.0 {
            return Err(Error::arg(format!("lambda must be > 0, got {lambda}")));
        }
        Ok(BinaryProblem { instances, signs, loss, lambda })
    }
}

/// Solver output; `converged = false` means `max_iter` epochs elapsed first
/// and the best iterate so far is returned.
#[derive(Debug, Clone)]
pub struct SolveResult {
    pub weights: SparseVec,
    pub converged: bool,
    pub epochs: usize,
    /// Primal objective of Eq.-style form: sum of losses + (lambda/2)|w|^2.
    pub objective: f64,
    /// Per-epoch internal objective, monotonically non-increasing.
    pub objective_trace: Vec<f64>,
}

pub(crate) fn log1p_exp(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn primal_objective(x: &CsrMatrix, prob: &BinaryProblem, w: &[f64]) -> f64 {
    let mut total = 0.5 * prob.lambda * w.iter().map(|v| v * v).sum::<f64>();
    for (pos, &i) in prob.instances.iter().enumerate() {
        let (idx, val) = x.row(i as usize);
        let mut margin = 0f64;
        for (&f, &v) in idx.iter().zip(val) {
            margin += v as f64 * w[f as usize];
        }
        let ym = prob.signs[pos] as f64 * margin;
        total += match prob.loss {
            LossKind::Hinge => (1.0 - ym).max(0.0),
            LossKind::SquaredHinge => {
                let s = (1.0 - ym).max(0.0);
                s * s
            }
            LossKind::Logistic => log1p_exp(-ym),
        };
    }
    total
}

/// Dual coordinate descent for hinge (box [0, C]) and squared hinge
/// (diagonal-shifted, unbounded above), with C = 1/lambda.
fn solve_dual_cd(
    x: &CsrMatrix,
    prob: &BinaryProblem,
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> (Vec<f64>, bool, usize, Vec<f64>) {
    let c = 1.0 / prob.lambda;
    let (upper, diag) = match prob.loss {
        LossKind::Hinge => (c, 0.0),
        LossKind::SquaredHinge => (f64::INFINITY, 0.5 / c),
        LossKind::Logistic => unreachable!(),
    };
    let m = prob.instances.len();
    let mut w = vec![0f64; x.cols()];
    let mut alpha = vec![0f64; m];
    // Q_ii plus the diagonal shift; empty rows are skipped (their loss is a
    // constant and they cannot move w).
    let q: Vec<f64> = prob
        .instances
        .iter()
        .map(|&i| {
            let (_, val) = x.row(i as usize);
            val.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() + diag
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..m).collect();
    let mut dual_obj = 0f64;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut epochs = 0;
    for _ in 0..max_iter {
        epochs += 1;
        order.shuffle(&mut rng);
        let mut max_violation = 0f64;
        for &p in &order {
            let row_id = prob.instances[p] as usize;
            let (idx, val) = x.row(row_id);
            if idx.is_empty() && diag == 0.0 {
                continue;
            }
            let sign = prob.signs[p] as f64;
            let mut margin = 0f64;
            for (&f, &v) in idx.iter().zip(val) {
                margin += v as f64 * w[f as usize];
            }
            let grad = sign * margin - 1.0 + diag * alpha[p];
            let pg = if alpha[p] <= 0.0 {
                grad.min(0.0)
            } else if alpha[p] >= upper {
                grad.max(0.0)
            } else {
                grad
            };
            max_violation = max_violation.max(pg.abs());
            if pg.abs() > 1e-12 {
                let new_alpha = (alpha[p] - grad / q[p]).clamp(0.0, upper);
                let delta = new_alpha - alpha[p];
                if delta != 0.0 {
                    dual_obj += delta * grad + 0.5 * delta * delta * q[p];
                    alpha[p] = new_alpha;
                    let scaled = delta * sign;
                    for (&f, &v) in idx.iter().zip(val) {
                        w[f as usize] += scaled * v as f64;
                    }
                }
            }
        }
        trace.push(dual_obj);
        if max_violation < tol {
            converged = true;
            break;
        }
    }
    (w, converged, epochs, trace)
}

/// Primal coordinate descent for logistic loss over the features touched by
/// the restricted instance set; per-coordinate Newton step with Armijo
/// backtracking keeps the objective non-increasing.
fn solve_logistic_cd(
    x: &CsrMatrix,
    prob: &BinaryProblem,
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> (Vec<f64>, bool, usize, Vec<f64>) {
    let m = prob.instances.len();
    // Column view restricted to the problem's rows.
    let mut columns: std::collections::HashMap<u32, Vec<(u32, f32)>> =
        std::collections::HashMap::new();
    for (p, &i) in prob.instances.iter().enumerate() {
        let (idx, val) = x.row(i as usize);
        for (&f, &v) in idx.iter().zip(val) {
            columns.entry(f).or_default().push((p as u32, v));
        }
    }
    let mut features: Vec<u32> = columns.keys().copied().collect();
    features.sort_unstable();

    let mut w = vec![0f64; x.cols()];
    let mut margins = vec![0f64; m];
    let mut obj = m as f64 * std::f64::consts::LN_2;
    let lambda = prob.lambda;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut epochs = 0;
    for _ in 0..max_iter {
        epochs += 1;
        features.shuffle(&mut rng);
        let mut max_violation = 0f64;
        for &feat in &features {
            let col = &columns[&feat];
            let wj = w[feat as usize];
            let mut g = lambda * wj;
            let mut h = lambda;
            for &(p, v) in col {
                let sign = prob.signs[p as usize] as f64;
                let s = 1.0 / (1.0 + (sign * margins[p as usize]).exp());
                g += -sign * s * v as f64;
                h += (v as f64) * (v as f64) * s * (1.0 - s);
            }
            max_violation = max_violation.max(g.abs());
            if g.abs() < 1e-12 {
                continue;
            }
            let mut step = -g / h;
            let mut accepted = false;
            for _ in 0..30 {
                let mut delta = lambda * (wj * step + 0.5 * step * step);
                for &(p, v) in col {
                    let sign = prob.signs[p as usize] as f64;
                    let old = log1p_exp(-sign * margins[p as usize]);
                    let new = log1p_exp(-sign * (margins[p as usize] + step * v as f64));
                    delta += new - old;
                }
                if delta <= 0.01 * step * g {
                    w[feat as usize] += step;
                    for &(p, v) in col {
                        margins[p as usize] += step * v as f64;
                    }
                    obj += delta;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            let _ = accepted;
        }
        trace.push(obj);
        if max_violation < tol {
            converged = true;
            break;
        }
    }
    (w, converged, epochs, trace)
}

/// Solves the restricted binary problem; deterministic for a given seed.
pub fn solve_binary(
    x: &CsrMatrix,
    prob: &BinaryProblem,
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<SolveResult> {
    if prob.instances.is_empty() {
        return Err(Error::arg("binary problem needs at least one instance"));
    }
    if prob.lambda.is_nan() || prob.lambda <= 0.0 {
        return Err(Error::arg("lambda must be > 0"));
    }
    if let Some(&bad) = prob.instances.iter().find(|&&i| i as usize >= x.rows()) {
        return Err(Error::arg(format!("instance {bad} out of range for {} rows", x.rows())));
    }
    let (w, converged, epochs, trace) = match prob.loss {
        LossKind::Hinge | LossKind::SquaredHinge => solve_dual_cd(x, prob, tol, max_iter, seed),
        LossKind::Logistic => solve_logistic_cd(x, prob, tol, max_iter, seed),
    };
    let objective = primal_objective(x, prob, &w);
    Ok(SolveResult {
        weights: SparseVec::from_dense(&w),
        converged,
        epochs,
        objective,
        objective_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::CsrMatrix;
    use rand_chacha::ChaCha8Rng;

    fn matrix_from_rows(cols: usize, rows: &[Vec<(u32, f32)>]) -> CsrMatrix {
        let vecs: Vec<SparseVec> =
            rows.iter().map(|r| SparseVec::from_pairs(cols, r.clone()).unwrap()).collect();
        CsrMatrix::from_rows(cols, &vecs).unwrap()
    }

    fn random_problem(
        rng: &mut impl Rng,
        loss: LossKind,
    ) -> (CsrMatrix, BinaryProblem) {
        let m = rng.gen_range(4..20);
        let d = rng.gen_range(2..8);
        let mut rows = Vec::with_capacity(m);
        let mut signs = Vec::with_capacity(m);
        for _ in 0..m {
            let mut entries = Vec::new();
            for f in 0..d {
                if rng.gen_bool(0.7) {
                    let v = rng.gen_range(-1.5f32..1.5);
                    if v != 0.0 {
                        entries.push((f as u32, v));
                    }
                }
            }
            rows.push(entries);
            signs.push(if rng.gen_bool(0.5) { 1i8 } else { -1 });
        }
        let x = matrix_from_rows(d, &rows);
        let lambda = [0.5, 1.0, 2.0][rng.gen_range(0..3)];
        let prob =
            BinaryProblem::new((0..m as u32).collect(), signs, loss, lambda).unwrap();
        (x, prob)
    }

    /// Gradient descent with backtracking on the primal; reference for the
    /// smooth losses.
    fn reference_primal_gd(x: &CsrMatrix, prob: &BinaryProblem, iters: usize) -> Vec<f64> {
        let d = x.cols();
        let mut w = vec![0f64; d];
        for _ in 0..iters {
            let mut grad: Vec<f64> = w.iter().map(|&v| prob.lambda * v).collect();
            for (p, &i) in prob.instances.iter().enumerate() {
                let (idx, val) = x.row(i as usize);
                let sign = prob.signs[p] as f64;
                let mut margin = 0f64;
                for (&f, &v) in idx.iter().zip(val) {
                    margin += v as f64 * w[f as usize];
                }
                let coeff = match prob.loss {
                    LossKind::SquaredHinge => {
                        let s = (1.0 - sign * margin).max(0.0);
                        -2.0 * sign * s
                    }
                    LossKind::Logistic => {
                        let s = 1.0 / (1.0 + (sign * margin).exp());
                        -sign * s
                    }
                    LossKind::Hinge => unreachable!(),
                };
                if coeff != 0.0 {
                    for (&f, &v) in idx.iter().zip(val) {
                        grad[f as usize] += coeff * v as f64;
                    }
                }
            }
            let f0 = primal_objective(x, prob, &w);
            let gnorm: f64 = grad.iter().map(|g| g * g).sum();
            if gnorm < 1e-18 {
                break;
            }
            let mut step = 1.0;
            for _ in 0..60 {
                let trial: Vec<f64> =
                    w.iter().zip(&grad).map(|(&wv, &g)| wv - step * g).collect();
                if primal_objective(x, prob, &trial) <= f0 - 0.25 * step * gnorm {
                    w = trial;
                    break;
                }
                step *= 0.5;
            }
        }
        w
    }

    /// Projected gradient on the dual box QP; reference for hinge.
    fn reference_dual_pg(x: &CsrMatrix, prob: &BinaryProblem, iters: usize) -> Vec<f64> {
        let m = prob.instances.len();
        let c = 1.0 / prob.lambda;
        let xd = x.to_dense();
        let dot = |a: usize, b: usize| -> f64 {
            let (ra, rb) = (prob.instances[a] as usize, prob.instances[b] as usize);
            (0..x.cols()).map(|f| xd[ra][f] * xd[rb][f]).sum()
        };
        let mut q = vec![vec![0f64; m]; m];
        for a in 0..m {
            for b in 0..m {
                q[a][b] = prob.signs[a] as f64 * prob.signs[b] as f64 * dot(a, b);
            }
        }
        let lip: f64 = (0..m).map(|a| q[a][a]).sum::<f64>().max(1e-12);
        let step = 1.0 / lip;
        let mut alpha = vec![0f64; m];
        for _ in 0..iters {
            let grad: Vec<f64> = (0..m)
                .map(|a| (0..m).map(|b| q[a][b] * alpha[b]).sum::<f64>() - 1.0)
                .collect();
            for a in 0..m {
                alpha[a] = (alpha[a] - step * grad[a]).clamp(0.0, c);
            }
        }
        let mut w = vec![0f64; x.cols()];
        for a in 0..m {
            let row = prob.instances[a] as usize;
            for f in 0..x.cols() {
                w[f] += alpha[a] * prob.signs[a] as f64 * xd[row][f];
            }
        }
        w
    }

    #[test]
    fn squared_hinge_one_point_closed_form() {
        // Stationarity of (1 - w)^2 + w^2/2 gives w = 2/3.
        let x = matrix_from_rows(1, &[vec![(0, 1.0)]]);
        let prob =
            BinaryProblem::new(vec![0], vec![1], LossKind::SquaredHinge, 1.0).unwrap();
        let out = solve_binary(&x, &prob, 1e-10, 100, 0).unwrap();
        assert!(out.converged);
        let w = out.weights.entries()[0].1 as f64;
        assert!((w - 2.0 / 3.0).abs() < 1e-6, "w = {w}");

        // Grid-search oracle over the 1-D objective agrees.
        let grid_best = (0..20000)
            .map(|i| -1.0 + i as f64 * 1e-4)
            .min_by(|&a, &b| {
                let fa = (1.0 - a).max(0.0).powi(2) + 0.5 * a * a;
                let fb = (1.0 - b).max(0.0).powi(2) + 0.5 * b * b;
                fa.partial_cmp(&fb).unwrap()
            })
            .unwrap();
        assert!((grid_best - w).abs() < 1e-3);
    }

    #[test]
    fn symmetric_data_gives_zero_weight() {
        let x = matrix_from_rows(1, &[vec![(0, 1.0)], vec![(0, 1.0)]]);
        for loss in [LossKind::Hinge, LossKind::SquaredHinge, LossKind::Logistic] {
            let prob =
                BinaryProblem::new(vec![0, 1], vec![1, -1], loss, 1.0).unwrap();
            let out = solve_binary(&x, &prob, 1e-8, 500, 7).unwrap();
            let w = out.weights.entries().first().map(|&(_, v)| v as f64).unwrap_or(0.0);
            assert!(w.abs() < 1e-4, "{loss:?}: w = {w}");
        }
    }

    #[test]
    fn matches_reference_solvers() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for trial in 0..30u64 {
            let loss = [LossKind::Hinge, LossKind::SquaredHinge, LossKind::Logistic]
                [(trial % 3) as usize];
            let (x, prob) = random_problem(&mut rng, loss);
            let out = solve_binary(&x, &prob, 1e-8, 2000, trial).unwrap();
            let w_ref = match loss {
                LossKind::Hinge => reference_dual_pg(&x, &prob, 30000),
                _ => reference_primal_gd(&x, &prob, 5000),
            };
            let f_ref = primal_objective(&x, &prob, &w_ref);
            assert!(
                (out.objective - f_ref).abs() <= 1e-4,
                "{loss:?} trial {trial}: ours {} vs reference {f_ref}",
                out.objective
            );
        }
    }

    #[test]
    fn objective_trace_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..15u64 {
            let loss = [LossKind::Hinge, LossKind::SquaredHinge, LossKind::Logistic]
                [(trial % 3) as usize];
            let (x, prob) = random_problem(&mut rng, loss);
            let out = solve_binary(&x, &prob, 1e-10, 50, trial).unwrap();
            for w in out.objective_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "{loss:?}: trace {:?}", out.objective_trace);
            }
        }
    }

    #[test]
    fn feature_and_lambda_scaling_preserves_margins() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..10u64 {
            let loss =
                [LossKind::Hinge, LossKind::SquaredHinge][(trial % 2) as usize];
            let (x, prob) = random_problem(&mut rng, loss);
            // Scale features by 2 (exact in floating point) and lambda by 4.
            let scaled_rows: Vec<SparseVec> = (0..x.rows())
                .map(|i| {
                    let (idx, val) = x.row(i);
                    SparseVec::new(
                        x.cols(),
                        idx.iter().zip(val).map(|(&f, &v)| (f, 2.0 * v)).collect(),
                    )
                    .unwrap()
                })
                .collect();
            let x2 = CsrMatrix::from_rows(x.cols(), &scaled_rows).unwrap();
            let prob2 = BinaryProblem::new(
                prob.instances.clone(),
                prob.signs.clone(),
                loss,
                4.0 * prob.lambda,
            )
            .unwrap();
            let a = solve_binary(&x, &prob, 1e-8, 1000, trial).unwrap();
            let b = solve_binary(&x2, &prob2, 1e-8, 1000, trial).unwrap();
            for &i in &prob.instances {
                let (idx, val) = x.row(i as usize);
                let wa: std::collections::HashMap<u32, f32> = a.weights.iter().collect();
                let wb: std::collections::HashMap<u32, f32> = b.weights.iter().collect();
                let ma: f64 = idx
                    .iter()
                    .zip(val)
                    .map(|(&f, &v)| v as f64 * *wa.get(&f).unwrap_or(&0.0) as f64)
                    .sum();
                let mb: f64 = idx
                    .iter()
                    .zip(val)
                    .map(|(&f, &v)| 2.0 * v as f64 * *wb.get(&f).unwrap_or(&0.0) as f64)
                    .sum();
                assert!((ma - mb).abs() < 1e-6, "margins diverge: {ma} vs {mb}");
                if ma.abs() > 1e-6 {
                    assert_eq!(ma.signum(), mb.signum());
                }
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (x, prob) = random_problem(&mut rng, LossKind::SquaredHinge);
        let a = solve_binary(&x, &prob, 0.1, 100, 42).unwrap();
        let b = solve_binary(&x, &prob, 0.1, 100, 42).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.epochs, b.epochs);
    }

    #[test]
    fn non_convergence_returns_flagged_iterate() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (x, prob) = random_problem(&mut rng, LossKind::SquaredHinge);
        let out = solve_binary(&x, &prob, 1e-14, 1, 0).unwrap();
        assert!(!out.converged);
        assert_eq!(out.epochs, 1);
        assert!(out.weights.nnz() > 0 || out.objective >= 0.0);
    }

    #[test]
    fn problem_validation() {
        assert!(BinaryProblem::new(vec![], vec![], LossKind::Hinge, 1.0).is_err());
        assert!(BinaryProblem::new(vec![0], vec![2], LossKind::Hinge, 1.0).is_err());
        assert!(BinaryProblem::new(vec![0], vec![1], LossKind::Hinge, 0.0).is_err());
        assert!(BinaryProblem::new(vec![0], vec![1, 1], LossKind::Hinge, 1.0).is_err());
    }


}
