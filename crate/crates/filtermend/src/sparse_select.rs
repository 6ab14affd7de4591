//! KL-weighted Lasso by cyclic coordinate descent, regularization paths,
//! lambda selection and the ordinary-least-squares refit.
//!
//! The objective is the literal unnormalized squared-error sum
//!
//! ```text
//! sum_i (y_i - b0 - sum_j x_ij * b_j)^2  +  lambda * sum_j w_j * |b_j|
//! ```
//!
//! solved in standardized predictor space (zero mean, unit variance per
//! column); coefficients are reported de-standardized alongside their
//! standardized values. The per-coefficient weight `w_j` carries the
//! KL-divergence score of filter `j`, floored so the problem stays
//! well-posed when a filter shows no shift at all.

use crate::divergence::{build_histogram, kl_divergence, Histogram};
use crate::error::{Error, Result};

/// `sign(z) * max(|z| - gamma, 0)`.
#[inline]
pub fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

const COEF_TOL: f64 = 1e-7;
const KKT_TOL: f64 = 1e-6;
const MAX_SWEEPS: usize = 10_000;

/// A weighted-Lasso instance: standardized predictors, response, positive
/// per-coefficient weights and the penalty strength.
#[derive(Debug, Clone)]
pub struct LassoProblem {
    std_cols: Vec<Vec<f64>>,
    gram: Vec<f64>,
    y: Vec<f64>,
    y_mean: f64,
    weights: Vec<f64>,
    means: Vec<f64>,
    scales: Vec<f64>,
    pub lambda: f64,
    n: usize,
    p: usize,
}

impl LassoProblem {
    /// Build from a row-major `n x p` predictor block. Constant columns are
    /// kept (their scale is recorded as 0) but can never activate.
    pub fn new(
        x_rows: &[f64],
        n: usize,
        p: usize,
        y: &[f64],
        weights: &[f64],
        lambda: f64,
    ) -> Result<Self> {
        if n < 1 || p < 1 {
            return Err(Error::DimMismatch {
                axis: "problem size",
                expected: 1,
                actual: 0,
            });
        }
        if x_rows.len() != n * p {
            return Err(Error::DimMismatch {
                axis: "predictor elements",
                expected: n * p,
                actual: x_rows.len(),
            });
        }
        if y.len() != n {
            return Err(Error::DimMismatch {
                axis: "response length",
                expected: n,
                actual: y.len(),
            });
        }
        if weights.len() != p {
            return Err(Error::DimMismatch {
                axis: "weights length",
                expected: p,
                actual: weights.len(),
            });
        }
        if !x_rows.iter().all(|v| v.is_finite()) || !y.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("lasso inputs"));
        }
        if !weights.iter().all(|w| w.is_finite() && *w > 0.0) {
            return Err(Error::NonFinite("lasso weights (must be positive)"));
        }
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::NonFinite("lambda"));
        }

        let mut means = vec![0.0; p];
        for row in x_rows.chunks_exact(p) {
            for (m, v) in means.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut means {
            *m /= n as f64;
        }
        let mut var = vec![0.0; p];
        for row in x_rows.chunks_exact(p) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&means) {
                let d = v - m;
                *s += d * d;
            }
        }
        let scales: Vec<f64> = var.iter().map(|v| (v / n as f64).sqrt()).collect();

        let mut std_cols: Vec<Vec<f64>> = vec![vec![0.0; n]; p];
        for (i, row) in x_rows.chunks_exact(p).enumerate() {
            for j in 0..p {
                if scales[j] > 0.0 {
                    std_cols[j][i] = (row[j] - means[j]) / scales[j];
                }
            }
        }
        let gram: Vec<f64> = std_cols.iter().map(|c| dot(c, c)).collect();
        let y_mean = y.iter().sum::<f64>() / n as f64;

        Ok(Self {
            std_cols,
            gram,
            y: y.to_vec(),
            y_mean,
            weights: weights.to_vec(),
            means,
            scales,
            lambda,
            n,
            p,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn standardized_column(&self, j: usize) -> &[f64] {
        &self.std_cols[j]
    }

    /// Smallest lambda at which the all-zero solution is optimal:
    /// `max_j 2 |x_j' (y - mean(y))| / w_j` over standardized columns.
    pub fn lambda_max(&self) -> f64 {
        let centered: Vec<f64> = self.y.iter().map(|v| v - self.y_mean).collect();
        let mut best = 0.0f64;
        for j in 0..self.p {
            if self.gram[j] <= 0.0 {
                continue;
            }
            let g = 2.0 * dot(&self.std_cols[j], &centered).abs() / self.weights[j];
            best = best.max(g);
        }
        best
    }

    /// Worst KKT violation of a solution, in standardized space.
    pub fn kkt_violation(&self, sol: &LassoSolution) -> f64 {
        let r = self.residual(sol);
        let mut worst = 0.0f64;
        for j in 0..self.p {
            if self.gram[j] <= 0.0 {
                continue;
            }
            let g = 2.0 * dot(&self.std_cols[j], &r);
            let bound = sol.lambda * self.weights[j];
            let v = if sol.beta_std[j] == 0.0 {
                (g.abs() - bound).max(0.0)
            } else {
                (g - bound * sol.beta_std[j].signum()).abs()
            };
            worst = worst.max(v);
        }
        worst
    }

    fn residual(&self, sol: &LassoSolution) -> Vec<f64> {
        let mut r: Vec<f64> = self.y.iter().map(|v| v - sol.beta0_std).collect();
        for j in 0..self.p {
            let b = sol.beta_std[j];
            if b != 0.0 {
                axpy(&mut r, &self.std_cols[j], -b);
            }
        }
        r
    }

    /// Objective value for standardized coefficients.
    fn objective(&self, rss: f64, beta_std: &[f64], lambda: f64) -> f64 {
        let penalty: f64 = beta_std
            .iter()
            .zip(&self.weights)
            .map(|(b, w)| w * b.abs())
            .sum();
        rss + lambda * penalty
    }
}

/// Solver output: de-standardized coefficients plus the standardized-space
/// ones the optimality conditions refer to.
#[derive(Debug, Clone)]
pub struct LassoSolution {
    pub beta: Vec<f64>,
    pub beta0: f64,
    pub beta_std: Vec<f64>,
    pub beta0_std: f64,
    pub lambda: f64,
    pub active_set: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
}

impl LassoSolution {
    /// Predict one raw (un-standardized) predictor row.
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut acc = self.beta0;
        for &j in &self.active_set {
            acc += self.beta[j] * row[j];
        }
        acc
    }
}

/// Minimize the weighted objective at `problem.lambda` by cyclic coordinate
/// descent. Converges when the largest coefficient change in a sweep drops
/// to 1e-7 and the KKT conditions hold within 1e-6, capped at 10000 sweeps.
pub fn weighted_lasso(problem: &LassoProblem) -> Result<LassoSolution> {
    Ok(solve(problem, problem.lambda, None))
}

fn solve(pr: &LassoProblem, lambda: f64, warm: Option<&[f64]>) -> LassoSolution {
    let n = pr.n;
    let p = pr.p;
    let mut beta: Vec<f64> = warm.map_or_else(|| vec![0.0; p], <[f64]>::to_vec);
    let mut beta0 = pr.y_mean;
    let mut r: Vec<f64> = pr.y.iter().map(|v| v - beta0).collect();
    for j in 0..p {
        if beta[j] != 0.0 {
            axpy(&mut r, &pr.std_cols[j], -beta[j]);
        }
    }

    #[cfg(debug_assertions)]
    let mut prev_obj = f64::INFINITY;

    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < MAX_SWEEPS {
        sweeps += 1;
        let mut max_delta = 0.0f64;
        for j in 0..p {
            if pr.gram[j] <= 0.0 {
                continue;
            }
            let old = beta[j];
            let z = dot(&pr.std_cols[j], &r) + pr.gram[j] * old;
            let new = soft_threshold(z, 0.5 * lambda * pr.weights[j]) / pr.gram[j];
            if new != old {
                axpy(&mut r, &pr.std_cols[j], old - new);
                beta[j] = new;
                max_delta = max_delta.max((new - old).abs());
            }
        }
        // unpenalized intercept: recenter the residual
        let shift = r.iter().sum::<f64>() / n as f64;
        if shift != 0.0 {
            beta0 += shift;
            for v in &mut r {
                *v -= shift;
            }
        }

        #[cfg(debug_assertions)]
        {
            let obj = pr.objective(dot(&r, &r), &beta, lambda);
            debug_assert!(
                obj <= prev_obj + 1e-9 * (1.0 + prev_obj.abs()),
                "coordinate-descent objective increased: {prev_obj} -> {obj}"
            );
            prev_obj = obj;
        }

        if max_delta <= COEF_TOL {
            // refresh the residual before judging optimality, so incremental
            // drift cannot masquerade as convergence
            r = pr.y.iter().map(|v| v - beta0).collect();
            for j in 0..p {
                if beta[j] != 0.0 {
                    axpy(&mut r, &pr.std_cols[j], -beta[j]);
                }
            }
            let mut worst = 0.0f64;
            for j in 0..p {
                if pr.gram[j] <= 0.0 {
                    continue;
                }
                let g = 2.0 * dot(&pr.std_cols[j], &r);
                let bound = lambda * pr.weights[j];
                let v = if beta[j] == 0.0 {
                    (g.abs() - bound).max(0.0)
                } else {
                    (g - bound * beta[j].signum()).abs()
                };
                worst = worst.max(v);
            }
            if worst <= KKT_TOL {
                converged = true;
                break;
            }
        }
    }

    let mut raw = vec![0.0; p];
    let mut raw0 = beta0;
    for j in 0..p {
        if pr.scales[j] > 0.0 && beta[j] != 0.0 {
            raw[j] = beta[j] / pr.scales[j];
            raw0 -= beta[j] * pr.means[j] / pr.scales[j];
        }
    }
    let active_set: Vec<usize> = (0..p).filter(|&j| beta[j] != 0.0).collect();
    LassoSolution {
        beta: raw,
        beta0: raw0,
        beta_std: beta,
        beta0_std: beta0,
        lambda,
        active_set,
        iterations: sweeps,
        converged,
    }
}

/// Descending log-spaced lambda grid with warm-started solutions.
#[derive(Debug, Clone)]
pub struct LambdaPath {
    pub lambdas: Vec<f64>,
    pub solutions: Vec<LassoSolution>,
}

/// Solve the path from `lambda_max` down to `ratio * lambda_max` over a
/// log-spaced grid, warm-starting each solve from the previous one. A
/// zero-variance response collapses the path to a single all-zero solution.
pub fn lambda_path(
    x_rows: &[f64],
    n: usize,
    p: usize,
    y: &[f64],
    weights: &[f64],
    grid_size: usize,
    ratio: f64,
) -> Result<LambdaPath> {
    if grid_size < 2 {
        return Err(Error::BadConfig(format!(
            "grid_size must be >= 2, got {grid_size}"
        )));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::BadConfig(format!(
            "grid ratio must lie in (0, 1), got {ratio}"
        )));
    }
    let problem = LassoProblem::new(x_rows, n, p, y, weights, 0.0)?;
    let lam_max = problem.lambda_max();
    if lam_max <= 0.0 {
        // constant response (or no usable predictor): the zero solution is
        // already optimal everywhere
        let sol = solve(&problem, 0.0, None);
        return Ok(LambdaPath {
            lambdas: vec![0.0],
            solutions: vec![sol],
        });
    }
    let g = grid_size;
    let lambdas: Vec<f64> = (0..g)
        .map(|i| lam_max * ratio.powf(i as f64 / (g - 1) as f64))
        .collect();
    let mut solutions = Vec::with_capacity(g);
    let mut warm: Option<Vec<f64>> = None;
    for &lam in &lambdas {
        let sol = solve(&problem, lam, warm.as_deref());
        warm = Some(sol.beta_std.clone());
        solutions.push(sol);
    }
    Ok(LambdaPath { lambdas, solutions })
}

/// Per-grid-point selection diagnostics.
#[derive(Debug, Clone)]
pub struct PathDiagnostic {
    pub lambda: f64,
    pub n_active: usize,
    pub holdout_mse: f64,
    pub recon_kl: f64,
    pub score: f64,
}

/// Outcome of lambda selection.
#[derive(Debug, Clone)]
pub struct LambdaChoice {
    pub index: usize,
    pub diagnostics: Vec<PathDiagnostic>,
}

impl LambdaChoice {
    /// CSV export: `lambda,n_active,holdout_mse,recon_kl,score`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda,n_active,holdout_mse,recon_kl,score\n");
        for d in &self.diagnostics {
            out.push_str(&format!(
                "{:.6},{},{:.6},{:.6},{:.6}\n",
                d.lambda, d.n_active, d.holdout_mse, d.recon_kl, d.score
            ));
        }
        out
    }
}

/// Pick the grid point minimizing `holdout_mse / var(y_h)` plus the
/// divergence between reconstructed target responses and the source
/// response distribution, normalized by the filter's own KL score. Grid
/// points with empty active sets are ineligible; ties break toward the
/// larger (sparser) lambda.
#[allow(clippy::too_many_arguments)]
pub fn select_lambda(
    path: &LambdaPath,
    holdout_x: &[f64],
    n_holdout: usize,
    holdout_y: &[f64],
    target_x: &[f64],
    n_target: usize,
    source_hist: &Histogram,
    delta_l: f64,
    smoothing: f64,
    weight_floor: f64,
) -> Result<LambdaChoice> {
    if n_holdout == 0 || holdout_y.len() != n_holdout {
        return Err(Error::EmptySamples("lambda-selection holdout"));
    }
    if n_target == 0 {
        return Err(Error::EmptySamples("lambda-selection target samples"));
    }
    let p = path.solutions.first().map_or(0, |s| s.beta.len());
    let y_mean = holdout_y.iter().sum::<f64>() / n_holdout as f64;
    let y_var = holdout_y
        .iter()
        .map(|v| (v - y_mean) * (v - y_mean))
        .sum::<f64>()
        / n_holdout as f64;
    let err_norm = y_var.max(f64::MIN_POSITIVE);
    let div_norm = delta_l.max(weight_floor);

    let mut diagnostics = Vec::with_capacity(path.solutions.len());
    let mut best: Option<(usize, f64)> = None;
    for (i, sol) in path.solutions.iter().enumerate() {
        let mse = holdout_x
            .chunks_exact(p)
            .zip(holdout_y)
            .map(|(row, &yv)| {
                let e = sol.predict(row) - yv;
                e * e
            })
            .sum::<f64>()
            / n_holdout as f64;
        let preds: Vec<f64> = target_x.chunks_exact(p).map(|row| sol.predict(row)).collect();
        let recon_hist = build_histogram(&preds, source_hist.bin_edges(), smoothing)?;
        let recon_kl = kl_divergence(&recon_hist, source_hist)?;
        let score = mse / err_norm + recon_kl / div_norm;
        let eligible = !sol.active_set.is_empty();
        diagnostics.push(PathDiagnostic {
            lambda: sol.lambda,
            n_active: sol.active_set.len(),
            holdout_mse: mse,
            recon_kl,
            score: if eligible { score } else { f64::INFINITY },
        });
        if eligible {
            // strict less-than keeps the earlier (larger) lambda on ties
            if best.map_or(true, |(_, s)| score < s) {
                best = Some((i, score));
            }
        }
    }
    match best {
        Some((index, _)) => Ok(LambdaChoice { index, diagnostics }),
        None => Err(Error::EmptyPath),
    }
}

/// Least squares on the selected columns via normal equations with a ridge
/// jitter of 1e-10 on the Gram diagonal. Returns (coefficients, intercept).
pub fn ols_refit(x_rows: &[f64], n: usize, k: usize, y: &[f64]) -> Result<(Vec<f64>, f64)> {
    if k < 1 {
        return Err(Error::DimMismatch {
            axis: "selected columns",
            expected: 1,
            actual: 0,
        });
    }
    if n <= k {
        return Err(Error::DimMismatch {
            axis: "rows (need n > k)",
            expected: k + 1,
            actual: n,
        });
    }
    if x_rows.len() != n * k || y.len() != n {
        return Err(Error::DimMismatch {
            axis: "refit input lengths",
            expected: n * k,
            actual: x_rows.len(),
        });
    }

    let mut means = vec![0.0; k];
    for row in x_rows.chunks_exact(k) {
        for (m, v) in means.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= n as f64;
    }
    let y_mean = y.iter().sum::<f64>() / n as f64;

    // columns that centering reduces to (numerically) nothing are collinear
    // with the intercept
    let mut centered_ss = vec![0.0; k];
    let mut raw_ss = vec![0.0; k];
    for row in x_rows.chunks_exact(k) {
        for j in 0..k {
            let d = row[j] - means[j];
            centered_ss[j] += d * d;
            raw_ss[j] += row[j] * row[j];
        }
    }
    let constant: Vec<usize> = (0..k)
        .filter(|&j| centered_ss[j] <= 1e-12 * (raw_ss[j] + 1.0))
        .collect();
    if !constant.is_empty() {
        return Err(Error::RankDeficient { columns: constant });
    }

    const JITTER: f64 = 1e-10;
    let mut gram = vec![0.0; k * k];
    let mut rhs = vec![0.0; k];
    for (row, &yv) in x_rows.chunks_exact(k).zip(y) {
        let dy = yv - y_mean;
        for j in 0..k {
            let dj = row[j] - means[j];
            rhs[j] += dj * dy;
            for l in j..k {
                gram[j * k + l] += dj * (row[l] - means[l]);
            }
        }
    }
    let max_diag = (0..k).map(|j| gram[j * k + j]).fold(0.0f64, f64::max);
    for j in 0..k {
        gram[j * k + j] += JITTER;
        for l in 0..j {
            gram[j * k + l] = gram[l * k + j];
        }
    }

    // Cholesky with a relative pivot guard
    let mut chol = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..=i {
            let mut s = gram[i * k + j];
            for m in 0..j {
                s -= chol[i * k + m] * chol[j * k + m];
            }
            if i == j {
                if s <= 1e-8 * max_diag.max(JITTER) {
                    return Err(Error::RankDeficient { columns: vec![i] });
                }
                chol[i * k + i] = s.sqrt();
            } else {
                chol[i * k + j] = s / chol[j * k + j];
            }
        }
    }
    // forward/back substitution
    let mut z = vec![0.0; k];
    for i in 0..k {
        let mut s = rhs[i];
        for m in 0..i {
            s -= chol[i * k + m] * z[m];
        }
        z[i] = s / chol[i * k + i];
    }
    let mut coef = vec![0.0; k];
    for i in (0..k).rev() {
        let mut s = z[i];
        for m in i + 1..k {
            s -= chol[m * k + i] * coef[m];
        }
        coef[i] = s / chol[i * k + i];
    }
    let intercept = y_mean - coef.iter().zip(&means).map(|(c, m)| c * m).sum::<f64>();
    Ok((coef, intercept))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(acc: &mut [f64], v: &[f64], c: f64) {
    for (a, x) in acc.iter_mut().zip(v) {
        *a += c * x;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn soft_threshold_cases() {
        assert_eq!(soft_threshold(3.0, 1.0), 2.0);
        assert_eq!(soft_threshold(-3.0, 1.0), -2.0);
        assert_eq!(soft_threshold(0.5, 1.0), 0.0);
    }

    fn random_instance(n: usize, p: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n * p).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let true_beta: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let y: Vec<f64> = x
            .chunks_exact(p)
            .map(|row| {
                let mut acc = 0.5;
                for (v, b) in row.iter().zip(&true_beta) {
                    acc += v * b;
                }
                acc + rng.gen_range(-0.1..0.1)
            })
            .collect();
        (x, y)
    }

    fn ols_via_refit(x: &[f64], n: usize, p: usize, y: &[f64]) -> (Vec<f64>, f64) {
        ols_refit(x, n, p, y).unwrap()
    }

    #[test]
    fn zero_lambda_matches_ols() {
        let (x, y) = random_instance(60, 5, 17);
        let problem = LassoProblem::new(&x, 60, 5, &y, &[1.0; 5], 0.0).unwrap();
        let sol = weighted_lasso(&problem).unwrap();
        assert!(sol.converged);
        let (ols_coef, ols_int) = ols_via_refit(&x, 60, 5, &y);
        for (a, b) in sol.beta.iter().zip(&ols_coef) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert!((sol.beta0 - ols_int).abs() < 1e-6);
    }

    #[test]
    fn lambda_at_or_above_max_shrinks_everything() {
        let (x, y) = random_instance(40, 4, 23);
        let probe = LassoProblem::new(&x, 40, 4, &y, &[1.0; 4], 0.0).unwrap();
        let lam_max = probe.lambda_max();
        let problem = LassoProblem::new(&x, 40, 4, &y, &[1.0; 4], lam_max * 1.5).unwrap();
        let sol = weighted_lasso(&problem).unwrap();
        assert!(sol.active_set.is_empty());
        let y_mean = y.iter().sum::<f64>() / 40.0;
        assert!((sol.beta0 - y_mean).abs() < 1e-9);
    }

    #[test]
    fn self_predictor_with_small_weight_is_selected() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 80;
        let p = 4;
        let mut x: Vec<f64> = (0..n * p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        for (i, &v) in y.iter().enumerate() {
            x[i * p + 2] = v; // predictor 2 duplicates the response
        }
        let weights = [1e3, 1e3, 1e-3, 1e3];
        let probe = LassoProblem::new(&x, n, p, &y, &weights, 0.0).unwrap();
        let lam = probe.lambda_max() * 1e-3;
        let problem = LassoProblem::new(&x, n, p, &y, &weights, lam).unwrap();
        let sol = weighted_lasso(&problem).unwrap();
        assert_eq!(sol.active_set, vec![2]);
        assert!((sol.beta[2] - 1.0).abs() < 1e-3, "beta = {}", sol.beta[2]);
    }

    #[test]
    fn kkt_holds_on_random_instances() {
        for seed in 0..20 {
            let n = 50 + (seed as usize % 4) * 30;
            let p = 6 + (seed as usize % 3) * 4;
            let (x, y) = random_instance(n, p, 1000 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
            let weights: Vec<f64> = (0..p).map(|_| rng.gen_range(0.1..3.0)).collect();
            let probe = LassoProblem::new(&x, n, p, &y, &weights, 0.0).unwrap();
            let lam = probe.lambda_max() * rng.gen_range(0.05..0.8);
            let problem = LassoProblem::new(&x, n, p, &y, &weights, lam).unwrap();
            let sol = weighted_lasso(&problem).unwrap();
            assert!(sol.converged);
            let viol = problem.kkt_violation(&sol);
            assert!(viol <= 1e-6, "seed {seed}: KKT violation {viol}");
        }
    }

    #[test]
    fn column_permutation_permutes_coefficients() {
        let (x, y) = random_instance(70, 5, 41);
        let n = 70;
        let p = 5;
        let weights = [0.5, 1.0, 2.0, 0.7, 1.3];
        let probe = LassoProblem::new(&x, n, p, &y, &weights, 0.0).unwrap();
        let lam = probe.lambda_max() * 0.2;
        let sol = weighted_lasso(&LassoProblem::new(&x, n, p, &y, &weights, lam).unwrap()).unwrap();

        let perm = [3usize, 0, 4, 1, 2];
        let mut xp = vec![0.0; n * p];
        let mut wp = [0.0; 5];
        for (new_j, &old_j) in perm.iter().enumerate() {
            wp[new_j] = weights[old_j];
            for i in 0..n {
                xp[i * p + new_j] = x[i * p + old_j];
            }
        }
        let solp = weighted_lasso(&LassoProblem::new(&xp, n, p, &y, &wp, lam).unwrap()).unwrap();
        for (new_j, &old_j) in perm.iter().enumerate() {
            assert!(
                (solp.beta[new_j] - sol.beta[old_j]).abs() < 1e-6,
                "coefficient mismatch after permutation"
            );
        }
        assert!((solp.beta0 - sol.beta0).abs() < 1e-6);
    }

    #[test]
    fn standardization_reproduces_raw_matrix() {
        let (x, _) = random_instance(30, 4, 51);
        let y: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let pr = LassoProblem::new(&x, 30, 4, &y, &[1.0; 4], 0.0).unwrap();
        for i in 0..30 {
            for j in 0..4 {
                let rebuilt = pr.standardized_column(j)[i] * pr.scales()[j] + pr.means()[j];
                assert!((rebuilt - x[i * 4 + j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn path_first_entry_is_empty_and_last_near_ols() {
        let (x, y) = random_instance(100, 6, 61);
        let path = lambda_path(&x, 100, 6, &y, &[1.0; 6], 60, 1e-4).unwrap();
        assert!(path.solutions[0].active_set.is_empty());
        let last = path.solutions.last().unwrap();
        let (ols_coef, ols_int) = ols_via_refit(&x, 100, 6, &y);
        for (a, b) in last.beta.iter().zip(&ols_coef) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
        assert!((last.beta0 - ols_int).abs() < 1e-3);
    }

    #[test]
    fn degenerate_response_collapses_path() {
        let (x, _) = random_instance(20, 3, 71);
        let y = vec![4.0; 20];
        let path = lambda_path(&x, 20, 3, &y, &[1.0; 3], 50, 1e-3).unwrap();
        assert_eq!(path.solutions.len(), 1);
        assert!(path.solutions[0].active_set.is_empty());
        assert!((path.solutions[0].beta0 - 4.0).abs() < 1e-12);
    }

    #[test]
    fn doubling_weight_halves_entry_lambda_on_orthogonal_design() {
        // columns of an 8x8 Hadamard block (minus the all-ones column) are
        // mean-zero and mutually orthogonal, so entry points have closed form
        let h: [[f64; 8]; 3] = [
            [1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0],
            [1.0, 1.0, -1.0, -1.0, 1.0, 1.0, -1.0, -1.0],
            [1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0],
        ];
        let n = 8;
        let p = 3;
        let mut x = vec![0.0; n * p];
        for i in 0..n {
            for j in 0..p {
                x[i * p + j] = h[j][i];
            }
        }
        let y: Vec<f64> = (0..n).map(|i| 3.0 * h[0][i] + 2.0 * h[1][i] + 1.0 * h[2][i]).collect();

        let entry_lambda = |weights: &[f64]| -> f64 {
            let path = lambda_path(&x, n, p, &y, weights, 400, 1e-4).unwrap();
            for (lam, sol) in path.lambdas.iter().zip(&path.solutions) {
                if sol.beta_std[1] != 0.0 {
                    return *lam;
                }
            }
            panic!("predictor 1 never entered");
        };
        let e1 = entry_lambda(&[1.0, 1.0, 1.0]);
        let e2 = entry_lambda(&[1.0, 2.0, 1.0]);
        let ratio = e2 / e1;
        assert!((ratio - 0.5).abs() < 0.04, "entry ratio = {ratio}");
    }

    fn flat_rows(cols: &[Vec<f64>]) -> (Vec<f64>, usize, usize) {
        let p = cols.len();
        let n = cols[0].len();
        let mut rows = vec![0.0; n * p];
        for (j, c) in cols.iter().enumerate() {
            for (i, &v) in c.iter().enumerate() {
                rows[i * p + j] = v;
            }
        }
        (rows, n, p)
    }

    #[test]
    fn select_lambda_forced_choice_and_dominance() {
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let col: Vec<f64> = (0..200).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let noise: Vec<f64> = (0..200).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = col.iter().map(|v| 2.0 * v + 0.3).collect();
        let (x, n, p) = flat_rows(&[col.clone(), noise]);
        let path = lambda_path(&x, n, p, &y, &[1.0, 1.0], 30, 1e-3).unwrap();

        let edges: Vec<f64> = (0..=16).map(|i| -2.0 + 4.0 * i as f64 / 16.0).collect();
        let hist = build_histogram(&y, &edges, 1.0).unwrap();
        let choice = select_lambda(
            &path, &x, n, &y, &x, n, &hist, 0.5, 1.0, 1e-3,
        )
        .unwrap();
        assert!(!path.solutions[choice.index].active_set.is_empty());
        assert_eq!(choice.diagnostics.len(), 30);
        // low lambda fits essentially perfectly on both terms here, so the
        // choice must dominate the first eligible grid point
        let first_eligible = choice
            .diagnostics
            .iter()
            .position(|d| d.n_active > 0)
            .unwrap();
        assert!(
            choice.diagnostics[choice.index].score <= choice.diagnostics[first_eligible].score
        );
    }

    #[test]
    fn select_lambda_identical_domains_reduces_to_mse_argmin() {
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let c0: Vec<f64> = (0..300).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c1: Vec<f64> = (0..300).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = c0
            .iter()
            .zip(&c1)
            .map(|(a, b)| 1.5 * a - 0.7 * b + rng.gen_range(-0.05..0.05))
            .collect();
        let (x, n, p) = flat_rows(&[c0, c1]);
        let path = lambda_path(&x, n, p, &y, &[1.0, 1.0], 40, 1e-3).unwrap();

        let lo = y.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let edges = crate::divergence::equal_width_edges(lo, hi, 32);
        let hist = build_histogram(&y, &edges, 1.0).unwrap();
        // target samples equal the source rows: the divergence term is flat
        let choice = select_lambda(
            &path, &x, n, &y, &x, n, &hist, 1e-9, 1.0, 1e-3,
        )
        .unwrap();
        let mse_argmin = choice
            .diagnostics
            .iter()
            .enumerate()
            .filter(|(_, d)| d.n_active > 0)
            .min_by(|a, b| a.1.holdout_mse.partial_cmp(&b.1.holdout_mse).unwrap())
            .unwrap()
            .0;
        assert_eq!(choice.index, mse_argmin);
    }

    #[test]
    fn select_lambda_all_empty_is_an_error() {
        let (x, _) = random_instance(20, 2, 99);
        let y = vec![1.0; 20];
        let path = lambda_path(&x, 20, 2, &y, &[1.0, 1.0], 10, 1e-2).unwrap();
        let edges = vec![0.0, 0.5, 1.0, 1.5, 2.0];
        let hist = build_histogram(&y, &edges, 1.0).unwrap();
        let err = select_lambda(&path, &x, 20, &y, &x, 20, &hist, 0.1, 1.0, 1e-3).unwrap_err();
        assert!(matches!(err, Error::EmptyPath));
    }

    #[test]
    fn ols_exact_hand_instance() {
        let x = [
            1.0, 0.0, //
            0.0, 1.0, //
            1.0, 1.0, //
            2.0, 0.0, //
            0.0, 2.0, //
            1.0, 2.0,
        ];
        let y: Vec<f64> = x
            .chunks_exact(2)
            .map(|r| 2.0 * r[0] + 3.0 * r[1] + 1.0)
            .collect();
        let (coef, intercept) = ols_refit(&x, 6, 2, &y).unwrap();
        assert!((coef[0] - 2.0).abs() < 1e-9);
        assert!((coef[1] - 3.0).abs() < 1e-9);
        assert!((intercept - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ols_exact_fit_has_tiny_residual() {
        let (x, _) = random_instance(50, 3, 111);
        let y: Vec<f64> = x
            .chunks_exact(3)
            .map(|r| 0.5 * r[0] - 2.0 * r[1] + 4.0 * r[2] - 7.0)
            .collect();
        let (coef, intercept) = ols_refit(&x, 50, 3, &y).unwrap();
        let rss: f64 = x
            .chunks_exact(3)
            .zip(&y)
            .map(|(r, &yv)| {
                let pred = intercept + coef[0] * r[0] + coef[1] * r[1] + coef[2] * r[2];
                (pred - yv) * (pred - yv)
            })
            .sum();
        assert!(rss.sqrt() <= 1e-8, "residual norm {}", rss.sqrt());
    }

    #[test]
    fn ols_rejects_constant_column() {
        let x = [1.0, 5.0, 1.0, 6.0, 1.0, 7.0, 1.0, 8.0];
        let y = [1.0, 2.0, 3.0, 4.0];
        let err = ols_refit(&x, 4, 2, &y).unwrap_err();
        match err {
            Error::RankDeficient { columns } => assert_eq!(columns, vec![0]),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn ols_rejects_duplicated_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 30;
        let c: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut x = vec![0.0; n * 2];
        for i in 0..n {
            x[i * 2] = c[i];
            x[i * 2 + 1] = c[i];
        }
        let y: Vec<f64> = c.iter().map(|v| 2.0 * v).collect();
        let err = ols_refit(&x, n, 2, &y).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { .. }));
    }

    #[test]
    fn ols_requires_more_rows_than_columns() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [1.0, 2.0];
        assert!(ols_refit(&x, 2, 2, &y).is_err());
    }

    #[test]
    fn weighted_equals_plain_at_scaled_penalty() {
        for seed in 0..10 {
            let (x, y) = random_instance(60, 6, 300 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
            let c: f64 = rng.gen_range(0.2..4.0);
            let probe = LassoProblem::new(&x, 60, 6, &y, &[1.0; 6], 0.0).unwrap();
            let lam = probe.lambda_max() * rng.gen_range(0.05..0.6);
            let weighted =
                weighted_lasso(&LassoProblem::new(&x, 60, 6, &y, &[c; 6], lam).unwrap()).unwrap();
            let plain =
                weighted_lasso(&LassoProblem::new(&x, 60, 6, &y, &[1.0; 6], c * lam).unwrap())
                    .unwrap();
            for (a, b) in weighted.beta.iter().zip(&plain.beta) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
