//! Elastic-net penalized Cox regression.
//!
//! Minimizes `−ℓ(β)/n + λ(α‖β‖₁ + (1−α)/2‖β‖²)` over standardized features.
//! Proximal Newton iterations with a halving line search on the true
//! objective; λ is picked from a geometric path by cross-validated partial
//! likelihood.

use ndarray::{ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::cox::{linear_predictor, CoxProblem};
use super::Standardizer;
use crate::cohort::SurvivalOutcome;
use crate::error::{MsbError, Result};
use crate::seeds;
use crate::survival::{breslow_baseline, cox_survival, StepCurve};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxNetParams {
    /// L1 share of the penalty.
    pub alpha: f64,
    pub n_lambdas: usize,
    /// Smallest λ on the path as a fraction of λ_max.
    pub lambda_min_ratio: f64,
    /// Folds for choosing λ; below 2 disables CV and keeps the path end.
    pub cv_folds: usize,
    /// Fixed penalty, bypassing the path and CV.
    pub lambda: Option<f64>,
    /// Convergence threshold on max_j h_jj Δβ_j², h the Newton curvature.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CoxNetParams {
    fn default() -> Self {
        Self { alpha: 0.5, n_lambdas: 20, lambda_min_ratio: 0.01, cv_folds: 3, lambda: None, tol: 1e-7, max_iter: 100 }
    }
}

impl CoxNetParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(MsbError::config("coxnet alpha must lie in [0, 1]"));
        }
        if self.n_lambdas == 0 || !(self.lambda_min_ratio > 0.0 && self.lambda_min_ratio <= 1.0) {
            return Err(MsbError::config("coxnet path needs n_lambdas ≥ 1 and lambda_min_ratio in (0, 1]"));
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0) {
                return Err(MsbError::config("coxnet lambda must be nonnegative"));
            }
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(MsbError::config("coxnet tol and max_iter must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxNetModel {
    scaler: Standardizer,
    /// Coefficients on the standardized scale.
    coefficients: Vec<f64>,
    lambda: f64,
    alpha: f64,
    baseline: StepCurve,
}

fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

fn penalty(beta: &[f64], lambda: f64, alpha: f64) -> f64 {
    let l1: f64 = beta.iter().map(|b| b.abs()).sum();
    let l2: f64 = beta.iter().map(|b| b * b).sum();
    lambda * (alpha * l1 + 0.5 * (1.0 - alpha) * l2)
}

fn objective(x: ArrayView2<f64>, prob: &CoxProblem, beta: &[f64], lambda: f64, alpha: f64) -> f64 {
    prob.neg_log_likelihood(&linear_predictor(x, beta)) / prob.len() as f64 + penalty(beta, lambda, alpha)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes the penalized objective at one λ, warm-started from `beta`.
/// `x` is used as-is (no standardization). Returns outer iterations used.
///
/// Each outer iteration is a proximal Newton step: the exact second-order
/// expansion of `−ℓ/n` is minimized by covariance-mode coordinate descent
/// over a growing active set, whose Gram entries `x_jᵀ H x_k / n` are built
/// on demand. Columns outside the active set enter when they violate the
/// subgradient condition of the expansion.
pub(crate) fn solve(
    x: ArrayView2<f64>,
    prob: &CoxProblem,
    lambda: f64,
    alpha: f64,
    beta: &mut [f64],
    tol: f64,
    max_iter: usize,
) -> usize {
    let n = x.nrows() as f64;
    let p = x.ncols();
    let l1 = lambda * alpha;
    let l2 = lambda * (1.0 - alpha);
    let cols: Vec<Vec<f64>> = x.axis_iter(Axis(1)).map(|c| c.to_vec()).collect();
    let mut f_old = objective(x, prob, beta, lambda, alpha);
    for iter in 1..=max_iter {
        let eta = linear_predictor(x, beta);
        let quad = prob.quadratic(&eta);
        // gradient of −ℓ/n in β
        let grad0: Vec<f64> = cols.iter().map(|c| -dot(c, &quad.u) / n).collect();

        let mut active: Vec<usize> = Vec::new();
        let mut in_active = vec![false; p];
        let mut hx: Vec<Vec<f64>> = Vec::new();
        let mut gram: Vec<Vec<f64>> = Vec::new();
        let mut grad: Vec<f64> = Vec::new();
        let mut b: Vec<f64> = beta.to_vec();
        let add = |j: usize,
                   active: &mut Vec<usize>,
                   hx: &mut Vec<Vec<f64>>,
                   gram: &mut Vec<Vec<f64>>,
                   grad: &mut Vec<f64>,
                   b: &[f64]| {
            let col = &cols[j];
            let h = quad.hess_times(|i| col[i]);
            let row: Vec<f64> = active.iter().map(|&k| dot(&cols[k], &h) / n).collect();
            let diag = dot(col, &h) / n;
            let g = grad0[j] + active.iter().zip(&row).map(|(&k, r)| r * (b[k] - beta[k])).sum::<f64>();
            for (r, v) in gram.iter_mut().zip(&row) {
                r.push(*v);
            }
            let mut own = row;
            own.push(diag);
            gram.push(own);
            active.push(j);
            hx.push(h);
            grad.push(g);
        };
        for j in 0..p {
            if beta[j] != 0.0 {
                in_active[j] = true;
                add(j, &mut active, &mut hx, &mut gram, &mut grad, &b);
            }
        }

        loop {
            for _ in 0..100_000 {
                let mut max_change = 0.0f64;
                for a in 0..active.len() {
                    let j = active[a];
                    let h = gram[a][a];
                    if h <= 1e-12 && l2 == 0.0 {
                        continue;
                    }
                    let old = b[j];
                    let new = soft_threshold(h * old - grad[a], l1) / (h + l2);
                    let delta = new - old;
                    if delta != 0.0 {
                        b[j] = new;
                        for (g, row) in grad.iter_mut().zip(&gram) {
                            *g += row[a] * delta;
                        }
                        max_change = max_change.max(h * delta * delta);
                    }
                }
                if max_change < tol * 1e-2 {
                    break;
                }
            }
            // subgradient check for the remaining columns at δ = b − β
            let mut hd = vec![0.0; prob.len()];
            for (a, &j) in active.iter().enumerate() {
                let d = b[j] - beta[j];
                if d != 0.0 {
                    for (o, v) in hd.iter_mut().zip(&hx[a]) {
                        *o += d * v;
                    }
                }
            }
            let entering: Vec<usize> =
                (0..p).filter(|&j| !in_active[j] && (grad0[j] + dot(&cols[j], &hd) / n).abs() > l1).collect();
            if entering.is_empty() {
                break;
            }
            for j in entering {
                in_active[j] = true;
                add(j, &mut active, &mut hx, &mut gram, &mut grad, &b);
            }
        }

        let step_size: f64 =
            active.iter().enumerate().map(|(a, &j)| gram[a][a] * (b[j] - beta[j]).powi(2)).fold(0.0, f64::max);
        let start = beta.to_vec();
        beta.copy_from_slice(&b);
        let mut f_new = objective(x, prob, beta, lambda, alpha);
        let mut step = 1.0;
        while f_new > f_old + 1e-13 * f_old.abs().max(1.0) && step > 1e-6 {
            step *= 0.5;
            for (v, s) in beta.iter_mut().zip(&start) {
                *v = s + 0.5 * (*v - s);
            }
            f_new = objective(x, prob, beta, lambda, alpha);
        }
        f_old = f_new;
        if step_size < tol {
            return iter;
        }
    }
    max_iter
}

/// Smallest λ for which the all-zero solution is optimal.
pub(crate) fn lambda_max(x: ArrayView2<f64>, prob: &CoxProblem, alpha: f64) -> f64 {
    let n = x.nrows() as f64;
    let (u, _) = prob.eta_derivatives(&vec![0.0; x.nrows()]);
    let gmax =
        x.axis_iter(Axis(1)).map(|c| (c.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>() / n).abs()).fold(0.0, f64::max);
    gmax / alpha.max(1e-3)
}

fn lambda_path(lmax: f64, params: &CoxNetParams) -> Vec<f64> {
    let k = params.n_lambdas;
    if k == 1 {
        return vec![lmax];
    }
    let ratio = params.lambda_min_ratio.powf(1.0 / (k - 1) as f64);
    (0..k).map(|i| lmax * ratio.powi(i as i32)).collect()
}

/// Coefficients along the path, one vector per λ.
fn fit_path(x: ArrayView2<f64>, prob: &CoxProblem, path: &[f64], params: &CoxNetParams) -> Vec<Vec<f64>> {
    let mut beta = vec![0.0; x.ncols()];
    path.iter()
        .map(|&lambda| {
            solve(x, prob, lambda, params.alpha, &mut beta, params.tol, params.max_iter);
            beta.clone()
        })
        .collect()
}

/// Path positions past the running CV maximum before the search stops.
const CV_PATIENCE: usize = 3;

/// Cross-validated partial likelihood per λ (larger is better). Folds walk
/// the path together; once the summed score has not improved for
/// `CV_PATIENCE` consecutive λ the remaining entries are left at −∞.
fn cv_scores(xs: ArrayView2<f64>, y: &[SurvivalOutcome], path: &[f64], params: &CoxNetParams, seed: u64) -> Vec<f64> {
    let k = params.cv_folds;
    let fold = super::event_stratified_folds(y, k, &mut seeds::rng(seed, "coxnet-cv", &[]));
    let full = CoxProblem::new(y);
    let mut folds = Vec::new();
    for f in 0..k {
        let train: Vec<usize> = (0..y.len()).filter(|&i| fold[i] != f).collect();
        let ytr: Vec<SurvivalOutcome> = train.iter().map(|&i| y[i]).collect();
        if !ytr.iter().any(|o| o.event) {
            continue;
        }
        let xtr = xs.select(Axis(0), &train);
        folds.push((xtr, CoxProblem::new(&ytr), vec![0.0; xs.ncols()]));
    }
    let mut scores = vec![f64::NEG_INFINITY; path.len()];
    let mut best = 0;
    for (l, &lambda) in path.iter().enumerate() {
        let mut score = 0.0;
        for (xtr, prob, beta) in folds.iter_mut() {
            solve(xtr.view(), prob, lambda, params.alpha, beta, params.tol, params.max_iter);
            let ll_full = -full.neg_log_likelihood(&linear_predictor(xs, beta));
            let ll_train = -prob.neg_log_likelihood(&linear_predictor(xtr.view(), beta));
            score += ll_full - ll_train;
        }
        scores[l] = score;
        if score > scores[best] {
            best = l;
        } else if l - best >= CV_PATIENCE {
            break;
        }
    }
    scores
}

impl CoxNetModel {
    pub(crate) fn fit(params: &CoxNetParams, seed: u64, x: ArrayView2<f64>, y: &[SurvivalOutcome]) -> Result<Self> {
        let scaler = Standardizer::fit(x);
        let xs = scaler.transform(x);
        let prob = CoxProblem::new(y);
        let alpha = params.alpha;

        let (lambda, coefficients) = if let Some(lambda) = params.lambda {
            let mut beta = vec![0.0; xs.ncols()];
            solve(xs.view(), &prob, lambda, alpha, &mut beta, params.tol, params.max_iter);
            (lambda, beta)
        } else {
            let path = lambda_path(lambda_max(xs.view(), &prob, alpha), params);
            let best = if params.cv_folds >= 2 {
                let scores = cv_scores(xs.view(), y, &path, params, seed);
                // first maximum, i.e. the strongest penalty among ties
                scores
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (i, &s)| if s > acc.1 { (i, s) } else { acc })
                    .0
            } else {
                path.len() - 1
            };
            let betas = fit_path(xs.view(), &prob, &path[..=best], params);
            (path[best], betas.into_iter().last().expect("nonempty path"))
        };

        let lp = linear_predictor(xs.view(), &coefficients);
        let baseline = breslow_baseline(y, &lp)?;
        Ok(Self { scaler, coefficients, lambda, alpha, baseline })
    }

    /// Model with given raw-scale coefficients and a baseline computed on
    /// `(x, y)`; no standardization.
    pub fn from_coefficients(coefficients: Vec<f64>, x: ArrayView2<f64>, y: &[SurvivalOutcome]) -> Result<Self> {
        if coefficients.len() != x.ncols() {
            return Err(MsbError::DimensionMismatch { expected: x.ncols(), found: coefficients.len() });
        }
        let lp = linear_predictor(x, &coefficients);
        let baseline = breslow_baseline(y, &lp)?;
        Ok(Self { scaler: Standardizer::identity(coefficients.len()), coefficients, lambda: 0.0, alpha: 0.0, baseline })
    }

    pub fn n_features(&self) -> usize {
        self.coefficients.len()
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn baseline(&self) -> &StepCurve {
        &self.baseline
    }

    pub fn linear_predictor(&self, x: ArrayView2<f64>) -> Vec<f64> {
        linear_predictor(self.scaler.transform(x).view(), &self.coefficients)
    }

    pub fn predict_survival(&self, x: ArrayView2<f64>, grid: &[f64]) -> Vec<StepCurve> {
        self.linear_predictor(x).into_iter().map(|lp| cox_survival(&self.baseline, lp, grid)).collect()
    }
}

/// Solves the penalized problem on `x` exactly as given (no
/// standardization), from a zero start. Exposed for optimality checks.
pub fn fit_penalized(x: ArrayView2<f64>, y: &[SurvivalOutcome], lambda: f64, alpha: f64, tol: f64) -> Vec<f64> {
    let prob = CoxProblem::new(y);
    let mut beta = vec![0.0; x.ncols()];
    solve(x, &prob, lambda, alpha, &mut beta, tol, 1000);
    beta
}

/// λ_max on `x` as given.
pub fn penalty_upper_bound(x: ArrayView2<f64>, y: &[SurvivalOutcome], alpha: f64) -> f64 {
    lambda_max(x, &CoxProblem::new(y), alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::cox::partial_likelihood_gradient;
    use ndarray::Array2;
    use rand::Rng;

    fn random_problem(n: usize, p: usize, seed: u64) -> (Array2<f64>, Vec<SurvivalOutcome>) {
        let mut rng = seeds::rng(seed, "coxnet-test", &[]);
        let x = Array2::from_shape_fn((n, p), |_| rng.random_range(-1.0f64..1.0));
        let y = (0..n)
            .map(|i| {
                let lp = x[[i, 0]] - 0.5 * x[[i, 1]];
                let t = -rng.random::<f64>().ln() / lp.exp();
                SurvivalOutcome::new(t, rng.random::<f64>() < 0.75)
            })
            .collect();
        (x, y)
    }

    #[test]
    fn zero_solution_at_lambda_max() {
        let (x, y) = random_problem(40, 4, 1);
        let lmax = penalty_upper_bound(x.view(), &y, 0.5);
        let beta = fit_penalized(x.view(), &y, lmax * 1.0001, 0.5, 1e-14);
        assert!(beta.iter().all(|&b| b == 0.0));
        let beta = fit_penalized(x.view(), &y, lmax * 0.5, 0.5, 1e-14);
        assert!(beta.iter().any(|&b| b != 0.0));
    }

    #[test]
    fn kkt_conditions_hold() {
        let (x, y) = random_problem(30, 5, 2);
        let n = x.nrows() as f64;
        let alpha = 0.5;
        let lambda = 0.3 * penalty_upper_bound(x.view(), &y, alpha);
        let beta = fit_penalized(x.view(), &y, lambda, alpha, 1e-14);
        let g = partial_likelihood_gradient(x.view(), &y, &beta);
        for j in 0..beta.len() {
            let gj = g[j] / n + lambda * (1.0 - alpha) * beta[j];
            if beta[j] == 0.0 {
                assert!(gj.abs() <= lambda * alpha + 1e-6);
            } else {
                assert!((gj + lambda * alpha * beta[j].signum()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rank_inverted_feature_gets_positive_weight() {
        let n = 30;
        let x = Array2::from_shape_fn((n, 1), |(i, _)| (n - i) as f64);
        let y: Vec<_> = (0..n).map(|i| SurvivalOutcome::new(i as f64 + 1.0, true)).collect();
        let m = CoxNetModel::fit(&CoxNetParams::default(), 0, x.view(), &y).unwrap();
        assert!(m.coefficients()[0] > 0.0);
        let risk = m.linear_predictor(x.view());
        let c = crate::metrics::c_index(&y, &risk).unwrap();
        assert!(c > 0.9, "c-index {c}");
    }

    #[test]
    fn explicit_coefficients_dot_product() {
        let x = ndarray::array![[2.0, 1.0], [0.0, 0.0], [1.0, 3.0]];
        let y =
            vec![SurvivalOutcome::new(1.0, true), SurvivalOutcome::new(2.0, true), SurvivalOutcome::new(3.0, false)];
        let m = CoxNetModel::from_coefficients(vec![1.0, -1.0], x.view(), &y).unwrap();
        assert_eq!(m.linear_predictor(x.view())[0], 1.0);
    }
}
