//! The principal's empirical-likelihood machinery.
//!
//! Each round the principal scores the agents' estimates on a held-out datum
//! through a two-component moment function (residual mean and residual
//! variance), solves one concave dual maximization per kernel-weight row, fits
//! the moment parameters by a derivative-free outer minimization, and turns
//! the result into row-stochastic aggregation probabilities.
//!
//! The dual problem for row `i` maximizes `sum_j w_ij log(1 + lambda . g_j)`
//! over the open set where every `1 + lambda . g_j` stays positive. Its
//! stationarity condition makes the closed-form probabilities
//! `p_ij = w_ij / (1 + lambda_i . g_j)` sum to one; that identity is the
//! backbone of the tests. When zero lies outside the convex hull of the
//! moment values the dual is unbounded; such rows fall back to their kernel
//! weights and are flagged rather than hidden.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::data::DataPoint;
use crate::error::{Error, Result};
use crate::model::{HypothesisSpec, ParameterVector};
use crate::simplex::{self, NmOptions};
use crate::smoothing::{WeightKind, WeightMatrix};

/// Lower bound on the residual-variance parameter, enforced by
/// reparameterization in the outer fit.
pub const SIGMA_SQ_FLOOR: f64 = 1e-8;

/// Accepted dual iterates keep `1 + lambda . g_j` at or above this margin.
pub const FEASIBILITY_MARGIN: f64 = 1e-10;

/// A dual iterate whose norm exceeds this is treated as diverging.
pub const DUAL_DIVERGENCE_NORM: f64 = 1e8;

/// Two-component moment evaluation: residual minus the mean parameter, and
/// squared centered residual minus the variance parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentValue {
    pub mean_residual: f64,
    pub var_residual: f64,
}

impl MomentValue {
    pub fn as_vector(&self) -> Vector2<f64> {
        Vector2::new(self.mean_residual, self.var_residual)
    }
}

/// The moment parameters `(mu, sigma^2)`; the variance never drops below
/// [`SIGMA_SQ_FLOOR`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub mu: f64,
    pub sigma_sq: f64,
}

impl BetaParams {
    pub fn new(mu: f64, sigma_sq: f64) -> Result<Self> {
        if !mu.is_finite() || !sigma_sq.is_finite() {
            return Err(Error::InvalidArgument("beta must be finite".into()));
        }
        if sigma_sq < SIGMA_SQ_FLOOR {
            return Err(Error::InvalidArgument(format!(
                "sigma_sq = {sigma_sq} is below the floor {SIGMA_SQ_FLOOR}"
            )));
        }
        Ok(BetaParams { mu, sigma_sq })
    }

    /// Builds from the unconstrained coordinates `(mu, zeta)` with
    /// `sigma^2 = floor + exp(zeta)`.
    pub fn from_unconstrained(mu: f64, zeta: f64) -> Self {
        BetaParams {
            mu,
            sigma_sq: SIGMA_SQ_FLOOR + zeta.min(700.0).exp(),
        }
    }

    /// Inverse of [`from_unconstrained`](Self::from_unconstrained), clamped so
    /// a variance at the floor still maps to a finite coordinate.
    pub fn zeta(&self) -> f64 {
        (self.sigma_sq - SIGMA_SQ_FLOOR).max(1e-300).ln()
    }
}

/// Evaluates the moment function on one datum:
/// `g = (r - mu, (r - mu)^2 - sigma^2)` with `r = y - h(x; theta)`.
pub fn moment_function(
    datum: &DataPoint,
    spec: &HypothesisSpec,
    theta: &ParameterVector,
    beta: &BetaParams,
) -> Result<MomentValue> {
    let r = datum.y - spec.predict(theta, &datum.x)?;
    if !r.is_finite() {
        return Err(Error::NumericOverflow("residual is not finite".into()));
    }
    let centered = r - beta.mu;
    Ok(MomentValue {
        mean_residual: centered,
        var_residual: centered * centered - beta.sigma_sq,
    })
}

/// Held-out residual of every agent's estimate on one datum.
pub fn residuals(
    datum: &DataPoint,
    spec: &HypothesisSpec,
    thetas: &[ParameterVector],
) -> Result<Vec<f64>> {
    thetas
        .iter()
        .map(|theta| {
            let r = datum.y - spec.predict(theta, &datum.x)?;
            if r.is_finite() {
                Ok(r)
            } else {
                Err(Error::NumericOverflow("residual is not finite".into()))
            }
        })
        .collect()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn population_variance(values: &[f64]) -> f64 {
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64
}

/// Moment-matching parameters: residual mean and population variance,
/// clamped to the variance floor.
pub fn moment_matching_beta(residuals: &[f64]) -> BetaParams {
    BetaParams {
        mu: mean(residuals),
        sigma_sq: population_variance(residuals).max(SIGMA_SQ_FLOOR),
    }
}

/// Outer-fit initializer: moment matching with the variance held an order of
/// magnitude above the floor so the unconstrained coordinate stays well-scaled.
pub fn init_beta(residuals: &[f64]) -> BetaParams {
    BetaParams {
        mu: mean(residuals),
        sigma_sq: population_variance(residuals).max(10.0 * SIGMA_SQ_FLOOR),
    }
}

/// Solver knobs. The defaults are the contract the tests pin down.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrincipalConfig {
    /// Stationarity tolerance for the per-row dual solve.
    pub newton_tol: f64,
    /// Dual iteration cap; exceeding it counts as divergence.
    pub newton_max_iter: usize,
    /// Outer alternation stops when the objective changes by no more.
    pub outer_tol: f64,
    pub max_outer_sweeps: usize,
    pub nm_max_iter: usize,
    pub nm_xtol: f64,
    pub nm_ftol: f64,
}

impl Default for PrincipalConfig {
    fn default() -> Self {
        PrincipalConfig {
            newton_tol: 1e-9,
            newton_max_iter: 200,
            outer_tol: 1e-8,
            max_outer_sweeps: 100,
            nm_max_iter: 600,
            nm_xtol: 1e-9,
            nm_ftol: 1e-13,
        }
    }
}

/// Outcome classification of one row's dual solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DualStatus {
    Converged,
    /// Zero is outside the convex hull of the weighted moment values; no
    /// finite maximizer exists. The caller decides the fallback.
    UnboundedDual,
}

/// Result of one row's dual maximization.
#[derive(Debug, Clone, Copy)]
pub struct LambdaSolve {
    /// The final iterate. Meaningful only when `status` is `Converged`;
    /// otherwise it is wherever divergence was detected.
    pub lambda: Vector2<f64>,
    pub status: DualStatus,
    pub iterations: usize,
    /// `max_c |sum_j w_j g_j / (1 + lambda . g_j)|_c` at the final iterate.
    pub residual: f64,
    /// `sum_j w_j log(1 + lambda . g_j)` at the final iterate.
    pub objective: f64,
}

/// One dual vector per kernel-weight row. Rows that fell back carry zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualVariables {
    pub lambdas: Vec<Vector2<f64>>,
}

fn dual_objective(w_row: &[f64], g: &[Vector2<f64>], lambda: &Vector2<f64>) -> f64 {
    w_row
        .iter()
        .zip(g)
        .filter(|(w, _)| **w > 0.0)
        .map(|(w, gj)| w * (1.0 + lambda.dot(gj)).ln())
        .sum()
}

fn dual_gradient(w_row: &[f64], g: &[Vector2<f64>], lambda: &Vector2<f64>) -> Vector2<f64> {
    let mut grad = Vector2::zeros();
    for (w, gj) in w_row.iter().zip(g) {
        if *w > 0.0 {
            grad += gj * (*w / (1.0 + lambda.dot(gj)));
        }
    }
    grad
}

fn dual_curvature(w_row: &[f64], g: &[Vector2<f64>], lambda: &Vector2<f64>) -> Matrix2<f64> {
    let mut m = Matrix2::zeros();
    for (w, gj) in w_row.iter().zip(g) {
        if *w > 0.0 {
            let denom = 1.0 + lambda.dot(gj);
            m += (gj * gj.transpose()) * (*w / (denom * denom));
        }
    }
    m
}

fn dual_feasible(w_row: &[f64], g: &[Vector2<f64>], lambda: &Vector2<f64>) -> bool {
    w_row
        .iter()
        .zip(g)
        .filter(|(w, _)| **w > 0.0)
        .all(|(_, gj)| 1.0 + lambda.dot(gj) >= FEASIBILITY_MARGIN)
}

/// Maximizes row `i`'s dual by damped Newton with a step-halving line search
/// that rejects infeasible trial points.
pub fn solve_lambda_row(w_row: &[f64], g_values: &[MomentValue]) -> LambdaSolve {
    solve_lambda_row_with(&PrincipalConfig::default(), w_row, g_values)
}

pub fn solve_lambda_row_with(
    cfg: &PrincipalConfig,
    w_row: &[f64],
    g_values: &[MomentValue],
) -> LambdaSolve {
    let g: Vec<Vector2<f64>> = g_values.iter().map(MomentValue::as_vector).collect();
    solve_row(cfg, w_row, &g, None)
}

/// As [`solve_lambda_row`] but records every accepted iterate, starting at
/// zero. Used by concavity diagnostics.
pub fn solve_lambda_row_traced(
    w_row: &[f64],
    g_values: &[MomentValue],
    trace: &mut Vec<Vector2<f64>>,
) -> LambdaSolve {
    let g: Vec<Vector2<f64>> = g_values.iter().map(MomentValue::as_vector).collect();
    solve_row(&PrincipalConfig::default(), w_row, &g, Some(trace))
}

fn solve_row(
    cfg: &PrincipalConfig,
    w_row: &[f64],
    g: &[Vector2<f64>],
    mut trace: Option<&mut Vec<Vector2<f64>>>,
) -> LambdaSolve {
    debug_assert_eq!(w_row.len(), g.len());
    let mut lambda = Vector2::zeros();
    let mut fval = 0.0;
    if let Some(t) = trace.as_deref_mut() {
        t.push(lambda);
    }
    let finish = |lambda: Vector2<f64>, status, iterations, residual, objective| LambdaSolve {
        lambda,
        status,
        iterations,
        residual,
        objective,
    };

    for iter in 0..=cfg.newton_max_iter {
        let grad = dual_gradient(w_row, g, &lambda);
        let residual = grad.amax();
        if !residual.is_finite() {
            return finish(lambda, DualStatus::UnboundedDual, iter, residual, fval);
        }
        // The stationarity residual doubles as the probability row-sum error
        // scaled by |lambda|, so tighten the target for large multipliers.
        let scale = 1.0f64.max(lambda.abs().sum());
        if residual * scale <= cfg.newton_tol {
            return finish(lambda, DualStatus::Converged, iter, residual, fval);
        }
        if iter == cfg.newton_max_iter {
            break;
        }

        let m = dual_curvature(w_row, g, &lambda);
        if !m.iter().all(|v| v.is_finite()) {
            return finish(lambda, DualStatus::UnboundedDual, iter, residual, fval);
        }
        // Tiny ridge keeps the 2x2 solve defined when the moment values are
        // collinear; flat directions then simply stay put.
        let ridge = 1e-12 * (1.0 + m.trace());
        let damped = m + Matrix2::identity() * ridge;
        let direction = match damped.try_inverse() {
            Some(inv) => inv * grad,
            None => return finish(lambda, DualStatus::UnboundedDual, iter, residual, fval),
        };
        let slope = grad.dot(&direction);

        let mut step = 1.0;
        let mut accepted = None;
        while step >= 1e-18 {
            let candidate = lambda + direction * step;
            if dual_feasible(w_row, g, &candidate) {
                let value = dual_objective(w_row, g, &candidate);
                if value.is_finite() && value >= fval + 1e-4 * step * slope {
                    accepted = Some((candidate, value));
                    break;
                }
            }
            step *= 0.5;
        }
        match accepted {
            Some((candidate, value)) => {
                lambda = candidate;
                fval = value;
                if let Some(t) = trace.as_deref_mut() {
                    t.push(lambda);
                }
            }
            None => {
                // No improving feasible step left; either we are at the
                // optimum to working precision or the problem is unbounded.
                let status = if residual * scale <= cfg.newton_tol.max(1e-7) {
                    DualStatus::Converged
                } else {
                    DualStatus::UnboundedDual
                };
                return finish(lambda, status, iter, residual, fval);
            }
        }
        if lambda.norm() > DUAL_DIVERGENCE_NORM {
            return finish(
                lambda,
                DualStatus::UnboundedDual,
                iter + 1,
                dual_gradient(w_row, g, &lambda).amax(),
                fval,
            );
        }
    }
    let residual = dual_gradient(w_row, g, &lambda).amax();
    finish(
        lambda,
        DualStatus::UnboundedDual,
        cfg.newton_max_iter,
        residual,
        fval,
    )
}

/// Closed-form aggregation probabilities `p_ij = w_ij / (1 + lambda_i . g_j)`.
///
/// The moment value for column `j` is shared by every row. Errors if any
/// needed denominator falls below the feasibility margin.
pub fn aggregation_probabilities(
    w: &WeightMatrix,
    duals: &DualVariables,
    g_values: &[MomentValue],
) -> Result<WeightMatrix> {
    let k = w.size();
    if duals.lambdas.len() != k || g_values.len() != k {
        return Err(Error::InvalidArgument(
            "weights, duals, and moment values must agree on k".into(),
        ));
    }
    let g: Vec<Vector2<f64>> = g_values.iter().map(MomentValue::as_vector).collect();
    let mut rows = Vec::with_capacity(k);
    for i in 0..k {
        rows.push(probability_row(w.row(i), &duals.lambdas[i], &g, i)?);
    }
    WeightMatrix::from_rows(WeightKind::AggregationProbabilities, rows)
}

fn probability_row(
    w_row: &[f64],
    lambda: &Vector2<f64>,
    g: &[Vector2<f64>],
    row: usize,
) -> Result<Vec<f64>> {
    w_row
        .iter()
        .zip(g)
        .map(|(w, gj)| {
            if *w == 0.0 {
                return Ok(0.0);
            }
            let denom = 1.0 + lambda.dot(gj);
            if denom < FEASIBILITY_MARGIN {
                return Err(Error::InfeasibleDual { row });
            }
            Ok(w / denom)
        })
        .collect()
}

/// One evaluation of the outer objective at fixed moment parameters.
#[derive(Debug, Clone)]
pub struct OuterObjective {
    /// Sum over rows of the inner-maximized dual value
    /// `max_lambda sum_j w_ij log(1 + lambda . g_j)`. Minimizing this over the
    /// moment parameters maximizes the smoothed log-likelihood, which equals
    /// `sum w log w` minus this value. `+inf` marks parameters whose moment
    /// set admits no feasible probability row.
    pub value: f64,
    /// Rows whose dual was unbounded at these parameters.
    pub degenerate_rows: Vec<usize>,
    /// Per-row dual solutions; degenerate rows carry zero.
    pub duals: DualVariables,
    pub inner_iterations: usize,
}

/// Solves every row's dual at the given moment parameters and sums the
/// attained values.
pub fn outer_beta_objective(
    beta: &BetaParams,
    w: &WeightMatrix,
    thetas: &[ParameterVector],
    datum: &DataPoint,
    spec: &HypothesisSpec,
) -> Result<OuterObjective> {
    outer_beta_objective_with(&PrincipalConfig::default(), beta, w, thetas, datum, spec)
}

pub fn outer_beta_objective_with(
    cfg: &PrincipalConfig,
    beta: &BetaParams,
    w: &WeightMatrix,
    thetas: &[ParameterVector],
    datum: &DataPoint,
    spec: &HypothesisSpec,
) -> Result<OuterObjective> {
    let k = w.size();
    if thetas.len() != k {
        return Err(Error::InvalidArgument(format!(
            "expected {k} parameter vectors, found {}",
            thetas.len()
        )));
    }
    let g: Vec<Vector2<f64>> = thetas
        .iter()
        .map(|theta| Ok(moment_function(datum, spec, theta, beta)?.as_vector()))
        .collect::<Result<_>>()?;
    let mut value = 0.0;
    let mut degenerate_rows = Vec::new();
    let mut lambdas = Vec::with_capacity(k);
    let mut inner_iterations = 0;
    for i in 0..k {
        let solve = solve_row(cfg, w.row(i), &g, None);
        inner_iterations += solve.iterations;
        match solve.status {
            DualStatus::Converged => {
                value += solve.objective;
                lambdas.push(solve.lambda);
            }
            DualStatus::UnboundedDual => {
                degenerate_rows.push(i);
                lambdas.push(Vector2::zeros());
            }
        }
    }
    // An unbounded row means no probability row satisfies the moment
    // constraint at these parameters: the program is infeasible here, so the
    // outer search must not settle on it.
    if !degenerate_rows.is_empty() {
        value = f64::INFINITY;
    }
    Ok(OuterObjective {
        value,
        degenerate_rows,
        duals: DualVariables { lambdas },
        inner_iterations,
    })
}

/// Per-solve health report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrincipalDiagnostics {
    pub outer_sweeps: usize,
    pub inner_iterations: usize,
    pub nm_evaluations: usize,
    /// `max_c |sum_j p_ij g_j|_c` per row, computed from the assembled
    /// probabilities. Fallback rows report the violation of their kernel row.
    pub constraint_residuals: Vec<f64>,
    pub degenerate_rows: Vec<usize>,
    /// Whether the outer alternation met its tolerance before the sweep cap.
    pub outer_converged: bool,
    /// Whether the likelihood decomposition and upper bound held at return.
    pub bound_ok: bool,
}

/// Everything the principal hands back for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrincipalSolution {
    pub duals: DualVariables,
    pub beta: BetaParams,
    pub p_hat: WeightMatrix,
    /// Smoothed log-likelihood `sum_ij w_ij log p_ij`.
    pub loglik: f64,
    /// Moment values at `beta`, one per agent.
    pub moments: Vec<MomentValue>,
    pub diagnostics: PrincipalDiagnostics,
}

/// Full principal solve: alternates exact per-row dual maximization with a
/// derivative-free outer fit of the moment parameters, then assembles the
/// aggregation probabilities and the smoothed log-likelihood.
///
/// `beta0` overrides the residual-moment-matching initializer. Rows whose
/// dual is unbounded at the solution fall back to their kernel weights and
/// are flagged; if every row is unbounded the whole solution falls back to
/// `lambda = 0`, `p = w`, and moment-matching parameters.
pub fn solve_principal(
    w: &WeightMatrix,
    thetas: &[ParameterVector],
    datum: &DataPoint,
    spec: &HypothesisSpec,
    beta0: Option<BetaParams>,
) -> Result<PrincipalSolution> {
    solve_principal_with(&PrincipalConfig::default(), w, thetas, datum, spec, beta0)
}

pub fn solve_principal_with(
    cfg: &PrincipalConfig,
    w: &WeightMatrix,
    thetas: &[ParameterVector],
    datum: &DataPoint,
    spec: &HypothesisSpec,
    beta0: Option<BetaParams>,
) -> Result<PrincipalSolution> {
    let k = w.size();
    if thetas.len() != k || k == 0 {
        return Err(Error::InvalidArgument(
            "need one parameter vector per weight row".into(),
        ));
    }
    let res = residuals(datum, spec, thetas)?;
    let start = beta0.unwrap_or_else(|| init_beta(&res));

    let mut nm_evaluations = 0;
    let mut inner_iterations = 0;
    let mut point = [start.mu, start.zeta()];
    let mut objective = {
        let out =
            outer_beta_objective_with(cfg, &beta_at(&point), w, thetas, datum, spec)?;
        inner_iterations += out.inner_iterations;
        nm_evaluations += 1;
        out.value
    };
    let mut outer_sweeps = 0;
    let mut outer_converged = false;
    for _ in 0..cfg.max_outer_sweeps {
        outer_sweeps += 1;
        let mut eval = |p: &[f64; 2]| -> Result<f64> {
            let out = outer_beta_objective_with(cfg, &beta_at(p), w, thetas, datum, spec)?;
            inner_iterations += out.inner_iterations;
            Ok(out.value)
        };
        let outcome = simplex::minimize(
            &mut eval,
            point,
            &NmOptions {
                max_iter: cfg.nm_max_iter,
                xtol: cfg.nm_xtol,
                ftol: cfg.nm_ftol,
                init_scale: 0.1,
            },
        )?;
        point = outcome.point;
        nm_evaluations += outcome.evaluations;
        if objective.is_infinite() && outcome.value.is_infinite() {
            // No feasible parameters in reach; stop alternating.
            break;
        }
        if (outcome.value - objective).abs() <= cfg.outer_tol {
            outer_converged = true;
            break;
        }
        objective = outcome.value;
    }

    let beta_hat = beta_at(&point);
    let final_eval = outer_beta_objective_with(cfg, &beta_hat, w, thetas, datum, spec)?;
    inner_iterations += final_eval.inner_iterations;

    let all_degenerate = final_eval.degenerate_rows.len() == k;
    let (beta_hat, duals, degenerate_rows) = if all_degenerate {
        (
            moment_matching_beta(&res),
            DualVariables {
                lambdas: vec![Vector2::zeros(); k],
            },
            final_eval.degenerate_rows,
        )
    } else {
        (beta_hat, final_eval.duals, final_eval.degenerate_rows)
    };

    let moments: Vec<MomentValue> = thetas
        .iter()
        .map(|theta| moment_function(datum, spec, theta, &beta_hat))
        .collect::<Result<_>>()?;
    let g: Vec<Vector2<f64>> = moments.iter().map(MomentValue::as_vector).collect();

    let mut rows = Vec::with_capacity(k);
    for i in 0..k {
        if degenerate_rows.contains(&i) {
            rows.push(w.row(i).to_vec());
        } else {
            rows.push(probability_row(w.row(i), &duals.lambdas[i], &g, i)?);
        }
    }
    let p_hat = WeightMatrix::from_rows(WeightKind::AggregationProbabilities, rows)?;
    let loglik = smoothed_log_likelihood(w, &p_hat);

    let constraint_residuals: Vec<f64> = (0..k)
        .map(|i| {
            let mut acc = Vector2::zeros();
            for (p, gj) in p_hat.row(i).iter().zip(&g) {
                acc += gj * *p;
            }
            acc.amax()
        })
        .collect();

    let mut solution = PrincipalSolution {
        duals,
        beta: beta_hat,
        p_hat,
        loglik,
        moments,
        diagnostics: PrincipalDiagnostics {
            outer_sweeps,
            inner_iterations,
            nm_evaluations,
            constraint_residuals,
            degenerate_rows,
            outer_converged,
            bound_ok: false,
        },
    };
    solution.diagnostics.bound_ok =
        likelihood_bound_check(&solution, w, &solution.moments.clone());
    Ok(solution)
}

fn beta_at(point: &[f64; 2]) -> BetaParams {
    BetaParams::from_unconstrained(point[0], point[1])
}

/// `sum_ij w_ij log p_ij` over entries with positive weight. Returns the
/// minus-infinity sentinel instead of failing when some needed probability
/// is zero.
pub fn smoothed_log_likelihood(w: &WeightMatrix, p: &WeightMatrix) -> f64 {
    let k = w.size();
    let mut acc = 0.0;
    for i in 0..k {
        for j in 0..k {
            let wij = w.get(i, j);
            if wij > 0.0 {
                let pij = p.get(i, j);
                if pij <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                acc += wij * pij.ln();
            }
        }
    }
    acc
}

/// Verifies the likelihood decomposition and upper bound:
/// the attained value equals `sum w log w - sum w log(1 + lambda . g)` to
/// 1e-9 and never exceeds the second term's negation.
pub fn likelihood_bound_check(
    solution: &PrincipalSolution,
    w: &WeightMatrix,
    g_values: &[MomentValue],
) -> bool {
    let k = w.size();
    if g_values.len() != k || solution.duals.lambdas.len() != k {
        return false;
    }
    let g: Vec<Vector2<f64>> = g_values.iter().map(MomentValue::as_vector).collect();
    let mut entropy = 0.0; // sum w log w
    let mut dual_term = 0.0; // sum w log(1 + lambda . g)
    for i in 0..k {
        let lambda = &solution.duals.lambdas[i];
        for j in 0..k {
            let wij = w.get(i, j);
            if wij > 0.0 {
                entropy += wij * wij.ln();
                let denom = 1.0 + lambda.dot(&g[j]);
                if denom <= 0.0 {
                    return false;
                }
                dual_term += wij * denom.ln();
            }
        }
    }
    let decomposition_ok = (solution.loglik - (entropy - dual_term)).abs() <= 1e-9;
    let bound_ok = solution.loglik <= -dual_term + 1e-12;
    decomposition_ok && bound_ok
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smoothing::{WeightKind, WeightMatrix};

    fn mv(a: f64, b: f64) -> MomentValue {
        MomentValue {
            mean_residual: a,
            var_residual: b,
        }
    }

    #[test]
    fn moment_function_matches_hand_arithmetic() {
        let spec = HypothesisSpec::linear_raw(1);
        let theta = ParameterVector::new(vec![1.0, 2.0]).unwrap();
        // Prediction at x=1 is 3.
        let datum = DataPoint { x: vec![1.0], y: 3.0 };
        let g = moment_function(&datum, &spec, &theta, &BetaParams::new(0.0, 1.0).unwrap())
            .unwrap();
        assert_eq!((g.mean_residual, g.var_residual), (0.0, -1.0));

        let datum = DataPoint { x: vec![1.0], y: 5.0 }; // r = 2
        let g = moment_function(&datum, &spec, &theta, &BetaParams::new(1.0, 1.0).unwrap())
            .unwrap();
        assert_eq!((g.mean_residual, g.var_residual), (1.0, 0.0));

        let datum = DataPoint { x: vec![1.0], y: 6.0 }; // r = 3
        let g = moment_function(&datum, &spec, &theta, &BetaParams::new(1.0, 2.0).unwrap())
            .unwrap();
        assert_eq!((g.mean_residual, g.var_residual), (2.0, 2.0));
    }

    #[test]
    fn zero_weighted_moment_returns_zero_dual() {
        let solve = solve_lambda_row(&[0.5, 0.5], &[mv(1.0, -0.5), mv(-1.0, 0.5)]);
        assert_eq!(solve.status, DualStatus::Converged);
        assert_eq!(solve.lambda, Vector2::zeros());
        assert_eq!(solve.iterations, 0);
    }

    #[test]
    fn analytic_scalar_dual_solution() {
        let solve = solve_lambda_row(&[0.75, 0.25], &[mv(1.0, 0.0), mv(-1.0, 0.0)]);
        assert_eq!(solve.status, DualStatus::Converged);
        assert!((solve.lambda[0] - 0.5).abs() <= 1e-6, "lambda_1 = {}", solve.lambda[0]);
        assert!(solve.lambda[1].abs() <= 1e-12);
        assert!(solve.residual <= 1e-9);
    }

    #[test]
    fn identical_moments_are_unbounded() {
        let solve = solve_lambda_row(&[0.5, 0.5], &[mv(1.0, 0.0), mv(1.0, 0.0)]);
        assert_eq!(solve.status, DualStatus::UnboundedDual);
    }

    #[test]
    fn zero_dual_reproduces_kernel_weights() {
        let w = WeightMatrix::from_rows(
            WeightKind::KernelWeights,
            vec![vec![0.7, 0.3], vec![0.2, 0.8]],
        )
        .unwrap();
        let duals = DualVariables {
            lambdas: vec![Vector2::zeros(); 2],
        };
        let p = aggregation_probabilities(&w, &duals, &[mv(1.0, 2.0), mv(-3.0, 0.5)]).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(p.get(i, j), w.get(i, j));
            }
        }
    }

    #[test]
    fn analytic_probability_row_is_uniform() {
        let w = WeightMatrix::from_rows(
            WeightKind::KernelWeights,
            vec![vec![0.75, 0.25], vec![0.75, 0.25]],
        )
        .unwrap();
        let g = [mv(1.0, 0.0), mv(-1.0, 0.0)];
        let lambda = solve_lambda_row(w.row(0), &g).lambda;
        let duals = DualVariables {
            lambdas: vec![lambda, lambda],
        };
        let p = aggregation_probabilities(&w, &duals, &g).unwrap();
        assert!((p.get(0, 0) - 0.5).abs() <= 1e-6);
        assert!((p.get(0, 1) - 0.5).abs() <= 1e-6);
        let sums = p.row_sums();
        assert!(sums.iter().all(|s| (s - 1.0).abs() <= 1e-8));
    }

    #[test]
    fn infeasible_dual_is_reported() {
        let w = WeightMatrix::uniform(2, WeightKind::KernelWeights);
        let duals = DualVariables {
            lambdas: vec![Vector2::new(-1.0, 0.0); 2],
        };
        // 1 + lambda.g = 0 for the first column.
        let err = aggregation_probabilities(&w, &duals, &[mv(1.0, 0.0), mv(0.5, 0.0)]);
        assert!(matches!(err, Err(Error::InfeasibleDual { row: 0 })));
    }

    fn two_agent_instance(residual_targets: [f64; 2]) -> (Vec<ParameterVector>, DataPoint, HypothesisSpec) {
        // Raw basis in 1-D at x = 0: prediction is the bias coordinate, so an
        // agent with bias b has residual y - b.
        let spec = HypothesisSpec::linear_raw(1);
        let y = 4.0;
        let thetas = residual_targets
            .iter()
            .map(|r| ParameterVector::new(vec![y - r, 0.0]).unwrap())
            .collect();
        (thetas, DataPoint { x: vec![0.0], y }, spec)
    }

    #[test]
    fn moment_matching_parameters_zero_the_outer_objective() {
        let (thetas, datum, spec) = two_agent_instance([1.0, 3.0]);
        let w = WeightMatrix::uniform(2, WeightKind::KernelWeights);
        let beta = BetaParams::new(2.0, 1.0).unwrap();
        let out = outer_beta_objective(&beta, &w, &thetas, &datum, &spec).unwrap();
        assert!(out.degenerate_rows.is_empty());
        assert!(out.value.abs() <= 1e-12, "objective {}", out.value);
    }

    #[test]
    fn outer_objective_is_infinite_with_flag_when_no_row_is_feasible() {
        let (thetas, datum, spec) = two_agent_instance([2.0, 2.0]);
        let w = WeightMatrix::uniform(2, WeightKind::KernelWeights);
        let beta = BetaParams::new(0.0, SIGMA_SQ_FLOOR).unwrap();
        let out = outer_beta_objective(&beta, &w, &thetas, &datum, &spec).unwrap();
        assert!(out.value.is_infinite() && !out.value.is_nan());
        assert_eq!(out.degenerate_rows, vec![0, 1]);
    }

    #[test]
    fn uniform_weights_recover_moment_matching_beta() {
        let spec = HypothesisSpec::linear_raw(1);
        let y = 1.0;
        let residual_targets = [0.6, -1.1, 2.3, 0.2];
        let thetas: Vec<ParameterVector> = residual_targets
            .iter()
            .map(|r| ParameterVector::new(vec![y - r, 0.0]).unwrap())
            .collect();
        let datum = DataPoint { x: vec![0.0], y };
        let w = WeightMatrix::uniform(4, WeightKind::KernelWeights);
        let sol = solve_principal(&w, &thetas, &datum, &spec, None).unwrap();
        let expect = moment_matching_beta(&residual_targets);
        assert!(expect.sigma_sq > 100.0 * SIGMA_SQ_FLOOR, "floor must not bind");
        assert!((sol.beta.mu - expect.mu).abs() <= 1e-6);
        assert!((sol.beta.sigma_sq - expect.sigma_sq).abs() <= 1e-6);
        for lambda in &sol.duals.lambdas {
            assert!(lambda.amax() <= 1e-6);
        }
        assert!(sol.diagnostics.degenerate_rows.is_empty());
        assert!(sol.diagnostics.bound_ok);
    }

    #[test]
    fn single_agent_falls_back_to_certainty() {
        let spec = HypothesisSpec::linear_raw(1);
        let thetas = vec![ParameterVector::new(vec![1.0, 0.0]).unwrap()];
        let datum = DataPoint { x: vec![0.0], y: 2.5 };
        let w = WeightMatrix::uniform(1, WeightKind::KernelWeights);
        let sol = solve_principal(&w, &thetas, &datum, &spec, None).unwrap();
        assert_eq!(sol.p_hat.get(0, 0), 1.0);
        assert_eq!(sol.loglik, 0.0);
        assert!((sol.beta.mu - 1.5).abs() <= 1e-12);
        assert_eq!(sol.beta.sigma_sq, SIGMA_SQ_FLOOR);
        assert_eq!(sol.diagnostics.degenerate_rows, vec![0]);
    }

    #[test]
    fn principal_solve_is_deterministic() {
        let (thetas, datum, spec) = two_agent_instance([0.5, 2.5]);
        let w = WeightMatrix::from_rows(
            WeightKind::KernelWeights,
            vec![vec![0.6, 0.4], vec![0.3, 0.7]],
        )
        .unwrap();
        let a = solve_principal(&w, &thetas, &datum, &spec, None).unwrap();
        let b = solve_principal(&w, &thetas, &datum, &spec, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn smoothed_log_likelihood_matches_uniform_arithmetic() {
        let w = WeightMatrix::uniform(2, WeightKind::KernelWeights);
        let p = WeightMatrix::uniform(2, WeightKind::AggregationProbabilities);
        let ll = smoothed_log_likelihood(&w, &p);
        assert!((ll - (-2.0 * 2.0f64.ln())).abs() <= 1e-12);
    }

    #[test]
    fn zero_probability_with_positive_weight_is_minus_infinity() {
        let w = WeightMatrix::uniform(2, WeightKind::KernelWeights);
        let p = WeightMatrix::identity(2, WeightKind::AggregationProbabilities);
        assert_eq!(smoothed_log_likelihood(&w, &p), f64::NEG_INFINITY);
    }

    #[test]
    fn bound_check_accepts_solved_instances() {
        let (thetas, datum, spec) = two_agent_instance([0.2, 1.9]);
        let w = WeightMatrix::from_rows(
            WeightKind::KernelWeights,
            vec![vec![0.55, 0.45], vec![0.25, 0.75]],
        )
        .unwrap();
        let sol = solve_principal(&w, &thetas, &datum, &spec, None).unwrap();
        assert!(likelihood_bound_check(&sol, &w, &sol.moments));
    }

    #[test]
    fn beta_reparameterization_respects_floor() {
        let beta = BetaParams::from_unconstrained(0.3, -1000.0);
        assert!(beta.sigma_sq >= SIGMA_SQ_FLOOR);
        assert!(BetaParams::new(0.0, SIGMA_SQ_FLOOR / 2.0).is_err());
        let round = BetaParams::from_unconstrained(0.0, BetaParams::new(0.0, 2.5).unwrap().zeta());
        assert!((round.sigma_sq - 2.5).abs() <= 1e-12);
    }
}
