//! The agents' parameter-updating model: blend all current estimates with the
//! broadcast aggregation probabilities, then take one gradient step from the
//! blended point.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LocalObjective, ParameterVector};
use crate::smoothing::WeightMatrix;

/// Abort threshold on the parameter norm; a step past it is reported instead
/// of silently blowing up.
pub const DIVERGENCE_NORM: f64 = 1e10;

/// One agent: its current estimate plus the shard-backed objective it descends.
#[derive(Debug, Clone)]
pub struct AgentState {
    pub shard_id: usize,
    pub theta: ParameterVector,
    pub objective: LocalObjective,
}

/// Equidistant discretization of the horizon `[0, T]` into `N` rounds of
/// length `gamma = T / N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub horizon: f64,
    pub rounds: usize,
}

impl StepSchedule {
    pub fn equidistant(horizon: f64, rounds: usize) -> Result<Self> {
        if rounds == 0 {
            return Err(Error::InvalidArgument("need at least one round".into()));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidArgument(
                "horizon must be positive and finite".into(),
            ));
        }
        Ok(StepSchedule { horizon, rounds })
    }

    pub fn step_size(&self) -> f64 {
        self.horizon / self.rounds as f64
    }
}

/// Blends the estimates: row `i` of the result is `sum_j p_ij theta_j`, a
/// convex combination of the inputs.
pub fn aggregate_estimates(
    p: &WeightMatrix,
    thetas: &[ParameterVector],
) -> Result<Vec<ParameterVector>> {
    let k = p.size();
    if thetas.len() != k {
        return Err(Error::InvalidArgument(format!(
            "expected {k} estimates, found {}",
            thetas.len()
        )));
    }
    let dim = thetas[0].len();
    if thetas.iter().any(|t| t.len() != dim) {
        return Err(Error::InvalidArgument(
            "estimates must share one dimension".into(),
        ));
    }
    let mut blended = Vec::with_capacity(k);
    for i in 0..k {
        let row = p.row(i);
        let mut acc = vec![0.0; dim];
        for (weight, theta) in row.iter().zip(thetas) {
            for (a, t) in acc.iter_mut().zip(theta.as_slice()) {
                *a += weight * t;
            }
        }
        blended.push(ParameterVector::new(acc)?);
    }
    Ok(blended)
}

/// One synchronized update: `theta_next = blended - gamma * grad J(blended)`,
/// with the gradient evaluated at the blended point.
pub fn agent_step(
    state: &AgentState,
    blended: &ParameterVector,
    gamma: f64,
) -> Result<ParameterVector> {
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidArgument(
            "step size must be finite and nonnegative".into(),
        ));
    }
    let grad = state.objective.risk_gradient(blended)?;
    let next: Vec<f64> = blended
        .as_slice()
        .iter()
        .zip(grad.as_slice())
        .map(|(t, g)| t - gamma * g)
        .collect();
    let next = ParameterVector::new(next)?;
    if next.norm() > DIVERGENCE_NORM {
        return Err(Error::NumericOverflow(format!(
            "agent {} diverged: |theta| = {:.3e}",
            state.shard_id,
            next.norm()
        )));
    }
    Ok(next)
}
