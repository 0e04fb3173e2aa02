//! The round loop: initialize, step the agents, solve the principal, share
//! the aggregation, check convergence, and emit one immutable record per
//! round. Also hosts the comparison baselines.

use std::fmt;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::agents::{agent_step, aggregate_estimates, AgentState, StepSchedule};
use crate::data::{self, DataPoint, DataShard, GeneratorConfig, HeldOutStream, PrivateSignals};
use crate::error::{Error, Result};
use crate::model::{HypothesisSpec, LocalObjective, Loss, ParameterVector};
use crate::principal::{solve_principal_with, PrincipalConfig, PrincipalSolution};
use crate::smoothing::{kernel_weights, KernelSpec, WeightKind, WeightMatrix};

/// Complete description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub model: HypothesisSpec,
    pub loss: Loss,
    pub kernel: KernelSpec,
    pub schedule: StepSchedule,
    pub theta0: ParameterVector,
    /// Stop once the smoothed log-likelihood changes by no more than this
    /// between consecutive rounds.
    pub tol: f64,
    /// Baselines to run alongside the main loop and attach to the result.
    pub baselines: Vec<BaselineKind>,
    /// Master seed; overrides the generator's own seed field.
    pub seed: u64,
    pub principal: PrincipalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument("tol must be > 0".into()));
        }
        if self.theta0.len() != self.model.param_dim() {
            return Err(Error::InvalidArgument(format!(
                "theta0 has length {}, model expects {}",
                self.theta0.len(),
                self.model.param_dim()
            )));
        }
        if self.generator.spec.input_dim() != self.model.input_dim() {
            return Err(Error::InvalidArgument(
                "generator and model disagree on the input dimension".into(),
            ));
        }
        self.kernel.validate()?;
        let mut generator = self.generator.clone();
        generator.seed = self.seed;
        generator.validate()
    }

    fn effective_generator(&self) -> GeneratorConfig {
        let mut generator = self.generator.clone();
        generator.seed = self.seed;
        generator
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselineKind {
    /// Fixed uniform aggregation; no principal.
    UniformAveraging,
    /// Identity aggregation: k independent gradient-descent runs.
    Isolated,
    /// Direct fit of the pooled data.
    Centralized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConvergenceReason {
    TolMet,
    MaxRounds,
}

/// Everything recorded about one completed round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Post-step estimate of every agent.
    pub thetas: Vec<ParameterVector>,
    pub local_risks: Vec<f64>,
    /// Pool index of the held-out datum this round consumed.
    pub heldout_id: usize,
    pub heldout_sq_errors: Vec<f64>,
    /// Absent for baselines that run without a principal.
    pub principal: Option<PrincipalSolution>,
    /// Blend of the post-step estimates under this round's aggregation
    /// probabilities; what the agents start from next round.
    pub aggregated: Vec<ParameterVector>,
    #[serde(skip)]
    pub wall_time: Duration,
}

/// Per-baseline summary attached to a main run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSummary {
    pub kind: BaselineKind,
    pub final_thetas: Vec<ParameterVector>,
    pub final_risks: Vec<f64>,
}

/// Output of a full run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    /// Final aggregated estimate per agent.
    pub final_aggregated: Vec<ParameterVector>,
    /// Final smoothed log-likelihood; absent for principal-free baselines.
    pub final_loglik: Option<f64>,
    pub convergence: ConvergenceReason,
    pub rounds: Vec<RoundRecord>,
    /// The kernel weights computed once at initialization.
    pub weights: WeightMatrix,
    /// Rounds in which at least one aggregation row fell back.
    pub degenerate_rounds: Vec<usize>,
    pub baselines: Vec<BaselineSummary>,
    #[serde(skip)]
    pub wall_time: Duration,
}

/// Why a run stopped early.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FailureCause {
    AgentDivergence { agent: usize, detail: String },
    /// Every aggregation row was degenerate for this many consecutive rounds.
    DegeneratePrincipal { rounds: Vec<usize> },
}

/// Structured failure report: names the round and cause and carries the
/// partial results for diagnosis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub round: usize,
    pub cause: FailureCause,
    pub partial: RunPartial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunPartial {
    pub rounds: Vec<RoundRecord>,
    pub thetas: Vec<ParameterVector>,
    pub p_hat: WeightMatrix,
}

impl fmt::Display for RunFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.cause {
            FailureCause::AgentDivergence { agent, detail } => write!(
                f,
                "run aborted at round {}: agent {} diverged ({})",
                self.round, agent, detail
            ),
            FailureCause::DegeneratePrincipal { rounds } => write!(
                f,
                "run aborted at round {}: every aggregation row was degenerate in rounds {:?}",
                self.round, rounds
            ),
        }
    }
}

impl std::error::Error for RunFailure {}

/// State shared by every variant of the round loop.
#[derive(Debug, Clone)]
pub struct RunState {
    pub shards: Vec<DataShard>,
    pub stream: HeldOutStream,
    pub signals: PrivateSignals,
    pub weights: WeightMatrix,
    pub p_hat: WeightMatrix,
    pub agents: Vec<AgentState>,
}

impl RunState {
    fn thetas(&self) -> Vec<ParameterVector> {
        self.agents.iter().map(|a| a.theta.clone()).collect()
    }
}

/// Generates the data and builds the initial state: all agents at `theta0`,
/// uniform aggregation probabilities, kernel weights computed once.
pub fn initialize(config: &RunConfig) -> Result<RunState> {
    config.validate()?;
    let (shards, stream, signals) = data::generate(&config.effective_generator())?;
    build_state(config, shards, stream, signals)
}

fn build_state(
    config: &RunConfig,
    shards: Vec<DataShard>,
    stream: HeldOutStream,
    signals: PrivateSignals,
) -> Result<RunState> {
    if config.theta0.len() != config.model.param_dim() {
        return Err(Error::InvalidArgument(format!(
            "theta0 has length {}, model expects {}",
            config.theta0.len(),
            config.model.param_dim()
        )));
    }
    if !(config.tol > 0.0) {
        return Err(Error::InvalidArgument("tol must be > 0".into()));
    }
    config.kernel.validate()?;
    let k = shards.len();
    if signals.count() != k {
        return Err(Error::InvalidArgument(
            "need exactly one signal per shard".into(),
        ));
    }
    let weights = kernel_weights(&signals, &config.kernel)?;
    let agents = shards
        .iter()
        .map(|shard| {
            Ok(AgentState {
                shard_id: shard.shard_id(),
                theta: config.theta0.clone(),
                objective: LocalObjective::new(shard.clone(), config.model.clone(), config.loss)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RunState {
        shards,
        stream,
        signals,
        weights,
        p_hat: WeightMatrix::uniform(k, WeightKind::AggregationProbabilities),
        agents,
    })
}

/// Runs the full loop on freshly generated data.
pub fn run(config: &RunConfig) -> Result<RunResult> {
    let state = initialize(config)?;
    run_from_state(config, state, true)
}

/// Runs the full loop on caller-supplied data; the generator section of the
/// config is ignored except for validation of the model against the shards.
pub fn run_with_data(
    config: &RunConfig,
    shards: Vec<DataShard>,
    stream: HeldOutStream,
    signals: PrivateSignals,
) -> Result<RunResult> {
    let state = build_state(config, shards, stream, signals)?;
    run_from_state(config, state, false)
}

fn run_from_state(
    config: &RunConfig,
    mut state: RunState,
    with_baselines: bool,
) -> Result<RunResult> {
    let start = Instant::now();
    let gamma = config.schedule.step_size();
    let k = state.agents.len();
    let mut records: Vec<RoundRecord> = Vec::new();
    let mut degenerate_rounds = Vec::new();
    let mut fully_degenerate_streak: Vec<usize> = Vec::new();
    let mut prev_loglik: Option<f64> = None;
    let mut convergence = ConvergenceReason::MaxRounds;

    for round in 0..config.schedule.rounds {
        let round_start = Instant::now();
        let thetas = state.thetas();
        let blended = aggregate_estimates(&state.p_hat, &thetas)?;

        let mut next = Vec::with_capacity(k);
        for (i, agent) in state.agents.iter().enumerate() {
            match agent_step(agent, &blended[i], gamma) {
                Ok(theta) => next.push(theta),
                Err(err) => {
                    return Err(RunFailure {
                        round,
                        cause: FailureCause::AgentDivergence {
                            agent: agent.shard_id,
                            detail: err.to_string(),
                        },
                        partial: RunPartial {
                            rounds: records,
                            thetas,
                            p_hat: state.p_hat.clone(),
                        },
                    }
                    .into())
                }
            }
        }
        for (agent, theta) in state.agents.iter_mut().zip(&next) {
            agent.theta = theta.clone();
        }

        let (heldout_id, datum) = state.stream.draw(round);
        let solution = solve_principal_with(
            &config.principal,
            &state.weights,
            &next,
            datum,
            &config.model,
            None,
        )?;
        state.p_hat = solution.p_hat.clone();
        let aggregated = aggregate_estimates(&state.p_hat, &next)?;

        let local_risks = state
            .agents
            .iter()
            .map(|a| a.objective.local_risk(&a.theta))
            .collect::<Result<Vec<_>>>()?;
        let heldout_sq_errors = next
            .iter()
            .map(|theta| {
                let r = datum.y - config.model.predict(theta, &datum.x)?;
                Ok(r * r)
            })
            .collect::<Result<Vec<_>>>()?;

        let all_degenerate = solution.diagnostics.degenerate_rows.len() == k;
        if !solution.diagnostics.degenerate_rows.is_empty() {
            degenerate_rounds.push(round);
        }
        let loglik = solution.loglik;
        records.push(RoundRecord {
            round,
            thetas: next.clone(),
            local_risks,
            heldout_id,
            heldout_sq_errors,
            principal: Some(solution),
            aggregated,
            wall_time: round_start.elapsed(),
        });

        if all_degenerate {
            fully_degenerate_streak.push(round);
        } else {
            fully_degenerate_streak.clear();
        }
        if fully_degenerate_streak.len() >= 3 {
            let thetas = state.thetas();
            return Err(RunFailure {
                round,
                cause: FailureCause::DegeneratePrincipal {
                    rounds: fully_degenerate_streak,
                },
                partial: RunPartial {
                    rounds: records,
                    thetas,
                    p_hat: state.p_hat.clone(),
                },
            }
            .into());
        }

        if all_degenerate {
            // A fallback likelihood is not a solution of the program;
            // comparing it across rounds would declare spurious convergence.
            prev_loglik = None;
        } else {
            if let Some(prev) = prev_loglik {
                if prev.is_finite() && loglik.is_finite() && (loglik - prev).abs() <= config.tol {
                    convergence = ConvergenceReason::TolMet;
                    break;
                }
            }
            prev_loglik = Some(loglik);
        }
    }

    let last = records
        .last()
        .ok_or_else(|| Error::InvalidState("run produced no rounds".into()))?;
    let final_aggregated = last.aggregated.clone();
    let final_loglik = last.principal.as_ref().map(|p| p.loglik);

    let mut baselines = Vec::new();
    if with_baselines {
        for kind in &config.baselines {
            let result = run_baseline(config, *kind)?;
            let final_risks = result
                .rounds
                .last()
                .map(|r| r.local_risks.clone())
                .unwrap_or_default();
            baselines.push(BaselineSummary {
                kind: *kind,
                final_thetas: result.final_aggregated,
                final_risks,
            });
        }
    }

    Ok(RunResult {
        final_aggregated,
        final_loglik,
        convergence,
        rounds: records,
        weights: state.weights,
        degenerate_rounds,
        baselines,
        wall_time: start.elapsed(),
    })
}

/// Runs one comparison baseline on the same generated data.
pub fn run_baseline(config: &RunConfig, kind: BaselineKind) -> Result<RunResult> {
    let state = initialize(config)?;
    match kind {
        BaselineKind::UniformAveraging => {
            let k = state.agents.len();
            run_fixed_aggregation(
                config,
                state,
                WeightMatrix::uniform(k, WeightKind::AggregationProbabilities),
            )
        }
        BaselineKind::Isolated => {
            let k = state.agents.len();
            run_fixed_aggregation(
                config,
                state,
                WeightMatrix::identity(k, WeightKind::AggregationProbabilities),
            )
        }
        BaselineKind::Centralized => run_centralized(config, state),
    }
}

fn run_fixed_aggregation(
    config: &RunConfig,
    mut state: RunState,
    p_hat: WeightMatrix,
) -> Result<RunResult> {
    let start = Instant::now();
    let gamma = config.schedule.step_size();
    state.p_hat = p_hat;
    let mut records = Vec::new();

    for round in 0..config.schedule.rounds {
        let round_start = Instant::now();
        let thetas = state.thetas();
        let blended = aggregate_estimates(&state.p_hat, &thetas)?;
        let mut next = Vec::with_capacity(state.agents.len());
        for (i, agent) in state.agents.iter().enumerate() {
            match agent_step(agent, &blended[i], gamma) {
                Ok(theta) => next.push(theta),
                Err(err) => {
                    return Err(RunFailure {
                        round,
                        cause: FailureCause::AgentDivergence {
                            agent: agent.shard_id,
                            detail: err.to_string(),
                        },
                        partial: RunPartial {
                            rounds: records,
                            thetas,
                            p_hat: state.p_hat.clone(),
                        },
                    }
                    .into())
                }
            }
        }
        for (agent, theta) in state.agents.iter_mut().zip(&next) {
            agent.theta = theta.clone();
        }
        let (heldout_id, datum) = state.stream.draw(round);
        let local_risks = state
            .agents
            .iter()
            .map(|a| a.objective.local_risk(&a.theta))
            .collect::<Result<Vec<_>>>()?;
        let heldout_sq_errors = next
            .iter()
            .map(|theta| {
                let r = datum.y - config.model.predict(theta, &datum.x)?;
                Ok(r * r)
            })
            .collect::<Result<Vec<_>>>()?;
        let aggregated = aggregate_estimates(&state.p_hat, &next)?;
        records.push(RoundRecord {
            round,
            thetas: next,
            local_risks,
            heldout_id,
            heldout_sq_errors,
            principal: None,
            aggregated,
            wall_time: round_start.elapsed(),
        });
    }

    let final_aggregated = records
        .last()
        .map(|r| r.aggregated.clone())
        .ok_or_else(|| Error::InvalidState("run produced no rounds".into()))?;
    Ok(RunResult {
        final_aggregated,
        final_loglik: None,
        convergence: ConvergenceReason::MaxRounds,
        rounds: records,
        weights: state.weights,
        degenerate_rounds: Vec::new(),
        baselines: Vec::new(),
        wall_time: start.elapsed(),
    })
}

fn run_centralized(config: &RunConfig, state: RunState) -> Result<RunResult> {
    let start = Instant::now();
    let pooled: Vec<DataPoint> = state
        .shards
        .iter()
        .flat_map(|s| s.points().iter().cloned())
        .collect();
    let theta = match &config.model {
        HypothesisSpec::LinearBasis { .. } => fit_linear_svd(&pooled, &config.model)?,
        HypothesisSpec::OneHiddenLayer { .. } => {
            pooled_gradient_descent(config, &pooled, &config.schedule)?
        }
    };
    let pooled_shard = DataShard::new(1, pooled)?;
    let objective = LocalObjective::new(pooled_shard, config.model.clone(), config.loss)?;
    let pooled_risk = objective.local_risk(&theta)?;
    let (heldout_id, datum) = state.stream.draw(0);
    let r = datum.y - config.model.predict(&theta, &datum.x)?;
    let record = RoundRecord {
        round: 0,
        thetas: vec![theta.clone()],
        local_risks: vec![pooled_risk],
        heldout_id,
        heldout_sq_errors: vec![r * r],
        principal: None,
        aggregated: vec![theta.clone()],
        wall_time: start.elapsed(),
    };
    Ok(RunResult {
        final_aggregated: vec![theta],
        final_loglik: None,
        convergence: ConvergenceReason::MaxRounds,
        rounds: vec![record],
        weights: state.weights,
        degenerate_rounds: Vec::new(),
        baselines: Vec::new(),
        wall_time: start.elapsed(),
    })
}

/// Least squares via SVD of the design matrix. Deliberately a different
/// algorithm from the normal-equations oracle it is checked against.
fn fit_linear_svd(points: &[DataPoint], spec: &HypothesisSpec) -> Result<ParameterVector> {
    let n = points.len();
    let d = spec.param_dim();
    let mut design = DMatrix::zeros(n, d);
    let mut targets = DVector::zeros(n);
    for (row, p) in points.iter().enumerate() {
        let phi = spec.features(&p.x)?;
        for (col, v) in phi.iter().enumerate() {
            design[(row, col)] = *v;
        }
        targets[row] = p.y;
    }
    let svd = design.svd(true, true);
    let theta = svd
        .solve(&targets, 1e-12)
        .map_err(|e| Error::Singular(e.to_string()))?;
    ParameterVector::new(theta.iter().copied().collect())
}

fn pooled_gradient_descent(
    config: &RunConfig,
    pooled: &[DataPoint],
    schedule: &StepSchedule,
) -> Result<ParameterVector> {
    let shard = DataShard::new(1, pooled.to_vec())?;
    let objective = LocalObjective::new(shard, config.model.clone(), config.loss)?;
    let agent = AgentState {
        shard_id: 1,
        theta: config.theta0.clone(),
        objective,
    };
    let gamma = schedule.step_size();
    let mut theta = config.theta0.clone();
    for _ in 0..schedule.rounds {
        theta = agent_step(&agent, &theta, gamma)?;
    }
    Ok(theta)
}
