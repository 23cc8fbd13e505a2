//! Episode and experiment runner.
//!
//! Decisions are S1-by-default: S1 always proposes first, MC1 gates, MC2
//! decides whether S2 runs. Every phase is charged to the episode's time
//! budget through an injected clock, and the model of self is updated after
//! each step (action values) and at episode end (solver outcomes, task return).

mod oracle;
mod trace;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metacognition::{
    mc1, mc2, ArbitrationConfig, Diagnostics, Mc1Verdict, Mc2Verdict, ResourceBudget, Source,
};
use crate::rng::EpisodeRng;
use crate::self_model::{ExperienceStore, LearningParams, McPhase, S1_ID, S2_ID};
use crate::solvers::{s1_decide, s1_rollout, S2Solver, SolverOutput};
use crate::world::{Action, State, TaskSpec};

pub use oracle::{oracle_optimal_return, OracleError, OracleOptimum, MAX_ORACLE_CELLS};
pub use trace::{
    blocks, episode_rows_from_trace, write_summary, write_trace, BlockSummary, EpisodeResult,
    TraceError, TraceRecord, BLOCK_HEADER, SUMMARY_HEADER,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Arbitrate before every move.
    PerDecision,
    /// Arbitrate once per episode over whole trajectories.
    PerSequence,
    PureS1,
    PureS2,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per-decision" => Ok(Mode::PerDecision),
            "per-sequence" => Ok(Mode::PerSequence),
            "pure-s1" => Ok(Mode::PureS1),
            "pure-s2" => Ok(Mode::PureS2),
            other => Err(format!(
                "unknown mode `{other}` (expected per-decision, per-sequence, pure-s1 or pure-s2)"
            )),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::PerDecision => "per-decision",
            Mode::PerSequence => "per-sequence",
            Mode::PureS1 => "pure-s1",
            Mode::PureS2 => "pure-s2",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClockKind {
    /// Measured wall time.
    Real,
    /// Fixed charges: `t_mc_default` per MC phase, `t_s2_default` per S2
    /// call, nothing for S1.
    Simulated,
}

impl FromStr for ClockKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "real" => Ok(ClockKind::Real),
            "simulated" => Ok(ClockKind::Simulated),
            other => Err(format!(
                "unknown clock `{other}` (expected real or simulated)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    S1,
    Mc1,
    Mc2,
    S2,
}

#[derive(Debug, Clone, Copy)]
struct Clock {
    kind: ClockKind,
    t_mc: f64,
    t_s2: f64,
}

impl Clock {
    fn time<T>(&self, phase: Phase, f: impl FnOnce() -> T) -> (T, f64) {
        let started = Instant::now();
        let out = f();
        let charged = match self.kind {
            ClockKind::Real => started.elapsed().as_secs_f64(),
            ClockKind::Simulated => match phase {
                Phase::S1 => 0.0,
                Phase::Mc1 | Phase::Mc2 => self.t_mc,
                Phase::S2 => self.t_s2,
            },
        };
        (out, charged)
    }
}

/// Default per-episode time budget in seconds.
pub const DEFAULT_EPISODE_BUDGET_S: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub episodes: u32,
    pub seed: u64,
    pub episode_budget_s: f64,
    pub arbitration: ArbitrationConfig,
    pub learning: LearningParams,
    pub clock: ClockKind,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::PerDecision,
            episodes: 100,
            seed: 0,
            episode_budget_s: DEFAULT_EPISODE_BUDGET_S,
            arbitration: ArbitrationConfig::default(),
            learning: LearningParams::default(),
            clock: ClockKind::Simulated,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("invalid `{field}`: {reason}")]
pub struct ConfigError {
    pub field: &'static str,
    pub reason: String,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |field, reason: &str| {
            Err(ConfigError {
                field,
                reason: reason.to_owned(),
            })
        };
        let nonneg = |x: f64| x.is_finite() && x >= 0.0;
        let a = &self.arbitration;
        if self.episodes == 0 {
            return bad("episodes", "must be at least 1");
        }
        if !nonneg(self.episode_budget_s) {
            return bad("budget-s", "must be a nonnegative number");
        }
        if !nonneg(a.tau1) {
            return bad("tau1", "must be a nonnegative number");
        }
        if !nonneg(a.lambda_time) {
            return bad("lambda-time", "must be a nonnegative number");
        }
        if !nonneg(a.u_hat0) || !nonneg(a.v_opt) {
            return bad("u-hat0", "cold-start defaults must be nonnegative");
        }
        if !nonneg(a.t_mc_default) || !nonneg(a.t_s2_default) {
            return bad("t-mc-default", "default durations must be nonnegative");
        }
        if !(a.s1.k > 0.0 && a.s1.k.is_finite()) {
            return bad("k", "must be positive");
        }
        if let Some(m) = a.s1.m_scale {
            if !(m > 0.0 && m.is_finite()) {
                return bad("m-scale", "must be positive");
            }
        }
        let l = &self.learning;
        if !(l.alpha > 0.0 && l.alpha <= 1.0) {
            return bad("alpha", "must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&l.gamma) {
            return bad("gamma", "must lie in [0, 1]");
        }
        if !l.q0.is_finite() {
            return bad("q0", "must be finite");
        }
        Ok(())
    }
}

/// One arbitrated decision.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub s1: SolverOutput,
    pub source: Source,
    pub action: Action,
    /// S2's output when it ran.
    pub s2: Option<SolverOutput>,
    pub diagnostics: Diagnostics,
    pub elapsed_s: f64,
}

/// Runs episodes of one task against a caller-owned model of self.
pub struct Orchestrator<'a> {
    task: &'a TaskSpec,
    config: &'a RunConfig,
    s2: S2Solver,
    clock: Clock,
}

impl<'a> Orchestrator<'a> {
    pub fn new(task: &'a TaskSpec, config: &'a RunConfig) -> Self {
        Self {
            task,
            config,
            s2: S2Solver::default(),
            clock: Clock {
                kind: config.clock,
                t_mc: config.arbitration.t_mc_default,
                t_s2: config.arbitration.t_s2_default,
            },
        }
    }

    fn fresh_budget(&self, store: &ExperienceStore) -> ResourceBudget {
        let mut budget = ResourceBudget::new(self.config.episode_budget_s);
        self.refresh_memory(&mut budget, store);
        budget
    }

    fn refresh_memory(&self, budget: &mut ResourceBudget, store: &ExperienceStore) {
        budget.memory_remaining_units = self.config.arbitration.memory.map(|m| m.remaining(store));
    }

    /// S1 proposes (a single move, or a whole trajectory when `sequence`),
    /// then MC1, MC2 and possibly S2 run, each charged to `budget`.
    fn arbitrate_timed(
        &mut self,
        store: &mut ExperienceStore,
        budget: &mut ResourceBudget,
        state: &State,
        sequence: bool,
    ) -> Decision {
        let task = self.task;
        let cfg = self.config.arbitration;
        let mut elapsed = 0.0;
        let mut spend = |budget: &mut ResourceBudget, dt: f64| {
            budget.charge(dt);
            elapsed += dt;
        };

        let (s1, dt) = self.clock.time(Phase::S1, || {
            if sequence {
                s1_rollout(store, task, state, &cfg.s1)
            } else {
                s1_decide(store, task, state, &cfg.s1)
            }
        });
        spend(budget, dt);
        store
            .record_solver_run(S1_ID, &task.task_id, dt)
            .expect("charges are nonnegative");

        self.refresh_memory(budget, store);
        let u_hat = store.expected_task_reward(task, cfg.u_hat0);
        let est = store.mc_cost_estimate(cfg.t_mc_default);
        let (verdict, dt) = self
            .clock
            .time(Phase::Mc1, || mc1(budget, &s1, u_hat, est, &cfg));
        spend(budget, dt);
        store
            .record_mc_cost(McPhase::Mc1, dt)
            .expect("charges are nonnegative");

        let mut diagnostics = Diagnostics {
            confidence: s1.confidence,
            u_hat,
            v1: None,
            v2: None,
            cost2: None,
            t_mc1_est: est.0,
            t_mc2_est: est.1,
            budget_remaining_s: 0.0,
        };
        let mut s2 = None;
        let source = match verdict {
            Mc1Verdict::AdoptBudget => Source::S1Budget,
            Mc1Verdict::AdoptConfident => Source::S1Mc1,
            Mc1Verdict::Escalate => {
                let (assessment, dt) = self
                    .clock
                    .time(Phase::Mc2, || mc2(store, task, state, &s1, &cfg));
                spend(budget, dt);
                store
                    .record_mc_cost(McPhase::Mc2, dt)
                    .expect("charges are nonnegative");
                diagnostics.v1 = Some(assessment.v1);
                diagnostics.v2 = Some(assessment.v2);
                diagnostics.cost2 = Some(assessment.cost2);
                match assessment.verdict {
                    Mc2Verdict::AdoptS1 => Source::S1Mc2,
                    Mc2Verdict::ActivateS2 => {
                        let solver = &mut self.s2;
                        let (out, dt) = self.clock.time(Phase::S2, || solver.decide(task, state));
                        spend(budget, dt);
                        store
                            .record_solver_run(S2_ID, &task.task_id, dt)
                            .expect("charges are nonnegative");
                        s2 = Some(SolverOutput {
                            runtime_s: dt,
                            ..out
                        });
                        Source::S2
                    }
                }
            }
        };
        diagnostics.budget_remaining_s = budget.time_remaining_s;
        let action = s2.as_ref().map_or(s1.action, |o| o.action);
        Decision {
            s1,
            source,
            action,
            s2,
            diagnostics,
            elapsed_s: elapsed,
        }
    }

    /// One per-decision step: S1, then MC1, then (on escalation) MC2 and S2.
    pub fn run_decision(
        &mut self,
        store: &mut ExperienceStore,
        budget: &mut ResourceBudget,
        state: &State,
    ) -> Decision {
        self.arbitrate_timed(store, budget, state, false)
    }

    /// Applies `action`, updates the action values and returns the new state
    /// and reward.
    fn step(
        &self,
        store: &mut ExperienceStore,
        state: &State,
        action: Action,
        rng: &mut EpisodeRng,
    ) -> (State, f64) {
        let g = &self.task.grid;
        let next = g
            .transition(state, action, rng)
            .expect("orchestrator only plays legal moves");
        let reward = g.reward(state, action, &next);
        let next_legal = g.legal_actions(&next);
        store.q_update(
            self.task,
            state.cell,
            action,
            reward,
            next.cell,
            &next_legal,
            next.cell == g.goal,
        );
        (next, reward)
    }

    /// End-of-episode model update and result assembly.
    fn finish(
        &self,
        store: &mut ExperienceStore,
        episode_index: u64,
        trajectory: Vec<TraceRecord>,
        source_counts: [u32; 6],
        final_state: State,
    ) -> EpisodeResult {
        let task_id = &self.task.task_id;
        let mut to_go = 0.0;
        let mut credits = Vec::with_capacity(trajectory.len());
        for rec in trajectory.iter().rev() {
            to_go += rec.reward;
            credits.push((rec.source, rec.state, to_go));
        }
        for &(source, cell, rtg) in credits.iter().rev() {
            let solver = if source.is_s2() { S2_ID } else { S1_ID };
            store.record_solver_outcome(solver, task_id, cell, rtg);
        }
        let total_return: f64 = trajectory.iter().map(|r| r.reward).sum();
        store.record_task_return(task_id, total_return);
        EpisodeResult {
            episode_index,
            total_return,
            steps: trajectory.len() as u32,
            wall_time_s: trajectory.iter().map(|r| r.elapsed_s).sum(),
            source_counts,
            reached_goal: final_state.cell == self.task.grid.goal,
            trajectory,
        }
    }

    pub fn run_episode(
        &mut self,
        store: &mut ExperienceStore,
        episode_index: u64,
    ) -> EpisodeResult {
        match self.config.mode {
            Mode::PerSequence => self.run_sequence_episode(store, episode_index),
            mode => self.run_stepwise_episode(store, episode_index, mode),
        }
    }

    fn run_stepwise_episode(
        &mut self,
        store: &mut ExperienceStore,
        episode_index: u64,
        mode: Mode,
    ) -> EpisodeResult {
        let task = self.task;
        let cfg = self.config.arbitration;
        let mut rng = EpisodeRng::for_episode(self.config.seed, episode_index);
        let mut budget = self.fresh_budget(store);
        let mut state = task.grid.initial_state();
        let mut trajectory = Vec::new();
        let mut counts = [0u32; 6];

        while !task.grid.is_terminal(&state) {
            let mut rec = match mode {
                Mode::PerDecision => {
                    let d = self.run_decision(store, &mut budget, &state);
                    TraceRecord {
                        episode: episode_index,
                        step: state.steps_taken,
                        state: state.cell,
                        s1_action: Some(d.s1.action),
                        s1_confidence: Some(d.s1.confidence),
                        u_hat: Some(d.diagnostics.u_hat),
                        source: d.source,
                        v1: d.diagnostics.v1,
                        v2: d.diagnostics.v2,
                        cost2: d.diagnostics.cost2,
                        t_mc1_est: Some(d.diagnostics.t_mc1_est),
                        t_mc2_est: Some(d.diagnostics.t_mc2_est),
                        final_action: d.action,
                        reward: 0.0,
                        budget_remaining_s: d.diagnostics.budget_remaining_s,
                        elapsed_s: d.elapsed_s,
                    }
                }
                Mode::PureS1 => {
                    let (out, dt) = self
                        .clock
                        .time(Phase::S1, || s1_decide(store, task, &state, &cfg.s1));
                    budget.charge(dt);
                    store
                        .record_solver_run(S1_ID, &task.task_id, dt)
                        .expect("nonnegative");
                    self.direct_record(
                        episode_index,
                        &state,
                        Some(&out),
                        &out,
                        Source::S1Direct,
                        &budget,
                        dt,
                    )
                }
                Mode::PureS2 => {
                    let solver = &mut self.s2;
                    let (out, dt) = self.clock.time(Phase::S2, || solver.decide(task, &state));
                    budget.charge(dt);
                    store
                        .record_solver_run(S2_ID, &task.task_id, dt)
                        .expect("nonnegative");
                    self.direct_record(
                        episode_index,
                        &state,
                        None,
                        &out,
                        Source::S2Direct,
                        &budget,
                        dt,
                    )
                }
                Mode::PerSequence => unreachable!("handled by run_sequence_episode"),
            };
            counts[rec.source.index()] += 1;
            let (next, reward) = self.step(store, &state, rec.final_action, &mut rng);
            rec.reward = reward;
            trajectory.push(rec);
            state = next;
        }
        self.finish(store, episode_index, trajectory, counts, state)
    }

    #[allow(clippy::too_many_arguments)]
    fn direct_record(
        &self,
        episode: u64,
        state: &State,
        s1: Option<&SolverOutput>,
        chosen: &SolverOutput,
        source: Source,
        budget: &ResourceBudget,
        elapsed_s: f64,
    ) -> TraceRecord {
        TraceRecord {
            episode,
            step: state.steps_taken,
            state: state.cell,
            s1_action: s1.map(|o| o.action),
            s1_confidence: s1.map(|o| o.confidence),
            u_hat: None,
            source,
            v1: None,
            v2: None,
            cost2: None,
            t_mc1_est: None,
            t_mc2_est: None,
            final_action: chosen.action,
            reward: 0.0,
            budget_remaining_s: budget.time_remaining_s,
            elapsed_s,
        }
    }

    /// Per-sequence modality: one arbitration at the initial state over S1's
    /// greedy rollout, then open-loop execution of the chosen plan. A planned
    /// move that is illegal where the agent actually is, or a plan that runs
    /// out before the episode ends, falls back to the first legal move.
    pub fn run_sequence_episode(
        &mut self,
        store: &mut ExperienceStore,
        episode_index: u64,
    ) -> EpisodeResult {
        let task = self.task;
        let g = &task.grid;
        let mut rng = EpisodeRng::for_episode(self.config.seed, episode_index);
        let mut budget = self.fresh_budget(store);
        let mut state = g.initial_state();
        let d = self.arbitrate_timed(store, &mut budget, &state, true);
        let s1_plan = d.s1.trajectory.clone().unwrap_or_default();
        let plan = match &d.s2 {
            Some(out) => out.trajectory.clone().unwrap_or_default(),
            None => s1_plan.clone(),
        };
        let mut counts = [0u32; 6];
        counts[d.source.index()] = 1;

        let mut trajectory = Vec::new();
        let mut i = 0;
        while !g.is_terminal(&state) {
            let legal = g.legal_actions(&state);
            let action = plan
                .get(i)
                .copied()
                .filter(|a| legal.contains(a))
                .unwrap_or(legal[0]);
            let (next, reward) = self.step(store, &state, action, &mut rng);
            trajectory.push(TraceRecord {
                episode: episode_index,
                step: state.steps_taken,
                state: state.cell,
                s1_action: s1_plan.get(i).copied(),
                s1_confidence: Some(d.s1.confidence),
                u_hat: Some(d.diagnostics.u_hat),
                source: d.source,
                v1: d.diagnostics.v1,
                v2: d.diagnostics.v2,
                cost2: d.diagnostics.cost2,
                t_mc1_est: Some(d.diagnostics.t_mc1_est),
                t_mc2_est: Some(d.diagnostics.t_mc2_est),
                final_action: action,
                reward,
                budget_remaining_s: budget.time_remaining_s,
                elapsed_s: if i == 0 { d.elapsed_s } else { 0.0 },
            });
            state = next;
            i += 1;
        }
        self.finish(store, episode_index, trajectory, counts, state)
    }
}

/// Result of a whole experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub mode: Mode,
    pub episodes: Vec<EpisodeResult>,
}

impl ExperimentReport {
    pub fn rows(&self) -> Vec<(u64, f64, f64)> {
        self.episodes
            .iter()
            .map(|e| (e.episode_index, e.total_return, e.s2_fraction()))
            .collect()
    }

    pub fn blocks(&self, size: usize) -> Vec<BlockSummary> {
        blocks(&self.rows(), size)
    }

    /// Total time charged over all episodes.
    pub fn total_charged_s(&self) -> f64 {
        self.episodes.iter().map(|e| e.wall_time_s).sum()
    }

    pub fn source_totals(&self) -> [u32; 6] {
        let mut totals = [0; 6];
        for e in &self.episodes {
            for (t, c) in totals.iter_mut().zip(e.source_counts) {
                *t += c;
            }
        }
        totals
    }

    pub fn records(&self) -> impl Iterator<Item = &TraceRecord> {
        self.episodes.iter().flat_map(|e| e.trajectory.iter())
    }
}

/// Runs `config.episodes` episodes sequentially against one persistent store.
/// The store's learning parameters are set from the configuration.
pub fn run_experiment(
    config: &RunConfig,
    task: &TaskSpec,
    store: &mut ExperienceStore,
) -> Result<ExperimentReport, ConfigError> {
    config.validate()?;
    store.params = config.learning;
    let mut orchestrator = Orchestrator::new(task, config);
    let episodes = (0..u64::from(config.episodes))
        .map(|i| orchestrator.run_episode(store, i))
        .collect();
    Ok(ExperimentReport {
        mode: config.mode,
        episodes,
    })
}
