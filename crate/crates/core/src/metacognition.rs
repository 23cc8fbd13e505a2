//! Two-phase meta-cognitive arbitration between the fast and slow solvers.
//!
//! MC1 is a cheap gate: it adopts the S1 proposal when there is not enough
//! budget left to run both meta-cognitive phases, or when S1's confidence is
//! high enough relative to the task's expected reward. Otherwise MC2 weighs
//! the expected gain of calling S2 against its expected cost.
//!
//! All values compared here are normalized to `[0, 1]` with the task's
//! return bounds; S2's cost is converted from seconds with `lambda_time`.

use serde::{Deserialize, Serialize};

use crate::self_model::ExperienceStore;
use crate::solvers::{S1Params, SolverOutput};
use crate::world::{Action, State, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArbitrationConfig {
    /// MC1 adopts S1 when `confidence >= tau1 * u_hat`.
    pub tau1: f64,
    /// Value units charged per second of expected S2 runtime.
    pub lambda_time: f64,
    /// Expected task reward before any episode has finished.
    pub u_hat0: f64,
    /// Expected S2 value before S2 has any recorded outcome.
    pub v_opt: f64,
    pub t_mc_default: f64,
    pub t_s2_default: f64,
    pub s1: S1Params,
    /// Abstract memory gate; `None` disables the check.
    pub memory: Option<MemoryLimit>,
}

impl Default for ArbitrationConfig {
    fn default() -> Self {
        Self {
            tau1: 1.0,
            lambda_time: 0.02,
            u_hat0: 1.0,
            v_opt: 1.0,
            t_mc_default: 0.001,
            t_s2_default: 0.5,
            s1: S1Params::default(),
            memory: None,
        }
    }
}

/// Memory is accounted in abstract units: stored entries times a weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryLimit {
    pub capacity_units: f64,
    pub entry_weight: f64,
    /// Units both MC phases need to run.
    pub mc_units: f64,
}

impl MemoryLimit {
    pub fn remaining(&self, store: &ExperienceStore) -> f64 {
        self.capacity_units - store.entry_count() as f64 * self.entry_weight
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResourceBudget {
    pub time_remaining_s: f64,
    pub memory_remaining_units: Option<f64>,
}

impl ResourceBudget {
    pub fn new(time_s: f64) -> Self {
        Self {
            time_remaining_s: time_s,
            memory_remaining_units: None,
        }
    }

    /// Spends `elapsed_s`; the remaining time saturates at zero.
    pub fn charge(&mut self, elapsed_s: f64) {
        self.time_remaining_s = (self.time_remaining_s - elapsed_s.max(0.0)).max(0.0);
    }
}

/// Where a decision came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Source {
    /// MC1 found too little budget for the meta-cognitive phases.
    #[serde(rename = "S1_BUDGET")]
    S1Budget,
    /// MC1 judged S1's confidence sufficient.
    #[serde(rename = "S1_MC1")]
    S1Mc1,
    /// MC2 judged S2 not worth its cost.
    #[serde(rename = "S1_MC2")]
    S1Mc2,
    #[serde(rename = "S2")]
    S2,
    /// S1 without arbitration (baseline runs).
    #[serde(rename = "S1_DIRECT")]
    S1Direct,
    /// S2 without arbitration (baseline runs).
    #[serde(rename = "S2_DIRECT")]
    S2Direct,
}

impl Source {
    pub const ALL: [Source; 6] = [
        Source::S1Budget,
        Source::S1Mc1,
        Source::S1Mc2,
        Source::S2,
        Source::S1Direct,
        Source::S2Direct,
    ];

    pub fn is_s2(self) -> bool {
        matches!(self, Source::S2 | Source::S2Direct)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mc1Verdict {
    AdoptBudget,
    AdoptConfident,
    Escalate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mc2Verdict {
    AdoptS1,
    ActivateS2,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mc2Assessment {
    pub verdict: Mc2Verdict,
    pub v1: f64,
    pub v2: f64,
    pub cost2: f64,
}

/// Everything the arbitration looked at. MC2 fields are `None` when MC2 did
/// not run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diagnostics {
    pub confidence: f64,
    pub u_hat: f64,
    pub v1: Option<f64>,
    pub v2: Option<f64>,
    pub cost2: Option<f64>,
    pub t_mc1_est: f64,
    pub t_mc2_est: f64,
    pub budget_remaining_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArbitrationOutcome {
    pub source: Source,
    pub action: Action,
    pub trajectory: Option<Vec<Action>>,
    pub diagnostics: Diagnostics,
}

/// First phase: budget gate, then confidence against expected task reward.
pub fn mc1(
    budget: &ResourceBudget,
    s1_out: &SolverOutput,
    u_hat: f64,
    (t_mc1, t_mc2): (f64, f64),
    cfg: &ArbitrationConfig,
) -> Mc1Verdict {
    let memory_short = match (cfg.memory, budget.memory_remaining_units) {
        (Some(limit), Some(remaining)) => remaining < limit.mc_units,
        _ => false,
    };
    if budget.time_remaining_s < t_mc1 + t_mc2 || memory_short {
        Mc1Verdict::AdoptBudget
    } else if s1_out.confidence >= cfg.tau1 * u_hat {
        Mc1Verdict::AdoptConfident
    } else {
        Mc1Verdict::Escalate
    }
}

/// Risk-averse value of S1's action: confidence times the normalized stored
/// action value.
pub fn s1_action_value(
    store: &ExperienceStore,
    task: &TaskSpec,
    state: &State,
    s1_out: &SolverOutput,
) -> f64 {
    let q = store.q_lookup(&task.task_id, state.cell, s1_out.action).q;
    s1_out.confidence * task.normalize(q)
}

/// Second phase: call S2 only if its expected gain over S1 strictly exceeds
/// its expected cost.
pub fn mc2(
    store: &ExperienceStore,
    task: &TaskSpec,
    state: &State,
    s1_out: &SolverOutput,
    cfg: &ArbitrationConfig,
) -> Mc2Assessment {
    let v2 = store.expected_s2_value(task, state.cell, cfg.v_opt);
    let v1 = s1_action_value(store, task, state, s1_out);
    let cost2 = store.expected_s2_cost(&task.task_id, cfg.lambda_time, cfg.t_s2_default);
    let verdict = if v2 - v1 > cost2 {
        Mc2Verdict::ActivateS2
    } else {
        Mc2Verdict::AdoptS1
    };
    Mc2Assessment {
        verdict,
        v1,
        v2,
        cost2,
    }
}

/// Both phases without timing: the source S1's proposal would be routed to
/// and the diagnostics behind it. `action` is S1's; on `Source::S2` the caller
/// is expected to run S2.
pub fn arbitrate(
    store: &ExperienceStore,
    task: &TaskSpec,
    state: &State,
    s1_out: &SolverOutput,
    budget: &ResourceBudget,
    cfg: &ArbitrationConfig,
) -> ArbitrationOutcome {
    let u_hat = store.expected_task_reward(task, cfg.u_hat0);
    let est = store.mc_cost_estimate(cfg.t_mc_default);
    let mut diagnostics = Diagnostics {
        confidence: s1_out.confidence,
        u_hat,
        v1: None,
        v2: None,
        cost2: None,
        t_mc1_est: est.0,
        t_mc2_est: est.1,
        budget_remaining_s: budget.time_remaining_s,
    };
    let source = match mc1(budget, s1_out, u_hat, est, cfg) {
        Mc1Verdict::AdoptBudget => Source::S1Budget,
        Mc1Verdict::AdoptConfident => Source::S1Mc1,
        Mc1Verdict::Escalate => {
            let a = mc2(store, task, state, s1_out, cfg);
            diagnostics.v1 = Some(a.v1);
            diagnostics.v2 = Some(a.v2);
            diagnostics.cost2 = Some(a.cost2);
            match a.verdict {
                Mc2Verdict::ActivateS2 => Source::S2,
                Mc2Verdict::AdoptS1 => Source::S1Mc2,
            }
        }
    };
    ArbitrationOutcome {
        source,
        action: s1_out.action,
        trajectory: s1_out.trajectory.clone(),
        diagnostics,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::self_model::{LearningParams, S1_ID, S2_ID};
    use crate::world::{reference_task, Cell};

    fn s1(confidence: f64, action: Action) -> SolverOutput {
        SolverOutput {
            solver_id: S1_ID,
            action,
            trajectory: None,
            confidence,
            runtime_s: 0.0,
        }
    }

    fn set_q(store: &mut ExperienceStore, task: &TaskSpec, cell: Cell, action: Action, q: f64) {
        let saved = store.params;
        store.params = LearningParams {
            alpha: 1.0,
            gamma: 0.0,
            q0: 0.0,
        };
        store.q_update(task, cell, action, q, cell, &[], true);
        store.params = saved;
    }

    #[test]
    fn mc1_budget_gate() {
        let cfg = ArbitrationConfig::default();
        let v = mc1(
            &ResourceBudget::new(0.0005),
            &s1(1.0, Action::Down),
            0.0,
            (0.001, 0.001),
            &cfg,
        );
        assert_eq!(v, Mc1Verdict::AdoptBudget);
    }

    #[test]
    fn mc1_confidence_gate() {
        let cfg = ArbitrationConfig::default();
        let ample = ResourceBudget::new(10.0);
        assert_eq!(
            mc1(&ample, &s1(0.9, Action::Down), 0.4, (0.001, 0.001), &cfg),
            Mc1Verdict::AdoptConfident
        );
        assert_eq!(
            mc1(&ample, &s1(0.0, Action::Down), 1.0, (0.001, 0.001), &cfg),
            Mc1Verdict::Escalate
        );
    }

    #[test]
    fn mc1_memory_gate_when_enabled() {
        let cfg = ArbitrationConfig {
            memory: Some(MemoryLimit {
                capacity_units: 10.0,
                entry_weight: 1.0,
                mc_units: 2.0,
            }),
            ..ArbitrationConfig::default()
        };
        let mut budget = ResourceBudget::new(10.0);
        budget.memory_remaining_units = Some(1.0);
        assert_eq!(
            mc1(&budget, &s1(0.0, Action::Down), 1.0, (0.001, 0.001), &cfg),
            Mc1Verdict::AdoptBudget
        );
        budget.memory_remaining_units = Some(5.0);
        assert_eq!(
            mc1(&budget, &s1(0.0, Action::Down), 1.0, (0.001, 0.001), &cfg),
            Mc1Verdict::Escalate
        );
    }

    #[test]
    fn s1_value_is_confidence_weighted() {
        let task = reference_task();
        let mut store = ExperienceStore::default();
        let st = State::new(Cell::new(0, 0), 0);
        set_q(&mut store, &task, st.cell, Action::Down, 4.0);
        assert_eq!(
            s1_action_value(&store, &task, &st, &s1(0.0, Action::Down)),
            0.0
        );
        let v = s1_action_value(&store, &task, &st, &s1(0.8, Action::Down));
        assert!((v - 0.8 * 64.0 / 70.0).abs() < 1e-12);
        set_q(&mut store, &task, st.cell, Action::Right, 10.0);
        assert_eq!(
            s1_action_value(&store, &task, &st, &s1(1.0, Action::Right)),
            1.0
        );
    }

    #[test]
    fn mc2_cold_start_activates_s2() {
        let task = reference_task();
        let store = ExperienceStore::default();
        let a = mc2(
            &store,
            &task,
            &task.grid.initial_state(),
            &s1(0.0, Action::Down),
            &ArbitrationConfig::default(),
        );
        assert_eq!(a.verdict, Mc2Verdict::ActivateS2);
        assert_eq!((a.v1, a.v2), (0.0, 1.0));
        assert!((a.cost2 - 0.01).abs() < 1e-15);
    }

    #[test]
    fn mc2_adopts_s1_on_no_gain_and_activates_on_gain() {
        let task = reference_task();
        let cfg = ArbitrationConfig::default();
        let st = State::new(Cell::new(0, 0), 0);
        let mut store = ExperienceStore::default();
        store.record_solver_outcome(S2_ID, &task.task_id, st.cell, 4.0);
        set_q(&mut store, &task, st.cell, Action::Down, 4.0);

        let a = mc2(&store, &task, &st, &s1(1.0, Action::Down), &cfg);
        assert!((a.v2 - 64.0 / 70.0).abs() < 1e-12);
        assert_eq!(a.v1, a.v2);
        assert_eq!(a.verdict, Mc2Verdict::AdoptS1);

        let a = mc2(&store, &task, &st, &s1(0.8, Action::Down), &cfg);
        assert!((a.v2 - a.v1 - 0.2 * 64.0 / 70.0).abs() < 1e-12);
        assert_eq!(a.verdict, Mc2Verdict::ActivateS2);
    }

    #[test]
    fn gain_equal_to_cost_favours_s1() {
        let task = reference_task();
        let st = State::new(Cell::new(0, 0), 0);
        let store = ExperienceStore::default();
        // v2 = 1, v1 = 0, cost2 = lambda * 0.5 = 1.0
        let cfg = ArbitrationConfig {
            lambda_time: 2.0,
            ..ArbitrationConfig::default()
        };
        let a = mc2(&store, &task, &st, &s1(0.0, Action::Down), &cfg);
        assert_eq!(a.cost2, 1.0);
        assert_eq!(a.verdict, Mc2Verdict::AdoptS1);
    }

    #[test]
    fn arbitration_is_pure() {
        let task = reference_task();
        let store = ExperienceStore::default();
        let st = task.grid.initial_state();
        let out = s1(0.3, Action::Right);
        let budget = ResourceBudget::new(1.0);
        let cfg = ArbitrationConfig::default();
        let a = arbitrate(&store, &task, &st, &out, &budget, &cfg);
        let b = arbitrate(&store, &task, &st, &out, &budget, &cfg);
        assert_eq!(a, b);
        assert_eq!(a.source, Source::S2);
    }

    #[test]
    fn extreme_thresholds() {
        let task = reference_task();
        let store = ExperienceStore::default();
        let st = task.grid.initial_state();
        let budget = ResourceBudget::new(1.0);
        let out = s1(0.0, Action::Down);
        let lax = ArbitrationConfig {
            tau1: 0.0,
            ..ArbitrationConfig::default()
        };
        assert_eq!(
            arbitrate(&store, &task, &st, &out, &budget, &lax).source,
            Source::S1Mc1
        );
        let strict = ArbitrationConfig {
            tau1: 1e6,
            ..ArbitrationConfig::default()
        };
        let high = s1(0.999, Action::Down);
        assert!(arbitrate(&store, &task, &st, &high, &budget, &strict)
            .diagnostics
            .v2
            .is_some());
    }

    #[test]
    fn budget_never_increases() {
        let mut b = ResourceBudget::new(1.0);
        b.charge(0.4);
        b.charge(-3.0);
        assert_eq!(b.time_remaining_s, 0.6);
        b.charge(5.0);
        assert_eq!(b.time_remaining_s, 0.0);
    }
}
