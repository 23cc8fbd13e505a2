//! The fast (S1) and slow (S2) solvers.
//!
//! S1 reads the stored action values for the current cell and nothing else,
//! so its cost does not depend on the grid size. S2 solves the task exactly
//! by finite-horizon dynamic programming over the reachable cells.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use crate::self_model::{ActionValueStat, ExperienceStore, S1_ID, S2_ID};
use crate::world::{Action, Cell, State, TaskSpec};

/// Relative tolerance under which two S2 action values count as tied.
pub const TIE_TOLERANCE: f64 = 1e-9;

/// A proposed decision with the proposing solver's confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverOutput {
    pub solver_id: &'static str,
    /// The next move; the first element of `trajectory` when one is present.
    pub action: Action,
    pub trajectory: Option<Vec<Action>>,
    pub confidence: f64,
    pub runtime_s: f64,
}

/// Parameters of the S1 confidence estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct S1Params {
    /// Pseudo-count: half confidence from visits at `k` visits.
    pub k: f64,
    /// Value gap that counts as fully decisive. `None` uses the task's step
    /// cost (or 1.0 when the step cost is zero).
    pub m_scale: Option<f64>,
}

impl Default for S1Params {
    fn default() -> Self {
        Self {
            k: 5.0,
            m_scale: None,
        }
    }
}

impl S1Params {
    pub fn margin_scale(&self, task: &TaskSpec) -> f64 {
        self.m_scale.unwrap_or(if task.grid.step_cost > 0.0 {
            task.grid.step_cost
        } else {
            1.0
        })
    }
}

/// Confidence from the per-action statistics of one state:
/// visit ratio `n / (n + k)` times the clamped value margin between the two
/// best actions (margin is 1 with fewer than two actions).
fn confidence_from(stats: &[(Action, ActionValueStat)], k: f64, m_scale: f64) -> f64 {
    let visits: u64 = stats.iter().map(|(_, s)| s.n).sum();
    if visits == 0 {
        return 0.0;
    }
    let nu = visits as f64 / (visits as f64 + k);
    let mu = if stats.len() < 2 {
        1.0
    } else {
        let (mut best, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for (_, s) in stats {
            if s.q > best {
                second = best;
                best = s.q;
            } else if s.q > second {
                second = s.q;
            }
        }
        ((best - second) / m_scale).clamp(0.0, 1.0)
    };
    nu * mu
}

fn legal_stats(
    store: &ExperienceStore,
    task: &TaskSpec,
    state: &State,
) -> arrayvec::ArrayVec<(Action, ActionValueStat), 4> {
    task.grid
        .legal_actions(state)
        .into_iter()
        .map(|a| (a, store.q_lookup(&task.task_id, state.cell, a)))
        .collect()
}

pub fn s1_confidence(
    store: &ExperienceStore,
    task: &TaskSpec,
    state: &State,
    params: &S1Params,
) -> f64 {
    confidence_from(
        &legal_stats(store, task, state),
        params.k,
        params.margin_scale(task),
    )
}

/// Greedy action over the stored values (first in canonical order on ties),
/// or the first legal action when the state has never been visited.
pub fn s1_decide(
    store: &ExperienceStore,
    task: &TaskSpec,
    state: &State,
    params: &S1Params,
) -> SolverOutput {
    let started = Instant::now();
    let stats = legal_stats(store, task, state);
    let (first, _) = *stats
        .first()
        .expect("nonterminal reachable state has a legal move");
    let visited = stats.iter().any(|(_, s)| s.n > 0);
    let action = if visited {
        let mut best = stats[0];
        for &(a, s) in &stats[1..] {
            if s.q > best.1.q {
                best = (a, s);
            }
        }
        best.0
    } else {
        first
    };
    SolverOutput {
        solver_id: S1_ID,
        action,
        trajectory: None,
        confidence: confidence_from(&stats, params.k, params.margin_scale(task)),
        runtime_s: started.elapsed().as_secs_f64(),
    }
}

/// Whole-trajectory S1 proposal: repeated `s1_decide` along intended
/// successors; confidence is the weakest step's.
pub fn s1_rollout(
    store: &ExperienceStore,
    task: &TaskSpec,
    state: &State,
    params: &S1Params,
) -> SolverOutput {
    let started = Instant::now();
    let g = &task.grid;
    let mut current = *state;
    let mut actions = Vec::new();
    let mut confidence = 1.0f64;
    while !g.is_terminal(&current) {
        let out = s1_decide(store, task, &current, params);
        confidence = confidence.min(out.confidence);
        actions.push(out.action);
        let cell = g
            .successor(current.cell, out.action)
            .expect("S1 picks legal moves");
        current = State::new(cell, current.steps_taken + 1);
    }
    SolverOutput {
        solver_id: S1_ID,
        action: *actions.first().expect("nonterminal start"),
        trajectory: Some(actions),
        confidence,
        runtime_s: started.elapsed().as_secs_f64(),
    }
}

/// Optimal expected return-to-go `V*(cell, h)` for every reachable cell and
/// every number of remaining steps `h` in `0..=max_steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    index: BTreeMap<Cell, usize>,
    horizon: usize,
    values: Vec<f64>,
}

impl ValueTable {
    pub fn horizon(&self) -> u32 {
        self.horizon as u32
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        self.index.keys().copied()
    }

    pub fn value(&self, cell: Cell, h: u32) -> Option<f64> {
        let i = *self.index.get(&cell)?;
        let h = h as usize;
        (h <= self.horizon).then(|| self.values[i * (self.horizon + 1) + h])
    }

    /// Expected reward plus continuation of taking `action` with `h >= 1`
    /// steps remaining, under the slip model.
    pub fn action_value(&self, task: &TaskSpec, cell: Cell, h: u32, action: Action) -> f64 {
        let g = &task.grid;
        g.outcomes(cell, action)
            .into_iter()
            .map(|(next, p)| {
                let cont = if next == g.goal {
                    0.0
                } else {
                    self.value(next, h - 1).unwrap_or(0.0)
                };
                p * (g.entry_reward(next) + cont)
            })
            .sum()
    }

    /// Best action and its value, first in canonical order among ties.
    pub fn greedy(&self, task: &TaskSpec, cell: Cell, h: u32) -> Option<(Action, f64)> {
        if h == 0 || cell == task.grid.goal {
            return None;
        }
        let scored: Vec<(Action, f64)> = task
            .grid
            .legal_actions_at(cell)
            .into_iter()
            .map(|a| (a, self.action_value(task, cell, h, a)))
            .collect();
        let best = scored
            .iter()
            .map(|&(_, v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let tol = TIE_TOLERANCE * best.abs().max(1.0);
        scored.into_iter().find(|&(_, v)| v >= best - tol)
    }

    /// Greedy open-loop plan from `state` along intended successors.
    pub fn plan(&self, task: &TaskSpec, state: &State) -> Vec<Action> {
        let g = &task.grid;
        let mut cell = state.cell;
        let mut h = g.max_steps.saturating_sub(state.steps_taken);
        let mut actions = Vec::new();
        while let Some((a, _)) = self.greedy(task, cell, h) {
            actions.push(a);
            cell = g.successor(cell, a).expect("greedy action is legal");
            h -= 1;
        }
        actions
    }

    /// Largest absolute violation of the dynamic-programming recurrence.
    pub fn bellman_residual(&self, task: &TaskSpec) -> f64 {
        let g = &task.grid;
        let mut worst = 0.0f64;
        for cell in self.cells() {
            for h in 0..=self.horizon() {
                let stored = self.value(cell, h).unwrap();
                let recomputed = if h == 0 || cell == g.goal {
                    0.0
                } else {
                    g.legal_actions_at(cell)
                        .into_iter()
                        .map(|a| self.action_value(task, cell, h, a))
                        .fold(f64::NEG_INFINITY, f64::max)
                };
                worst = worst.max((stored - recomputed).abs());
            }
        }
        worst
    }
}

/// Exact finite-horizon dynamic programming over the reachable cells.
pub fn s2_plan(task: &TaskSpec) -> ValueTable {
    let g = &task.grid;
    let cells: Vec<Cell> = g.enumerate_reachable().into_iter().collect();
    let horizon = g.max_steps as usize;
    let mut table = ValueTable {
        index: cells.iter().enumerate().map(|(i, &c)| (c, i)).collect(),
        horizon,
        values: vec![0.0; cells.len() * (horizon + 1)],
    };
    for h in 1..=horizon {
        for (i, &cell) in cells.iter().enumerate() {
            if cell == g.goal {
                continue;
            }
            let best = g
                .legal_actions_at(cell)
                .into_iter()
                .map(|a| table.action_value(task, cell, h as u32, a))
                .fold(f64::NEG_INFINITY, f64::max);
            table.values[i * (horizon + 1) + h] = if best.is_finite() { best } else { 0.0 };
        }
    }
    table
}

fn decide_with(
    table: &ValueTable,
    task: &TaskSpec,
    state: &State,
    started: Instant,
) -> SolverOutput {
    let plan = table.plan(task, state);
    SolverOutput {
        solver_id: S2_ID,
        action: *plan.first().expect("nonterminal state has a plan"),
        trajectory: Some(plan),
        confidence: 1.0,
        runtime_s: started.elapsed().as_secs_f64(),
    }
}

/// Plans from scratch and returns the greedy action plus the full plan.
pub fn s2_decide(task: &TaskSpec, state: &State) -> SolverOutput {
    let started = Instant::now();
    let table = s2_plan(task);
    decide_with(&table, task, state, started)
}

/// S2 with its value table cached per task.
#[derive(Debug, Default)]
pub struct S2Solver {
    cache: Option<(TaskSpec, Arc<ValueTable>)>,
}

impl S2Solver {
    pub fn table(&mut self, task: &TaskSpec) -> Arc<ValueTable> {
        match &self.cache {
            Some((cached, table)) if cached == task => Arc::clone(table),
            _ => {
                let table = Arc::new(s2_plan(task));
                self.cache = Some((task.clone(), Arc::clone(&table)));
                table
            }
        }
    }

    pub fn decide(&mut self, task: &TaskSpec, state: &State) -> SolverOutput {
        let started = Instant::now();
        let table = self.table(task);
        decide_with(&table, task, state, started)
    }
}
