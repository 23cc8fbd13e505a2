//! The model of the world: a rectangular, 4-connected grid with three kinds
//! of constraints (walls on states, forbidden moves, per-cell penalties),
//! optional slip noise, and a fixed step limit.

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::path::Path;

use arrayvec::ArrayVec;
use rand_core::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

/// A move on the grid. The declaration order is the canonical order used
/// for every deterministic tie-break.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn as_str(self) -> &'static str {
        match self {
            Action::Up => "Up",
            Action::Down => "Down",
            Action::Left => "Left",
            Action::Right => "Right",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Legal moves at a cell, in canonical order.
pub type ActionSet = ArrayVec<Action, 4>;

/// Grid coordinate; origin is the top-left corner and `y` grows downward.
/// Serialized as a two-element `[x, y]` array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 2]", into = "[u32; 2]")]
pub struct Cell {
    pub x: u32,
    pub y: u32,
}

impl Cell {
    pub const fn new(x: u32, y: u32) -> Self {
        Self { x, y }
    }

    /// Neighbour in the given direction, ignoring walls; `None` when the move
    /// would leave a `width` x `height` grid.
    pub fn step(self, action: Action, width: u32, height: u32) -> Option<Cell> {
        let Cell { x, y } = self;
        match action {
            Action::Up => y.checked_sub(1).map(|y| Cell { x, y }),
            Action::Down => (y + 1 < height).then_some(Cell { x, y: y + 1 }),
            Action::Left => x.checked_sub(1).map(|x| Cell { x, y }),
            Action::Right => (x + 1 < width).then_some(Cell { x: x + 1, y }),
        }
    }
}

impl From<[u32; 2]> for Cell {
    fn from([x, y]: [u32; 2]) -> Self {
        Cell { x, y }
    }
}

impl From<Cell> for [u32; 2] {
    fn from(c: Cell) -> Self {
        [c.x, c.y]
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.x, self.y)
    }
}

/// A constrained grid decision environment.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub width: u32,
    pub height: u32,
    pub start: Cell,
    pub goal: Cell,
    pub walls: BTreeSet<Cell>,
    /// Per-cell penalty charged on entering the cell, in reward units.
    pub features: BTreeMap<Cell, f64>,
    pub forbidden_moves: BTreeSet<(Cell, Action)>,
    pub step_cost: f64,
    pub goal_reward: f64,
    pub slip_prob: f64,
    pub max_steps: u32,
}

/// Position plus elapsed steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct State {
    pub cell: Cell,
    pub steps_taken: u32,
}

impl State {
    pub fn new(cell: Cell, steps_taken: u32) -> Self {
        Self { cell, steps_taken }
    }
}

/// Violation of an environment call's preconditions.
#[derive(Debug, Error, PartialEq)]
pub enum WorldError {
    #[error("action {action} is not legal at {cell}")]
    IllegalAction { cell: Cell, action: Action },
    #[error("state at {cell} after {steps} steps is terminal")]
    TerminalState { cell: Cell, steps: u32 },
}

impl GridSpec {
    pub fn in_bounds(&self, cell: Cell) -> bool {
        cell.x < self.width && cell.y < self.height
    }

    pub fn penalty(&self, cell: Cell) -> f64 {
        self.features.get(&cell).copied().unwrap_or(0.0)
    }

    pub fn max_penalty(&self) -> f64 {
        self.features.values().copied().fold(0.0, f64::max)
    }

    pub fn initial_state(&self) -> State {
        State::new(self.start, 0)
    }

    /// Cell reached by `action` from `cell` if the move is legal.
    pub fn successor(&self, cell: Cell, action: Action) -> Option<Cell> {
        if self.forbidden_moves.contains(&(cell, action)) {
            return None;
        }
        cell.step(action, self.width, self.height)
            .filter(|next| !self.walls.contains(next))
    }

    pub fn legal_actions_at(&self, cell: Cell) -> ActionSet {
        Action::ALL
            .into_iter()
            .filter(|&a| self.successor(cell, a).is_some())
            .collect()
    }

    pub fn legal_actions(&self, state: &State) -> ActionSet {
        self.legal_actions_at(state.cell)
    }

    pub fn is_terminal(&self, state: &State) -> bool {
        state.cell == self.goal || state.steps_taken >= self.max_steps
    }

    /// Samples the next state. With probability `1 - slip_prob` the intended
    /// move happens; otherwise one of the other legal moves is chosen
    /// uniformly. No randomness is consumed when the outcome is forced.
    pub fn transition<R: RngCore + ?Sized>(
        &self,
        state: &State,
        action: Action,
        rng: &mut R,
    ) -> Result<State, WorldError> {
        if self.is_terminal(state) {
            return Err(WorldError::TerminalState {
                cell: state.cell,
                steps: state.steps_taken,
            });
        }
        let legal = self.legal_actions(state);
        if !legal.contains(&action) {
            return Err(WorldError::IllegalAction {
                cell: state.cell,
                action,
            });
        }
        let mut taken = action;
        if legal.len() > 1 && self.slip_prob > 0.0 && rng::unit(rng) < self.slip_prob {
            let others: ActionSet = legal.iter().copied().filter(|&a| a != action).collect();
            taken = others[rng::pick_index(rng, others.len())];
        }
        let cell = self
            .successor(state.cell, taken)
            .expect("legal action has a successor");
        Ok(State::new(cell, state.steps_taken + 1))
    }

    /// Successor distribution of `action` at `cell` under the slip model, in
    /// canonical order of the move actually taken.
    pub fn outcomes(&self, cell: Cell, action: Action) -> ArrayVec<(Cell, f64), 4> {
        let legal = self.legal_actions_at(cell);
        let mut out = ArrayVec::new();
        if !legal.contains(&action) {
            return out;
        }
        if legal.len() == 1 || self.slip_prob == 0.0 {
            out.push((self.successor(cell, action).unwrap(), 1.0));
            return out;
        }
        let slip_each = self.slip_prob / (legal.len() - 1) as f64;
        for a in legal {
            let p = if a == action {
                1.0 - self.slip_prob
            } else {
                slip_each
            };
            if p > 0.0 {
                out.push((self.successor(cell, a).unwrap(), p));
            }
        }
        out
    }

    /// Reward for entering `next`: step cost, the entered cell's penalty, and
    /// the goal bonus.
    pub fn reward(&self, _state: &State, _action: Action, next: &State) -> f64 {
        self.entry_reward(next.cell)
    }

    pub fn entry_reward(&self, cell: Cell) -> f64 {
        let bonus = if cell == self.goal {
            self.goal_reward
        } else {
            0.0
        };
        -self.step_cost - self.penalty(cell) + bonus
    }

    /// Cells reachable from the start by legal moves (breadth-first), sorted.
    pub fn enumerate_reachable(&self) -> BTreeSet<Cell> {
        self.bfs_from(self.start).into_keys().collect()
    }

    /// Breadth-first distances from `origin` under the move constraints.
    pub fn bfs_from(&self, origin: Cell) -> BTreeMap<Cell, u32> {
        let mut dist = BTreeMap::new();
        if !self.in_bounds(origin) || self.walls.contains(&origin) {
            return dist;
        }
        dist.insert(origin, 0);
        let mut queue = VecDeque::from([origin]);
        while let Some(cell) = queue.pop_front() {
            let d = dist[&cell];
            for a in self.legal_actions_at(cell) {
                let next = self.successor(cell, a).unwrap();
                if let Entry::Vacant(e) = dist.entry(next) {
                    e.insert(d + 1);
                    queue.push_back(next);
                }
            }
        }
        dist
    }
}

/// A task: the grid plus the metadata the meta-cognitive agent needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub task_id: String,
    pub grid: GridSpec,
    /// Upper bound on any episode return.
    pub r_max: f64,
    /// Lower bound on any episode return.
    pub r_min: f64,
    pub description: String,
}

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
}

impl TaskError {
    fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        TaskError::Invalid {
            field,
            reason: reason.into(),
        }
    }
}

impl TaskSpec {
    /// Builds a task with the default return bounds and validates it.
    pub fn new(task_id: impl Into<String>, grid: GridSpec) -> Result<Self, TaskError> {
        Self::with_bounds(task_id, grid, None, None, String::new())
    }

    pub fn with_bounds(
        task_id: impl Into<String>,
        grid: GridSpec,
        r_min: Option<f64>,
        r_max: Option<f64>,
        description: String,
    ) -> Result<Self, TaskError> {
        let r_max = r_max.unwrap_or(grid.goal_reward);
        let r_min =
            r_min.unwrap_or(-(grid.step_cost + grid.max_penalty()) * f64::from(grid.max_steps));
        let task = TaskSpec {
            task_id: task_id.into(),
            grid,
            r_max,
            r_min,
            description,
        };
        task.validate()?;
        Ok(task)
    }

    /// Maps a return onto `[0, 1]` using the task's return bounds.
    pub fn normalize(&self, value: f64) -> f64 {
        ((value - self.r_min) / (self.r_max - self.r_min)).clamp(0.0, 1.0)
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        let g = &self.grid;
        if g.width == 0 {
            return Err(TaskError::invalid("width", "must be positive"));
        }
        if g.height == 0 {
            return Err(TaskError::invalid("height", "must be positive"));
        }
        if g.max_steps == 0 {
            return Err(TaskError::invalid("max_steps", "must be positive"));
        }
        let check_cell = |field: &'static str, c: Cell| {
            if g.in_bounds(c) {
                Ok(())
            } else {
                Err(TaskError::invalid(
                    field,
                    format!("cell {c} is outside the grid"),
                ))
            }
        };
        check_cell("start", g.start)?;
        check_cell("goal", g.goal)?;
        for &c in &g.walls {
            check_cell("walls", c)?;
        }
        for (&c, &p) in &g.features {
            check_cell("features", c)?;
            if !(p >= 0.0 && p.is_finite()) {
                return Err(TaskError::invalid(
                    "features",
                    format!("penalty at {c} must be a nonnegative number, got {p}"),
                ));
            }
        }
        for &(c, _) in &g.forbidden_moves {
            check_cell("forbidden_moves", c)?;
        }
        if g.walls.contains(&g.start) {
            return Err(TaskError::invalid("start", "cell lies inside a wall"));
        }
        if g.walls.contains(&g.goal) {
            return Err(TaskError::invalid("goal", "cell lies inside a wall"));
        }
        if !(g.step_cost >= 0.0 && g.step_cost.is_finite()) {
            return Err(TaskError::invalid(
                "step_cost",
                "must be a nonnegative number",
            ));
        }
        if !g.goal_reward.is_finite() {
            return Err(TaskError::invalid("goal_reward", "must be finite"));
        }
        if !(0.0..=1.0).contains(&g.slip_prob) {
            return Err(TaskError::invalid("slip_prob", "must lie in [0, 1]"));
        }
        let reachable = g.enumerate_reachable();
        if !reachable.contains(&g.goal) {
            return Err(TaskError::invalid("goal", "unreachable from start"));
        }
        if let Some(dead) = reachable
            .iter()
            .find(|&&c| c != g.goal && g.legal_actions_at(c).is_empty())
        {
            return Err(TaskError::invalid(
                "forbidden_moves",
                format!("reachable cell {dead} has no legal move"),
            ));
        }
        if !(self.r_min.is_finite() && self.r_max.is_finite() && self.r_min < self.r_max) {
            return Err(TaskError::invalid(
                "r_min",
                format!("need r_min < r_max, got {} and {}", self.r_min, self.r_max),
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, TaskError> {
        let file: GridFile =
            serde_json::from_str(text).map_err(|e| TaskError::Parse(e.to_string()))?;
        file.into_task()
    }

    /// Serializes to the grid-file format with both return bounds explicit.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&GridFile::from_task(self)).expect("grid file serializes")
    }
}

/// Reads and validates a grid file.
pub fn load_task(path: impl AsRef<Path>) -> Result<TaskSpec, TaskError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| TaskError::Io {
        path: path.display().to_string(),
        source,
    })?;
    TaskSpec::from_json(&text)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridFile {
    task_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    description: Option<String>,
    width: u32,
    height: u32,
    start: Cell,
    goal: Cell,
    #[serde(default)]
    walls: Vec<Cell>,
    #[serde(default)]
    features: Vec<FeatureEntry>,
    #[serde(default)]
    forbidden_moves: Vec<ForbiddenEntry>,
    step_cost: f64,
    goal_reward: f64,
    #[serde(default)]
    slip_prob: f64,
    max_steps: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    r_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    r_max: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureEntry {
    cell: Cell,
    penalty: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ForbiddenEntry {
    cell: Cell,
    action: Action,
}

impl GridFile {
    fn into_task(self) -> Result<TaskSpec, TaskError> {
        let mut features = BTreeMap::new();
        for f in self.features {
            if features.insert(f.cell, f.penalty).is_some() {
                return Err(TaskError::invalid(
                    "features",
                    format!("duplicate entry for cell {}", f.cell),
                ));
            }
        }
        let grid = GridSpec {
            width: self.width,
            height: self.height,
            start: self.start,
            goal: self.goal,
            walls: self.walls.into_iter().collect(),
            features,
            forbidden_moves: self
                .forbidden_moves
                .into_iter()
                .map(|f| (f.cell, f.action))
                .collect(),
            step_cost: self.step_cost,
            goal_reward: self.goal_reward,
            slip_prob: self.slip_prob,
            max_steps: self.max_steps,
        };
        TaskSpec::with_bounds(
            self.task_id,
            grid,
            self.r_min,
            self.r_max,
            self.description.unwrap_or_default(),
        )
    }

    fn from_task(task: &TaskSpec) -> Self {
        let g = &task.grid;
        GridFile {
            task_id: task.task_id.clone(),
            description: (!task.description.is_empty()).then(|| task.description.clone()),
            width: g.width,
            height: g.height,
            start: g.start,
            goal: g.goal,
            walls: g.walls.iter().copied().collect(),
            features: g
                .features
                .iter()
                .map(|(&cell, &penalty)| FeatureEntry { cell, penalty })
                .collect(),
            forbidden_moves: g
                .forbidden_moves
                .iter()
                .map(|&(cell, action)| ForbiddenEntry { cell, action })
                .collect(),
            step_cost: g.step_cost,
            goal_reward: g.goal_reward,
            slip_prob: g.slip_prob,
            max_steps: g.max_steps,
            r_min: Some(task.r_min),
            r_max: Some(task.r_max),
        }
    }
}

/// The 4x4 reference task: wall at (1,1), penalty 2 at (2,2), goal at (3,3).
pub fn reference_task() -> TaskSpec {
    TaskSpec::from_json(REFERENCE_GRID_JSON).expect("reference grid is valid")
}

pub const REFERENCE_GRID_JSON: &str = r#"{
  "task_id": "reference-4x4",
  "width": 4,
  "height": 4,
  "start": [0, 0],
  "goal": [3, 3],
  "walls": [[1, 1]],
  "features": [{"cell": [2, 2], "penalty": 2.0}],
  "forbidden_moves": [],
  "step_cost": 1.0,
  "goal_reward": 10.0,
  "slip_prob": 0.0,
  "max_steps": 20
}"#;
