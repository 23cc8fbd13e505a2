//! Brute-force optimum for small deterministic tasks.
//!
//! Enumerates action sequences depth-first. The only pruning is a bound that
//! can never cut an optimal sequence: entering a non-goal cell earns at most
//! `-step_cost`, so from any point the rest of an episode earns at most
//! `goal_reward - step_cost` (goal reached) or `-remaining * step_cost` (not
//! reached). The incumbent starts at the breadth-first shortest path.

use std::collections::{BTreeMap, VecDeque};

use thiserror::Error;

use crate::world::{Action, Cell, TaskSpec};

pub const MAX_ORACLE_CELLS: u32 = 36;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleOptimum {
    pub total_return: f64,
    /// Fewest steps among the optimal episodes.
    pub steps: u32,
}

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("oracle needs a deterministic task (slip_prob = {0})")]
    Stochastic(f64),
    #[error("oracle is limited to {MAX_ORACLE_CELLS} cells, grid has {0}")]
    TooLarge(u32),
}

struct Search<'a> {
    task: &'a TaskSpec,
    best: f64,
    best_steps: u32,
}

impl Search<'_> {
    fn bound(&self, remaining: u32) -> f64 {
        let g = &self.task.grid;
        (g.goal_reward - g.step_cost).max(-f64::from(remaining) * g.step_cost)
    }

    fn offer(&mut self, ret: f64, steps: u32) {
        if ret > self.best || (ret == self.best && steps < self.best_steps) {
            self.best = ret;
            self.best_steps = steps;
        }
    }

    fn dfs(&mut self, cell: Cell, steps: u32, acc: f64) {
        let g = &self.task.grid;
        if cell == g.goal || steps >= g.max_steps {
            self.offer(acc, steps);
            return;
        }
        if acc + self.bound(g.max_steps - steps) < self.best {
            return;
        }
        for a in Action::ALL {
            if let Some(next) = g.successor(cell, a) {
                self.dfs(next, steps + 1, acc + g.entry_reward(next));
            }
        }
    }
}

/// Shortest start-to-goal path as a list of entered cells.
fn shortest_path(task: &TaskSpec) -> Option<Vec<Cell>> {
    let g = &task.grid;
    let mut parent: BTreeMap<Cell, Cell> = BTreeMap::new();
    let mut queue = VecDeque::from([g.start]);
    parent.insert(g.start, g.start);
    while let Some(cell) = queue.pop_front() {
        if cell == g.goal {
            let mut path = vec![];
            let mut c = cell;
            while c != g.start {
                path.push(c);
                c = parent[&c];
            }
            path.reverse();
            return Some(path);
        }
        for a in Action::ALL {
            if let Some(next) = g.successor(cell, a) {
                parent.entry(next).or_insert_with(|| {
                    queue.push_back(next);
                    cell
                });
            }
        }
    }
    None
}

/// Maximal episode return over every action sequence, and the fewest steps
/// achieving it.
pub fn oracle_optimal_return(task: &TaskSpec) -> Result<OracleOptimum, OracleError> {
    let g = &task.grid;
    if g.slip_prob > 0.0 {
        return Err(OracleError::Stochastic(g.slip_prob));
    }
    if g.width * g.height > MAX_ORACLE_CELLS {
        return Err(OracleError::TooLarge(g.width * g.height));
    }
    let mut search = Search {
        task,
        best: f64::NEG_INFINITY,
        best_steps: u32::MAX,
    };
    if let Some(path) = shortest_path(task).filter(|p| p.len() as u32 <= g.max_steps) {
        let ret = path.iter().map(|&c| g.entry_reward(c)).sum();
        search.offer(ret, path.len() as u32);
    }
    search.dfs(g.start, 0, 0.0);
    Ok(OracleOptimum {
        total_return: search.best,
        steps: search.best_steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{reference_task, GridSpec};
    use std::collections::{BTreeMap, BTreeSet};

    fn open_grid(width: u32, height: u32, goal: Cell) -> GridSpec {
        GridSpec {
            width,
            height,
            start: Cell::new(0, 0),
            goal,
            walls: BTreeSet::new(),
            features: BTreeMap::new(),
            forbidden_moves: BTreeSet::new(),
            step_cost: 1.0,
            goal_reward: 10.0,
            slip_prob: 0.0,
            max_steps: 20,
        }
    }

    /// Every action sequence, no pruning at all.
    fn exhaustive(task: &TaskSpec, cell: Cell, steps: u32, acc: f64, best: &mut (f64, u32)) {
        let g = &task.grid;
        if cell == g.goal || steps >= g.max_steps {
            if acc > best.0 || (acc == best.0 && steps < best.1) {
                *best = (acc, steps);
            }
            return;
        }
        for a in Action::ALL {
            if let Some(next) = g.successor(cell, a) {
                exhaustive(task, next, steps + 1, acc + g.entry_reward(next), best);
            }
        }
    }

    #[test]
    fn reference_optimum() {
        let task = reference_task();
        let opt = oracle_optimal_return(&task).unwrap();
        assert_eq!(
            opt,
            OracleOptimum {
                total_return: 4.0,
                steps: 6
            }
        );
        // One optimal path by hand: down the left column, then along the bottom.
        let path = [(0, 1), (0, 2), (0, 3), (1, 3), (2, 3), (3, 3)];
        let ret: f64 = path
            .iter()
            .map(|&(x, y)| task.grid.entry_reward(Cell::new(x, y)))
            .sum();
        assert_eq!(ret, 4.0);
    }

    #[test]
    fn adjacent_goal() {
        let task = TaskSpec::new("pair", open_grid(2, 1, Cell::new(1, 0))).unwrap();
        assert_eq!(
            oracle_optimal_return(&task).unwrap(),
            OracleOptimum {
                total_return: 9.0,
                steps: 1
            }
        );
    }

    #[test]
    fn forced_penalty_is_paid() {
        let mut g = open_grid(3, 1, Cell::new(2, 0));
        g.features.insert(Cell::new(1, 0), 2.5);
        let task = TaskSpec::new("corridor", g).unwrap();
        let opt = oracle_optimal_return(&task).unwrap();
        assert_eq!(opt.total_return, -1.0 - 2.5 + 9.0);
        assert_eq!(opt.steps, 2);
    }

    #[test]
    fn stochastic_and_large_tasks_are_rejected() {
        let mut task = reference_task();
        task.grid.slip_prob = 0.1;
        assert_eq!(
            oracle_optimal_return(&task),
            Err(OracleError::Stochastic(0.1))
        );
        let big = TaskSpec::new("big", open_grid(7, 7, Cell::new(6, 6))).unwrap();
        assert_eq!(oracle_optimal_return(&big), Err(OracleError::TooLarge(49)));
    }

    #[test]
    fn pruned_search_agrees_with_plain_enumeration() {
        // Short horizons keep the unpruned enumeration tractable.
        let mut g = reference_task().grid;
        g.max_steps = 9;
        g.forbidden_moves.insert((Cell::new(0, 2), Action::Down));
        let task = TaskSpec::new("short", g).unwrap();
        let mut best = (f64::NEG_INFINITY, u32::MAX);
        exhaustive(&task, task.grid.start, 0, 0.0, &mut best);
        let opt = oracle_optimal_return(&task).unwrap();
        assert_eq!((opt.total_return, opt.steps), best);

        // Goal out of reach within the horizon: best non-goal walk.
        let mut g = open_grid(4, 1, Cell::new(3, 0));
        g.max_steps = 2;
        let task = TaskSpec::new("short2", g).unwrap();
        let mut best = (f64::NEG_INFINITY, u32::MAX);
        exhaustive(&task, task.grid.start, 0, 0.0, &mut best);
        let opt = oracle_optimal_return(&task).unwrap();
        assert_eq!((opt.total_return, opt.steps), best);
        assert_eq!(best, (-2.0, 2));
    }
}
