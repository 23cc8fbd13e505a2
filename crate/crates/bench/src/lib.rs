//! Fixtures shared by the benchmarks.

use std::collections::{BTreeMap, BTreeSet};

use fastslow_core::{Cell, ExperienceStore, GridSpec, Mode, RunConfig, TaskSpec};

/// Open `n`x`n` grid from the top-left to the bottom-right corner, with a
/// penalty stripe along the middle row.
pub fn open_task(n: u32) -> TaskSpec {
    let features: BTreeMap<Cell, f64> = (0..n.saturating_sub(1))
        .map(|x| (Cell::new(x, n / 2), 2.0))
        .collect();
    let grid = GridSpec {
        width: n,
        height: n,
        start: Cell::new(0, 0),
        goal: Cell::new(n - 1, n - 1),
        walls: BTreeSet::new(),
        features,
        forbidden_moves: BTreeSet::new(),
        step_cost: 1.0,
        goal_reward: 10.0,
        slip_prob: 0.0,
        max_steps: 4 * n,
    };
    TaskSpec::new(format!("open-{n}"), grid).expect("open grid is valid")
}

/// Store after `episodes` pure-S1 episodes on `task`.
pub fn trained_store(task: &TaskSpec, episodes: u32) -> ExperienceStore {
    let cfg = RunConfig {
        mode: Mode::PureS1,
        episodes,
        ..RunConfig::default()
    };
    let mut store = ExperienceStore::default();
    fastslow_core::run_experiment(&cfg, task, &mut store).expect("default config is valid");
    store
}
