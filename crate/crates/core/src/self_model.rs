//! The model of self: everything the system knows about its own past.
//!
//! Holds tabular action values learned off-policy from every executed step,
//! solver runtime and outcome statistics, per-task episode returns and the
//! cost of the meta-cognitive phases. All statistics are running means kept
//! as exact `(count, sum)` pairs so they can be persisted without drift.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::world::{Action, Cell, TaskSpec};

pub const S1_ID: &str = "s1";
pub const S2_ID: &str = "s2";

pub const FORMAT_VERSION: u64 = 1;

/// Tabular Q-learning parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningParams {
    pub alpha: f64,
    pub gamma: f64,
    pub q0: f64,
}

impl Default for LearningParams {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            gamma: 0.95,
            q0: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionValueStat {
    pub q: f64,
    pub n: u64,
}

/// Mean of a stream of samples, kept as an exact count and sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningMean {
    pub count: u64,
    pub sum: f64,
}

impl RunningMean {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        self.sum += x;
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum McPhase {
    #[serde(rename = "MC1")]
    Mc1,
    #[serde(rename = "MC2")]
    Mc2,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct McCostStat {
    pub mc1: RunningMean,
    pub mc2: RunningMean,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolverStats {
    /// Keyed by `(solver_id, task_id)`.
    pub runtime: BTreeMap<(String, String), RunningMean>,
    pub outcome: BTreeMap<(String, String), RunningMean>,
    pub outcome_by_cell: BTreeMap<(String, String, Cell), RunningMean>,
}

/// Identifies one running mean in the store.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StatKey {
    Runtime {
        solver: String,
        task: String,
    },
    Outcome {
        solver: String,
        task: String,
    },
    OutcomeAt {
        solver: String,
        task: String,
        cell: Cell,
    },
    TaskReturn {
        task: String,
    },
    McCost(McPhase),
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("store parse error at {record}: {message}")]
    Parse { record: String, message: String },
    #[error("unsupported store format_version {found} (expected {FORMAT_VERSION})")]
    Version { found: String },
    #[error("{what} must be nonnegative, got {value}")]
    Negative { what: &'static str, value: f64 },
}

/// Counts `q_lookup` calls. Instrumentation only: never persisted and
/// ignored by equality.
#[derive(Debug, Default)]
struct LookupCounter(AtomicU64);

impl Clone for LookupCounter {
    fn clone(&self) -> Self {
        Self(AtomicU64::new(self.0.load(Ordering::Relaxed)))
    }
}

#[derive(Debug, Clone, Default)]
pub struct ExperienceStore {
    pub params: LearningParams,
    q_table: HashMap<String, HashMap<(Cell, Action), ActionValueStat>>,
    solver_stats: SolverStats,
    task_stats: BTreeMap<String, RunningMean>,
    mc_costs: McCostStat,
    lookups: LookupCounter,
    sample_log: Option<Vec<(StatKey, f64)>>,
}

impl PartialEq for ExperienceStore {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
            && self.q_table == other.q_table
            && self.solver_stats == other.solver_stats
            && self.task_stats == other.task_stats
            && self.mc_costs == other.mc_costs
    }
}

impl ExperienceStore {
    pub fn new(params: LearningParams) -> Self {
        Self {
            params,
            ..Self::default()
        }
    }

    /// Keeps every recorded sample so the running means can be audited.
    pub fn with_sample_log(mut self) -> Self {
        self.sample_log = Some(Vec::new());
        self
    }

    pub fn sample_log(&self) -> Option<&[(StatKey, f64)]> {
        self.sample_log.as_deref()
    }

    pub fn lookup_count(&self) -> u64 {
        self.lookups.0.load(Ordering::Relaxed)
    }

    pub fn reset_lookup_count(&self) {
        self.lookups.0.store(0, Ordering::Relaxed);
    }

    fn get(&self, task_id: &str, cell: Cell, action: Action) -> Option<&ActionValueStat> {
        self.q_table.get(task_id)?.get(&(cell, action))
    }

    /// Stored action value, or `(q0, 0)` for an unvisited triple.
    pub fn q_lookup(&self, task_id: &str, cell: Cell, action: Action) -> ActionValueStat {
        self.lookups.0.fetch_add(1, Ordering::Relaxed);
        self.get(task_id, cell, action)
            .copied()
            .unwrap_or(ActionValueStat {
                q: self.params.q0,
                n: 0,
            })
    }

    /// One Q-learning backup, clamped to the task's return bounds.
    #[allow(clippy::too_many_arguments)]
    pub fn q_update(
        &mut self,
        task: &TaskSpec,
        cell: Cell,
        action: Action,
        reward: f64,
        next_cell: Cell,
        next_legal: &[Action],
        terminal: bool,
    ) {
        let LearningParams { alpha, gamma, q0 } = self.params;
        let bootstrap = if terminal || next_legal.is_empty() {
            0.0
        } else {
            next_legal
                .iter()
                .map(|&a| self.get(&task.task_id, next_cell, a).map_or(q0, |s| s.q))
                .fold(f64::NEG_INFINITY, f64::max)
        };
        let stat = self
            .q_table
            .entry(task.task_id.clone())
            .or_default()
            .entry((cell, action))
            .or_insert(ActionValueStat { q: q0, n: 0 });
        let q = stat.q + alpha * (reward + gamma * bootstrap - stat.q);
        stat.q = q.clamp(task.r_min, task.r_max);
        stat.n += 1;
    }

    fn log(&mut self, key: StatKey, value: f64) {
        if let Some(log) = &mut self.sample_log {
            log.push((key, value));
        }
    }

    pub fn record_solver_run(
        &mut self,
        solver_id: &str,
        task_id: &str,
        runtime_s: f64,
    ) -> Result<(), StoreError> {
        if runtime_s.is_nan() || runtime_s < 0.0 {
            return Err(StoreError::Negative {
                what: "runtime_s",
                value: runtime_s,
            });
        }
        self.solver_stats
            .runtime
            .entry((solver_id.to_owned(), task_id.to_owned()))
            .or_default()
            .push(runtime_s);
        self.log(
            StatKey::Runtime {
                solver: solver_id.to_owned(),
                task: task_id.to_owned(),
            },
            runtime_s,
        );
        Ok(())
    }

    pub fn record_solver_outcome(
        &mut self,
        solver_id: &str,
        task_id: &str,
        cell: Cell,
        return_to_go: f64,
    ) {
        let key = (solver_id.to_owned(), task_id.to_owned());
        self.solver_stats
            .outcome
            .entry(key.clone())
            .or_default()
            .push(return_to_go);
        self.solver_stats
            .outcome_by_cell
            .entry((key.0, key.1, cell))
            .or_default()
            .push(return_to_go);
        if self.sample_log.is_some() {
            let (solver, task) = (solver_id.to_owned(), task_id.to_owned());
            self.log(
                StatKey::Outcome {
                    solver: solver.clone(),
                    task: task.clone(),
                },
                return_to_go,
            );
            self.log(StatKey::OutcomeAt { solver, task, cell }, return_to_go);
        }
    }

    pub fn record_task_return(&mut self, task_id: &str, episode_return: f64) {
        self.task_stats
            .entry(task_id.to_owned())
            .or_default()
            .push(episode_return);
        self.log(
            StatKey::TaskReturn {
                task: task_id.to_owned(),
            },
            episode_return,
        );
    }

    pub fn record_mc_cost(&mut self, phase: McPhase, duration_s: f64) -> Result<(), StoreError> {
        if duration_s.is_nan() || duration_s < 0.0 {
            return Err(StoreError::Negative {
                what: "duration_s",
                value: duration_s,
            });
        }
        match phase {
            McPhase::Mc1 => self.mc_costs.mc1.push(duration_s),
            McPhase::Mc2 => self.mc_costs.mc2.push(duration_s),
        }
        self.log(StatKey::McCost(phase), duration_s);
        Ok(())
    }

    /// Looks up any running mean by key.
    pub fn stat(&self, key: &StatKey) -> Option<RunningMean> {
        let pair = |s: &String, t: &String| (s.clone(), t.clone());
        match key {
            StatKey::Runtime { solver, task } => {
                self.solver_stats.runtime.get(&pair(solver, task)).copied()
            }
            StatKey::Outcome { solver, task } => {
                self.solver_stats.outcome.get(&pair(solver, task)).copied()
            }
            StatKey::OutcomeAt { solver, task, cell } => self
                .solver_stats
                .outcome_by_cell
                .get(&(solver.clone(), task.clone(), *cell))
                .copied(),
            StatKey::TaskReturn { task } => self.task_stats.get(task).copied(),
            StatKey::McCost(McPhase::Mc1) => Some(self.mc_costs.mc1),
            StatKey::McCost(McPhase::Mc2) => Some(self.mc_costs.mc2),
        }
    }

    /// Normalized expected reward for the task; `default` before any episode.
    pub fn expected_task_reward(&self, task: &TaskSpec, default: f64) -> f64 {
        match self
            .task_stats
            .get(&task.task_id)
            .and_then(RunningMean::mean)
        {
            Some(mean) => task.normalize(mean),
            None => default,
        }
    }

    /// Normalized mean return-to-go of past S2 decisions at `cell`, falling
    /// back to the task-level mean and then to the optimistic prior.
    pub fn expected_s2_value(&self, task: &TaskSpec, cell: Cell, v_opt: f64) -> f64 {
        let key = (S2_ID.to_owned(), task.task_id.clone());
        let per_cell = self
            .solver_stats
            .outcome_by_cell
            .get(&(key.0.clone(), key.1.clone(), cell))
            .and_then(RunningMean::mean);
        let per_task = || {
            self.solver_stats
                .outcome
                .get(&key)
                .and_then(RunningMean::mean)
        };
        match per_cell.or_else(per_task) {
            Some(mean) => task.normalize(mean),
            None => v_opt,
        }
    }

    /// Expected cost of an S2 call, in normalized value units.
    pub fn expected_s2_cost(&self, task_id: &str, lambda_time: f64, t_s2_default: f64) -> f64 {
        let runtime = self
            .solver_stats
            .runtime
            .get(&(S2_ID.to_owned(), task_id.to_owned()))
            .and_then(RunningMean::mean)
            .unwrap_or(t_s2_default);
        lambda_time * runtime
    }

    pub fn mc_cost_estimate(&self, t_mc_default: f64) -> (f64, f64) {
        (
            self.mc_costs.mc1.mean().unwrap_or(t_mc_default),
            self.mc_costs.mc2.mean().unwrap_or(t_mc_default),
        )
    }

    pub fn q_entries(&self) -> usize {
        self.q_table.values().map(HashMap::len).sum()
    }

    /// Total number of Q-learning backups applied.
    pub fn total_visits(&self) -> u64 {
        self.q_table
            .values()
            .flat_map(HashMap::values)
            .map(|s| s.n)
            .sum()
    }

    /// Number of stored records, the unit of abstract memory accounting.
    pub fn entry_count(&self) -> usize {
        self.q_entries()
            + self.solver_stats.runtime.len()
            + self.solver_stats.outcome.len()
            + self.solver_stats.outcome_by_cell.len()
            + self.task_stats.len()
    }

    pub fn solver_stats(&self) -> &SolverStats {
        &self.solver_stats
    }

    pub fn task_stats(&self) -> &BTreeMap<String, RunningMean> {
        &self.task_stats
    }

    pub fn mc_costs(&self) -> &McCostStat {
        &self.mc_costs
    }

    /// Q-table rows sorted by `(task, cell, action)`.
    pub fn q_rows(&self) -> Vec<(&str, Cell, Action, ActionValueStat)> {
        let mut rows: Vec<_> = self
            .q_table
            .iter()
            .flat_map(|(task, m)| m.iter().map(move |(&(c, a), &s)| (task.as_str(), c, a, s)))
            .collect();
        rows.sort_by(|x, y| (x.0, x.1, x.2).cmp(&(y.0, y.1, y.2)));
        rows
    }

    pub fn to_json(&self) -> String {
        let file = StoreFile {
            format_version: FORMAT_VERSION,
            params: self.params,
            q_table: self
                .q_rows()
                .into_iter()
                .map(|(task, cell, action, s)| QRecord {
                    task: task.to_owned(),
                    cell,
                    action,
                    q: s.q,
                    n: s.n,
                })
                .collect(),
            solver_stats: SolverStatsFile {
                runtime: pair_records(&self.solver_stats.runtime),
                outcome: pair_records(&self.solver_stats.outcome),
                outcome_by_cell: self
                    .solver_stats
                    .outcome_by_cell
                    .iter()
                    .map(|((solver, task, cell), m)| CellStatRecord {
                        solver: solver.clone(),
                        task: task.clone(),
                        cell: *cell,
                        count: m.count,
                        sum: m.sum,
                    })
                    .collect(),
            },
            task_stats: self
                .task_stats
                .iter()
                .map(|(task, m)| TaskStatRecord {
                    task: task.clone(),
                    count: m.count,
                    sum: m.sum,
                })
                .collect(),
            mc_costs: McCostsFile {
                mc1: self.mc_costs.mc1,
                mc2: self.mc_costs.mc2,
            },
        };
        let mut text = serde_json::to_string_pretty(&file).expect("store serializes");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<Self, StoreError> {
        let doc: Value = serde_json::from_str(text).map_err(|e| StoreError::Parse {
            record: "document".into(),
            message: e.to_string(),
        })?;
        match doc.get("format_version") {
            Some(v) if v.as_u64() == Some(FORMAT_VERSION) => {}
            Some(v) => {
                return Err(StoreError::Version {
                    found: v.to_string(),
                })
            }
            None => {
                return Err(StoreError::Parse {
                    record: "format_version".into(),
                    message: "missing".into(),
                })
            }
        }
        let params: LearningParams = field(&doc, "params")?;
        let mut store = ExperienceStore::new(params);
        for (i, r) in records::<QRecord>(&doc, &["q_table"])?
            .into_iter()
            .enumerate()
        {
            let prev = store
                .q_table
                .entry(r.task)
                .or_default()
                .insert((r.cell, r.action), ActionValueStat { q: r.q, n: r.n });
            if prev.is_some() {
                return Err(StoreError::Parse {
                    record: format!("q_table[{i}]"),
                    message: "duplicate key".into(),
                });
            }
        }
        for r in records::<PairStatRecord>(&doc, &["solver_stats", "runtime"])? {
            let stat = r.stat();
            store.solver_stats.runtime.insert((r.solver, r.task), stat);
        }
        for r in records::<PairStatRecord>(&doc, &["solver_stats", "outcome"])? {
            let stat = r.stat();
            store.solver_stats.outcome.insert((r.solver, r.task), stat);
        }
        for r in records::<CellStatRecord>(&doc, &["solver_stats", "outcome_by_cell"])? {
            let stat = RunningMean {
                count: r.count,
                sum: r.sum,
            };
            store
                .solver_stats
                .outcome_by_cell
                .insert((r.solver, r.task, r.cell), stat);
        }
        for r in records::<TaskStatRecord>(&doc, &["task_stats"])? {
            store.task_stats.insert(
                r.task,
                RunningMean {
                    count: r.count,
                    sum: r.sum,
                },
            );
        }
        let mc: McCostsFile = field(&doc, "mc_costs")?;
        store.mc_costs = McCostStat {
            mc1: mc.mc1,
            mc2: mc.mc2,
        };
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), StoreError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|source| StoreError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| StoreError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

fn field<T: DeserializeOwned>(doc: &Value, name: &str) -> Result<T, StoreError> {
    let v = doc.get(name).ok_or_else(|| StoreError::Parse {
        record: name.into(),
        message: "missing".into(),
    })?;
    T::deserialize(v).map_err(|e| StoreError::Parse {
        record: name.into(),
        message: e.to_string(),
    })
}

fn records<T: DeserializeOwned>(doc: &Value, path: &[&str]) -> Result<Vec<T>, StoreError> {
    let name = path.join(".");
    let mut v = doc;
    for p in path {
        v = v.get(p).ok_or_else(|| StoreError::Parse {
            record: name.clone(),
            message: "missing".into(),
        })?;
    }
    let items = v.as_array().ok_or_else(|| StoreError::Parse {
        record: name.clone(),
        message: "expected an array".into(),
    })?;
    items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            T::deserialize(item).map_err(|e| StoreError::Parse {
                record: format!("{name}[{i}]"),
                message: e.to_string(),
            })
        })
        .collect()
}

fn pair_records(map: &BTreeMap<(String, String), RunningMean>) -> Vec<PairStatRecord> {
    map.iter()
        .map(|((solver, task), m)| PairStatRecord {
            solver: solver.clone(),
            task: task.clone(),
            count: m.count,
            sum: m.sum,
        })
        .collect()
}

#[derive(Serialize)]
struct StoreFile {
    format_version: u64,
    params: LearningParams,
    q_table: Vec<QRecord>,
    solver_stats: SolverStatsFile,
    task_stats: Vec<TaskStatRecord>,
    mc_costs: McCostsFile,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QRecord {
    task: String,
    cell: Cell,
    action: Action,
    q: f64,
    n: u64,
}

#[derive(Serialize)]
struct SolverStatsFile {
    runtime: Vec<PairStatRecord>,
    outcome: Vec<PairStatRecord>,
    outcome_by_cell: Vec<CellStatRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairStatRecord {
    solver: String,
    task: String,
    count: u64,
    sum: f64,
}

impl PairStatRecord {
    fn stat(&self) -> RunningMean {
        RunningMean {
            count: self.count,
            sum: self.sum,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CellStatRecord {
    solver: String,
    task: String,
    cell: Cell,
    count: u64,
    sum: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskStatRecord {
    task: String,
    count: u64,
    sum: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct McCostsFile {
    mc1: RunningMean,
    mc2: RunningMean,
}
