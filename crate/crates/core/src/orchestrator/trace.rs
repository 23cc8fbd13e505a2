use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::metacognition::Source;
use crate::world::{Action, Cell};

/// One executed step, as written to the JSONL trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub episode: u64,
    pub step: u32,
    pub state: Cell,
    pub s1_action: Option<Action>,
    pub s1_confidence: Option<f64>,
    pub u_hat: Option<f64>,
    pub source: Source,
    pub v1: Option<f64>,
    pub v2: Option<f64>,
    pub cost2: Option<f64>,
    pub t_mc1_est: Option<f64>,
    pub t_mc2_est: Option<f64>,
    pub final_action: Action,
    pub reward: f64,
    pub budget_remaining_s: f64,
    pub elapsed_s: f64,
}

impl TraceRecord {
    /// True when the step's action came from an escalation that MC2 ran.
    pub fn escalated(&self) -> bool {
        self.v1.is_some() && self.v2.is_some() && self.cost2.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub episode_index: u64,
    pub total_return: f64,
    pub steps: u32,
    /// Charged time for the whole episode (constants under the simulated
    /// clock, measured wall time otherwise).
    pub wall_time_s: f64,
    /// Arbitration records per source, indexed by `Source::index`.
    pub source_counts: [u32; 6],
    pub reached_goal: bool,
    pub trajectory: Vec<TraceRecord>,
}

impl EpisodeResult {
    pub fn count(&self, source: Source) -> u32 {
        self.source_counts[source.index()]
    }

    /// Share of executed steps whose action came from S2.
    pub fn s2_fraction(&self) -> f64 {
        if self.steps == 0 {
            return 0.0;
        }
        let s2 = self.trajectory.iter().filter(|r| r.source.is_s2()).count();
        s2 as f64 / self.steps as f64
    }
}

pub const SUMMARY_HEADER: &str =
    "episode,return,steps,reached_goal,n_s1_budget,n_s1_mc1,n_s1_mc2,n_s2,wall_time_s";

pub fn write_trace<W: Write>(out: &mut W, episodes: &[EpisodeResult]) -> io::Result<()> {
    for ep in episodes {
        for rec in &ep.trajectory {
            serde_json::to_writer(&mut *out, rec)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Per-episode CSV. `n_s2` counts S2 decisions with or without arbitration.
pub fn write_summary<W: Write>(out: &mut W, episodes: &[EpisodeResult]) -> io::Result<()> {
    writeln!(out, "{SUMMARY_HEADER}")?;
    for ep in episodes {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            ep.episode_index,
            ep.total_return,
            ep.steps,
            ep.reached_goal,
            ep.count(Source::S1Budget),
            ep.count(Source::S1Mc1),
            ep.count(Source::S1Mc2),
            ep.count(Source::S2) + ep.count(Source::S2Direct),
            ep.wall_time_s,
        )?;
    }
    Ok(())
}

/// Aggregate over a contiguous run of episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSummary {
    pub first_episode: u64,
    pub last_episode: u64,
    pub episodes: usize,
    pub mean_return: f64,
    /// Mean over episodes of the per-episode S2 fraction.
    pub s2_fraction: f64,
}

pub const BLOCK_HEADER: &str = "block,first_episode,last_episode,episodes,mean_return,s2_fraction";

impl BlockSummary {
    pub fn from_rows(rows: &[(u64, f64, f64)]) -> Option<Self> {
        let (first, last) = (rows.first()?.0, rows.last()?.0);
        let n = rows.len() as f64;
        Some(Self {
            first_episode: first,
            last_episode: last,
            episodes: rows.len(),
            mean_return: rows.iter().map(|r| r.1).sum::<f64>() / n,
            s2_fraction: rows.iter().map(|r| r.2).sum::<f64>() / n,
        })
    }

    pub fn csv_row(&self, block: usize) -> String {
        format!(
            "{},{},{},{},{},{}",
            block,
            self.first_episode,
            self.last_episode,
            self.episodes,
            self.mean_return,
            self.s2_fraction
        )
    }
}

/// Splits `(episode, return, s2_fraction)` rows into blocks of `size`.
pub fn blocks(rows: &[(u64, f64, f64)], size: usize) -> Vec<BlockSummary> {
    rows.chunks(size.max(1))
        .filter_map(BlockSummary::from_rows)
        .collect()
}

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("trace line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("reading trace: {0}")]
    Io(#[from] io::Error),
}

/// Parses a JSONL trace and reduces it to per-episode
/// `(episode, return, s2_fraction)` rows in order of first appearance.
pub fn episode_rows_from_trace(text: &str) -> Result<Vec<(u64, f64, f64)>, TraceError> {
    let mut rows: Vec<(u64, f64, u32, u32)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(line).map_err(|e| TraceError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        match rows.last_mut() {
            Some(row) if row.0 == rec.episode => {
                row.1 += rec.reward;
                row.2 += 1;
                row.3 += u32::from(rec.source.is_s2());
            }
            _ => rows.push((rec.episode, rec.reward, 1, u32::from(rec.source.is_s2()))),
        }
    }
    Ok(rows
        .into_iter()
        .map(|(ep, ret, steps, s2)| (ep, ret, s2 as f64 / steps as f64))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(episode: u64, step: u32, source: Source, reward: f64) -> TraceRecord {
        TraceRecord {
            episode,
            step,
            state: Cell::new(0, step),
            s1_action: Some(Action::Down),
            s1_confidence: Some(0.0),
            u_hat: Some(1.0),
            source,
            v1: None,
            v2: None,
            cost2: None,
            t_mc1_est: Some(0.001),
            t_mc2_est: Some(0.001),
            final_action: Action::Down,
            reward,
            budget_remaining_s: 1.0,
            elapsed_s: 0.0,
        }
    }

    #[test]
    fn trace_lines_have_the_documented_field_order() {
        let line = serde_json::to_string(&record(0, 0, Source::S1Mc1, -1.0)).unwrap();
        let keys = [
            "episode",
            "step",
            "state",
            "s1_action",
            "s1_confidence",
            "u_hat",
            "source",
            "v1",
            "v2",
            "cost2",
            "t_mc1_est",
            "t_mc2_est",
            "final_action",
            "reward",
            "budget_remaining_s",
            "elapsed_s",
        ];
        let mut at = 0;
        for k in keys {
            let pos = line[at..]
                .find(&format!("\"{k}\""))
                .unwrap_or_else(|| panic!("{k} in {line}"));
            at += pos;
        }
        assert!(line.contains("\"state\":[0,0]"));
        assert!(line.contains("\"source\":\"S1_MC1\""));
    }

    #[test]
    fn rows_and_blocks_from_trace() {
        let mut text = String::new();
        for ep in 0..25u64 {
            for step in 0..4 {
                let src = if step < (ep % 3) as u32 {
                    Source::S2
                } else {
                    Source::S1Mc1
                };
                text += &serde_json::to_string(&record(ep, step, src, 1.0)).unwrap();
                text.push('\n');
            }
        }
        let rows = episode_rows_from_trace(&text).unwrap();
        assert_eq!(rows.len(), 25);
        assert_eq!(rows[2], (2, 4.0, 0.5));
        let b = blocks(&rows, 10);
        assert_eq!(b.len(), 3);
        assert_eq!(
            (b[2].first_episode, b[2].last_episode, b[2].episodes),
            (20, 24, 5)
        );
        assert_eq!(b[0].mean_return, 4.0);
    }

    #[test]
    fn malformed_line_is_reported() {
        let ok = serde_json::to_string(&record(0, 0, Source::S2, 1.0)).unwrap();
        let text = format!("{ok}\n{}\n", &ok[..ok.len() / 2]);
        match episode_rows_from_trace(&text) {
            Err(TraceError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(episode_rows_from_trace("").unwrap().is_empty());
    }
}
