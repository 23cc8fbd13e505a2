//! Merges the optional JSON config file with command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use fastslow_core::{ClockKind, Mode, RunConfig, S1Params};
use serde::Deserialize;

use crate::Failure;

/// Flags shared by `run` and `baseline`. Every flag can also be given as a
/// key of the same name in the `--config` file; flags win.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct RunFlags {
    /// Grid task file (JSON)
    #[arg(long)]
    pub task: Option<PathBuf>,
    /// JSON file with any of these flags as keys
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// per-decision, per-sequence, pure-s1 or pure-s2
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub episodes: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Per-episode time budget in seconds
    #[arg(long)]
    pub budget_s: Option<f64>,
    /// MC1 confidence threshold factor
    #[arg(long)]
    pub tau1: Option<f64>,
    /// Price of one second of S2 time, in normalized reward units
    #[arg(long)]
    pub lambda_time: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Visit count at which S1 confidence reaches one half
    #[arg(long)]
    pub k: Option<f64>,
    /// Q-value margin that counts as a fully confident choice
    #[arg(long)]
    pub m_scale: Option<f64>,
    /// real or simulated
    #[arg(long)]
    pub clock: Option<ClockKind>,
    /// Trace output (JSONL)
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Per-episode summary output (CSV)
    #[arg(long)]
    pub summary: Option<PathBuf>,
    /// Experience store, loaded if present and saved after the run
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Also print block aggregates of this many episodes to stdout
    #[arg(long)]
    pub block: Option<usize>,
}

macro_rules! overlay {
    ($base:ident, $top:ident, $($f:ident),*) => {
        $( if $top.$f.is_some() { $base.$f = $top.$f; } )*
    };
}

impl RunFlags {
    /// Reads `--config` (when given) and lays the flags over it.
    pub fn resolve(self) -> Result<RunFlags, Failure> {
        let Some(path) = &self.config else {
            return Ok(self);
        };
        let mut base = read_config(path)?;
        let top = self;
        overlay!(
            base,
            top,
            task,
            mode,
            episodes,
            seed,
            budget_s,
            tau1,
            lambda_time,
            alpha,
            gamma,
            k,
            m_scale,
            clock,
            trace,
            summary,
            store,
            block
        );
        Ok(base)
    }

    pub fn run_config(&self) -> RunConfig {
        let mut cfg = RunConfig::default();
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(n) = self.episodes {
            cfg.episodes = n;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(b) = self.budget_s {
            cfg.episode_budget_s = b;
        }
        if let Some(c) = self.clock {
            cfg.clock = c;
        }
        let a = &mut cfg.arbitration;
        if let Some(t) = self.tau1 {
            a.tau1 = t;
        }
        if let Some(l) = self.lambda_time {
            a.lambda_time = l;
        }
        a.s1 = S1Params {
            k: self.k.unwrap_or(a.s1.k),
            m_scale: self.m_scale.or(a.s1.m_scale),
        };
        if let Some(x) = self.alpha {
            cfg.learning.alpha = x;
        }
        if let Some(x) = self.gamma {
            cfg.learning.gamma = x;
        }
        cfg
    }
}

fn read_config(path: &Path) -> Result<RunFlags, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))
}
