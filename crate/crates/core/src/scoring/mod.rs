//! Reward arithmetic shared by the environments.
//!
//! Everything in here is pure: no containers, no I/O. The environment modules
//! gather execution output and file-system state, then hand plain values to
//! these functions.

mod bash;
mod erf;
mod kendall;
mod multiset;
mod similarity;
mod sql;

pub use bash::{bash_reward, BashRewardBreakdown, ChangeKind, FsChange};
pub use erf::gauss_erf;
pub use kendall::{kendall_tau_b, order_coefficient};
pub use multiset::multiset_iou;
pub use similarity::{lexical_similarity, tokenize};
pub use sql::{sql_reward, Cell, Record, ResultSet, SqlRewardBreakdown};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PyRewardBreakdown {
    pub passed: usize,
    pub total: usize,
    pub ratio: f64,
}

impl PyRewardBreakdown {
    pub fn new(passed: usize, total: usize) -> Self {
        let ratio = if total == 0 { 0.0 } else { passed as f64 / total as f64 };
        Self { passed, total, ratio }
    }
}

/// Exact match after trimming surrounding whitespace.
pub fn flag_matches(submitted: &str, flag: &str) -> bool {
    submitted.trim() == flag.trim()
}

/// Per-environment reward components of one scored episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardBreakdown {
    Bash(BashRewardBreakdown),
    Sql(SqlRewardBreakdown),
    Python(PyRewardBreakdown),
    Ctf { matched: bool },
    /// Episode ended without a score.
    None,
}

impl RewardBreakdown {
    pub fn total(&self) -> Option<f64> {
        match self {
            RewardBreakdown::Bash(b) => Some(b.total),
            RewardBreakdown::Sql(s) => Some(s.total),
            RewardBreakdown::Python(p) => Some(p.ratio),
            RewardBreakdown::Ctf { matched } => Some(if *matched { 1.0 } else { 0.0 }),
            RewardBreakdown::None => None,
        }
    }
}
