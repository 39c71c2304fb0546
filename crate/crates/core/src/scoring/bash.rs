use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{gauss_erf, lexical_similarity};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeKind {
    Added,
    Changed,
    Deleted,
}

/// One file-system delta. Entries compare as `(path, kind)` pairs.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FsChange {
    pub path: String,
    pub kind: ChangeKind,
}

impl FsChange {
    pub fn new(path: impl Into<String>, kind: ChangeKind) -> Self {
        Self { path: path.into(), kind }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BashRewardBreakdown {
    pub similarity: f64,
    pub fs_miss_penalty_term: f64,
    pub path_correct_ratio: f64,
    pub total: f64,
}

/// Weighted sum of output similarity, the erf-bounded miss penalty over the
/// symmetric difference of change entries, and the share of common entries
/// whose final content matches.
///
/// `content_matches(path)` compares the file at `path` in the agent's
/// container with the same path in the gold container. It is only called for
/// paths in the intersection; an empty intersection scores 1.
pub fn bash_reward(
    agent_out: &str,
    gold_out: &str,
    agent_fs: &[FsChange],
    gold_fs: &[FsChange],
    mut content_matches: impl FnMut(&str) -> bool,
) -> BashRewardBreakdown {
    let a: BTreeSet<&FsChange> = agent_fs.iter().collect();
    let g: BTreeSet<&FsChange> = gold_fs.iter().collect();
    let common: Vec<&FsChange> = a.intersection(&g).copied().collect();
    let missed = a.symmetric_difference(&g).count();

    let similarity = lexical_similarity(agent_out, gold_out);
    let fs_miss_penalty_term = 1.0 - gauss_erf(missed as f64);
    let path_correct_ratio = if common.is_empty() {
        1.0
    } else {
        let ok = common.iter().filter(|c| content_matches(&c.path)).count();
        ok as f64 / common.len() as f64
    };
    // integer weights so a perfect score sums to exactly 1.0
    let total = (34.0 * similarity + 33.0 * fs_miss_penalty_term + 33.0 * path_correct_ratio) / 100.0;
    BashRewardBreakdown {
        similarity,
        fs_miss_penalty_term,
        path_correct_ratio,
        total: total.clamp(0.0, 1.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_match_is_exactly_one() {
        let fs = [FsChange::new("/testbed/a", ChangeKind::Added)];
        let r = bash_reward("4 files", "4 files", &fs, &fs, |_| true);
        assert_eq!(r.total, 1.0);
    }

    #[test]
    fn content_mismatch_lowers_third_term() {
        let fs = [
            FsChange::new("/t/a", ChangeKind::Changed),
            FsChange::new("/t/b", ChangeKind::Changed),
        ];
        let r = bash_reward("x1 y2", "x1 y2", &fs, &fs, |p| p == "/t/a");
        assert_eq!(r.path_correct_ratio, 0.5);
        assert!((r.total - (34.0 + 33.0 + 16.5) / 100.0).abs() < 1e-12);
    }

    #[test]
    fn kind_mismatch_counts_twice() {
        let a = [FsChange::new("/t/a", ChangeKind::Added)];
        let g = [FsChange::new("/t/a", ChangeKind::Changed)];
        let r = bash_reward("", "", &a, &g, |_| unreachable!());
        assert!((r.fs_miss_penalty_term - (1.0 - gauss_erf(2.0))).abs() < 1e-15);
        assert_eq!(r.path_correct_ratio, 1.0);
    }
}
