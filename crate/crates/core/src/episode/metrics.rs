use serde::{Deserialize, Serialize};

use super::{EpisodeTrajectory, EnvError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub success_rate: f64,
    pub error_pct: f64,
    pub mean_turns: f64,
    pub episode_count: usize,
}

/// Raw counts behind a [`MetricsSummary`]; adding tallies is the same as
/// tallying the concatenated episodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Tally {
    pub episodes: usize,
    pub successes: usize,
    pub actions: usize,
    pub inadmissible: usize,
    pub turns: usize,
}

impl Tally {
    pub fn add(&mut self, t: &EpisodeTrajectory) {
        self.episodes += 1;
        // partial credit is not success
        if t.reward == Some(1.0) {
            self.successes += 1;
        }
        self.actions += t.turns.len();
        self.inadmissible += t.turns.iter().filter(|turn| !turn.admissible).count();
        self.turns += t.turns.len();
    }

    pub fn merge(&mut self, other: &Tally) {
        self.episodes += other.episodes;
        self.successes += other.successes;
        self.actions += other.actions;
        self.inadmissible += other.inadmissible;
        self.turns += other.turns;
    }

    pub fn summary(&self) -> Option<MetricsSummary> {
        if self.episodes == 0 {
            return None;
        }
        Some(MetricsSummary {
            success_rate: self.successes as f64 / self.episodes as f64,
            error_pct: if self.actions == 0 {
                0.0
            } else {
                100.0 * self.inadmissible as f64 / self.actions as f64
            },
            mean_turns: self.turns as f64 / self.episodes as f64,
            episode_count: self.episodes,
        })
    }
}

/// Success rate, Error % and mean turns over `trajectories`.
pub fn summarize(trajectories: &[EpisodeTrajectory]) -> Result<MetricsSummary, EnvError> {
    let mut tally = Tally::default();
    for t in trajectories {
        tally.add(t);
    }
    tally
        .summary()
        .ok_or_else(|| EnvError::Argument("cannot summarize an empty list of trajectories".into()))
}
