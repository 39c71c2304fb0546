//! Play an episode from a terminal.
//!
//! Each line is a code action. `:submit [answer]` submits, `:quit` or end of
//! input aborts. Blank lines are ignored.

use std::io::{BufRead, Write};

use crate::episode::{Action, EnvError, EnvHandle, EpisodeTrajectory, TerminatedBy};

pub fn human_repl<R: BufRead, W: Write>(
    handle: &mut EnvHandle,
    index: Option<usize>,
    max_turns: usize,
    mut input: R,
    mut out: W,
) -> Result<EpisodeTrajectory, EnvError> {
    handle.set_max_turns(Some(max_turns));
    let (_, task) = handle.reset(index)?;
    writeln!(out, "Task {}: {}", task.id, task.query)?;
    writeln!(out, "Enter one action per line. `:submit [answer]` submits, `:quit` gives up.")?;
    let mut line = String::new();
    loop {
        write!(out, "[{}/{max_turns}] > ", handle.turn_count() + 1)?;
        out.flush()?;
        line.clear();
        if input.read_line(&mut line)? == 0 {
            writeln!(out)?;
            return handle.finish(TerminatedBy::Abort);
        }
        let text = line.trim_end_matches(['\n', '\r']);
        let word = text.split_whitespace().next().unwrap_or("");
        let outcome = match word {
            "" => continue,
            ":quit" => {
                let t = handle.finish(TerminatedBy::Abort)?;
                writeln!(out, "Aborted.")?;
                return Ok(t);
            }
            ":submit" => {
                let rest = text.trim_start()[":submit".len()..].trim();
                handle.step(Action::Submit((!rest.is_empty()).then(|| rest.to_string())))?
            }
            _ => handle.step(Action::Code(text.to_string()))?,
        };
        if !outcome.observation.text.is_empty() {
            writeln!(out, "{}", outcome.observation.text.trim_end())?;
        }
        if outcome.done {
            let t = handle.last_trajectory().cloned().expect("finished episode");
            if t.terminated_by == TerminatedBy::MaxTurns {
                writeln!(out, "Turn limit reached.")?;
            }
            writeln!(out, "Reward: {}", t.reward.unwrap_or(0.0))?;
            return Ok(t);
        }
    }
}
