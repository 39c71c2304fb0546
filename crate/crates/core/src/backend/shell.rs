//! Persistent shell sessions.
//!
//! A session is one `bash` process reading commands from stdin. Each command
//! is handed over verbatim through a quoted heredoc, run with `eval`, and
//! followed by a sentinel line on stdout and on stderr carrying a per-session
//! nonce and a per-command counter. Everything before the sentinel is the
//! command's output. An `EXIT` trap emits a distinct sentinel so `exit N`
//! still reports its status (the session is then dead and must be restarted).

use std::time::{Duration, Instant};

use rand::Rng;

use super::{Attached, BackendError, ExecResult, StreamChunk, OUTPUT_CAP, TIMEOUT_EXIT_STATUS};

const KEEP_TAIL: usize = 64 * 1024;

pub struct ShellSession {
    proc: Box<dyn Attached>,
    nonce: String,
    counter: u64,
    alive: bool,
}

impl ShellSession {
    /// Wrap a freshly attached `bash`, run `setup` (e.g. `cd /workdir`) and
    /// wait for the shell to answer.
    pub fn start(proc: Box<dyn Attached>, setup: &str, timeout: Duration) -> Result<Self, BackendError> {
        let nonce: String = rand::thread_rng()
            .sample_iter(&rand::distributions::Alphanumeric)
            .take(16)
            .map(char::from)
            .collect();
        let mut session = Self {
            proc,
            nonce,
            counter: 0,
            alive: true,
        };
        let trap = format!(
            "trap '__eb_rc=$?; printf \"\\n%s %d\\n\" __EB_EXIT_{n} \"$__eb_rc\"; printf \"\\n%s\\n\" __EB_EXIT_{n} >&2' EXIT\n",
            n = session.nonce
        );
        session.proc.send(trap.as_bytes())?;
        let r = session.run(setup, timeout)?;
        if r.timed_out || !session.alive {
            session.kill();
            return Err(BackendError::Protocol("shell session did not come up".into()));
        }
        Ok(session)
    }

    pub fn is_alive(&self) -> bool {
        self.alive
    }

    pub fn kill(&mut self) {
        self.proc.kill();
        self.alive = false;
    }

    /// Run one command. A timeout kills the whole session and yields an
    /// `ExecResult` with `timed_out` set; callers restart the session.
    pub fn run(&mut self, command: &str, timeout: Duration) -> Result<ExecResult, BackendError> {
        if !self.alive {
            return Err(BackendError::Dead("shell session".into()));
        }
        self.counter += 1;
        let done = format!("__EB_DONE_{}_{}", self.nonce, self.counter);
        let exit = format!("__EB_EXIT_{}", self.nonce);
        let eof = format!("__EB_EOF_{}", self.nonce);
        let script = format!(
            "IFS= read -r -d '' __eb_cmd <<'{eof}'\n{command}\n{eof}\n\
             eval \"$__eb_cmd\" </dev/null\n\
             __eb_rc=$?\n\
             printf '\\n%s %d\\n' {done} \"$__eb_rc\"\n\
             printf '\\n%s\\n' {done} >&2\n"
        );
        let started = Instant::now();
        if let Err(e) = self.proc.send(script.as_bytes()) {
            self.alive = false;
            return Err(BackendError::Io(e));
        }

        let mut out = Collector::default();
        let mut err = Collector::default();
        let out_done = format!("\n{done} ");
        let err_done = format!("\n{done}\n");
        let out_exit = format!("\n{exit} ");
        let err_exit = format!("\n{exit}\n");

        let deadline = started + timeout;
        let mut status: Option<i64> = None;
        let mut exited = false;
        let mut err_finished = false;
        loop {
            if status.is_some() && err_finished {
                break;
            }
            let now = Instant::now();
            if now >= deadline {
                self.kill();
                return Ok(ExecResult {
                    stdout: out.finish(None),
                    stderr: err.finish(None),
                    exit_status: TIMEOUT_EXIT_STATUS,
                    duration: started.elapsed(),
                    timed_out: true,
                });
            }
            match self.proc.recv(deadline - now) {
                None => continue,
                Some(StreamChunk::Closed) => {
                    self.alive = false;
                    if status.is_none() {
                        return Err(BackendError::Dead("shell session exited".into()));
                    }
                    break;
                }
                Some(StreamChunk::Stdout(data)) => {
                    out.push(&data);
                    if status.is_none() {
                        if let Some(code) = out.find_status(out_done.as_bytes()) {
                            status = Some(code);
                        } else if let Some(code) = out.find_status(out_exit.as_bytes()) {
                            status = Some(code);
                            exited = true;
                        }
                    }
                }
                Some(StreamChunk::Stderr(data)) => {
                    err.push(&data);
                    if !err_finished {
                        err_finished = err.find(err_done.as_bytes()).is_some() || err.find(err_exit.as_bytes()).is_some();
                    }
                }
            }
        }
        if exited {
            self.kill();
        }
        let (out_marker, err_marker) = if exited { (out_exit, err_exit) } else { (out_done, err_done) };
        Ok(ExecResult {
            stdout: out.finish(Some(out_marker.as_bytes())),
            stderr: err.finish(Some(err_marker.as_bytes())),
            exit_status: status.unwrap_or(TIMEOUT_EXIT_STATUS),
            duration: started.elapsed(),
            timed_out: false,
        })
    }
}

impl Drop for ShellSession {
    fn drop(&mut self) {
        if self.alive {
            self.proc.kill();
        }
    }
}

/// Output accumulator that keeps the first `OUTPUT_CAP` bytes plus a tail
/// window for sentinel detection.
#[derive(Default)]
struct Collector {
    buf: Vec<u8>,
    scan_from: usize,
    overflowed: bool,
}

impl Collector {
    fn push(&mut self, data: &[u8]) {
        self.scan_from = self.buf.len();
        self.buf.extend_from_slice(data);
        if self.buf.len() > OUTPUT_CAP + KEEP_TAIL {
            let cut_end = self.buf.len() - KEEP_TAIL;
            self.buf.drain(OUTPUT_CAP..cut_end);
            self.overflowed = true;
            self.scan_from = (self.buf.len().saturating_sub(data.len())).max(OUTPUT_CAP);
        }
    }

    fn find(&self, marker: &[u8]) -> Option<usize> {
        let start = self.scan_from.saturating_sub(marker.len() + 24);
        self.buf[start..]
            .windows(marker.len())
            .position(|w| w == marker)
            .map(|p| p + start)
    }

    /// Locate `marker` followed by a decimal status and newline.
    fn find_status(&mut self, marker: &[u8]) -> Option<i64> {
        let pos = self.find(marker)?;
        let rest = &self.buf[pos + marker.len()..];
        let nl = rest.iter().position(|&b| b == b'\n')?;
        std::str::from_utf8(&rest[..nl]).ok()?.trim().parse().ok()
    }

    fn finish(mut self, marker: Option<&[u8]>) -> Vec<u8> {
        if let Some(m) = marker {
            self.scan_from = 0;
            if let Some(pos) = self.find(m) {
                self.buf.truncate(pos);
            }
        }
        self.buf.truncate(OUTPUT_CAP);
        self.buf
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collector_finds_split_marker() {
        let mut c = Collector::default();
        c.push(b"hello\n\n__EB_DO");
        assert!(c.find_status(b"\n__EB_DONE_x_1 ").is_none());
        c.push(b"NE_x_1 7\n");
        assert_eq!(c.find_status(b"\n__EB_DONE_x_1 "), Some(7));
        assert_eq!(c.finish(Some(b"\n__EB_DONE_x_1 ")), b"hello\n");
    }

    #[test]
    fn collector_caps_runaway_output() {
        let mut c = Collector::default();
        let chunk = vec![b'y'; 256 * 1024];
        for _ in 0..8 {
            c.push(&chunk);
        }
        c.push(b"\n__EB_DONE_x_1 0\n");
        assert_eq!(c.find_status(b"\n__EB_DONE_x_1 "), Some(0));
        assert!(c.overflowed);
        assert_eq!(c.finish(Some(b"\n__EB_DONE_x_1 ")).len(), OUTPUT_CAP);
    }
}
