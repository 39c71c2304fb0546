//! Container engine backend speaking the engine's HTTP API directly.
//!
//! Every container is labelled so stray ones can be found with
//! [`Backend::list`] and removed. Exec output arrives multiplexed: 8-byte
//! frame headers `[stream, 0, 0, 0, len_be32]` followed by `len` bytes.

mod client;

use std::io::{self, BufReader, Read, Write};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde_json::json;

pub use client::{Conn, DockerClient, Endpoint};
use client::ChunkedReader;

use super::{
    push_capped, run_init_script, shell_quote, Attached, Backend, BackendError, Container, ContainerSpec,
    EntryMode, ExecResult, ShellSession, StreamChunk, TIMEOUT_EXIT_STATUS,
};

pub const LABEL: &str = "execbench.managed";
const SESSION_START_TIMEOUT: Duration = Duration::from_secs(60);
const READ_GRACE: Duration = Duration::from_secs(15);
const HELPER_TIMEOUT: Duration = Duration::from_secs(30);

/// Read one multiplexed frame. `Ok(None)` on clean EOF.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<(u8, Vec<u8>)>> {
    let mut header = [0u8; 8];
    let mut got = 0;
    while got < header.len() {
        match r.read(&mut header[got..])? {
            0 if got == 0 => return Ok(None),
            0 => return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated frame header")),
            n => got += n,
        }
    }
    let len = u32::from_be_bytes([header[4], header[5], header[6], header[7]]) as usize;
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    Ok(Some((header[0], payload)))
}

/// Encode one frame; used by the test engine.
pub fn encode_frame(stream: u8, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + 8);
    out.extend_from_slice(&[stream, 0, 0, 0]);
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload);
    out
}

#[derive(Debug, Clone)]
pub struct DockerBackend {
    client: DockerClient,
}

impl DockerBackend {
    pub fn new(endpoint: Endpoint) -> Self {
        Self {
            client: DockerClient::new(endpoint),
        }
    }

    pub fn from_env() -> Result<Self, BackendError> {
        Ok(Self::new(Endpoint::from_env()?))
    }

    pub fn client(&self) -> &DockerClient {
        &self.client
    }

    /// Whether an engine answers at the configured endpoint.
    pub fn available(&self) -> bool {
        self.client.ping().is_ok()
    }

    /// Force-remove every container carrying the managed label.
    pub fn remove_stray(&self) -> Result<usize, BackendError> {
        let ids = self.list()?;
        for id in &ids {
            self.client.remove(id)?;
        }
        Ok(ids.len())
    }
}

impl Backend for DockerBackend {
    fn kind(&self) -> &'static str {
        "docker"
    }

    fn provision(&self, spec: &ContainerSpec) -> Result<Box<dyn Container>, BackendError> {
        spec.validate()?;
        let env: Vec<String> = spec.env_vars.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let mut config = json!({
            "Image": spec.image,
            "Env": env,
            "WorkingDir": spec.workdir,
            "Labels": { LABEL: "1" },
            "Tty": false,
            "OpenStdin": false,
        });
        if spec.entry_mode == EntryMode::LongRunningShell {
            config["Entrypoint"] = json!(["sleep"]);
            config["Cmd"] = json!(["infinity"]);
        }
        let id = self.client.create_container(&config, &spec.image)?;
        let container = DockerContainer {
            client: self.client.clone(),
            short_id: id.chars().take(12).collect(),
            id,
            workdir: spec.workdir.clone(),
            env,
            entry_mode: spec.entry_mode,
            session: Mutex::new(None),
            alive: AtomicBool::new(true),
        };
        let setup = || -> Result<(), BackendError> {
            self.client.start(&container.id)?;
            if !spec.paths.is_empty() {
                let dirs: Vec<String> = spec.paths.iter().map(|p| shell_quote(p)).collect();
                let r = container.exec_oneshot(&format!("mkdir -p {}", dirs.join(" ")), spec.init_timeout)?;
                if !r.success() {
                    return Err(BackendError::InitFailed {
                        command: "mkdir".into(),
                        status: r.exit_status,
                        stderr: r.stderr_text(),
                    });
                }
            }
            run_init_script(&container, spec)
        };
        if let Err(e) = setup() {
            let _ = container.remove();
            return Err(e);
        }
        Ok(Box::new(container))
    }

    fn list(&self) -> Result<Vec<String>, BackendError> {
        self.client.list_by_label(LABEL)
    }
}

pub struct DockerContainer {
    client: DockerClient,
    id: String,
    short_id: String,
    workdir: String,
    env: Vec<String>,
    entry_mode: EntryMode,
    session: Mutex<Option<ShellSession>>,
    alive: AtomicBool,
}

impl DockerContainer {
    fn check_alive(&self) -> Result<(), BackendError> {
        if self.alive.load(Ordering::SeqCst) {
            Ok(())
        } else {
            Err(BackendError::Dead(self.short_id.clone()))
        }
    }

    /// The container's address on the engine's default network.
    pub fn ip_address(&self) -> Result<Option<String>, BackendError> {
        let v = self.client.inspect(&self.id)?;
        let ns = &v["NetworkSettings"];
        let direct = ns["IPAddress"].as_str().filter(|s| !s.is_empty()).map(str::to_string);
        Ok(direct.or_else(|| {
            ns["Networks"]
                .as_object()?
                .values()
                .find_map(|n| n["IPAddress"].as_str().filter(|s| !s.is_empty()).map(str::to_string))
        }))
    }

    fn start_session(&self) -> Result<ShellSession, BackendError> {
        let proc = self.attach(&["bash".into(), "--noprofile".into(), "--norc".into()])?;
        ShellSession::start(proc, &format!("cd {}", shell_quote(&self.workdir)), SESSION_START_TIMEOUT)
    }

    fn run_collect(&self, argv: &[String], timeout: Duration) -> Result<ExecResult, BackendError> {
        let exec_id = self.client.exec_create(&self.id, argv, false, &self.workdir, &self.env)?;
        let started = Instant::now();
        let (reader, chunked) = self.client.exec_start(&exec_id, false)?;
        reader.get_ref().set_read_timeout(Some(timeout + READ_GRACE))?;
        let mut reader: Box<dyn Read> = if chunked {
            Box::new(ChunkedReader::new(reader))
        } else {
            Box::new(reader)
        };
        let mut stdout = Vec::new();
        let mut stderr = Vec::new();
        let mut stalled = false;
        loop {
            match read_frame(&mut reader) {
                Ok(Some((2, data))) => {
                    push_capped(&mut stderr, &data);
                }
                Ok(Some((_, data))) => {
                    push_capped(&mut stdout, &data);
                }
                Ok(None) => break,
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                    stalled = true;
                    break;
                }
                Err(e) => return Err(e.into()),
            }
        }
        let duration = started.elapsed();
        let state = self.client.exec_inspect(&exec_id)?;
        // `timeout -s KILL` reports 137 when it fires
        let timed_out =
            stalled || state.running || (state.exit_code == Some(137) && duration + Duration::from_millis(50) >= timeout);
        Ok(ExecResult {
            stdout,
            stderr,
            exit_status: if timed_out {
                TIMEOUT_EXIT_STATUS
            } else {
                state.exit_code.unwrap_or(TIMEOUT_EXIT_STATUS)
            },
            duration,
            timed_out,
        })
    }

    fn helper(&self, script: &str) -> Result<ExecResult, BackendError> {
        self.run_collect(&["sh".into(), "-c".into(), script.into()], HELPER_TIMEOUT)
    }
}

fn timeout_argv(timeout: Duration, inner: &[&str]) -> Vec<String> {
    let secs = timeout.as_secs_f64().max(0.001);
    let mut argv = vec!["timeout".to_string(), "-s".into(), "KILL".into(), format!("{secs:.3}")];
    argv.extend(inner.iter().map(|s| s.to_string()));
    argv
}

impl Container for DockerContainer {
    fn id(&self) -> &str {
        &self.id
    }

    fn network_address(&self) -> Result<Option<String>, BackendError> {
        self.ip_address()
    }

    fn exec(&self, command: &str, timeout: Duration) -> Result<ExecResult, BackendError> {
        self.check_alive()?;
        if self.entry_mode == EntryMode::Service {
            return self.exec_oneshot(command, timeout);
        }
        let mut guard = self.session.lock().unwrap();
        if guard.as_ref().is_none_or(|s| !s.is_alive()) {
            *guard = Some(self.start_session()?);
        }
        let session = guard.as_mut().expect("session just started");
        let result = session.run(command, timeout);
        if !session.is_alive() {
            *guard = None;
        }
        result
    }

    fn exec_oneshot(&self, command: &str, timeout: Duration) -> Result<ExecResult, BackendError> {
        self.check_alive()?;
        self.run_collect(&timeout_argv(timeout, &["bash", "--noprofile", "--norc", "-c", command]), timeout)
    }

    fn attach(&self, argv: &[String]) -> Result<Box<dyn Attached>, BackendError> {
        self.check_alive()?;
        if argv.is_empty() {
            return Err(BackendError::Protocol("empty argv".into()));
        }
        // new process group, announced on stderr so kill() can reach it
        let mut wrapped: Vec<String> = vec![
            "setsid".into(),
            "sh".into(),
            "-c".into(),
            "echo __EB_PID $$ >&2; exec \"$@\"".into(),
            "sh".into(),
        ];
        wrapped.extend(argv.iter().cloned());
        let exec_id = self.client.exec_create(&self.id, &wrapped, true, &self.workdir, &self.env)?;
        let (reader, chunked) = self.client.exec_start(&exec_id, true)?;
        reader.get_ref().set_read_timeout(None)?;
        let writer = reader.get_ref().try_clone()?;
        let pid = Arc::new(Mutex::new(None));
        let (tx, rx) = mpsc::channel();
        let reader: Box<dyn Read + Send> = if chunked {
            Box::new(ChunkedReader::new(reader))
        } else {
            Box::new(reader)
        };
        spawn_demux(reader, tx, Arc::clone(&pid));
        Ok(Box::new(DockerAttached {
            conn: writer,
            rx,
            pid,
            killer: self.client.clone(),
            container_id: self.id.clone(),
            closed: false,
        }))
    }

    fn hash_file(&self, path: &str) -> Result<Option<String>, BackendError> {
        self.check_alive()?;
        let p = shell_quote(path);
        let r = self.helper(&format!(
            "if [ -d {p} ]; then echo DIR; elif [ -e {p} ]; then md5sum < {p}; else echo MISSING; fi"
        ))?;
        let out = r.stdout_text();
        match out.split_whitespace().next() {
            Some("DIR") => Err(BackendError::IsDirectory(path.to_string())),
            Some("MISSING") => Ok(None),
            Some(h) if h.len() == 32 && h.bytes().all(|b| b.is_ascii_hexdigit()) => Ok(Some(h.to_string())),
            _ => Err(BackendError::Protocol(format!("unexpected md5sum output {out:?} {}", r.stderr_text()))),
        }
    }

    fn write_file(&self, path: &str, contents: &[u8], mode: u32) -> Result<(), BackendError> {
        self.check_alive()?;
        let (dir, name) = path
            .rsplit_once('/')
            .filter(|(_, n)| !n.is_empty())
            .ok_or_else(|| BackendError::Protocol(format!("not a file path: {path:?}")))?;
        let dir = if dir.is_empty() { "/" } else { dir };
        let r = self.helper(&format!("mkdir -p {}", shell_quote(dir)))?;
        if !r.success() {
            return Err(BackendError::Protocol(format!("mkdir {dir}: {}", r.stderr_text())));
        }
        let mut header = tar::Header::new_gnu();
        header.set_size(contents.len() as u64);
        header.set_mode(mode);
        header.set_mtime(0);
        header.set_entry_type(tar::EntryType::Regular);
        let mut builder = tar::Builder::new(Vec::new());
        builder.append_data(&mut header, name, contents)?;
        let archive = builder.into_inner()?;
        self.client.put_archive(&self.id, dir, &archive)
    }

    fn read_file(&self, path: &str) -> Result<Option<Vec<u8>>, BackendError> {
        self.check_alive()?;
        let Some(archive) = self.client.get_archive(&self.id, path)? else {
            return Ok(None);
        };
        let mut ar = tar::Archive::new(&archive[..]);
        let mut entries = ar.entries()?;
        let Some(entry) = entries.next() else {
            return Ok(None);
        };
        let mut entry = entry?;
        if entry.header().entry_type().is_dir() {
            return Err(BackendError::IsDirectory(path.to_string()));
        }
        let mut data = Vec::new();
        entry.read_to_end(&mut data)?;
        Ok(Some(data))
    }

    fn reset_session(&self) {
        if let Some(mut s) = self.session.lock().unwrap().take() {
            s.kill();
        }
    }

    fn remove(&self) -> Result<(), BackendError> {
        if !self.alive.swap(false, Ordering::SeqCst) {
            return Ok(());
        }
        if let Some(mut s) = self.session.lock().unwrap().take() {
            s.kill();
        }
        self.client.remove(&self.id)
    }

    fn is_alive(&self) -> bool {
        self.alive.load(Ordering::SeqCst)
    }
}

impl Drop for DockerContainer {
    fn drop(&mut self) {
        if let Err(e) = self.remove() {
            log::warn!("removing container {}: {e}", self.short_id);
        }
    }
}

fn spawn_demux(mut reader: Box<dyn Read + Send>, tx: mpsc::Sender<StreamChunk>, pid: Arc<Mutex<Option<u32>>>) {
    std::thread::spawn(move || {
        let mut preamble: Option<Vec<u8>> = Some(Vec::new());
        loop {
            match read_frame(&mut reader) {
                Ok(Some((2, data))) => {
                    let data = match preamble.as_mut() {
                        Some(buf) => {
                            buf.extend_from_slice(&data);
                            let Some(nl) = buf.iter().position(|b| *b == b'\n') else {
                                continue;
                            };
                            let line = String::from_utf8_lossy(&buf[..nl]).into_owned();
                            let rest = buf[nl + 1..].to_vec();
                            if let Some(n) = line.strip_prefix("__EB_PID ").and_then(|n| n.trim().parse().ok()) {
                                *pid.lock().unwrap() = Some(n);
                                preamble = None;
                                rest
                            } else {
                                preamble.take().unwrap_or_default()
                            }
                        }
                        None => data,
                    };
                    if !data.is_empty() && tx.send(StreamChunk::Stderr(data)).is_err() {
                        return;
                    }
                }
                Ok(Some((_, data))) => {
                    if tx.send(StreamChunk::Stdout(data)).is_err() {
                        return;
                    }
                }
                Ok(None) | Err(_) => break,
            }
        }
        let _ = tx.send(StreamChunk::Closed);
    });
}

struct DockerAttached {
    conn: Conn,
    rx: Receiver<StreamChunk>,
    pid: Arc<Mutex<Option<u32>>>,
    killer: DockerClient,
    container_id: String,
    closed: bool,
}

impl Attached for DockerAttached {
    fn send(&mut self, data: &[u8]) -> io::Result<()> {
        self.conn.write_all(data)?;
        self.conn.flush()
    }

    fn recv(&mut self, timeout: Duration) -> Option<StreamChunk> {
        if self.closed {
            return Some(StreamChunk::Closed);
        }
        match self.rx.recv_timeout(timeout) {
            Ok(StreamChunk::Closed) | Err(RecvTimeoutError::Disconnected) => {
                self.closed = true;
                Some(StreamChunk::Closed)
            }
            Ok(chunk) => Some(chunk),
            Err(RecvTimeoutError::Timeout) => None,
        }
    }

    fn kill(&mut self) {
        if let Some(pid) = self.pid.lock().unwrap().take() {
            let script = format!("kill -9 -- -{pid} 2>/dev/null; kill -9 {pid} 2>/dev/null; true");
            let argv = vec!["sh".to_string(), "-c".to_string(), script];
            let result = self
                .killer
                .exec_create(&self.container_id, &argv, false, "/", &[])
                .and_then(|id| self.killer.exec_start(&id, false).map(|(mut r, _)| {
                    let _ = io::copy(&mut r, &mut io::sink());
                }));
            if let Err(e) = result {
                log::debug!("kill of pid {pid} failed: {e}");
            }
        }
        self.conn.shutdown();
        self.closed = true;
    }
}

impl Drop for DockerAttached {
    fn drop(&mut self) {
        if !self.closed {
            self.kill();
        }
    }
}

/// Split a complete multiplexed stream into stdout and stderr.
pub fn demux_all<R: Read>(reader: R) -> io::Result<(Vec<u8>, Vec<u8>)> {
    let mut r = BufReader::new(reader);
    let mut out = Vec::new();
    let mut err = Vec::new();
    while let Some((stream, data)) = read_frame(&mut r)? {
        if stream == 2 {
            err.extend_from_slice(&data);
        } else {
            out.extend_from_slice(&data);
        }
    }
    Ok((out, err))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_round_trip() {
        let mut raw = encode_frame(1, b"hello ");
        raw.extend(encode_frame(2, b"oops"));
        raw.extend(encode_frame(1, b"world"));
        let (out, err) = demux_all(&raw[..]).unwrap();
        assert_eq!(out, b"hello world");
        assert_eq!(err, b"oops");
    }

    #[test]
    fn truncated_header_is_an_error() {
        let raw = [1u8, 0, 0];
        assert!(read_frame(&mut &raw[..]).is_err());
    }

    #[test]
    fn timeout_wrapper() {
        let argv = timeout_argv(Duration::from_millis(1500), &["bash", "-c", "ls"]);
        assert_eq!(argv, ["timeout", "-s", "KILL", "1.500", "bash", "-c", "ls"]);
    }
}
