//! Host-process backend.
//!
//! Each container is a private directory `H`. Every absolute path the `ContainerSpec`
//! declares (plus `/tmp` and `/root`) lives at `H/<path>`: commands are
//! rewritten on the way in and `H` is stripped from output on the way out, so
//! observations read as if the tree were mounted at `/`. Paths outside the
//! declared roots resolve against the real host file system.

use std::collections::BTreeSet;
use std::io::Read;
use std::os::unix::fs::PermissionsExt;
use std::os::unix::process::CommandExt;
use std::path::PathBuf;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use md5::{Digest, Md5};

use super::{
    push_capped, run_init_script, Attached, Backend, BackendError, Container, ContainerSpec, EntryMode,
    ExecResult, ShellSession, StreamChunk, TIMEOUT_EXIT_STATUS,
};

const SESSION_START_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone)]
pub struct LocalBackend {
    base_dir: PathBuf,
    live: Arc<Mutex<BTreeSet<String>>>,
}

impl Default for LocalBackend {
    fn default() -> Self {
        Self::new(std::env::temp_dir())
    }
}

impl LocalBackend {
    pub fn new(base_dir: impl Into<PathBuf>) -> Self {
        Self {
            base_dir: base_dir.into(),
            live: Arc::default(),
        }
    }
}

impl Backend for LocalBackend {
    fn kind(&self) -> &'static str {
        "local"
    }

    fn provision(&self, spec: &ContainerSpec) -> Result<Box<dyn Container>, BackendError> {
        spec.validate()?;
        std::fs::create_dir_all(&self.base_dir)?;
        let dir = tempfile::Builder::new().prefix("execbench-").tempdir_in(&self.base_dir)?;
        let host_root = dir.path().canonicalize()?;
        let host_root_str = host_root
            .to_str()
            .ok_or_else(|| BackendError::Provision("sandbox path is not UTF-8".into()))?
            .to_string();

        let mut roots: Vec<String> = spec.paths.iter().map(|p| p.trim_end_matches('/').to_string()).collect();
        roots.push("/tmp".into());
        roots.push("/root".into());
        if spec.workdir != "/" && !roots.iter().any(|r| under_root(&spec.workdir, r)) {
            roots.push(spec.workdir.trim_end_matches('/').to_string());
        }
        roots.sort_by_key(|r| std::cmp::Reverse(r.len()));
        roots.dedup();
        for r in &roots {
            std::fs::create_dir_all(format!("{host_root_str}{r}"))?;
        }

        let id = host_root
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("execbench")
            .to_string();
        let map = PathMap { host_root: host_root_str, roots };

        let mut env = vec![
            ("PATH".to_string(), std::env::var("PATH").unwrap_or_else(|_| "/usr/local/bin:/usr/bin:/bin".into())),
            ("HOME".to_string(), map.rewrite("/root")),
            ("TMPDIR".to_string(), map.rewrite("/tmp")),
            ("LANG".to_string(), "C.UTF-8".to_string()),
            ("TERM".to_string(), "dumb".to_string()),
            ("GIT_CONFIG_NOSYSTEM".to_string(), "1".to_string()),
        ];
        for (k, v) in &spec.env_vars {
            env.retain(|(ek, _)| ek != k);
            env.push((k.clone(), map.rewrite(v)));
        }

        let container = LocalContainer {
            id: id.clone(),
            dir: Mutex::new(Some(dir)),
            workdir: map.host_path(&spec.workdir),
            map,
            env,
            entry_mode: spec.entry_mode,
            session: Mutex::new(None),
            alive: AtomicBool::new(true),
            live: Arc::clone(&self.live),
        };
        self.live.lock().unwrap().insert(id);
        if let Err(e) = run_init_script(&container, spec) {
            let _ = container.remove();
            return Err(e);
        }
        Ok(Box::new(container))
    }

    fn list(&self) -> Result<Vec<String>, BackendError> {
        Ok(self.live.lock().unwrap().iter().cloned().collect())
    }
}

fn under_root(path: &str, root: &str) -> bool {
    path == root || (path.starts_with(root) && path.as_bytes().get(root.len()) == Some(&b'/'))
}

/// Logical-to-host path translation for one sandbox.
#[derive(Debug, Clone)]
struct PathMap {
    host_root: String,
    /// Longest first.
    roots: Vec<String>,
}

fn continues_path(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b"_.-/~}$".contains(&b)
}

fn continues_name(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b"_.-".contains(&b)
}

impl PathMap {
    /// Prefix every standalone occurrence of a declared root with the host
    /// directory.
    fn rewrite(&self, text: &str) -> String {
        let bytes = text.as_bytes();
        let mut out = String::with_capacity(text.len() + 64);
        let mut copied = 0usize;
        let mut i = 0usize;
        while i < bytes.len() {
            if bytes[i] == b'/' && (i == 0 || !continues_path(bytes[i - 1])) {
                if let Some(root) = self.roots.iter().find(|r| {
                    text[i..].starts_with(r.as_str())
                        && bytes.get(i + r.len()).is_none_or(|&b| !continues_name(b))
                }) {
                    out.push_str(&text[copied..i]);
                    out.push_str(&self.host_root);
                    out.push_str(root);
                    i += root.len();
                    copied = i;
                    continue;
                }
            }
            i += 1;
        }
        out.push_str(&text[copied..]);
        out
    }

    fn host_path(&self, logical: &str) -> PathBuf {
        if self.roots.iter().any(|r| under_root(logical, r)) || logical == "/" {
            PathBuf::from(format!("{}{}", self.host_root, logical.trim_end_matches('/')))
        } else {
            PathBuf::from(logical)
        }
    }

    fn strip(&self, data: Vec<u8>) -> Vec<u8> {
        let needle = self.host_root.as_bytes();
        if data.len() < needle.len() || !data.windows(needle.len()).any(|w| w == needle) {
            return data;
        }
        let mut out = Vec::with_capacity(data.len());
        let mut i = 0;
        while i < data.len() {
            if data[i..].starts_with(needle) {
                i += needle.len();
            } else {
                out.push(data[i]);
                i += 1;
            }
        }
        out
    }
}

struct LocalContainer {
    id: String,
    dir: Mutex<Option<tempfile::TempDir>>,
    map: PathMap,
    workdir: PathBuf,
    env: Vec<(String, String)>,
    entry_mode: EntryMode,
    session: Mutex<Option<ShellSession>>,
    alive: AtomicBool,
    live: Arc<Mutex<BTreeSet<String>>>,
}

impl LocalContainer {
    fn check_alive(&self) -> Result<(), BackendError> {
        if self.alive.load(Ordering::SeqCst) {
            Ok(())
        } else {
            Err(BackendError::Dead(self.id.clone()))
        }
    }

    fn command(&self, program: &str) -> Command {
        let mut cmd = Command::new(program);
        cmd.current_dir(&self.workdir)
            .env_clear()
            .envs(self.env.iter().map(|(k, v)| (k, v)))
            .process_group(0);
        cmd
    }

    fn start_session(&self) -> Result<ShellSession, BackendError> {
        let proc = self.attach(&["bash".into(), "--noprofile".into(), "--norc".into()])?;
        let setup = format!("cd {}", super::shell_quote(&self.workdir.to_string_lossy()));
        ShellSession::start(proc, &setup, SESSION_START_TIMEOUT)
    }

    fn spawn_attached(&self, argv: &[String], strip_output: bool) -> Result<Box<dyn Attached>, BackendError> {
        self.check_alive()?;
        let (program, args) = argv
            .split_first()
            .ok_or_else(|| BackendError::Protocol("empty argv".into()))?;
        let mut child = self
            .command(&self.map.rewrite(program))
            .args(args.iter().map(|a| self.map.rewrite(a)))
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()?;
        let (tx, rx) = mpsc::channel();
        let stdout = child.stdout.take().expect("piped");
        let stderr = child.stderr.take().expect("piped");
        spawn_pump(stdout, tx.clone(), StreamChunk::Stdout);
        spawn_pump(stderr, tx, StreamChunk::Stderr);
        Ok(Box::new(LocalAttached {
            stdin: child.stdin.take(),
            child,
            rx,
            closed_streams: 0,
            map: strip_output.then(|| self.map.clone()),
        }))
    }

    fn finish(&self, mut r: ExecResult) -> ExecResult {
        r.stdout = self.map.strip(r.stdout);
        r.stderr = self.map.strip(r.stderr);
        r
    }
}

impl Container for LocalContainer {
    fn id(&self) -> &str {
        &self.id
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
        let result = session.run(&self.map.rewrite(command), timeout);
        if !session.is_alive() {
            *guard = None;
        }
        result.map(|r| self.finish(r))
    }

    fn exec_oneshot(&self, command: &str, timeout: Duration) -> Result<ExecResult, BackendError> {
        self.check_alive()?;
        let started = Instant::now();
        let mut child = self
            .command("bash")
            .args(["--noprofile", "--norc", "-c", &self.map.rewrite(command)])
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()?;
        let out_rx = drain(child.stdout.take().expect("piped"));
        let err_rx = drain(child.stderr.take().expect("piped"));

        let deadline = started + timeout;
        let mut timed_out = false;
        let status = loop {
            if let Some(status) = child.try_wait()? {
                break Some(status);
            }
            if Instant::now() >= deadline {
                kill_group(&mut child);
                timed_out = true;
                break None;
            }
            std::thread::sleep(Duration::from_millis(2));
        };
        let grace = Duration::from_secs(2);
        let stdout = out_rx.recv_timeout(grace).unwrap_or_default();
        let stderr = err_rx.recv_timeout(grace).unwrap_or_default();
        let exit_status = match status {
            Some(s) => s.code().map(i64::from).unwrap_or_else(|| 128 + i64::from(signal_of(&s))),
            None => TIMEOUT_EXIT_STATUS,
        };
        Ok(self.finish(ExecResult {
            stdout,
            stderr,
            exit_status,
            duration: started.elapsed(),
            timed_out,
        }))
    }

    fn attach(&self, argv: &[String]) -> Result<Box<dyn Attached>, BackendError> {
        self.spawn_attached(argv, true)
    }

    fn attach_raw(&self, argv: &[String]) -> Result<Box<dyn Attached>, BackendError> {
        self.spawn_attached(argv, false)
    }


    fn hash_file(&self, path: &str) -> Result<Option<String>, BackendError> {
        self.check_alive()?;
        let host = self.map.host_path(path);
        match std::fs::metadata(&host) {
            Err(_) => Ok(None),
            Ok(m) if m.is_dir() => Err(BackendError::IsDirectory(path.to_string())),
            Ok(_) => {
                let mut hasher = Md5::new();
                let mut f = std::fs::File::open(&host)?;
                std::io::copy(&mut f, &mut hasher)?;
                Ok(Some(hex::encode(hasher.finalize())))
            }
        }
    }

    fn write_file(&self, path: &str, contents: &[u8], mode: u32) -> Result<(), BackendError> {
        self.check_alive()?;
        let host = self.map.host_path(path);
        if let Some(parent) = host.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&host, contents)?;
        std::fs::set_permissions(&host, std::fs::Permissions::from_mode(mode))?;
        Ok(())
    }

    fn read_file(&self, path: &str) -> Result<Option<Vec<u8>>, BackendError> {
        self.check_alive()?;
        let host = self.map.host_path(path);
        match std::fs::metadata(&host) {
            Err(_) => Ok(None),
            Ok(m) if m.is_dir() => Err(BackendError::IsDirectory(path.to_string())),
            Ok(_) => Ok(Some(std::fs::read(host)?)),
        }
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
        self.live.lock().unwrap().remove(&self.id);
        if let Some(dir) = self.dir.lock().unwrap().take() {
            // Agents may have removed write permission somewhere in the tree.
            let _ = Command::new("chmod")
                .args(["-R", "u+rwx"])
                .arg(dir.path())
                .stdout(Stdio::null())
                .stderr(Stdio::null())
                .status();
            dir.close()?;
        }
        Ok(())
    }

    fn is_alive(&self) -> bool {
        self.alive.load(Ordering::SeqCst)
    }
}

impl Drop for LocalContainer {
    fn drop(&mut self) {
        let _ = self.remove();
    }
}

struct LocalAttached {
    child: Child,
    stdin: Option<ChildStdin>,
    rx: Receiver<StreamChunk>,
    closed_streams: u8,
    /// Host prefix stripping; off for raw attachments.
    map: Option<PathMap>,
}

impl LocalAttached {
    fn strip(&self, data: Vec<u8>) -> Vec<u8> {
        match &self.map {
            Some(m) => m.strip(data),
            None => data,
        }
    }
}

impl Attached for LocalAttached {
    fn send(&mut self, data: &[u8]) -> std::io::Result<()> {
        use std::io::Write;
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::BrokenPipe, "stdin closed"))?;
        stdin.write_all(data)?;
        stdin.flush()
    }

    fn recv(&mut self, timeout: Duration) -> Option<StreamChunk> {
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.rx.recv_timeout(left) {
                Ok(StreamChunk::Closed) => {
                    self.closed_streams += 1;
                    if self.closed_streams >= 2 {
                        let _ = self.child.try_wait();
                        return Some(StreamChunk::Closed);
                    }
                }
                Ok(StreamChunk::Stdout(d)) => return Some(StreamChunk::Stdout(self.strip(d))),
                Ok(StreamChunk::Stderr(d)) => return Some(StreamChunk::Stderr(self.strip(d))),
                Err(RecvTimeoutError::Timeout) => return None,
                Err(RecvTimeoutError::Disconnected) => return Some(StreamChunk::Closed),
            }
        }
    }

    fn kill(&mut self) {
        self.stdin.take();
        kill_group(&mut self.child);
    }
}

impl Drop for LocalAttached {
    fn drop(&mut self) {
        self.kill();
    }
}

fn spawn_pump<R: Read + Send + 'static>(
    mut reader: R,
    tx: mpsc::Sender<StreamChunk>,
    wrap: fn(Vec<u8>) -> StreamChunk,
) {
    std::thread::spawn(move || {
        let mut buf = vec![0u8; 16 * 1024];
        loop {
            match reader.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    if tx.send(wrap(buf[..n].to_vec())).is_err() {
                        return;
                    }
                }
            }
        }
        let _ = tx.send(StreamChunk::Closed);
    });
}

fn drain<R: Read + Send + 'static>(mut reader: R) -> Receiver<Vec<u8>> {
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let mut kept = Vec::new();
        let mut buf = vec![0u8; 16 * 1024];
        loop {
            match reader.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    push_capped(&mut kept, &buf[..n]);
                }
            }
        }
        let _ = tx.send(kept);
    });
    rx
}

fn kill_group(child: &mut Child) {
    if let Ok(pid) = i32::try_from(child.id()) {
        // SAFETY: plain syscall on a process group we created.
        unsafe {
            libc::killpg(pid, libc::SIGKILL);
        }
    }
    let _ = child.kill();
    let _ = child.wait();
}

fn signal_of(status: &std::process::ExitStatus) -> i32 {
    use std::os::unix::process::ExitStatusExt;
    status.signal().unwrap_or(0)
}


#[cfg(test)]
mod tests {
    use super::*;

    fn map() -> PathMap {
        PathMap {
            host_root: "/h/x".into(),
            roots: vec!["/testbed".into(), "/tmp".into()],
        }
    }

    #[test]
    fn rewrites_standalone_roots_only() {
        let m = map();
        assert_eq!(m.rewrite("cd /testbed && ls /testbed/dir1"), "cd /h/x/testbed && ls /h/x/testbed/dir1");
        assert_eq!(m.rewrite("echo '/testbed'"), "echo '/h/x/testbed'");
        assert_eq!(m.rewrite("ls x/testbed /testbedx $HOME/testbed"), "ls x/testbed /testbedx $HOME/testbed");
        assert_eq!(m.rewrite("find /tmp -name a"), "find /h/x/tmp -name a");
        assert_eq!(m.rewrite("é /tmp"), "é /h/x/tmp");
    }

    #[test]
    fn strips_host_prefix() {
        let m = map();
        assert_eq!(m.strip(b"/h/x/testbed/a\n/h/x/tmp".to_vec()), b"/testbed/a\n/tmp".to_vec());
        assert_eq!(m.strip(b"plain".to_vec()), b"plain".to_vec());
    }

    #[test]
    fn host_paths() {
        let m = map();
        assert_eq!(m.host_path("/testbed/a b.txt"), PathBuf::from("/h/x/testbed/a b.txt"));
        assert_eq!(m.host_path("/etc/hosts"), PathBuf::from("/etc/hosts"));
    }
}
