//! Session service: environments driven over TCP by out-of-process agents.
//!
//! Each connection carries newline-delimited JSON messages (see [`wire`]).
//! A connection that opens with an HTTP request line is served as HTTP
//! instead: one message per `POST`, answered in the response body.
//!
//! Sessions belong to the server, not to connections, so a client may
//! reconnect and continue. Messages for one session are handled one at a
//! time. Idle sessions are closed by a reaper thread.

pub mod wire;

use std::collections::HashMap;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::Deserialize;
use serde_json::{json, Map, Value};

use crate::backend::Backend;
use crate::envs::{self, EnvOptions};
use crate::episode::{Action, EngineConfig, EnvError, EnvHandle, TaskInstance};
use wire::{decode, encode, ErrorCode, Op, Request, Response, MAX_LINE};

pub const DEFAULT_MAX_SESSIONS: usize = 16;
pub const DEFAULT_IDLE_TIMEOUT: Duration = Duration::from_secs(600);

#[derive(Clone)]
pub struct ServiceConfig {
    pub backend: Arc<dyn Backend>,
    pub max_sessions: usize,
    pub idle_timeout: Duration,
    /// Defaults for sessions that do not send their own options.
    pub env_options: HashMap<String, EnvOptions>,
    /// Where every session writes finished trajectories.
    pub traj_dir: Option<PathBuf>,
}

impl ServiceConfig {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Self {
            backend,
            max_sessions: DEFAULT_MAX_SESSIONS,
            idle_timeout: DEFAULT_IDLE_TIMEOUT,
            env_options: HashMap::new(),
            traj_dir: None,
        }
    }
}

struct Session {
    handle: EnvHandle,
    last_used: Instant,
}

struct Registry {
    sessions: HashMap<String, Arc<Mutex<Session>>>,
    /// Sessions being provisioned; they count toward the limit.
    creating: usize,
}

/// Request dispatcher shared by every connection.
pub struct Service {
    config: ServiceConfig,
    registry: Mutex<Registry>,
}

struct Failure(ErrorCode, String);

impl From<EnvError> for Failure {
    fn from(e: EnvError) -> Self {
        let code = match &e {
            EnvError::Bounds { .. } => ErrorCode::BoundsError,
            EnvError::Lifecycle(_) => ErrorCode::LifecycleError,
            EnvError::Argument(_) => ErrorCode::InvalidParams,
            EnvError::Preprocess(_) => ErrorCode::PreprocessError,
            EnvError::Evaluation(_) => ErrorCode::EvaluationError,
            EnvError::Infrastructure(_) | EnvError::Io(_) => ErrorCode::InfrastructureError,
        };
        Failure(code, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(ErrorCode::InvalidParams, msg.into())
}

#[derive(Deserialize)]
struct CreateParams {
    env: String,
    #[serde(default)]
    dataset: Option<PathBuf>,
    #[serde(default)]
    tasks: Option<Value>,
    #[serde(default)]
    options: Option<Value>,
    #[serde(default)]
    index: Option<usize>,
    #[serde(default)]
    timeout_secs: Option<f64>,
    #[serde(default)]
    truncation_cap: Option<usize>,
    #[serde(default)]
    max_turns: Option<usize>,
}

#[derive(Deserialize)]
struct ResetParams {
    #[serde(default)]
    index: Option<usize>,
}

fn params<T: for<'de> Deserialize<'de>>(p: &Map<String, Value>) -> Result<T, Failure> {
    serde_json::from_value(Value::Object(p.clone())).map_err(|e| invalid(format!("bad params: {e}")))
}

fn new_session_id() -> String {
    hex::encode(rand::thread_rng().gen::<[u8; 16]>())
}

impl Service {
    pub fn new(config: ServiceConfig) -> Self {
        Self {
            config,
            registry: Mutex::new(Registry {
                sessions: HashMap::new(),
                creating: 0,
            }),
        }
    }

    pub fn session_count(&self) -> usize {
        self.registry.lock().unwrap().sessions.len()
    }

    /// Handle one decoded request.
    pub fn dispatch(&self, req: Request) -> Response {
        let id = req.id.clone();
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| self.route(&req)));
        match result {
            Ok(Ok((sid, value))) => Response::ok(id, sid, value),
            Ok(Err(Failure(code, msg))) => Response::error(id, code, msg),
            Err(_) => {
                // a panicking session is not trusted again
                if let Some(sid) = &req.session_id {
                    self.registry.lock().unwrap().sessions.remove(sid);
                }
                Response::error(id, ErrorCode::InternalError, "internal error; the session was discarded")
            }
        }
    }

    /// Decode and handle one raw line.
    pub fn dispatch_line(&self, line: &[u8]) -> Response {
        match decode(line) {
            Ok(req) => self.dispatch(req),
            Err(f) => f.into_response(),
        }
    }

    fn route(&self, req: &Request) -> Result<(Option<String>, Value), Failure> {
        match req.op {
            Op::Create => self.create(&req.params),
            Op::Info if req.session_id.is_none() => Ok((None, self.server_info())),
            op => {
                let sid = req
                    .session_id
                    .clone()
                    .ok_or_else(|| invalid(format!("{} requires session_id", op.as_str())))?;
                let session = self.lookup(&sid)?;
                if op == Op::Close {
                    return self.close(sid, session);
                }
                let mut s = session.lock().map_err(|_| Failure(ErrorCode::InternalError, "session poisoned".into()))?;
                s.last_used = Instant::now();
                let value = match op {
                    Op::Reset => {
                        let p: ResetParams = params(&req.params)?;
                        let (obs, task) = s.handle.reset(p.index)?;
                        json!({ "observation": obs, "task": task_view(&task) })
                    }
                    Op::Step => {
                        let action: Action = params(&req.params)?;
                        serde_json::to_value(s.handle.step(action)?).expect("json")
                    }
                    Op::Info => session_info(&s.handle),
                    Op::Create | Op::Close => unreachable!(),
                };
                s.last_used = Instant::now();
                Ok((Some(sid), value))
            }
        }
    }

    fn lookup(&self, sid: &str) -> Result<Arc<Mutex<Session>>, Failure> {
        self.registry
            .lock()
            .unwrap()
            .sessions
            .get(sid)
            .cloned()
            .ok_or_else(|| Failure(ErrorCode::SessionNotFound, format!("no session {sid:?}")))
    }

    fn create(&self, p: &Map<String, Value>) -> Result<(Option<String>, Value), Failure> {
        let p: CreateParams = params(p)?;
        let tasks = match (&p.dataset, &p.tasks) {
            (Some(path), None) => envs::load_tasks(&p.env, path)?,
            (None, Some(inline)) => crate::dataset::parse(&inline.to_string())
                .map(|(_, t)| t)
                .map_err(|e| invalid(e.to_string()))?,
            _ => return Err(invalid("create needs exactly one of `dataset` or `tasks`")),
        };
        let options = match &p.options {
            Some(v) => EnvOptions::from_value(v)?,
            None => self.config.env_options.get(&p.env).cloned().unwrap_or_default(),
        };
        let mut engine = EngineConfig {
            traj_dir: self.config.traj_dir.clone(),
            max_turns: p.max_turns,
            ..EngineConfig::default()
        };
        if let Some(t) = p.timeout_secs {
            if !(t.is_finite() && t > 0.0) {
                return Err(invalid("timeout_secs must be positive"));
            }
            engine.timeout = Duration::from_secs_f64(t);
        }
        if let Some(c) = p.truncation_cap {
            engine.truncation_cap = c;
        }
        {
            let mut reg = self.registry.lock().unwrap();
            if reg.sessions.len() + reg.creating >= self.config.max_sessions {
                return Err(Failure(
                    ErrorCode::SessionLimit,
                    format!("session limit of {} reached", self.config.max_sessions),
                ));
            }
            reg.creating += 1;
        }
        let built = envs::open(&p.env, self.config.backend.clone(), &options)
            .and_then(|env| EnvHandle::new(env, tasks, engine))
            .and_then(|mut handle| {
                let mut result = json!({ "env": p.env, "task_count": handle.tasks().len() });
                if let Some(i) = p.index {
                    let (obs, task) = handle.reset(Some(i))?;
                    result["observation"] = serde_json::to_value(obs).expect("json");
                    result["task"] = task_view(&task);
                }
                Ok((handle, result))
            });
        let mut reg = self.registry.lock().unwrap();
        reg.creating -= 1;
        let (handle, mut result) = built?;
        let sid = new_session_id();
        reg.sessions.insert(
            sid.clone(),
            Arc::new(Mutex::new(Session {
                handle,
                last_used: Instant::now(),
            })),
        );
        log::info!("session {sid} created ({})", p.env);
        result["session_id"] = Value::String(sid.clone());
        Ok((Some(sid), result))
    }

    fn close(&self, sid: String, session: Arc<Mutex<Session>>) -> Result<(Option<String>, Value), Failure> {
        let mut s = session.lock().map_err(|_| Failure(ErrorCode::InternalError, "session poisoned".into()))?;
        self.registry.lock().unwrap().sessions.remove(&sid);
        let was_active = s.handle.is_active();
        s.handle.close()?;
        let trajectory = if was_active { s.handle.last_trajectory().cloned() } else { None };
        log::info!("session {sid} closed");
        Ok((Some(sid), json!({ "closed": true, "trajectory": trajectory })))
    }

    fn server_info(&self) -> Value {
        let reg = self.registry.lock().unwrap();
        json!({
            "version": wire::PROTOCOL_VERSION,
            "envs": envs::NAMES,
            "backend": self.config.backend.kind(),
            "sessions": reg.sessions.len(),
            "max_sessions": self.config.max_sessions,
            "idle_timeout_secs": self.config.idle_timeout.as_secs_f64(),
        })
    }

    /// Close sessions idle for longer than the configured timeout. Sessions
    /// busy with a request are skipped.
    pub fn reap_idle(&self) -> usize {
        let now = Instant::now();
        let stale: Vec<(String, Arc<Mutex<Session>>)> = {
            let mut reg = self.registry.lock().unwrap();
            let ids: Vec<String> = reg
                .sessions
                .iter()
                .filter(|(_, s)| {
                    s.try_lock()
                        .is_ok_and(|s| now.duration_since(s.last_used) >= self.config.idle_timeout)
                })
                .map(|(id, _)| id.clone())
                .collect();
            ids.into_iter()
                .filter_map(|id| reg.sessions.remove(&id).map(|s| (id, s)))
                .collect()
        };
        for (id, s) in &stale {
            log::info!("session {id} idle; closing");
            if let Ok(mut s) = s.lock() {
                if let Err(e) = s.handle.close() {
                    log::warn!("closing idle session {id}: {e}");
                }
            }
        }
        stale.len()
    }

    /// Close every session.
    pub fn close_all(&self) {
        let all: Vec<_> = self.registry.lock().unwrap().sessions.drain().collect();
        for (id, s) in all {
            if let Ok(mut s) = s.lock() {
                if let Err(e) = s.handle.close() {
                    log::warn!("closing session {id}: {e}");
                }
            }
        }
    }
}

fn task_view(task: &TaskInstance) -> Value {
    json!({ "id": task.id, "query": task.query, "extras": task.extras })
}

fn session_info(h: &EnvHandle) -> Value {
    json!({
        "env": h.env_name(),
        "task_count": h.tasks().len(),
        "active": h.is_active(),
        "turn": h.turn_count(),
        "task_id": h.current_task().map(|t| t.id.clone()),
        "config": h.environment().config_snapshot(),
        "last_trajectory": h.last_trajectory(),
    })
}

/// A bound listener plus its service.
pub struct Server {
    listener: TcpListener,
    service: Arc<Service>,
    stop: Arc<AtomicBool>,
}

/// Handle to a server running on a background thread.
pub struct ServerHandle {
    addr: SocketAddr,
    service: Arc<Service>,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl Server {
    pub fn bind(addr: impl ToSocketAddrs, config: ServiceConfig) -> io::Result<Self> {
        Ok(Self {
            listener: TcpListener::bind(addr)?,
            service: Arc::new(Service::new(config)),
            stop: Arc::new(AtomicBool::new(false)),
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    pub fn service(&self) -> &Arc<Service> {
        &self.service
    }

    /// Accept connections until stopped.
    pub fn serve(self) -> io::Result<()> {
        let reaper = {
            let service = self.service.clone();
            let stop = self.stop.clone();
            let tick = (service.config.idle_timeout / 4).clamp(Duration::from_millis(50), Duration::from_secs(30));
            std::thread::spawn(move || {
                let mut last = Instant::now();
                while !stop.load(Ordering::SeqCst) {
                    std::thread::sleep(Duration::from_millis(50));
                    if last.elapsed() >= tick {
                        service.reap_idle();
                        last = Instant::now();
                    }
                }
            })
        };
        for conn in self.listener.incoming() {
            if self.stop.load(Ordering::SeqCst) {
                break;
            }
            match conn {
                Ok(stream) => {
                    let service = self.service.clone();
                    std::thread::spawn(move || {
                        let peer = stream.peer_addr().ok();
                        if let Err(e) = handle_connection(&service, stream) {
                            log::debug!("connection {peer:?}: {e}");
                        }
                    });
                }
                Err(e) => log::warn!("accept: {e}"),
            }
        }
        self.stop.store(true, Ordering::SeqCst);
        let _ = reaper.join();
        self.service.close_all();
        Ok(())
    }

    pub fn spawn(self) -> io::Result<ServerHandle> {
        let addr = self.local_addr()?;
        let service = self.service.clone();
        let stop = self.stop.clone();
        let thread = std::thread::spawn(move || {
            if let Err(e) = self.serve() {
                log::error!("server: {e}");
            }
        });
        Ok(ServerHandle {
            addr,
            service,
            stop,
            thread: Some(thread),
        })
    }
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn service(&self) -> &Arc<Service> {
        &self.service
    }

    /// Stop accepting, close all sessions and wait for the accept loop.
    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the accept loop
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_now();
    }
}

const HTTP_METHODS: [&[u8]; 5] = [b"POST ", b"GET ", b"PUT ", b"HEAD ", b"OPTIONS "];

fn handle_connection(service: &Service, stream: TcpStream) -> io::Result<()> {
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    let head = reader.fill_buf()?;
    if HTTP_METHODS.iter().any(|m| head.starts_with(m)) {
        return handle_http(service, reader, writer);
    }
    let mut line = Vec::new();
    loop {
        line.clear();
        let n = (&mut reader).take(MAX_LINE as u64 + 1).read_until(b'\n', &mut line)?;
        if n == 0 {
            return Ok(());
        }
        if line.len() > MAX_LINE {
            let r = Response::error(None, ErrorCode::ProtocolError, format!("message exceeds {MAX_LINE} bytes"));
            writer.write_all(&encode(&r))?;
            return Ok(());
        }
        let body = trim_line(&line);
        if body.is_empty() {
            continue;
        }
        let response = service.dispatch_line(body);
        writer.write_all(&encode(&response))?;
        writer.flush()?;
    }
}

fn trim_line(line: &[u8]) -> &[u8] {
    let end = line.iter().rposition(|b| !b" \t\r\n".contains(b)).map_or(0, |i| i + 1);
    &line[..end]
}

fn handle_http(service: &Service, mut reader: BufReader<TcpStream>, mut writer: TcpStream) -> io::Result<()> {
    let mut request_line = String::new();
    reader.read_line(&mut request_line)?;
    let mut content_length = None;
    loop {
        let mut h = String::new();
        if reader.read_line(&mut h)? == 0 || h == "\r\n" || h == "\n" {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            if k.trim().eq_ignore_ascii_case("content-length") {
                content_length = v.trim().parse::<usize>().ok();
            }
        }
    }
    let (status, body) = if !request_line.starts_with("POST ") {
        ("405 Method Not Allowed", encode(&Response::error(None, ErrorCode::ProtocolError, "use POST")))
    } else {
        match content_length {
            Some(n) if n <= MAX_LINE => {
                let mut buf = vec![0; n];
                match reader.read_exact(&mut buf) {
                    Ok(()) => ("200 OK", encode(&service.dispatch_line(trim_line(&buf)))),
                    Err(_) => (
                        "400 Bad Request",
                        encode(&Response::error(None, ErrorCode::ProtocolError, "body shorter than Content-Length")),
                    ),
                }
            }
            _ => (
                "411 Length Required",
                encode(&Response::error(None, ErrorCode::ProtocolError, "missing or oversized Content-Length")),
            ),
        }
    };
    write!(
        writer,
        "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        body.len()
    )?;
    writer.write_all(&body)?;
    writer.flush()
}
