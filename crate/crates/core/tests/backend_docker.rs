//! Drives the engine backend against an in-process fake engine that runs
//! exec requests as host processes.

use std::collections::{HashMap, HashSet};
use std::io::{BufReader, Read, Write};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use execbench::backend::docker::{encode_frame, DockerBackend, Endpoint};
use execbench::backend::{Backend, BackendError, ContainerSpec};
use execbench::http;
use serde_json::{json, Value};

const T: Duration = Duration::from_secs(10);

#[derive(Default)]
struct State {
    images: HashSet<String>,
    containers: HashSet<String>,
    execs: HashMap<String, (Vec<String>, String, Vec<String>)>,
    exit_codes: HashMap<String, i64>,
    next: u64,
    pulls: u32,
}

struct FakeEngine {
    _dir: tempfile::TempDir,
    socket: PathBuf,
    state: Arc<Mutex<State>>,
}

impl FakeEngine {
    fn start() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let socket = dir.path().join("engine.sock");
        let listener = UnixListener::bind(&socket).unwrap();
        let state = Arc::new(Mutex::new(State::default()));
        let st = Arc::clone(&state);
        std::thread::spawn(move || {
            for conn in listener.incoming() {
                let Ok(conn) = conn else { break };
                let st = Arc::clone(&st);
                std::thread::spawn(move || handle(conn, st));
            }
        });
        Self { _dir: dir, socket, state }
    }

    fn backend(&self) -> DockerBackend {
        DockerBackend::new(Endpoint::Unix(self.socket.clone()))
    }
}

fn decode(s: &str) -> String {
    let bytes = s.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' && i + 2 < bytes.len() {
            out.push(u8::from_str_radix(&s[i + 1..i + 3], 16).unwrap());
            i += 3;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    String::from_utf8(out).unwrap()
}

fn query(target: &str, key: &str) -> Option<String> {
    let q = target.split_once('?')?.1;
    q.split('&').find_map(|kv| {
        let (k, v) = kv.split_once('=')?;
        (k == key).then(|| decode(v))
    })
}

fn reply(conn: &mut UnixStream, status: u16, body: Value) {
    let bytes = if body.is_null() { Vec::new() } else { serde_json::to_vec(&body).unwrap() };
    http::write_response(conn, status, "X", "application/json", &bytes).unwrap();
}

fn spawn(argv: &[String], workdir: &str, env: &[String]) -> std::process::Child {
    let mut cmd = Command::new(&argv[0]);
    cmd.args(&argv[1..]).current_dir(workdir);
    for kv in env {
        if let Some((k, v)) = kv.split_once('=') {
            cmd.env(k, v);
        }
    }
    cmd.stdin(Stdio::piped()).stdout(Stdio::piped()).stderr(Stdio::piped()).spawn().unwrap()
}

fn handle(mut conn: UnixStream, state: Arc<Mutex<State>>) {
    let mut reader = BufReader::new(conn.try_clone().unwrap());
    let Some(head) = http::read_head(&mut reader).unwrap() else { return };
    let body = http::read_body(&mut reader, &head, 1 << 24, false).unwrap();
    let (method, target) = head.request_target().unwrap();
    let path = target.strip_prefix("/v1.41").unwrap().split('?').next().unwrap().to_string();
    let parts: Vec<&str> = path.trim_start_matches('/').split('/').collect();
    let json_body = || serde_json::from_slice::<Value>(&body).unwrap_or(Value::Null);
    match (method, parts.as_slice()) {
        ("GET", ["_ping"]) => reply(&mut conn, 200, json!("OK")),
        ("POST", ["images", "create"]) => {
            let image = query(target, "fromImage").unwrap();
            let mut s = state.lock().unwrap();
            s.pulls += 1;
            if image == "missing" {
                drop(s);
                let lines = b"{\"status\":\"Pulling\"}\n{\"error\":\"manifest unknown\"}\n";
                http::write_response(&mut conn, 200, "OK", "application/json", lines).unwrap();
                return;
            }
            s.images.insert(format!("{image}:{}", query(target, "tag").unwrap()));
            reply(&mut conn, 200, Value::Null);
        }
        ("POST", ["containers", "create"]) => {
            let cfg = json_body();
            assert_eq!(cfg["Labels"]["execbench.managed"], "1");
            let mut image = cfg["Image"].as_str().unwrap().to_string();
            if !image.contains(':') {
                image.push_str(":latest");
            }
            let mut s = state.lock().unwrap();
            if !s.images.contains(&image) {
                drop(s);
                return reply(&mut conn, 404, json!({"message": format!("No such image: {image}")}));
            }
            s.next += 1;
            let id = format!("{:064x}", s.next);
            s.containers.insert(id.clone());
            reply(&mut conn, 201, json!({"Id": id}));
        }
        ("POST", ["containers", _, "start"]) => reply(&mut conn, 204, Value::Null),
        ("POST", ["containers", _, "exec"]) => {
            let cfg = json_body();
            let argv: Vec<String> = serde_json::from_value(cfg["Cmd"].clone()).unwrap();
            let env: Vec<String> = serde_json::from_value(cfg["Env"].clone()).unwrap_or_default();
            let wd = cfg["WorkingDir"].as_str().unwrap_or("/").to_string();
            let mut s = state.lock().unwrap();
            s.next += 1;
            let id = format!("exec{}", s.next);
            s.execs.insert(id.clone(), (argv, wd, env));
            reply(&mut conn, 201, json!({"Id": id}));
        }
        ("POST", ["exec", id, "start"]) => {
            let (argv, wd, env) = state.lock().unwrap().execs[*id].clone();
            let id = id.to_string();
            let upgrade = head.header("upgrade").is_some();
            let mut child = spawn(&argv, &wd, &env);
            if upgrade {
                conn.write_all(b"HTTP/1.1 101 UPGRADED\r\nContent-Type: application/vnd.docker.raw-stream\r\nConnection: Upgrade\r\nUpgrade: tcp\r\n\r\n").unwrap();
                let mut stdin = child.stdin.take().unwrap();
                std::thread::spawn(move || {
                    let mut buf = [0u8; 4096];
                    loop {
                        match reader.read(&mut buf) {
                            Ok(0) | Err(_) => break,
                            Ok(n) => {
                                if stdin.write_all(&buf[..n]).is_err() {
                                    break;
                                }
                            }
                        }
                    }
                });
            } else {
                drop(child.stdin.take());
                conn.write_all(b"HTTP/1.1 200 OK\r\nContent-Type: application/vnd.docker.multiplexed-stream\r\n\r\n").unwrap();
            }
            let out = Arc::new(Mutex::new(conn));
            let pumps: Vec<_> = [(1u8, Box::new(child.stdout.take().unwrap()) as Box<dyn Read + Send>), (2u8, Box::new(child.stderr.take().unwrap()))]
                .into_iter()
                .map(|(stream, mut r)| {
                    let out = Arc::clone(&out);
                    std::thread::spawn(move || {
                        let mut buf = [0u8; 4096];
                        loop {
                            match r.read(&mut buf) {
                                Ok(0) | Err(_) => break,
                                Ok(n) => {
                                    let _ = out.lock().unwrap().write_all(&encode_frame(stream, &buf[..n]));
                                }
                            }
                        }
                    })
                })
                .collect();
            for p in pumps {
                p.join().unwrap();
            }
            let status = child.wait().unwrap();
            let code = status.code().map(i64::from).unwrap_or(137);
            state.lock().unwrap().exit_codes.insert(id, code);
            let _ = out.lock().unwrap().shutdown(std::net::Shutdown::Both);
        }
        ("GET", ["exec", id, "json"]) => {
            let code = state.lock().unwrap().exit_codes.get(*id).copied();
            reply(&mut conn, 200, json!({"Running": code.is_none(), "ExitCode": code}));
        }
        ("PUT", ["containers", _, "archive"]) => {
            let dir = query(target, "path").unwrap();
            tar::Archive::new(&body[..]).unpack(&dir).unwrap();
            reply(&mut conn, 200, Value::Null);
        }
        ("GET", ["containers", _, "archive"]) => {
            let p = PathBuf::from(query(target, "path").unwrap());
            if !p.exists() {
                return reply(&mut conn, 404, json!({"message": "no such file"}));
            }
            let mut b = tar::Builder::new(Vec::new());
            if p.is_dir() {
                b.append_dir(p.file_name().unwrap(), &p).unwrap();
            } else {
                b.append_path_with_name(&p, p.file_name().unwrap()).unwrap();
            }
            let bytes = b.into_inner().unwrap();
            http::write_response(&mut conn, 200, "OK", "application/x-tar", &bytes).unwrap();
        }
        ("DELETE", ["containers", id]) => {
            let removed = state.lock().unwrap().containers.remove(*id);
            reply(&mut conn, if removed { 204 } else { 404 }, Value::Null);
        }
        ("GET", ["containers", "json"]) => {
            let ids: Vec<Value> = state.lock().unwrap().containers.iter().map(|id| json!({"Id": id})).collect();
            reply(&mut conn, 200, Value::Array(ids));
        }
        _ => reply(&mut conn, 404, json!({"message": format!("no route {method} {path}")})),
    }
}

fn spec_in(dir: &std::path::Path) -> ContainerSpec {
    ContainerSpec::new("img", dir.to_str().unwrap())
}

#[test]
fn ping_and_unreachable() {
    let engine = FakeEngine::start();
    assert!(engine.backend().available());
    let gone = DockerBackend::new(Endpoint::Unix("/nonexistent/engine.sock".into()));
    assert!(!gone.available());
    assert!(matches!(gone.provision(&ContainerSpec::new("img", "/")), Err(BackendError::Unreachable { .. })));
}

#[test]
fn provision_pulls_missing_image_and_execs() {
    let engine = FakeEngine::start();
    let work = tempfile::tempdir().unwrap();
    let c = engine.backend().provision(&spec_in(work.path())).unwrap();
    assert_eq!(engine.state.lock().unwrap().pulls, 1);

    let r = c.exec_oneshot("echo 42; echo e >&2; exit 7", T).unwrap();
    assert_eq!(r.stdout, b"42\n");
    assert_eq!(r.stderr, b"e\n");
    assert_eq!(r.exit_status, 7);

    let r = c.exec_oneshot("sleep 30", Duration::from_millis(300)).unwrap();
    assert!(r.timed_out);
    assert_eq!(r.exit_status, -1);
}

#[test]
fn failed_pull_is_a_provisioning_error() {
    let engine = FakeEngine::start();
    let err = engine.backend().provision(&ContainerSpec::new("missing", "/")).err().unwrap();
    assert!(matches!(err, BackendError::Provision(ref m) if m.contains("manifest unknown")), "{err}");
}

#[test]
fn shell_session_over_hijacked_stream() {
    let engine = FakeEngine::start();
    let work = tempfile::tempdir().unwrap();
    let c = engine.backend().provision(&spec_in(work.path())).unwrap();
    c.exec("cd / && Y=7", T).unwrap();
    assert_eq!(c.exec("pwd; echo $Y", T).unwrap().stdout_text(), "/\n7\n");
    let r = c.exec("sleep 30", Duration::from_millis(500)).unwrap();
    assert!(r.timed_out);
    assert_eq!(c.exec("echo fresh", T).unwrap().stdout_text(), "fresh\n");
}

#[test]
fn archive_and_hash() {
    let engine = FakeEngine::start();
    let work = tempfile::tempdir().unwrap();
    let c = engine.backend().provision(&spec_in(work.path())).unwrap();
    let file = work.path().join("a/b.txt");
    let path = file.to_str().unwrap();
    c.write_file(path, b"abc", 0o640).unwrap();
    assert_eq!(std::fs::read(&file).unwrap(), b"abc");
    use std::os::unix::fs::PermissionsExt;
    assert_eq!(std::fs::metadata(&file).unwrap().permissions().mode() & 0o777, 0o640);
    assert_eq!(c.read_file(path).unwrap().unwrap(), b"abc");
    assert_eq!(c.read_file(&format!("{path}.missing")).unwrap(), None);
    assert_eq!(c.hash_file(path).unwrap().as_deref(), Some("900150983cd24fb0d6963f7d28e17f72"));
    assert_eq!(c.hash_file(&format!("{path}.missing")).unwrap(), None);
    let dir = work.path().join("a");
    assert!(matches!(c.hash_file(dir.to_str().unwrap()), Err(BackendError::IsDirectory(_))));
    assert!(matches!(c.read_file(dir.to_str().unwrap()), Err(BackendError::IsDirectory(_))));
}

#[test]
fn init_failure_removes_container() {
    let engine = FakeEngine::start();
    let work = tempfile::tempdir().unwrap();
    let backend = engine.backend();
    let mut spec = spec_in(work.path());
    spec.init_script = vec!["exit 4".into()];
    assert!(matches!(backend.provision(&spec), Err(BackendError::InitFailed { status: 4, .. })));
    assert!(backend.list().unwrap().is_empty());
}

#[test]
fn remove_and_list() {
    let engine = FakeEngine::start();
    let work = tempfile::tempdir().unwrap();
    let backend = engine.backend();
    let a = backend.provision(&spec_in(work.path())).unwrap();
    let _b = backend.provision(&spec_in(work.path())).unwrap();
    assert_eq!(backend.list().unwrap().len(), 2);
    a.remove().unwrap();
    a.remove().unwrap();
    assert_eq!(backend.list().unwrap().len(), 1);
    assert_eq!(backend.remove_stray().unwrap(), 1);
    assert!(backend.list().unwrap().is_empty());
}
