//! Engine HTTP API client over a unix socket or TCP.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::os::unix::net::UnixStream;
use std::path::PathBuf;
use std::time::Duration;

use serde_json::{json, Value};

use super::super::BackendError;
use crate::http;

const API_PREFIX: &str = "/v1.41";
const BODY_LIMIT: usize = 64 << 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Unix(PathBuf),
    Tcp(String),
}

impl Endpoint {
    /// Parse `unix:///path` or `tcp://host:port`.
    pub fn parse(s: &str) -> Result<Self, BackendError> {
        if let Some(path) = s.strip_prefix("unix://") {
            Ok(Endpoint::Unix(PathBuf::from(path)))
        } else if let Some(addr) = s.strip_prefix("tcp://").or_else(|| s.strip_prefix("http://")) {
            Ok(Endpoint::Tcp(addr.trim_end_matches('/').to_string()))
        } else if s.starts_with('/') {
            Ok(Endpoint::Unix(PathBuf::from(s)))
        } else {
            Err(BackendError::Provision(format!("unsupported engine endpoint {s:?}")))
        }
    }

    /// `DOCKER_HOST`, falling back to the default socket.
    pub fn from_env() -> Result<Self, BackendError> {
        match std::env::var("DOCKER_HOST") {
            Ok(v) if !v.is_empty() => Self::parse(&v),
            _ => Ok(Endpoint::Unix(PathBuf::from("/var/run/docker.sock"))),
        }
    }

    fn host_header(&self) -> &str {
        match self {
            Endpoint::Unix(_) => "localhost",
            Endpoint::Tcp(a) => a,
        }
    }
}

impl std::fmt::Display for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Endpoint::Unix(p) => write!(f, "unix://{}", p.display()),
            Endpoint::Tcp(a) => write!(f, "tcp://{a}"),
        }
    }
}

#[derive(Debug)]
pub enum Conn {
    Unix(UnixStream),
    Tcp(TcpStream),
}

impl Conn {
    pub fn try_clone(&self) -> io::Result<Conn> {
        Ok(match self {
            Conn::Unix(s) => Conn::Unix(s.try_clone()?),
            Conn::Tcp(s) => Conn::Tcp(s.try_clone()?),
        })
    }

    pub fn set_read_timeout(&self, t: Option<Duration>) -> io::Result<()> {
        match self {
            Conn::Unix(s) => s.set_read_timeout(t),
            Conn::Tcp(s) => s.set_read_timeout(t),
        }
    }

    pub fn shutdown(&self) {
        let _ = match self {
            Conn::Unix(s) => s.shutdown(std::net::Shutdown::Both),
            Conn::Tcp(s) => s.shutdown(std::net::Shutdown::Both),
        };
    }
}

impl Read for Conn {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        match self {
            Conn::Unix(s) => s.read(buf),
            Conn::Tcp(s) => s.read(buf),
        }
    }
}

impl Write for Conn {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        match self {
            Conn::Unix(s) => s.write(buf),
            Conn::Tcp(s) => s.write(buf),
        }
    }

    fn flush(&mut self) -> io::Result<()> {
        match self {
            Conn::Unix(s) => s.flush(),
            Conn::Tcp(s) => s.flush(),
        }
    }
}

pub struct Response {
    pub status: u16,
    pub body: Vec<u8>,
}

impl Response {
    pub fn json(&self) -> Result<Value, BackendError> {
        serde_json::from_slice(&self.body)
            .map_err(|e| BackendError::Protocol(format!("engine sent invalid JSON: {e}")))
    }

    fn error_message(&self) -> String {
        self.json()
            .ok()
            .and_then(|v| v.get("message").and_then(Value::as_str).map(str::to_string))
            .unwrap_or_else(|| String::from_utf8_lossy(&self.body).trim().to_string())
    }

    pub fn into_result(self) -> Result<Response, BackendError> {
        if (200..300).contains(&self.status) {
            Ok(self)
        } else {
            Err(BackendError::Api {
                status: self.status,
                message: self.error_message(),
            })
        }
    }
}

/// Exit status and timing recovered from a finished exec.
#[derive(Debug, Clone, Copy)]
pub struct ExecState {
    pub running: bool,
    pub exit_code: Option<i64>,
    pub pid: Option<u32>,
}

#[derive(Debug, Clone)]
pub struct DockerClient {
    endpoint: Endpoint,
    timeout: Duration,
}

impl DockerClient {
    pub fn new(endpoint: Endpoint) -> Self {
        Self {
            endpoint,
            timeout: Duration::from_secs(300),
        }
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    pub fn connect(&self) -> Result<Conn, BackendError> {
        let unreachable = |source| BackendError::Unreachable {
            endpoint: self.endpoint.to_string(),
            source,
        };
        let conn = match &self.endpoint {
            Endpoint::Unix(p) => Conn::Unix(UnixStream::connect(p).map_err(unreachable)?),
            Endpoint::Tcp(a) => {
                let s = TcpStream::connect(a).map_err(unreachable)?;
                let _ = s.set_nodelay(true);
                Conn::Tcp(s)
            }
        };
        conn.set_read_timeout(Some(self.timeout))?;
        Ok(conn)
    }

    fn send(&self, conn: &mut Conn, method: &str, path: &str, body: Option<(&str, &[u8])>, upgrade: bool) -> Result<(), BackendError> {
        let target = format!("{API_PREFIX}{path}");
        let headers: &[(&str, &str)] = if upgrade {
            &[("Connection", "Upgrade"), ("Upgrade", "tcp")]
        } else {
            &[("Connection", "close")]
        };
        http::write_request(conn, method, &target, self.endpoint.host_header(), headers, body)?;
        Ok(())
    }

    pub fn request(&self, method: &str, path: &str, body: Option<&Value>) -> Result<Response, BackendError> {
        let bytes = body.map(|b| serde_json::to_vec(b).expect("JSON value serializes"));
        self.request_raw(method, path, bytes.as_deref().map(|b| ("application/json", b)))
    }

    pub fn request_raw(&self, method: &str, path: &str, body: Option<(&str, &[u8])>) -> Result<Response, BackendError> {
        let mut conn = self.connect()?;
        self.send(&mut conn, method, path, body, false)?;
        let mut r = BufReader::new(conn);
        let head = http::read_head(&mut r)?
            .ok_or_else(|| BackendError::Protocol("engine closed the connection without a response".into()))?;
        let status = head.status()?;
        let body = http::read_body(&mut r, &head, BODY_LIMIT, true)?;
        Ok(Response { status, body })
    }

    pub fn ping(&self) -> Result<(), BackendError> {
        self.request("GET", "/_ping", None)?.into_result().map(|_| ())
    }

    pub fn pull(&self, image: &str) -> Result<(), BackendError> {
        let (name, tag) = split_image(image);
        let path = format!(
            "/images/create?fromImage={}&tag={}",
            http::encode_component(name),
            http::encode_component(tag)
        );
        let resp = self.request("POST", &path, None)?.into_result()?;
        // progress stream; errors arrive inline
        for line in resp.body.split(|b| *b == b'\n') {
            if let Ok(v) = serde_json::from_slice::<Value>(line) {
                if let Some(msg) = v.get("error").and_then(Value::as_str) {
                    return Err(BackendError::Provision(format!("pull {image}: {msg}")));
                }
            }
        }
        Ok(())
    }

    pub fn create_container(&self, config: &Value, image: &str) -> Result<String, BackendError> {
        let mut resp = self.request("POST", "/containers/create", Some(config))?;
        if resp.status == 404 {
            log::info!("image {image} not present, pulling");
            self.pull(image)?;
            resp = self.request("POST", "/containers/create", Some(config))?;
        }
        let v = resp.into_result()?.json()?;
        v.get("Id")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| BackendError::Protocol("create response lacks Id".into()))
    }

    pub fn start(&self, id: &str) -> Result<(), BackendError> {
        let resp = self.request("POST", &format!("/containers/{id}/start"), None)?;
        // 304: already started
        if resp.status == 304 {
            return Ok(());
        }
        resp.into_result().map(|_| ())
    }

    pub fn inspect(&self, id: &str) -> Result<Value, BackendError> {
        self.request("GET", &format!("/containers/{id}/json"), None)?.into_result()?.json()
    }

    pub fn remove(&self, id: &str) -> Result<(), BackendError> {
        let resp = self.request("DELETE", &format!("/containers/{id}?force=true&v=true"), None)?;
        if resp.status == 404 {
            return Ok(());
        }
        resp.into_result().map(|_| ())
    }

    pub fn list_by_label(&self, label: &str) -> Result<Vec<String>, BackendError> {
        let filters = json!({ "label": [label] }).to_string();
        let path = format!("/containers/json?all=true&filters={}", http::encode_component(&filters));
        let v = self.request("GET", &path, None)?.into_result()?.json()?;
        Ok(v.as_array()
            .map(|a| a.iter().filter_map(|c| c.get("Id").and_then(Value::as_str).map(str::to_string)).collect())
            .unwrap_or_default())
    }

    pub fn exec_create(&self, id: &str, argv: &[String], stdin: bool, workdir: &str, env: &[String]) -> Result<String, BackendError> {
        let config = json!({
            "AttachStdin": stdin,
            "AttachStdout": true,
            "AttachStderr": true,
            "Tty": false,
            "Cmd": argv,
            "WorkingDir": workdir,
            "Env": env,
        });
        let v = self.request("POST", &format!("/containers/{id}/exec"), Some(&config))?.into_result()?.json()?;
        v.get("Id")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| BackendError::Protocol("exec create response lacks Id".into()))
    }

    /// Start an exec and return the connection positioned at the first byte
    /// of the multiplexed output, plus whether that output is chunk-encoded.
    pub fn exec_start(&self, exec_id: &str, upgrade: bool) -> Result<(BufReader<Conn>, bool), BackendError> {
        let mut conn = self.connect()?;
        let body = serde_json::to_vec(&json!({ "Detach": false, "Tty": false })).expect("static JSON");
        self.send(&mut conn, "POST", &format!("/exec/{exec_id}/start"), Some(("application/json", &body)), upgrade)?;
        let mut r = BufReader::new(conn);
        let head = http::read_head(&mut r)?
            .ok_or_else(|| BackendError::Protocol("engine closed the connection on exec start".into()))?;
        let status = head.status()?;
        if !(status == 101 || (200..300).contains(&status)) {
            let body = http::read_body(&mut r, &head, BODY_LIMIT, true)?;
            return Err(Response { status, body }.into_result().err().expect("non-2xx is an error"));
        }
        Ok((r, head.is_chunked()))
    }

    pub fn exec_inspect(&self, exec_id: &str) -> Result<ExecState, BackendError> {
        let v = self.request("GET", &format!("/exec/{exec_id}/json"), None)?.into_result()?.json()?;
        Ok(ExecState {
            running: v.get("Running").and_then(Value::as_bool).unwrap_or(false),
            exit_code: v.get("ExitCode").and_then(Value::as_i64),
            pid: v.get("Pid").and_then(Value::as_u64).and_then(|p| u32::try_from(p).ok()).filter(|p| *p > 0),
        })
    }

    pub fn put_archive(&self, id: &str, dir: &str, tar: &[u8]) -> Result<(), BackendError> {
        let path = format!("/containers/{id}/archive?path={}", http::encode_component(dir));
        self.request_raw("PUT", &path, Some(("application/x-tar", tar)))?.into_result().map(|_| ())
    }

    /// Tar of `path`, or `None` when it does not exist.
    pub fn get_archive(&self, id: &str, path: &str) -> Result<Option<Vec<u8>>, BackendError> {
        let p = format!("/containers/{id}/archive?path={}", http::encode_component(path));
        let resp = self.request("GET", &p, None)?;
        if resp.status == 404 {
            return Ok(None);
        }
        Ok(Some(resp.into_result()?.body))
    }
}

fn split_image(image: &str) -> (&str, &str) {
    if image.contains('@') {
        return (image, "");
    }
    match image.rsplit_once(':') {
        Some((name, tag)) if !tag.contains('/') => (name, tag),
        _ => (image, "latest"),
    }
}

/// Reader that undoes HTTP chunked framing on a streamed body.
pub struct ChunkedReader<R> {
    inner: R,
    remaining: usize,
    done: bool,
}

impl<R: BufRead> ChunkedReader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner, remaining: 0, done: false }
    }
}

impl<R: BufRead> Read for ChunkedReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        if self.done || buf.is_empty() {
            return Ok(0);
        }
        if self.remaining == 0 {
            let mut line = String::new();
            if self.inner.read_line(&mut line)? == 0 {
                self.done = true;
                return Ok(0);
            }
            if line.trim().is_empty() {
                // CRLF closing the previous chunk
                line.clear();
                if self.inner.read_line(&mut line)? == 0 {
                    self.done = true;
                    return Ok(0);
                }
            }
            let size_str = line.trim().split(';').next().unwrap_or("");
            let size = usize::from_str_radix(size_str, 16)
                .map_err(|_| io::Error::new(io::ErrorKind::InvalidData, format!("bad chunk size {size_str:?}")))?;
            if size == 0 {
                self.done = true;
                return Ok(0);
            }
            self.remaining = size;
        }
        let n = buf.len().min(self.remaining);
        let n = self.inner.read(&mut buf[..n])?;
        if n == 0 {
            self.done = true;
        }
        self.remaining -= n;
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        assert_eq!(
            Endpoint::parse("unix:///var/run/docker.sock").unwrap(),
            Endpoint::Unix("/var/run/docker.sock".into())
        );
        assert_eq!(Endpoint::parse("tcp://10.0.0.2:2375").unwrap(), Endpoint::Tcp("10.0.0.2:2375".into()));
        assert!(Endpoint::parse("ssh://box").is_err());
    }

    #[test]
    fn image_names() {
        assert_eq!(split_image("ubuntu"), ("ubuntu", "latest"));
        assert_eq!(split_image("mysql:8.0"), ("mysql", "8.0"));
        assert_eq!(split_image("localhost:5000/img"), ("localhost:5000/img", "latest"));
        assert_eq!(split_image("reg:5000/img:v1"), ("reg:5000/img", "v1"));
    }

    #[test]
    fn chunked_stream() {
        let raw = b"3\r\nabc\r\n2\r\nde\r\n0\r\n\r\n";
        let mut out = Vec::new();
        ChunkedReader::new(&raw[..]).read_to_end(&mut out).unwrap();
        assert_eq!(out, b"abcde");
    }
}
