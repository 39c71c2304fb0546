//! Wire format: one JSON object per line.
//!
//! ```text
//! → {"v": "1.0", "id": 7, "op": "step", "session_id": "9f…", "params": {"kind": "code", "payload": "ls"}}
//! ← {"v": "1.0", "id": 7, "ok": true, "session_id": "9f…", "result": {"observation": …, "reward": null, "done": false, "info": …}}
//! ← {"v": "1.0", "id": 7, "ok": false, "error": {"code": "session_not_found", "message": "…"}}
//! ```
//!
//! Unknown fields are ignored. A request whose major version differs from
//! [`PROTOCOL_MAJOR`] is rejected.

use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const PROTOCOL_VERSION: &str = "1.0";
pub const PROTOCOL_MAJOR: u64 = 1;
/// Longest accepted request line.
pub const MAX_LINE: usize = 16 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Create,
    Reset,
    Step,
    Close,
    Info,
}

impl Op {
    pub const ALL: [Op; 5] = [Op::Create, Op::Reset, Op::Step, Op::Close, Op::Info];

    pub fn as_str(self) -> &'static str {
        match self {
            Op::Create => "create",
            Op::Reset => "reset",
            Op::Step => "step",
            Op::Close => "close",
            Op::Info => "info",
        }
    }
}

impl FromStr for Op {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        Self::ALL.into_iter().find(|o| o.as_str() == s).ok_or(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub v: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<Value>,
    pub op: Op,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    pub params: Map<String, Value>,
}

impl Request {
    pub fn new(op: Op) -> Self {
        Self {
            v: PROTOCOL_VERSION.into(),
            id: None,
            op,
            session_id: None,
            params: Map::new(),
        }
    }

    pub fn session(mut self, id: impl Into<String>) -> Self {
        self.session_id = Some(id.into());
        self
    }

    pub fn param(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.params.insert(key.into(), value.into());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    /// Malformed frame or message.
    ProtocolError,
    UnsupportedVersion,
    UnknownOp,
    InvalidParams,
    SessionNotFound,
    SessionLimit,
    BoundsError,
    LifecycleError,
    PreprocessError,
    EvaluationError,
    InfrastructureError,
    InternalError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireError {
    pub code: ErrorCode,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub v: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<Value>,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<WireError>,
}

impl Response {
    pub fn ok(id: Option<Value>, session_id: Option<String>, result: Value) -> Self {
        Self {
            v: PROTOCOL_VERSION.into(),
            id,
            ok: true,
            session_id,
            result: Some(result),
            error: None,
        }
    }

    pub fn error(id: Option<Value>, code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            v: PROTOCOL_VERSION.into(),
            id,
            ok: false,
            session_id: None,
            result: None,
            error: Some(WireError {
                code,
                message: message.into(),
            }),
        }
    }
}

/// A request that could not be decoded, with whatever id could be salvaged.
#[derive(Debug, Clone, PartialEq)]
pub struct Fault {
    pub id: Option<Value>,
    pub code: ErrorCode,
    pub message: String,
}

impl Fault {
    pub fn into_response(self) -> Response {
        Response::error(self.id, self.code, self.message)
    }
}

fn major(v: &Value) -> Option<u64> {
    match v {
        Value::String(s) => s.split('.').next()?.trim().parse().ok(),
        Value::Number(n) => n.as_u64().or_else(|| n.as_f64().filter(|f| *f >= 0.0).map(|f| f as u64)),
        _ => None,
    }
}

/// Parse one line.
pub fn decode(line: &[u8]) -> Result<Request, Fault> {
    let fault = |id: Option<Value>, code, message: String| Fault { id, code, message };
    let value: Value =
        serde_json::from_slice(line).map_err(|e| fault(None, ErrorCode::ProtocolError, format!("malformed message: {e}")))?;
    let Value::Object(mut obj) = value else {
        return Err(fault(None, ErrorCode::ProtocolError, "message must be a JSON object".into()));
    };
    let id = obj.get("id").cloned();
    let version = obj
        .get("v")
        .ok_or_else(|| fault(id.clone(), ErrorCode::ProtocolError, "missing version field `v`".into()))?;
    match major(version) {
        Some(PROTOCOL_MAJOR) => {}
        Some(m) => {
            return Err(fault(
                id,
                ErrorCode::UnsupportedVersion,
                format!("protocol version {m} is not supported; this server speaks {PROTOCOL_VERSION}"),
            ))
        }
        None => return Err(fault(id, ErrorCode::ProtocolError, format!("unreadable version {version}"))),
    }
    let v = version.to_string().trim_matches('"').to_string();
    obj.insert("v".into(), Value::String(v));
    match obj.get("op").and_then(Value::as_str) {
        None => return Err(fault(id, ErrorCode::ProtocolError, "missing op".into())),
        Some(op) if Op::from_str(op).is_err() => {
            return Err(fault(id, ErrorCode::UnknownOp, format!("unknown op {op:?}")));
        }
        Some(_) => {}
    }
    if obj.get("params").is_some_and(Value::is_null) {
        obj.remove("params");
    }
    serde_json::from_value(Value::Object(obj)).map_err(|e| fault(id, ErrorCode::ProtocolError, format!("bad message: {e}")))
}

/// Serialize with the trailing newline.
pub fn encode<T: Serialize>(msg: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec(msg).expect("wire messages serialize");
    out.push(b'\n');
    out
}
