//! Minimal HTTP/1.1 message framing shared by the engine client and the
//! session service. Only what those two need: heads, content-length and
//! chunked bodies, read-to-EOF bodies.

use std::io::{self, BufRead, Read, Write};

const MAX_HEAD_BYTES: usize = 64 * 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Head {
    /// Status line or request line, without CRLF.
    pub start_line: String,
    pub headers: Vec<(String, String)>,
}

impl Head {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    /// Status code of a response head.
    pub fn status(&self) -> io::Result<u16> {
        self.start_line
            .split_whitespace()
            .nth(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(format!("malformed status line {:?}", self.start_line)))
    }

    /// `(method, target)` of a request head.
    pub fn request_target(&self) -> io::Result<(&str, &str)> {
        let mut parts = self.start_line.split_whitespace();
        match (parts.next(), parts.next(), parts.next()) {
            (Some(m), Some(t), Some(v)) if v.starts_with("HTTP/1.") => Ok((m, t)),
            _ => Err(bad(format!("malformed request line {:?}", self.start_line))),
        }
    }

    pub fn content_length(&self) -> io::Result<Option<usize>> {
        self.header("content-length")
            .map(|v| v.trim().parse().map_err(|_| bad("bad content-length")))
            .transpose()
    }

    pub fn is_chunked(&self) -> bool {
        self.header("transfer-encoding")
            .is_some_and(|v| v.to_ascii_lowercase().contains("chunked"))
    }
}

fn bad(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

/// Read a message head. Returns `Ok(None)` on a clean EOF before any byte.
pub fn read_head<R: BufRead>(r: &mut R) -> io::Result<Option<Head>> {
    let mut start_line = String::new();
    loop {
        start_line.clear();
        if r.read_line(&mut start_line)? == 0 {
            return Ok(None);
        }
        // tolerate stray blank lines between messages
        if !start_line.trim().is_empty() {
            break;
        }
    }
    let mut total = start_line.len();
    let mut headers = Vec::new();
    loop {
        let mut line = String::new();
        let n = r.read_line(&mut line)?;
        if n == 0 {
            return Err(bad("connection closed inside message head"));
        }
        total += n;
        if total > MAX_HEAD_BYTES {
            return Err(bad("message head too large"));
        }
        let line = line.trim_end_matches(['\r', '\n']);
        if line.is_empty() {
            break;
        }
        let (k, v) = line
            .split_once(':')
            .ok_or_else(|| bad(format!("malformed header {line:?}")))?;
        headers.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(Some(Head {
        start_line: start_line.trim_end_matches(['\r', '\n']).to_string(),
        headers,
    }))
}

/// Read the body that follows `head`. Without a length or chunking the body
/// runs to EOF when `to_eof` is set and is empty otherwise.
pub fn read_body<R: BufRead>(r: &mut R, head: &Head, limit: usize, to_eof: bool) -> io::Result<Vec<u8>> {
    if head.is_chunked() {
        return read_chunked(r, limit);
    }
    if let Some(len) = head.content_length()? {
        if len > limit {
            return Err(bad(format!("body of {len} bytes exceeds limit")));
        }
        let mut body = vec![0u8; len];
        r.read_exact(&mut body)?;
        return Ok(body);
    }
    let mut body = Vec::new();
    if to_eof {
        r.take(limit as u64 + 1).read_to_end(&mut body)?;
        if body.len() > limit {
            return Err(bad("body exceeds limit"));
        }
    }
    Ok(body)
}

fn read_chunked<R: BufRead>(r: &mut R, limit: usize) -> io::Result<Vec<u8>> {
    let mut body = Vec::new();
    loop {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(bad("connection closed inside chunked body"));
        }
        let size_str = line.trim().split(';').next().unwrap_or("");
        let size = usize::from_str_radix(size_str, 16).map_err(|_| bad(format!("bad chunk size {size_str:?}")))?;
        if size == 0 {
            // trailers
            loop {
                let mut t = String::new();
                if r.read_line(&mut t)? == 0 || t.trim().is_empty() {
                    return Ok(body);
                }
            }
        }
        if body.len() + size > limit {
            return Err(bad("chunked body exceeds limit"));
        }
        let start = body.len();
        body.resize(start + size, 0);
        r.read_exact(&mut body[start..])?;
        let mut crlf = [0u8; 2];
        r.read_exact(&mut crlf)?;
    }
}

pub fn write_request<W: Write>(
    w: &mut W,
    method: &str,
    target: &str,
    host: &str,
    extra_headers: &[(&str, &str)],
    body: Option<(&str, &[u8])>,
) -> io::Result<()> {
    let mut head = format!("{method} {target} HTTP/1.1\r\nHost: {host}\r\n");
    for (k, v) in extra_headers {
        head.push_str(&format!("{k}: {v}\r\n"));
    }
    match body {
        Some((content_type, bytes)) => {
            head.push_str(&format!("Content-Type: {content_type}\r\nContent-Length: {}\r\n\r\n", bytes.len()));
            w.write_all(head.as_bytes())?;
            w.write_all(bytes)?;
        }
        None => {
            head.push_str("Content-Length: 0\r\n\r\n");
            w.write_all(head.as_bytes())?;
        }
    }
    w.flush()
}

pub fn write_response<W: Write>(w: &mut W, status: u16, reason: &str, content_type: &str, body: &[u8]) -> io::Result<()> {
    let head = format!(
        "HTTP/1.1 {status} {reason}\r\nContent-Type: {content_type}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        body.len()
    );
    w.write_all(head.as_bytes())?;
    w.write_all(body)?;
    w.flush()
}

/// Percent-encode a query-string component.
pub fn encode_component(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        if b.is_ascii_alphanumeric() || b"-_.~".contains(&b) {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}
