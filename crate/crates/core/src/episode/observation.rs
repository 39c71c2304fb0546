use serde::{Deserialize, Serialize};

pub const DEFAULT_TRUNCATION_CAP: usize = 1000;
pub const TRUNCATION_MARKER: &str = "[... output truncated ...]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    #[default]
    None,
    ExecError,
    Timeout,
    ProtocolError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Observation {
    pub text: String,
    pub truncated: bool,
    pub exit_status: Option<i64>,
    pub error_class: ErrorClass,
}

impl Observation {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            ..Self::default()
        }
    }
}

/// Keep at most `cap` whitespace-delimited tokens of `raw`.
///
/// Text within the cap is returned byte for byte. Longer text is cut right
/// after the `cap`-th token and followed by a newline and
/// [`TRUNCATION_MARKER`]; the marker is not counted against the cap.
pub fn truncate_observation(raw: &str, cap: usize) -> Observation {
    let cap = cap.max(1);
    let mut seen = 0usize;
    let mut in_token = false;
    let mut end = raw.len();
    for (i, ch) in raw.char_indices() {
        if ch.is_whitespace() {
            if in_token {
                in_token = false;
                if seen == cap {
                    end = i;
                }
            }
        } else if !in_token {
            // a token past the cap: cut after the last kept one
            if seen == cap {
                return Observation {
                    text: format!("{}\n{TRUNCATION_MARKER}", &raw[..end]),
                    truncated: true,
                    ..Observation::default()
                };
            }
            in_token = true;
            seen += 1;
        }
    }
    Observation::text(raw)
}

/// Whitespace-token count used by the cap.
pub fn count_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}
