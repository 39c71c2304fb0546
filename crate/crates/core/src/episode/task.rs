use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// One dataset record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: String,
    pub query: String,
    pub gold: String,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    pub extras: Map<String, Value>,
}

impl TaskInstance {
    pub fn new(id: impl Into<String>, query: impl Into<String>, gold: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            query: query.into(),
            gold: gold.into(),
            extras: Map::new(),
        }
    }

    pub fn with_extra(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.extras.insert(key.to_string(), value.into());
        self
    }

    pub fn extra_str(&self, key: &str) -> Option<&str> {
        self.extras.get(key).and_then(Value::as_str)
    }

    /// String form of an extra, stringifying numbers (`fs: 2` reads as `"2"`).
    pub fn extra_string(&self, key: &str) -> Option<String> {
        match self.extras.get(key)? {
            Value::String(s) => Some(s.clone()),
            Value::Null => None,
            v => Some(v.to_string()),
        }
    }

    pub fn extra_list(&self, key: &str) -> Vec<String> {
        match self.extras.get(key) {
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| v.as_str().map(str::to_string).unwrap_or_else(|| v.to_string()))
                .collect(),
            Some(Value::String(s)) => vec![s.clone()],
            _ => Vec::new(),
        }
    }
}
