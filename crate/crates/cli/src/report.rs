//! Machine-readable run reports as canonical JSON.

use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Command name, input digests, parameters, results and tool version.
#[derive(Debug, Clone)]
pub struct Report {
    command: String,
    inputs: Map<String, Value>,
    params: Map<String, Value>,
    results: Map<String, Value>,
}

impl Report {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            inputs: Map::new(),
            params: Map::new(),
            results: Map::new(),
        }
    }

    /// Records the SHA-256 of an input under a stable role name.
    pub fn input(&mut self, role: impl Into<String>, bytes: &[u8]) {
        self.inputs.insert(role.into(), Value::String(sha256_hex(bytes)));
    }

    pub fn param(&mut self, key: &str, v: impl Into<Value>) {
        self.params.insert(key.to_string(), v.into());
    }

    pub fn result(&mut self, key: &str, v: impl Into<Value>) {
        self.results.insert(key.to_string(), v.into());
    }

    pub fn to_value(&self) -> Value {
        let mut root = Map::new();
        root.insert("command".into(), Value::String(self.command.clone()));
        root.insert("inputs".into(), Value::Object(self.inputs.clone()));
        root.insert("params".into(), Value::Object(self.params.clone()));
        root.insert("results".into(), Value::Object(self.results.clone()));
        root.insert("version".into(), Value::String(VERSION.into()));
        canonical(&Value::Object(root))
    }

    /// Pretty JSON with sorted keys and a trailing newline.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_value()).expect("values are serializable") + "\n"
    }
}

/// Rebuilds every object with its keys in sorted order.
pub fn canonical(v: &Value) -> Value {
    match v {
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            let mut out = Map::new();
            for k in keys {
                out.insert(k.clone(), canonical(&m[k]));
            }
            Value::Object(out)
        }
        Value::Array(a) => Value::Array(a.iter().map(canonical).collect()),
        other => other.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_come_out_sorted() {
        let mut r = Report::new("x");
        r.result("zeta", 1.0);
        r.result("alpha", serde_json::json!({"b": 1, "a": 2}));
        let s = r.to_json();
        assert!(s.find("\"alpha\"").unwrap() < s.find("\"zeta\"").unwrap());
        assert!(s.find("\"a\"").unwrap() < s.find("\"b\"").unwrap());
        assert!(s.find("\"command\"").unwrap() < s.find("\"version\"").unwrap());
    }

    #[test]
    fn digest_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
