//! Versioned JSON envelopes shared by every artifact this crate writes.
//!
//! Each file is a single JSON object `{"format_version": N, "kind": "...", "payload": ...}`,
//! optionally with a `config_digest` naming the experiment configuration that produced it.
//! The version is checked before the payload is decoded so that files from a
//! newer build report a version mismatch instead of a confusing decode error.

use std::fs;
use std::io::ErrorKind;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const FORMAT_VERSION: u64 = 1;

#[derive(Serialize)]
struct EnvelopeOut<'a, T> {
    format_version: u64,
    kind: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    config_digest: Option<&'a str>,
    payload: &'a T,
}

#[derive(Deserialize)]
struct EnvelopeIn {
    format_version: u64,
    kind: String,
    payload: serde_json::Value,
}

/// Serializes `value` inside a versioned envelope.
pub fn to_versioned_json<T: Serialize>(kind: &str, value: &T) -> Result<String> {
    to_versioned_json_with_digest(kind, value, None)
}

pub fn to_versioned_json_with_digest<T: Serialize>(kind: &str, value: &T, config_digest: Option<&str>) -> Result<String> {
    let env = EnvelopeOut {
        format_version: FORMAT_VERSION,
        kind,
        config_digest,
        payload: value,
    };
    serde_json::to_string_pretty(&env).map_err(|e| Error::contract(format!("serialize {kind}: {e}")))
}

pub fn save_versioned<T: Serialize>(path: &Path, kind: &str, value: &T) -> Result<()> {
    save_versioned_with_digest(path, kind, value, None)
}

pub fn save_versioned_with_digest<T: Serialize>(
    path: &Path,
    kind: &str,
    value: &T,
    config_digest: Option<&str>,
) -> Result<()> {
    let text = to_versioned_json_with_digest(kind, value, config_digest)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn from_versioned_json<T: DeserializeOwned>(path: &Path, kind: &str, text: &str) -> Result<T> {
    let malformed = |reason: String| Error::Malformed {
        path: path.to_path_buf(),
        reason,
    };
    let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
    // Look at the version first; a future payload shape must not be reported as corruption.
    if let Some(v) = raw.get("format_version").and_then(|v| v.as_u64()) {
        if v != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: v,
                expected: FORMAT_VERSION,
            });
        }
    }
    let env: EnvelopeIn = serde_json::from_value(raw).map_err(|e| malformed(e.to_string()))?;
    if env.kind != kind {
        return Err(malformed(format!("expected a `{kind}` file, found `{}`", env.kind)));
    }
    debug_assert_eq!(env.format_version, FORMAT_VERSION);
    serde_json::from_value(env.payload).map_err(|e| malformed(e.to_string()))
}

pub fn load_versioned<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let text = read_to_string(path)?;
    from_versioned_json(path, kind, &text)
}

pub(crate) fn read_to_string(path: &Path) -> Result<String> {
    match fs::read_to_string(path) {
        Ok(s) => Ok(s),
        Err(e) if e.kind() == ErrorKind::NotFound => Err(Error::NotFound(path.to_path_buf())),
        Err(e) => Err(e.into()),
    }
}

/// Hex-encoded SHA-256 of `bytes`.
pub fn digest_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrong_kind_is_malformed() {
        let text = to_versioned_json("catalog", &vec![1, 2, 3]).unwrap();
        let err = from_versioned_json::<Vec<u32>>(Path::new("x"), "workload", &text).unwrap_err();
        assert!(matches!(err, Error::Malformed { .. }), "{err}");
    }

    #[test]
    fn future_version_wins_over_payload_shape() {
        let text = r#"{"format_version": 99, "kind": "catalog", "payload": "something new"}"#;
        let err = from_versioned_json::<Vec<u32>>(Path::new("x"), "catalog", text).unwrap_err();
        assert!(matches!(err, Error::VersionMismatch { found: 99, .. }));
    }

    #[test]
    fn digest_is_carried_but_not_required() {
        let text = to_versioned_json_with_digest("catalog", &vec![4u32], Some("abc")).unwrap();
        let raw: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(raw["config_digest"], "abc");
        let back: Vec<u32> = from_versioned_json(Path::new("x"), "catalog", &text).unwrap();
        assert_eq!(back, vec![4]);
        assert!(!to_versioned_json("catalog", &back).unwrap().contains("config_digest"));
    }
}
