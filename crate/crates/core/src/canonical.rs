//! Canonical JSON and content digests.
//!
//! Canonical form is UTF-8 JSON with object keys sorted lexicographically and
//! no insignificant whitespace. `serde_json::Value` keeps objects in a
//! `BTreeMap`, so routing any serializable value through it yields the sorted
//! layout.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Serialize `value` to canonical JSON text.
pub fn to_canonical_json<T: Serialize + ?Sized>(value: &T) -> String {
    let tree = serde_json::to_value(value).expect("domain types always serialize to JSON");
    serde_json::to_string(&tree).expect("a JSON value always renders")
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 over the canonical JSON of `value`.
pub fn digest_of<T: Serialize + ?Sized>(value: &T) -> String {
    sha256_hex(to_canonical_json(value).as_bytes())
}

/// SHA-256 of a file's contents.
pub fn file_digest(path: &std::path::Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(sha256_hex(&bytes))
}
