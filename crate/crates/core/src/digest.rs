//! Content digests used for audit trails and cache validation.

use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

/// Digest of a value's canonical JSON form.
///
/// Objects are serialized through `serde_json::Value`, whose maps are
/// key-sorted, so the digest does not depend on field order.
pub fn canonical_digest<T: Serialize>(value: &T) -> String {
    let value = serde_json::to_value(value).expect("serializable value");
    sha256_hex(serde_json::to_string(&value).expect("json value"))
}

pub fn short(digest: &str) -> &str {
    &digest[..digest.len().min(16)]
}
