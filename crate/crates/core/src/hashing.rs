use serde::Serialize;
use sha2::{Digest, Sha256};

/// Hex SHA-256 of a value's compact JSON serialization.
pub fn hash_json<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("in-memory serialization cannot fail");
    sha256_hex(&bytes)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
