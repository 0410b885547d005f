use serde::Serialize;
use sha2::{Digest, Sha256};

/// Stable short hash of a value's canonical JSON encoding.
pub fn digest_json<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("digest input serializes");
    digest_bytes(&bytes)
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of a float vector by its exact bit patterns.
pub fn digest_f64(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    digest_bytes(&bytes)
}

/// Derives an independent sub-seed from a base seed and a label.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}
