//! Content hashes for parameter stores and byte payloads.

use panfuse_autograd::{ParamStore, Scalar};
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash over parameter names, shapes and exact values, in store order.
pub fn store_fingerprint<T: Scalar>(store: &ParamStore<T>) -> String {
    let mut h = Sha256::new();
    for (_, name, t) in store.iter() {
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &v in t.data() {
            h.update(v.as_f64().to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
