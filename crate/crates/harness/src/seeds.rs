//! Sub-seed derivation: `seed = first 8 bytes (LE) of sha256(master_le || tag)`.

use sha2::{Digest, Sha256};

pub const INIT: &str = "init";
pub const SHUFFLE: &str = "shuffle";
pub const STREAM: &str = "stream";
pub const TRAIN_DATA: &str = "data-train";
pub const TEST_DATA: &str = "data-test";
pub const EVAL_SUBSET: &str = "eval-subset";
pub const PROBE: &str = "probe";

pub const ROLES: [&str; 7] = [INIT, SHUFFLE, STREAM, TRAIN_DATA, TEST_DATA, EVAL_SUBSET, PROBE];

pub fn derive(master: u64, role: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(role.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
