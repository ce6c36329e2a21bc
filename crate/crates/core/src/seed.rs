use sha2::{Digest, Sha256};

/// Derives an independent 64-bit seed from a master seed and a label.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Seed for the `(i, j)` pair of a pipeline run.
pub fn pair_seed(master: u64, i: usize, j: usize) -> u64 {
    derive_seed(master, &format!("pair/{i}/{j}"))
}
