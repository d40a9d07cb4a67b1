//! Small shared helpers: content digests and seeded RNG construction.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over a byte slice. 64-bit variant.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Incremental FNV-1a hasher for streaming input.
pub struct Fnv1a(u64);

impl Fnv1a {
    pub fn new() -> Self {
        Fnv1a(FNV_OFFSET)
    }

    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}

/// Digest rendered the way run logs and provenance records store it.
pub fn digest_hex(bytes: &[u8]) -> String {
    format!("{:016x}", fnv1a64(bytes))
}

/// Digest of a file's contents, streamed.
pub fn digest_file(path: &Path) -> std::io::Result<String> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut hasher = Fnv1a::new();
    let mut buf = [0u8; 8192];
    loop {
        let n = reader.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:016x}", hasher.finish()))
}

/// Totally ordered f64 for use as a heap or BTree key. Event times are
/// finite, so total_cmp's NaN ordering never matters in practice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tf(pub f64);

impl Eq for Tf {}

impl PartialOrd for Tf {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Tf {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// RNG used everywhere randomness is called for. Same seed, same stream.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream from a base seed and a label, so that
/// unrelated consumers of one run seed do not share a sequence.
pub fn derived_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let mut h = Fnv1a::new();
    h.update(&seed.to_le_bytes());
    h.update(label.as_bytes());
    ChaCha8Rng::seed_from_u64(h.finish())
}
