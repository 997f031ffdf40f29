//! Seeded, deterministic hashing.
//!
//! One fixed non-cryptographic 64-bit mixer backs every hash structure in
//! the pipeline (heavy-filter slots, counter rows, Bloom bits, count-sketch
//! signs). Each structure gets its own seed namespace derived from the
//! single master seed, so runs are bit-reproducible and structures are
//! pairwise independent.
//!
//! Every [`HashFamily`] counts its invocations; the data plane uses that to
//! assert its per-update hash-work bound.

use std::sync::atomic::{AtomicU64, Ordering};

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// splitmix64 finalizer: full-avalanche 64-bit mixer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hash a byte string under `seed`: absorb little-endian 8-byte chunks
/// (zero-padded tail) through the mixer. Length is folded in up front so
/// prefixes do not collide trivially.
#[inline]
pub fn hash_bytes(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = mix64(seed ^ GOLDEN ^ (bytes.len() as u64));
    for chunk in bytes.chunks(8) {
        let mut buf = [0u8; 8];
        buf[..chunk.len()].copy_from_slice(chunk);
        h = mix64(h ^ u64::from_le_bytes(buf));
    }
    h
}

/// Derive an independent seed from `(master, namespace, index)`.
pub fn derive_seed(master: u64, namespace: &str, index: u64) -> u64 {
    mix64(hash_bytes(master, namespace.as_bytes()) ^ mix64(index.wrapping_add(GOLDEN)))
}

/// A single seeded hash function with an invocation counter.
#[derive(Debug)]
pub struct HashFamily {
    seed: u64,
    calls: AtomicU64,
}

impl HashFamily {
    pub fn new(seed: u64) -> Self {
        HashFamily { seed, calls: AtomicU64::new(0) }
    }

    #[inline]
    pub fn hash(&self, key: &[u8]) -> u64 {
        self.calls.fetch_add(1, Ordering::Relaxed);
        hash_bytes(self.seed, key)
    }

    /// Hash reduced modulo `range`. `range` must be nonzero.
    #[inline]
    pub fn bucket(&self, key: &[u8], range: u64) -> u64 {
        debug_assert!(range > 0, "bucket range must be nonzero");
        self.hash(key) % range
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Total hash invocations so far (instrumentation).
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl Clone for HashFamily {
    fn clone(&self) -> Self {
        HashFamily { seed: self.seed, calls: AtomicU64::new(self.calls()) }
    }
}

/// All seed namespaces the pipeline derives from one master seed.
#[derive(Debug, Clone)]
pub struct Seeds {
    /// Heavy-filter slot hash.
    pub hf: u64,
    /// One per counter row.
    pub rows: Vec<u64>,
    /// One per Bloom-filter hash.
    pub bloom: Vec<u64>,
    /// One per counter row, for count-sketch ±1 signs.
    pub signs: Vec<u64>,
}

impl Seeds {
    pub fn derive(master: u64, depth: usize, bloom_hashes: usize) -> Self {
        Seeds {
            hf: derive_seed(master, "hf", 0),
            rows: (0..depth).map(|j| derive_seed(master, "row", j as u64)).collect(),
            bloom: (0..bloom_hashes).map(|j| derive_seed(master, "bloom", j as u64)).collect(),
            signs: (0..depth).map(|j| derive_seed(master, "sign", j as u64)).collect(),
        }
    }
}

/// ±1 sign for count-sketch: one hash bit under the row's sign seed.
#[inline]
pub fn sign_of(seed: u64, key: &[u8]) -> i64 {
    if hash_bytes(seed, key) & 1 == 0 {
        1
    } else {
        -1
    }
}
