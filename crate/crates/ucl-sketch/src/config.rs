//! Configuration: JSON files with `sketch` / `heavy_filter` / `bloom` /
//! `training` / `buckets` sections, named memory presets, validation, and
//! exact memory accounting.
//!
//! Unknown fields anywhere in the file are rejected — a typo must fail
//! loudly, not silently fall back to a default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::key::MAX_KEY_LEN;

/// Which side of the heavy-filter vote triggers an eviction.
///
/// * `prose` (default): the arriving key's accumulated votes caught up with
///   the resident (`new - old <= 0` after the vote) — the resident is flushed
///   to the sketch and replaced.
/// * `listing`: the inverted variant that swaps the two branch bodies,
///   evicting while the resident still leads. Kept selectable for
///   comparison; it breaks the "residents lead" invariant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EvictionRule {
    #[default]
    Prose,
    Listing,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SketchSection {
    /// Number of counter rows (d).
    pub depth: u16,
    /// Counters per row (w).
    pub width: u32,
    /// Fixed key width in bytes for this stream.
    #[serde(default = "default_key_len")]
    pub key_len: u8,
    /// Emit a counter snapshot every this many updates.
    #[serde(default = "default_sampling_interval")]
    pub sampling_interval: u64,
    #[serde(default)]
    pub eviction_rule: EvictionRule,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct HeavyFilterSection {
    /// Number of heavy-filter slots (s).
    pub slots: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BloomSection {
    /// Bit-array length (m_b).
    pub bits: u64,
    /// Hash functions (k_b).
    pub hashes: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    /// L1 sparsity weight in the training objective.
    pub lambda: f64,
    pub epochs: u32,
    /// Early-stop patience in epochs without total-loss improvement.
    pub patience: u32,
    pub batch_size: u32,
    /// Sliding window: how many recent snapshots the trainer keeps.
    pub window: u32,
    pub lr: f64,
    /// Fraction of non-hot keys bumped by one unit in each sampled
    /// transformation.
    pub cold_fraction: f64,
    /// Total hot increment per sampled transformation; defaults to the
    /// sketch's sampling interval when absent.
    pub transform_budget: Option<u64>,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            lambda: 0.1,
            epochs: 300,
            patience: 30,
            batch_size: 32,
            window: 128,
            lr: 0.001,
            cold_fraction: 0.05,
            transform_budget: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BucketSection {
    /// Logical bucket length L: the solver decodes keys in chunks of L.
    pub length: u32,
    /// Hidden width of the solver network.
    pub hidden: u32,
}

impl Default for BucketSection {
    fn default() -> Self {
        BucketSection { length: 512, hidden: 128 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    pub sketch: SketchSection,
    pub heavy_filter: HeavyFilterSection,
    pub bloom: BloomSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub buckets: BucketSection,
}

fn default_key_len() -> u8 {
    4
}

fn default_sampling_interval() -> u64 {
    1000
}

/// `(label, slots, depth, width)` for the named memory presets.
const PRESETS: &[(&str, u32, u16, u32)] = &[
    ("16KB", 500, 4, 512),
    ("32KB", 1500, 4, 512),
    ("48KB", 2000, 4, 1024),
    ("64KB", 3000, 4, 1024),
    ("80KB", 3500, 6, 1024),
    ("96KB", 4500, 6, 1024),
    ("112KB", 5500, 6, 1024),
    ("128KB", 6000, 8, 1024),
];

/// Smallest bit count (rounded up to a 64-bit block) keeping the Bloom
/// false-positive rate at or under `miss_rate` after `expected_keys`
/// insertions with `hashes` hash functions: solve
/// `(1 - e^(-hashes*K/m))^hashes <= miss_rate` for m.
pub fn bloom_bits_for_coverage(expected_keys: u64, hashes: u8, miss_rate: f64) -> u64 {
    assert!(hashes >= 1 && miss_rate > 0.0 && miss_rate < 1.0);
    let k = hashes as f64;
    let q_max = miss_rate.powf(1.0 / k);
    let m = k * expected_keys as f64 / -(1.0 - q_max).ln();
    (m.ceil() as u64).div_ceil(64) * 64
}

impl AppConfig {
    pub fn preset_names() -> Vec<&'static str> {
        PRESETS.iter().map(|p| p.0).collect()
    }

    /// A named preset: heavy-filter/sketch shape from the preset table, 8
    /// Bloom hashes, and a Bloom array sized to keep reported-key coverage
    /// above 99% at a nominal 40 distinct keys per heavy-filter slot.
    pub fn preset(name: &str) -> Result<Self> {
        let (_, slots, depth, width) = PRESETS
            .iter()
            .find(|p| p.0.eq_ignore_ascii_case(name))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown preset {name:?}; expected one of {}",
                    Self::preset_names().join(", ")
                ))
            })?;
        let hashes = 8u8;
        let cfg = AppConfig {
            sketch: SketchSection {
                depth: *depth,
                width: *width,
                key_len: default_key_len(),
                sampling_interval: default_sampling_interval(),
                eviction_rule: EvictionRule::default(),
            },
            heavy_filter: HeavyFilterSection { slots: *slots },
            bloom: BloomSection {
                bits: bloom_bits_for_coverage(40 * *slots as u64, hashes, 0.01),
                hashes,
            },
            training: TrainingSection::default(),
            buckets: BucketSection::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: AppConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.sketch.depth == 0 {
            return fail("sketch.depth must be >= 1".into());
        }
        if self.sketch.depth > 64 {
            return fail(format!("sketch.depth {} is unreasonably large (max 64)", self.sketch.depth));
        }
        if self.sketch.width == 0 {
            return fail("sketch.width must be >= 1".into());
        }
        if self.sketch.key_len == 0 || self.sketch.key_len as usize > MAX_KEY_LEN {
            return fail(format!("sketch.key_len must be 1..={MAX_KEY_LEN}"));
        }
        if self.sketch.sampling_interval == 0 {
            return fail("sketch.sampling_interval must be >= 1".into());
        }
        if self.heavy_filter.slots == 0 {
            return fail("heavy_filter.slots must be >= 1".into());
        }
        if self.bloom.bits < 8 {
            return fail("bloom.bits must be >= 8".into());
        }
        if self.bloom.hashes == 0 || self.bloom.hashes > 16 {
            return fail("bloom.hashes must be 1..=16".into());
        }
        let t = &self.training;
        if !(t.lambda.is_finite() && t.lambda >= 0.0) {
            return fail("training.lambda must be finite and >= 0".into());
        }
        if !(t.lr.is_finite() && t.lr > 0.0) {
            return fail("training.lr must be finite and > 0".into());
        }
        if t.epochs == 0 || t.batch_size == 0 || t.window == 0 {
            return fail("training.epochs/batch_size/window must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&t.cold_fraction) {
            return fail("training.cold_fraction must be in [0, 1]".into());
        }
        if t.transform_budget == Some(0) {
            return fail("training.transform_budget must be >= 1 when set".into());
        }
        if self.buckets.length == 0 || self.buckets.hidden == 0 {
            return fail("buckets.length/hidden must be >= 1".into());
        }
        if self.buckets.hidden % 2 != 0 {
            // The sinusoidal bucket embedding pairs sin/cos entries.
            return fail("buckets.hidden must be even".into());
        }
        Ok(())
    }

    /// Exact data-plane footprint in bytes:
    /// `bloom_bits/8 + depth*width*4 + slots*(key_len + 8)`
    /// (32-bit counters; each slot holds a key plus two 32-bit counts).
    pub fn memory_bytes(&self) -> u64 {
        self.bloom.bits.div_ceil(8)
            + self.sketch.depth as u64 * self.sketch.width as u64 * 4
            + self.heavy_filter.slots as u64 * (self.sketch.key_len as u64 + 8)
    }

    /// Effective transform budget: configured value or the sampling interval.
    pub fn transform_budget(&self) -> u64 {
        self.training.transform_budget.unwrap_or(self.sketch.sampling_interval)
    }
}

/// Master-seed resolution: explicit flag beats the `UCL_SEED` environment
/// variable, which beats the fixed default of 0.
pub fn resolve_seed(cli: Option<u64>) -> Result<u64> {
    if let Some(s) = cli {
        return Ok(s);
    }
    match std::env::var("UCL_SEED") {
        Ok(v) => v
            .trim()
            .parse::<u64>()
            .map_err(|e| Error::Config(format!("UCL_SEED={v:?} is not a u64: {e}"))),
        Err(_) => Ok(0),
    }
}
