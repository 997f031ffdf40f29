//! Key registry, frozen query contexts, and the combined query path.
//!
//! The data plane reports keys as they spill out of the heavy filter; the
//! registry assigns each distinct key a stable position in the unknown
//! vector `x` and remembers which ones were ever flushed as hot. A
//! [`QueryContext`] captures one consistent view of the system — registry,
//! latest snapshot, heavy-filter residents, published model — so that
//! queries are pure reads and can run concurrently with further updates and
//! training.
//!
//! A per-key answer is the sum of two parts: the learned estimate of the
//! key's sketch-resident volume (decoded from the frozen measurement vector)
//! and the key's live heavy-filter count. Keys that never left the heavy
//! filter are absent from the registry and answer with the filter count
//! alone; keys never seen anywhere answer zero.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::dataplane::{DataPlane, KeyReport, ReportFlag, Snapshot};
use crate::error::{Error, Result};
use crate::key::{Count, KeyBytes};
use crate::solver::{normalize, SolverModel};

// ---------------------------------------------------------------------------
// Key registry
// ---------------------------------------------------------------------------

/// Append-only directory of reported keys.
///
/// Positions are handed out in first-report order and never change; the hot
/// flag is sticky (a key once flushed hot stays hot even if later reported
/// cold again). The version counter bumps on every effective mutation so
/// readers can detect staleness of a frozen view.
#[derive(Debug, Clone, Default)]
pub struct KeyRegistry {
    keys: Vec<KeyBytes>,
    index: HashMap<KeyBytes, usize>,
    hot: Vec<bool>,
    version: u64,
}

impl KeyRegistry {
    pub fn new() -> Self {
        KeyRegistry::default()
    }

    /// Absorb one data-plane report and return the key's position.
    ///
    /// Unknown keys are appended; duplicate cold reports are no-ops; a hot
    /// report upgrades the flag in place.
    pub fn handle_report(&mut self, report: &KeyReport) -> usize {
        match self.index.get(&report.key) {
            Some(&pos) => {
                if report.flag == ReportFlag::Hot && !self.hot[pos] {
                    self.hot[pos] = true;
                    self.version += 1;
                }
                pos
            }
            None => {
                let pos = self.keys.len();
                self.keys.push(report.key);
                self.index.insert(report.key, pos);
                self.hot.push(report.flag == ReportFlag::Hot);
                self.version += 1;
                pos
            }
        }
    }

    pub fn position(&self, key: &KeyBytes) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Keys in position order.
    pub fn keys(&self) -> &[KeyBytes] {
        &self.keys
    }

    /// Per-position hot flags, parallel to [`KeyRegistry::keys`].
    pub fn hot_flags(&self) -> &[bool] {
        &self.hot
    }

    pub fn is_hot(&self, pos: usize) -> bool {
        self.hot.get(pos).copied().unwrap_or(false)
    }

    pub fn hot_count(&self) -> usize {
        self.hot.iter().filter(|&&h| h).count()
    }

    pub fn version(&self) -> u64 {
        self.version
    }
}

/// Split a registry position into (bucket id, index within bucket).
pub fn split_position(pos: usize, bucket_len: usize) -> (usize, usize) {
    debug_assert!(bucket_len > 0);
    (pos / bucket_len, pos % bucket_len)
}

// ---------------------------------------------------------------------------
// Frozen query context
// ---------------------------------------------------------------------------

/// One immutable, mutually consistent capture of registry + measurement +
/// heavy filter + model. All queries against the same context return
/// identical answers; later contexts may differ as the stream advances.
#[derive(Debug, Clone)]
pub struct QueryContext {
    registry_version: u64,
    keys: Vec<KeyBytes>,
    index: HashMap<KeyBytes, usize>,
    hf: BTreeMap<KeyBytes, Count>,
    model: Arc<SolverModel>,
    y_norm: Vec<f64>,
    scale: u64,
}

/// Capture the current system state as an immutable [`QueryContext`].
///
/// `snapshot` is the latest counter snapshot if one was taken; before the
/// first snapshot (or when its scale is still zero) the context carries a
/// zero measurement and every query falls back to the heavy-filter count.
pub fn freeze_epoch(
    registry: &KeyRegistry,
    plane: &DataPlane,
    snapshot: Option<&Snapshot>,
    model: Arc<SolverModel>,
) -> Result<QueryContext> {
    freeze_from_parts(registry, plane.heavy_filter().residents().collect(), snapshot, model)
}

/// Build a context from already-extracted parts — the serialization path, for
/// answering queries from saved artifacts without a live data plane.
pub fn freeze_from_parts(
    registry: &KeyRegistry,
    hf: BTreeMap<KeyBytes, Count>,
    snapshot: Option<&Snapshot>,
    model: Arc<SolverModel>,
) -> Result<QueryContext> {
    let (d, w) = (model.depth(), model.width());
    let (y_norm, scale) = match snapshot {
        Some(snap) => {
            if snap.depth as usize != d || snap.width as usize != w {
                return Err(Error::Shape(format!(
                    "snapshot is {}x{} but the model decodes {d}x{w}",
                    snap.depth, snap.width
                )));
            }
            match normalize(snap) {
                Some(sample) => (sample.y_norm, sample.scale),
                None => (vec![0.0; d * w], 0),
            }
        }
        None => (vec![0.0; d * w], 0),
    };
    Ok(QueryContext {
        registry_version: registry.version(),
        keys: registry.keys().to_vec(),
        index: registry.keys().iter().enumerate().map(|(i, k)| (*k, i)).collect(),
        hf,
        model,
        y_norm,
        scale,
    })
}

impl QueryContext {
    /// Per-key frequency estimate: learned sketch-resident volume plus the
    /// frozen heavy-filter count. Total over all byte strings.
    pub fn query(&self, key: &KeyBytes) -> Count {
        let hf = self.hf.get(key).copied().unwrap_or(0);
        let solver = match self.index.get(key) {
            Some(&pos) if self.scale > 0 => self.solver_estimate(pos),
            _ => 0,
        };
        solver + hf
    }

    fn solver_estimate(&self, pos: usize) -> Count {
        let (bucket, inner) = split_position(pos, self.model.bucket_len());
        // The measurement length was validated against the model when the
        // context was frozen, so decoding cannot fail.
        match self.model.forward_bucket(&self.y_norm, bucket) {
            Ok(out) => (self.scale as f64 * out[inner]).round().max(0.0) as Count,
            Err(_) => 0,
        }
    }

    /// Decode every tracked key at once, then append heavy-filter residents
    /// that were never reported. Each entry equals [`QueryContext::query`]
    /// for that key; order is registry order followed by resident keys in
    /// byte order.
    pub fn recover_all(&self) -> Vec<(KeyBytes, Count)> {
        let n = self.keys.len();
        let solved = if self.scale > 0 && n > 0 {
            self.model.recover_full(&self.y_norm, n, self.scale).unwrap_or_else(|_| vec![0; n])
        } else {
            vec![0; n]
        };
        let mut out = Vec::with_capacity(n + self.hf.len());
        for (i, key) in self.keys.iter().enumerate() {
            out.push((*key, solved[i] + self.hf.get(key).copied().unwrap_or(0)));
        }
        for (key, count) in &self.hf {
            if !self.index.contains_key(key) {
                out.push((*key, *count));
            }
        }
        out
    }

    /// Version of the registry this context was frozen from.
    pub fn registry_version(&self) -> u64 {
        self.registry_version
    }

    /// Number of registry keys captured.
    pub fn tracked_keys(&self) -> usize {
        self.keys.len()
    }

    /// Whether a usable (nonzero-scale) measurement was captured.
    pub fn has_measurement(&self) -> bool {
        self.scale > 0
    }

    pub fn scale(&self) -> u64 {
        self.scale
    }
}
