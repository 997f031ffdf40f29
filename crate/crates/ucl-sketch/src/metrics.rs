//! Accuracy metrics over per-key frequency tables, plus throughput.
//!
//! Per-key metrics (AAE, ARE) average over the keys with positive true
//! frequency; estimates missing from the table read as zero. Distributional
//! metrics (WMRD, entropy error) depend only on the frequency histograms
//! `n(i)` = number of keys with frequency `i`. The entropy estimator keeps
//! its `i ×` weighting exactly as defined, with `0·log 0 = 0`.

use std::collections::BTreeMap;
use std::time::Duration;

use crate::error::{Error, Result};
use crate::key::{Count, KeyBytes};

/// Map key → integer frequency (ground truth or a rounded estimate).
///
/// Ordered storage makes every accumulation over the table
/// bitwise-reproducible across processes; std hash maps randomize iteration
/// order per run.
#[derive(Debug, Clone, Default)]
pub struct FrequencyTable {
    counts: BTreeMap<KeyBytes, Count>,
}

impl FrequencyTable {
    pub fn new() -> Self {
        FrequencyTable::default()
    }

    /// Set a key's frequency (last write wins).
    pub fn insert(&mut self, key: KeyBytes, count: Count) {
        self.counts.insert(key, count);
    }

    /// Accumulate onto a key's frequency.
    pub fn add(&mut self, key: KeyBytes, count: Count) {
        *self.counts.entry(key).or_insert(0) += count;
    }

    /// Recorded frequency, zero when absent.
    pub fn get(&self, key: &KeyBytes) -> Count {
        self.counts.get(key).copied().unwrap_or(0)
    }

    /// Number of keys with positive frequency.
    pub fn support(&self) -> usize {
        self.counts.values().filter(|&&c| c > 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.support() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&KeyBytes, &Count)> {
        self.counts.iter()
    }

    /// Histogram `n(i)`: how many keys have frequency exactly `i`, for the
    /// positive frequencies present. Its total equals [`Self::support`].
    pub fn histogram(&self) -> BTreeMap<Count, u64> {
        let mut hist = BTreeMap::new();
        for &c in self.counts.values() {
            if c > 0 {
                *hist.entry(c).or_insert(0u64) += 1;
            }
        }
        hist
    }
}

impl FromIterator<(KeyBytes, Count)> for FrequencyTable {
    fn from_iter<I: IntoIterator<Item = (KeyBytes, Count)>>(iter: I) -> Self {
        FrequencyTable { counts: iter.into_iter().collect() }
    }
}

/// Round a raw real-valued estimate to a frequency: negatives clamp to zero,
/// ties round up.
pub fn round_to_count(v: f64) -> Count {
    if v <= 0.0 {
        0
    } else {
        (v + 0.5).floor() as Count
    }
}

fn positive_truth<'a>(
    truth: &'a FrequencyTable,
    metric: &str,
) -> Result<Vec<(&'a KeyBytes, Count)>> {
    let keys: Vec<_> =
        truth.counts.iter().filter(|(_, &c)| c > 0).map(|(k, &c)| (k, c)).collect();
    if keys.is_empty() {
        return Err(Error::UndefinedMetric(format!("{metric} over an empty truth table")));
    }
    Ok(keys)
}

/// Average absolute error `(1/n)·Σ|f(i) − f*(i)|` over true-positive keys.
pub fn aae(truth: &FrequencyTable, est: &FrequencyTable) -> Result<f64> {
    let keys = positive_truth(truth, "aae")?;
    let sum: f64 =
        keys.iter().map(|(k, c)| (*c as f64 - est.get(k) as f64).abs()).sum();
    Ok(sum / keys.len() as f64)
}

/// Average relative error `(1/n)·Σ|f(i) − f*(i)|/f(i)`.
pub fn are(truth: &FrequencyTable, est: &FrequencyTable) -> Result<f64> {
    let keys = positive_truth(truth, "are")?;
    let sum: f64 = keys
        .iter()
        .map(|(k, c)| (*c as f64 - est.get(k) as f64).abs() / *c as f64)
        .sum();
    Ok(sum / keys.len() as f64)
}

/// Weighted mean relative difference between the two frequency histograms:
/// `Σ|n(i) − n*(i)| / Σ(n(i) + n*(i))/2`, always in `[0, 2]`.
pub fn wmrd(truth: &FrequencyTable, est: &FrequencyTable) -> Result<f64> {
    let h = truth.histogram();
    let g = est.histogram();
    if h.is_empty() && g.is_empty() {
        return Err(Error::UndefinedMetric("wmrd over two empty tables".into()));
    }
    let z = h.keys().chain(g.keys()).copied().max().unwrap_or(0);
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 1..=z {
        let a = h.get(&i).copied().unwrap_or(0) as f64;
        let b = g.get(&i).copied().unwrap_or(0) as f64;
        num += (a - b).abs();
        den += (a + b) / 2.0;
    }
    Ok(num / den)
}

/// The frequency-weighted empirical entropy `−Σ i·(n(i)/N)·log₂(n(i)/N)`
/// with `N = Σn(i)` and `0·log 0 = 0`. An empty histogram carries no
/// information and scores zero.
pub fn weighted_entropy(hist: &BTreeMap<Count, u64>) -> f64 {
    let total: u64 = hist.values().sum();
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    let mut e = 0.0;
    for (&i, &count) in hist {
        if count == 0 {
            continue;
        }
        let p = count as f64 / n;
        e -= i as f64 * p * p.log2();
    }
    e
}

/// Absolute difference of the weighted entropies of the two tables.
pub fn entropy_abs_err(truth: &FrequencyTable, est: &FrequencyTable) -> Result<f64> {
    let h = truth.histogram();
    let g = est.histogram();
    if h.is_empty() && g.is_empty() {
        return Err(Error::UndefinedMetric("entropy over two empty tables".into()));
    }
    Ok((weighted_entropy(&h) - weighted_entropy(&g)).abs())
}

/// Million operations per second. `elapsed` must be positive.
pub fn throughput_mops(op_count: u64, elapsed: Duration) -> f64 {
    op_count as f64 / elapsed.as_secs_f64() / 1e6
}
