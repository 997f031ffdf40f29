//! The data plane: heavy filter + count-min counter array + Bloom filter.
//!
//! Per update the work is bounded by `1 + depth + bloom_hashes` hash
//! invocations: one slot hash, then — only when the item reaches the sketch —
//! one hash per counter row and one per Bloom hash (membership test and
//! insert share the same bit positions).
//!
//! Update cases for an arriving item `(k, v)` whose slot holds resident
//! `(key, new, old)`:
//!
//! 1. empty slot or `k == key`: install `(k, v, 0)` / add `v` to `new`.
//! 2. different key and the resident's lead is gone after the vote
//!    (`new - old <= 0` once `old += v`): flush `(key, new)` into the
//!    sketch, Bloom-insert the resident and report it *hot*, then the slot
//!    restarts as `(k, v, 0)`.
//! 3. different key but the resident still leads: `(k, v)` goes straight
//!    into the sketch; if `k` misses the Bloom filter it is inserted and
//!    reported *cold* (its first sketch appearance).
//!
//! [`EvictionRule::Listing`] swaps the bodies of cases 2 and 3.
//!
//! Occupied slots therefore always satisfy `new > old` under the default
//! rule, and a key's true frequency is exactly its resident `new` count (if
//! any) plus the total volume ever flushed into the sketch under it.

use std::io::{Read, Write};
use std::path::Path;

use crate::config::{AppConfig, EvictionRule};
use crate::error::{Error, Result};
use crate::hash::{HashFamily, Seeds};
use crate::key::{Count, KeyBytes, StreamItem, MAX_KEY_LEN};

pub const SNAPSHOT_MAGIC: [u8; 4] = *b"UCLS";
pub const SNAPSHOT_VERSION: u16 = 1;

/// Hard cap when deserializing untrusted snapshot headers.
const MAX_SNAPSHOT_COUNTERS: u64 = 100_000_000;

// ---------------------------------------------------------------------------
// Heavy filter
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default)]
struct Slot {
    key: KeyBytes,
    new: u32,
    old: u32,
    occupied: bool,
}

/// Slot-per-hash heavy filter holding candidate heavy keys and their vote
/// counters.
#[derive(Debug, Clone)]
pub struct HeavyFilter {
    slots: Vec<Slot>,
    family: HashFamily,
}

impl HeavyFilter {
    fn new(slots: u32, seed: u64) -> Self {
        HeavyFilter {
            slots: vec![Slot::default(); slots as usize],
            family: HashFamily::new(seed),
        }
    }

    #[inline]
    fn slot_index(&self, key: &KeyBytes) -> usize {
        self.family.bucket(key.as_slice(), self.slots.len() as u64) as usize
    }

    /// Filtered frequency: the resident `new` count if `key` occupies its
    /// slot, 0 otherwise.
    pub fn query(&self, key: &KeyBytes) -> Count {
        let slot = &self.slots[self.slot_index(key)];
        if slot.occupied && slot.key == *key {
            slot.new as Count
        } else {
            0
        }
    }

    pub fn occupied_slots(&self) -> usize {
        self.slots.iter().filter(|s| s.occupied).count()
    }

    /// Resident keys with their attributed counts (diagnostics / tests).
    pub fn residents(&self) -> impl Iterator<Item = (KeyBytes, Count)> + '_ {
        self.slots.iter().filter(|s| s.occupied).map(|s| (s.key, s.new as Count))
    }

    #[cfg(test)]
    fn lead_invariant_holds(&self) -> bool {
        self.slots.iter().all(|s| !s.occupied || s.new > s.old)
    }
}

// ---------------------------------------------------------------------------
// Bloom filter
// ---------------------------------------------------------------------------

/// Plain blocked bit-array Bloom filter. No deletions, no false negatives.
#[derive(Debug, Clone)]
pub struct BloomBits {
    bits: Vec<u64>,
    m: u64,
    families: Vec<HashFamily>,
}

/// Bloom hash-count ceiling (also enforced by config validation).
const MAX_BLOOM_HASHES: usize = 16;

impl BloomBits {
    /// `m_bits` must be at least 8 and at most 16 hash seeds are accepted.
    pub fn new(m_bits: u64, seeds: &[u64]) -> Self {
        assert!(m_bits >= 8 && seeds.len() <= MAX_BLOOM_HASHES);
        BloomBits {
            bits: vec![0u64; m_bits.div_ceil(64) as usize],
            m: m_bits,
            families: seeds.iter().map(|&s| HashFamily::new(s)).collect(),
        }
    }

    /// One hash per family; positions land in a caller-provided buffer so
    /// membership test + insert share a single round of hashing.
    #[inline]
    fn positions(&self, key: &KeyBytes, out: &mut [u64; MAX_BLOOM_HASHES]) -> usize {
        for (i, fam) in self.families.iter().enumerate() {
            out[i] = fam.bucket(key.as_slice(), self.m);
        }
        self.families.len()
    }

    #[inline]
    fn test_positions(&self, pos: &[u64]) -> bool {
        pos.iter().all(|&p| self.bits[(p / 64) as usize] >> (p % 64) & 1 == 1)
    }

    #[inline]
    fn set_positions(&mut self, pos: &[u64]) {
        for &p in pos {
            self.bits[(p / 64) as usize] |= 1 << (p % 64);
        }
    }

    pub fn contains(&self, key: &KeyBytes) -> bool {
        let mut pos = [0u64; MAX_BLOOM_HASHES];
        let n = self.positions(key, &mut pos);
        self.test_positions(&pos[..n])
    }

    pub fn insert(&mut self, key: &KeyBytes) {
        let mut pos = [0u64; MAX_BLOOM_HASHES];
        let n = self.positions(key, &mut pos);
        self.set_positions(&pos[..n]);
    }

    /// Membership test + insert with one round of hashing; returns true when
    /// the key was (apparently) absent and has now been inserted.
    pub fn insert_if_absent(&mut self, key: &KeyBytes) -> bool {
        let mut pos = [0u64; MAX_BLOOM_HASHES];
        let n = self.positions(key, &mut pos);
        if self.test_positions(&pos[..n]) {
            false
        } else {
            self.set_positions(&pos[..n]);
            true
        }
    }

    pub fn bit_len(&self) -> u64 {
        self.m
    }

    pub fn set_bits(&self) -> u64 {
        self.bits.iter().map(|b| b.count_ones() as u64).sum()
    }

    fn hash_calls(&self) -> u64 {
        self.families.iter().map(|f| f.calls()).sum()
    }
}

// ---------------------------------------------------------------------------
// Snapshots and reports
// ---------------------------------------------------------------------------

/// An immutable copy of the full counter array, taken every
/// `sampling_interval` updates. This is the measurement vector `y` the
/// control plane trains and decodes against.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Snapshot {
    pub depth: u16,
    pub width: u32,
    /// 1-based emission sequence number.
    pub seq: u64,
    /// Total updates processed when the snapshot was taken.
    pub insert_count: u64,
    /// Normalization scale frozen at emission: min over rows of the row's
    /// maximum counter.
    pub scale: u64,
    /// `depth * width` counters, row-major.
    pub y_raw: Vec<u32>,
}

impl Snapshot {
    pub fn row(&self, j: usize) -> &[u32] {
        let w = self.width as usize;
        &self.y_raw[j * w..(j + 1) * w]
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&SNAPSHOT_MAGIC)?;
        w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        w.write_all(&self.depth.to_le_bytes())?;
        w.write_all(&self.width.to_le_bytes())?;
        w.write_all(&self.seq.to_le_bytes())?;
        w.write_all(&self.insert_count.to_le_bytes())?;
        w.write_all(&self.scale.to_le_bytes())?;
        for c in &self.y_raw {
            w.write_all(&c.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let parse = |msg: &str| Error::Parse { location: "snapshot".into(), msg: msg.into() };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| parse("truncated header"))?;
        if magic != SNAPSHOT_MAGIC {
            return Err(parse("bad magic"));
        }
        let version = read_u16(r)?;
        if version != SNAPSHOT_VERSION {
            return Err(parse(&format!("unsupported version {version}")));
        }
        let depth = read_u16(r)?;
        let width = read_u32(r)?;
        let seq = read_u64(r)?;
        let insert_count = read_u64(r)?;
        let scale = read_u64(r)?;
        let total = depth as u64 * width as u64;
        if total == 0 || total > MAX_SNAPSHOT_COUNTERS {
            return Err(parse(&format!("implausible dimensions {depth}x{width}")));
        }
        let mut y_raw = Vec::with_capacity(total as usize);
        for _ in 0..total {
            y_raw.push(read_u32(r)?);
        }
        Ok(Snapshot { depth, width, seq, insert_count, scale, y_raw })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

pub(crate) fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b).map_err(|_| truncated())?;
    Ok(u16::from_le_bytes(b))
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| truncated())?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| truncated())?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn truncated() -> Error {
    Error::Parse { location: "binary stream".into(), msg: "unexpected end of input".into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFlag {
    /// First sketch appearance of a key that was not Bloom-known.
    Cold,
    /// Key evicted from the heavy filter into the sketch.
    Hot,
}

/// A key announcement from the data plane to the control plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyReport {
    pub key: KeyBytes,
    pub flag: ReportFlag,
    /// Strictly increasing per data plane.
    pub seq: u64,
}

/// Wire form of a report stream: per report a u16 LE key length, the key
/// bytes, one flag byte (0 = cold, 1 = hot) and a u64 LE sequence number.
pub fn write_reports<W: Write>(w: &mut W, reports: &[KeyReport]) -> Result<()> {
    for r in reports {
        w.write_all(&(r.key.len() as u16).to_le_bytes())?;
        w.write_all(r.key.as_slice())?;
        w.write_all(&[match r.flag {
            ReportFlag::Cold => 0u8,
            ReportFlag::Hot => 1u8,
        }])?;
        w.write_all(&r.seq.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_reports<R: Read>(r: &mut R) -> Result<Vec<KeyReport>> {
    let mut out = Vec::new();
    loop {
        let mut len_buf = [0u8; 2];
        match r.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let len = u16::from_le_bytes(len_buf) as usize;
        if len == 0 || len > MAX_KEY_LEN {
            return Err(Error::Parse {
                location: format!("report {}", out.len()),
                msg: format!("invalid key length {len}"),
            });
        }
        let mut key = [0u8; MAX_KEY_LEN];
        r.read_exact(&mut key[..len]).map_err(|_| truncated())?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag).map_err(|_| truncated())?;
        let flag = match flag[0] {
            0 => ReportFlag::Cold,
            1 => ReportFlag::Hot,
            other => {
                return Err(Error::Parse {
                    location: format!("report {}", out.len()),
                    msg: format!("invalid flag byte {other}"),
                })
            }
        };
        let seq = read_u64(r)?;
        out.push(KeyReport { key: KeyBytes::new(&key[..len])?, flag, seq });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Data plane
// ---------------------------------------------------------------------------

/// A sketch insert performed by one update: `(key, volume)`.
pub type SketchInsert = (KeyBytes, u32);

pub struct DataPlane {
    depth: usize,
    width: usize,
    sampling_interval: u64,
    eviction_rule: EvictionRule,
    seeds: Seeds,
    hf: HeavyFilter,
    bloom: BloomBits,
    row_families: Vec<HashFamily>,
    /// depth*width 32-bit counters, row-major.
    counts: Vec<u32>,
    insert_count: u64,
    report_seq: u64,
    snapshot_seq: u64,
    last_snapshot_epoch: u64,
    sketch_volume: u64,
    memory_bytes: u64,
}

impl DataPlane {
    pub fn new(cfg: &AppConfig, master_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let seeds = Seeds::derive(master_seed, cfg.sketch.depth as usize, cfg.bloom.hashes as usize);
        Ok(DataPlane {
            depth: cfg.sketch.depth as usize,
            width: cfg.sketch.width as usize,
            sampling_interval: cfg.sketch.sampling_interval,
            eviction_rule: cfg.sketch.eviction_rule,
            hf: HeavyFilter::new(cfg.heavy_filter.slots, seeds.hf),
            bloom: BloomBits::new(cfg.bloom.bits, &seeds.bloom),
            row_families: seeds.rows.iter().map(|&s| HashFamily::new(s)).collect(),
            counts: vec![0u32; cfg.sketch.depth as usize * cfg.sketch.width as usize],
            seeds,
            insert_count: 0,
            report_seq: 0,
            snapshot_seq: 0,
            last_snapshot_epoch: 0,
            sketch_volume: 0,
            memory_bytes: cfg.memory_bytes(),
        })
    }

    /// Process one stream item. At most one report is emitted per update;
    /// zero-valued items are ignored.
    pub fn update(&mut self, item: &StreamItem) -> Option<KeyReport> {
        self.update_traced(item).0
    }

    /// [`DataPlane::update`] plus the sketch insert it performed, if any.
    /// Shadow oracles and the count-sketch baseline consume the trace.
    pub fn update_traced(&mut self, item: &StreamItem) -> (Option<KeyReport>, Option<SketchInsert>) {
        if item.value == 0 {
            return (None, None);
        }
        let v = item.value.min(u32::MAX as u64) as u32;
        self.insert_count += 1;

        let idx = self.hf.slot_index(&item.key);
        let slot = &mut self.hf.slots[idx];

        if !slot.occupied {
            *slot = Slot { key: item.key, new: v, old: 0, occupied: true };
            return (None, None);
        }
        if slot.key == item.key {
            slot.new = slot.new.saturating_add(v);
            return (None, None);
        }

        slot.old = slot.old.saturating_add(v);
        let resident_leads = slot.new > slot.old;
        let evict = match self.eviction_rule {
            EvictionRule::Prose => !resident_leads,
            EvictionRule::Listing => resident_leads,
        };

        if evict {
            let victim = (slot.key, slot.new);
            *slot = Slot { key: item.key, new: v, old: 0, occupied: true };
            self.sketch_insert(&victim.0, victim.1);
            self.bloom.insert(&victim.0);
            let report = self.next_report(victim.0, ReportFlag::Hot);
            (Some(report), Some(victim))
        } else {
            self.sketch_insert(&item.key, v);
            let report = self
                .bloom
                .insert_if_absent(&item.key)
                .then(|| self.next_report(item.key, ReportFlag::Cold));
            (report, Some((item.key, v)))
        }
    }

    #[inline]
    fn sketch_insert(&mut self, key: &KeyBytes, v: u32) {
        for j in 0..self.depth {
            let pos = self.row_families[j].bucket(key.as_slice(), self.width as u64) as usize;
            let c = &mut self.counts[j * self.width + pos];
            *c = c.saturating_add(v);
        }
        self.sketch_volume += v as u64;
    }

    fn next_report(&mut self, key: KeyBytes, flag: ReportFlag) -> KeyReport {
        self.report_seq += 1;
        KeyReport { key, flag, seq: self.report_seq }
    }

    /// Emit a snapshot exactly once per crossing of the sampling interval.
    pub fn maybe_snapshot(&mut self) -> Option<Snapshot> {
        if self.insert_count == 0 || self.insert_count % self.sampling_interval != 0 {
            return None;
        }
        let epoch = self.insert_count / self.sampling_interval;
        if epoch == self.last_snapshot_epoch {
            return None;
        }
        self.last_snapshot_epoch = epoch;
        self.snapshot_seq += 1;
        Some(Snapshot {
            depth: self.depth as u16,
            width: self.width as u32,
            seq: self.snapshot_seq,
            insert_count: self.insert_count,
            scale: self.compute_scale(),
            y_raw: self.counts.clone(),
        })
    }

    /// min over rows of the row's maximum counter.
    fn compute_scale(&self) -> u64 {
        (0..self.depth)
            .map(|j| {
                self.counts[j * self.width..(j + 1) * self.width]
                    .iter()
                    .copied()
                    .max()
                    .unwrap_or(0) as u64
            })
            .min()
            .unwrap_or(0)
    }

    pub fn hf_query(&self, key: &KeyBytes) -> Count {
        self.hf.query(key)
    }

    pub fn bf_contains(&self, key: &KeyBytes) -> bool {
        self.bloom.contains(key)
    }

    pub fn heavy_filter(&self) -> &HeavyFilter {
        &self.hf
    }

    pub fn bloom(&self) -> &BloomBits {
        &self.bloom
    }

    pub fn counters(&self) -> &[u32] {
        &self.counts
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn seeds(&self) -> &Seeds {
        &self.seeds
    }

    pub fn insert_count(&self) -> u64 {
        self.insert_count
    }

    /// Total volume ever flushed into the sketch (equals every row's sum).
    pub fn sketch_volume(&self) -> u64 {
        self.sketch_volume
    }

    /// Configured data-plane footprint in bytes.
    pub fn memory_bytes(&self) -> u64 {
        self.memory_bytes
    }

    /// Total hash invocations across all internal hash structures
    /// (instrumentation for the per-update work bound).
    pub fn hash_invocations(&self) -> u64 {
        self.hf.family.calls()
            + self.bloom.hash_calls()
            + self.row_families.iter().map(|f| f.calls()).sum::<u64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::{HashMap, HashSet};

    fn tiny_config(slots: u32, depth: u16, width: u32) -> AppConfig {
        let mut cfg = AppConfig::preset("16KB").unwrap();
        cfg.heavy_filter.slots = slots;
        cfg.sketch.depth = depth;
        cfg.sketch.width = width;
        cfg.bloom.bits = 1 << 14;
        cfg.sketch.sampling_interval = 1_000_000;
        cfg
    }

    fn key(b: u8) -> KeyBytes {
        KeyBytes::new(&[b, b, b, b]).unwrap()
    }

    fn item(b: u8, v: u64) -> StreamItem {
        StreamItem { key: key(b), value: v }
    }

    /// Hand-traced update cases on a single-slot filter (every key collides).
    ///
    /// (A,3) install; (A,2) same-key; (B,1) keeps resident lead 5-1>0 so B
    /// goes to the sketch cold; (C,5) kills the lead 5-6<=0 so A(5) is
    /// flushed hot and C takes the slot.
    #[test]
    fn update_cases_prose() {
        let cfg = tiny_config(1, 2, 8);
        let mut dp = DataPlane::new(&cfg, 1).unwrap();

        assert_eq!(dp.update(&item(b'A', 3)), None);
        assert_eq!(dp.hf_query(&key(b'A')), 3);

        assert_eq!(dp.update(&item(b'A', 2)), None);
        assert_eq!(dp.hf_query(&key(b'A')), 5);

        let rep = dp.update(&item(b'B', 1)).expect("cold report for B");
        assert_eq!(rep.key, key(b'B'));
        assert_eq!(rep.flag, ReportFlag::Cold);
        assert_eq!(rep.seq, 1);
        assert_eq!(dp.hf_query(&key(b'A')), 5, "resident intact");
        assert_eq!(dp.hf_query(&key(b'B')), 0);
        assert_eq!(dp.sketch_volume(), 1);
        assert!(dp.bf_contains(&key(b'B')));
        assert!(!dp.bf_contains(&key(b'A')));

        let rep = dp.update(&item(b'C', 5)).expect("hot report for evicted A");
        assert_eq!(rep.key, key(b'A'));
        assert_eq!(rep.flag, ReportFlag::Hot);
        assert_eq!(rep.seq, 2);
        assert_eq!(dp.hf_query(&key(b'A')), 0);
        assert_eq!(dp.hf_query(&key(b'C')), 5);
        assert_eq!(dp.sketch_volume(), 6, "A's 5 flushed on top of B's 1");
        assert!(dp.bf_contains(&key(b'A')));

        // Each row sums to the flushed volume.
        for j in 0..dp.depth() {
            let sum: u64 = dp.counters()[j * dp.width()..(j + 1) * dp.width()]
                .iter()
                .map(|&c| c as u64)
                .sum();
            assert_eq!(sum, 6);
        }
    }

    /// The listing rule swaps the two branch bodies: (B,1) arriving while
    /// the resident still leads evicts the resident.
    #[test]
    fn update_cases_listing() {
        let mut cfg = tiny_config(1, 2, 8);
        cfg.sketch.eviction_rule = EvictionRule::Listing;
        let mut dp = DataPlane::new(&cfg, 1).unwrap();

        dp.update(&item(b'A', 3));
        let rep = dp.update(&item(b'B', 1)).expect("listing rule evicts leading resident");
        assert_eq!(rep.key, key(b'A'));
        assert_eq!(rep.flag, ReportFlag::Hot);
        assert_eq!(dp.hf_query(&key(b'B')), 1);
        assert_eq!(dp.sketch_volume(), 3);
    }

    #[test]
    fn zero_value_is_ignored() {
        let cfg = tiny_config(4, 2, 8);
        let mut dp = DataPlane::new(&cfg, 1).unwrap();
        let (rep, ins) = dp.update_traced(&item(b'A', 0));
        assert!(rep.is_none() && ins.is_none());
        assert_eq!(dp.insert_count(), 0);
    }

    #[test]
    fn huge_values_saturate_32_bits() {
        let cfg = tiny_config(1, 2, 8);
        let mut dp = DataPlane::new(&cfg, 1).unwrap();
        dp.update(&item(b'A', u64::MAX));
        dp.update(&item(b'A', u64::MAX));
        assert_eq!(dp.hf_query(&key(b'A')), u32::MAX as u64);
    }

    fn random_stream(seed: u64, n: usize, universe: u8) -> Vec<StreamItem> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| item(rng.random_range(0..universe), rng.random_range(1..=3)))
            .collect()
    }

    /// Conservation: the true frequency of every key decomposes exactly into
    /// its resident heavy-filter count plus its shadow sketch volume, and
    /// every counter row sums to the total flushed volume.
    #[test]
    fn conservation_decomposition() {
        let cfg = tiny_config(8, 3, 16);
        let mut dp = DataPlane::new(&cfg, 7).unwrap();
        let mut truth: HashMap<KeyBytes, u64> = HashMap::new();
        let mut shadow: HashMap<KeyBytes, u64> = HashMap::new();

        for it in random_stream(3, 5000, 40) {
            *truth.entry(it.key).or_default() += it.value;
            let (_, insert) = dp.update_traced(&it);
            if let Some((k, v)) = insert {
                *shadow.entry(k).or_default() += v as u64;
            }
        }

        let shadow_total: u64 = shadow.values().sum();
        assert_eq!(shadow_total, dp.sketch_volume());
        for j in 0..dp.depth() {
            let sum: u64 = dp.counters()[j * dp.width()..(j + 1) * dp.width()]
                .iter()
                .map(|&c| c as u64)
                .sum();
            assert_eq!(sum, shadow_total);
        }
        for (k, &t) in &truth {
            let resident = dp.hf_query(k);
            let flushed = shadow.get(k).copied().unwrap_or(0);
            assert_eq!(resident + flushed, t, "key {k:?}");
        }
    }

    #[test]
    fn resident_lead_invariant_under_prose_rule() {
        let cfg = tiny_config(8, 2, 16);
        let mut dp = DataPlane::new(&cfg, 11).unwrap();
        for it in random_stream(5, 20_000, 60) {
            dp.update(&it);
            debug_assert!(dp.hf.lead_invariant_holds());
        }
        assert!(dp.hf.lead_invariant_holds());
    }

    /// Cold reports happen at most once per key; every hot report matches an
    /// eviction; sequence numbers strictly increase.
    #[test]
    fn report_uniqueness_and_ordering() {
        let cfg = tiny_config(4, 2, 16);
        let mut dp = DataPlane::new(&cfg, 13).unwrap();
        let mut cold_seen: HashSet<KeyBytes> = HashSet::new();
        let mut last_seq = 0u64;
        for it in random_stream(9, 30_000, 50) {
            if let Some(rep) = dp.update(&it) {
                assert!(rep.seq > last_seq);
                last_seq = rep.seq;
                if rep.flag == ReportFlag::Cold {
                    assert!(cold_seen.insert(rep.key), "duplicate cold report {:?}", rep.key);
                }
            }
        }
        assert!(last_seq > 0, "stream produced no reports");
    }

    #[test]
    fn snapshot_cadence_and_idempotence() {
        let mut cfg = tiny_config(4, 2, 8);
        cfg.sketch.sampling_interval = 10;
        let mut dp = DataPlane::new(&cfg, 17).unwrap();
        let mut taken = Vec::new();
        for it in random_stream(2, 35, 10) {
            dp.update(&it);
            if let Some(s) = dp.maybe_snapshot() {
                taken.push((s.seq, s.insert_count));
            }
            assert!(dp.maybe_snapshot().is_none(), "double emission at same crossing");
        }
        assert_eq!(taken, vec![(1, 10), (2, 20), (3, 30)]);
    }

    #[test]
    fn snapshot_scale_rule() {
        let cfg = tiny_config(1, 2, 8);
        let mut dp = DataPlane::new(&cfg, 19).unwrap();

        // Single-key stream: everything stays resident, sketch empty.
        for _ in 0..5 {
            dp.update(&item(b'A', 1));
        }
        let mut dp2 = DataPlane::new(&cfg, 19).unwrap();
        for _ in 0..5 {
            dp2.update(&item(b'A', 1));
        }
        assert_eq!(dp2.compute_scale(), 0, "no sketch inserts -> zero scale");

        // Force sketch traffic, then check the min-of-row-maxima rule.
        for it in random_stream(21, 500, 30) {
            dp.update(&it);
        }
        let expected = (0..dp.depth())
            .map(|j| {
                dp.counters()[j * dp.width()..(j + 1) * dp.width()]
                    .iter()
                    .copied()
                    .max()
                    .unwrap() as u64
            })
            .min()
            .unwrap();
        assert_eq!(dp.compute_scale(), expected);
        assert!(expected > 0);
    }

    /// Per-update hash work never exceeds 1 + depth + bloom_hashes, and the
    /// same-key fast path costs exactly one hash.
    #[test]
    fn hash_work_bound() {
        let cfg = tiny_config(4, 3, 16);
        let bound = 1 + 3 + cfg.bloom.hashes as u64;
        let mut dp = DataPlane::new(&cfg, 23).unwrap();
        let mut before = dp.hash_invocations();
        for it in random_stream(31, 5000, 40) {
            dp.update(&it);
            let after = dp.hash_invocations();
            assert!(after - before <= bound, "used {} hashes", after - before);
            before = after;
        }

        let mut dp = DataPlane::new(&cfg, 23).unwrap();
        dp.update(&item(b'Z', 1));
        let before = dp.hash_invocations();
        dp.update(&item(b'Z', 1));
        assert_eq!(dp.hash_invocations() - before, 1);
    }

    #[test]
    fn bloom_has_no_false_negatives() {
        let mut bloom = BloomBits::new(1 << 12, &[1, 2, 3, 4, 5, 6, 7, 8]);
        let keys: Vec<KeyBytes> = (0u32..1000).map(KeyBytes::from_u32_be).collect();
        for k in &keys {
            bloom.insert(k);
        }
        assert!(keys.iter().all(|k| bloom.contains(k)));
    }

    /// Monte-Carlo check of the false-positive bound
    /// `1 - exp(-k_b * K / m_b)` for an unseen key (the per-bit load is an
    /// upper bound on the full false-positive probability).
    #[test]
    fn bloom_false_positive_bound() {
        let (m, k_b, inserted, probes) = (1u64 << 13, 8usize, 1200u32, 20_000u32);
        let seeds: Vec<u64> = (0..k_b as u64).map(|i| 100 + i).collect();
        let mut bloom = BloomBits::new(m, &seeds);
        for i in 0..inserted {
            bloom.insert(&KeyBytes::from_u32_be(i));
        }
        let fp = (0..probes)
            .filter(|i| bloom.contains(&KeyBytes::from_u32_be(1_000_000 + i)))
            .count() as f64
            / probes as f64;
        let bound = 1.0 - (-(k_b as f64) * inserted as f64 / m as f64).exp();
        let stderr = (bound * (1.0 - bound) / probes as f64).sqrt();
        assert!(fp <= bound + 3.0 * stderr, "fp {fp:.4} vs bound {bound:.4}");
    }

    #[test]
    fn snapshot_rejects_corrupt_header() {
        let snap = Snapshot {
            depth: 2,
            width: 4,
            seq: 1,
            insert_count: 10,
            scale: 3,
            y_raw: vec![0; 8],
        };
        let mut bytes = Vec::new();
        snap.write_to(&mut bytes).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(Snapshot::read_from(&mut bad_magic.as_slice()).is_err());

        let truncated = &bytes[..bytes.len() - 1];
        assert!(Snapshot::read_from(&mut &truncated[..]).is_err());
    }

    proptest! {
        #[test]
        fn snapshot_round_trip_is_bit_exact(
            depth in 1u16..6,
            width in 1u32..32,
            seq in proptest::num::u64::ANY,
            insert_count in proptest::num::u64::ANY,
            seed in proptest::num::u64::ANY,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y_raw: Vec<u32> = (0..depth as usize * width as usize).map(|_| rng.random()).collect();
            let scale = (0..depth as usize)
                .map(|j| y_raw[j * width as usize..(j + 1) * width as usize].iter().copied().max().unwrap() as u64)
                .min()
                .unwrap();
            let snap = Snapshot { depth, width, seq, insert_count, scale, y_raw };

            let mut bytes = Vec::new();
            snap.write_to(&mut bytes).unwrap();
            let back = Snapshot::read_from(&mut bytes.as_slice()).unwrap();
            prop_assert_eq!(&back, &snap);
            let mut again = Vec::new();
            back.write_to(&mut again).unwrap();
            prop_assert_eq!(again, bytes);
        }

        #[test]
        fn report_stream_round_trip(entries in proptest::collection::vec(
            (proptest::collection::vec(proptest::num::u8::ANY, 1..16), proptest::bool::ANY, proptest::num::u64::ANY),
            0..20,
        )) {
            let reports: Vec<KeyReport> = entries
                .iter()
                .map(|(k, hot, seq)| KeyReport {
                    key: KeyBytes::new(k).unwrap(),
                    flag: if *hot { ReportFlag::Hot } else { ReportFlag::Cold },
                    seq: *seq,
                })
                .collect();
            let mut bytes = Vec::new();
            write_reports(&mut bytes, &reports).unwrap();
            let back = read_reports(&mut bytes.as_slice()).unwrap();
            prop_assert_eq!(back, reports);
        }
    }
}
