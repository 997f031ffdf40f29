//! Synthetic Zipfian streams and trace-file round trips.
//!
//! Keys are 4-byte big-endian rank ids drawn i.i.d. by inverse-CDF lookup
//! over precomputed cumulative weights; every item carries value 1. Traces
//! serialize either as `hexkey,value` CSV lines or as packed binary records,
//! each optionally gzip-compressed (transparent on read via the magic bytes,
//! chosen on write by a `.gz` path suffix).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::key::{KeyBytes, StreamItem, MAX_KEY_LEN};

// ---------------------------------------------------------------------------
// Zipf generation
// ---------------------------------------------------------------------------

/// A synthetic stream: `length` draws over `universe` ranks with
/// `P(rank j) ∝ j^(−skew)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ZipfSpec {
    pub universe: u32,
    pub skew: f64,
    pub length: u64,
    pub seed: u64,
}

impl ZipfSpec {
    fn validate(&self) -> Result<()> {
        if self.universe == 0 {
            return Err(Error::Config("zipf universe must be at least 1".into()));
        }
        if !(self.skew >= 0.0) {
            return Err(Error::Config(format!("zipf skew must be >= 0, got {}", self.skew)));
        }
        Ok(())
    }

    /// Cumulative rank distribution; the last entry is pinned to exactly 1.
    fn cumulative(&self) -> Vec<f64> {
        let n = self.universe as usize;
        let weights: Vec<f64> = (1..=n).map(|j| (j as f64).powf(-self.skew)).collect();
        let total: f64 = weights.iter().sum();
        let mut cum = Vec::with_capacity(n);
        let mut acc = 0.0;
        for w in &weights {
            acc += w / total;
            cum.push(acc);
        }
        debug_assert!((cum[n - 1] - 1.0).abs() < 1e-12);
        cum[n - 1] = 1.0;
        cum
    }
}

/// Deterministic Zipfian stream iterator.
pub struct ZipfStream {
    cum: Vec<f64>,
    rng: ChaCha8Rng,
    remaining: u64,
    permutation: Option<Vec<u32>>,
}

impl ZipfStream {
    fn rank_to_item(&self, rank: usize) -> StreamItem {
        let id = match &self.permutation {
            Some(p) => p[rank],
            None => rank as u32 + 1,
        };
        StreamItem { key: KeyBytes::from_u32_be(id), value: 1 }
    }
}

impl Iterator for ZipfStream {
    type Item = StreamItem;

    fn next(&mut self) -> Option<StreamItem> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let u: f64 = self.rng.random();
        let rank = self.cum.partition_point(|&c| c < u).min(self.cum.len() - 1);
        Some(self.rank_to_item(rank))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = usize::try_from(self.remaining).ok();
        (n.unwrap_or(usize::MAX), n)
    }
}

/// Stream items for `spec`. Rank `j` maps to the fixed key `j` (big-endian
/// u32, 1-based) so runs are comparable across configurations.
pub fn generate(spec: &ZipfSpec) -> Result<ZipfStream> {
    spec.validate()?;
    Ok(ZipfStream {
        cum: spec.cumulative(),
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        remaining: spec.length,
        permutation: None,
    })
}

/// Like [`generate`], but ranks map to a pseudorandom permutation of
/// `1..=universe` (hash structures are order-insensitive, so this only
/// matters when key bytes themselves are inspected).
pub fn generate_permuted(spec: &ZipfSpec, perm_seed: u64) -> Result<ZipfStream> {
    spec.validate()?;
    let mut ids: Vec<u32> = (1..=spec.universe).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
    use rand::seq::SliceRandom;
    ids.shuffle(&mut rng);
    Ok(ZipfStream {
        cum: spec.cumulative(),
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        remaining: spec.length,
        permutation: Some(ids),
    })
}

// ---------------------------------------------------------------------------
// Trace files
// ---------------------------------------------------------------------------

/// On-disk trace layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceFormat {
    /// `hexkey,value` per line.
    Csv,
    /// Packed records: `key_len` key bytes, then a little-endian u32 value
    /// when `has_values` (value 1 otherwise).
    Raw { key_len: usize, has_values: bool },
}

const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

fn open_reader(path: &Path) -> Result<Box<dyn Read>> {
    let mut file = File::open(path)?;
    let mut magic = [0u8; 2];
    let got = file.read(&mut magic)?;
    let plain = got < 2 || magic != GZIP_MAGIC;
    // Reopen to restore the consumed bytes regardless of branch.
    let file = File::open(path)?;
    Ok(if plain { Box::new(file) } else { Box::new(MultiGzDecoder::new(file)) })
}

fn open_writer(path: &Path) -> Result<Box<dyn Write>> {
    let file = File::create(path)?;
    let gz = path.extension().is_some_and(|e| e == "gz");
    Ok(if gz {
        Box::new(GzEncoder::new(file, Compression::default()))
    } else {
        Box::new(file)
    })
}

/// Write `items` to `path` in the given format (gzipped when the path ends
/// in `.gz`).
pub fn write_trace(path: &Path, fmt: TraceFormat, items: &[StreamItem]) -> Result<()> {
    let mut w = BufWriter::new(open_writer(path)?);
    match fmt {
        TraceFormat::Csv => {
            for item in items {
                writeln!(w, "{},{}", item.key.to_hex(), item.value)?;
            }
        }
        TraceFormat::Raw { key_len, has_values } => {
            if key_len == 0 || key_len > MAX_KEY_LEN {
                return Err(Error::Config(format!(
                    "raw trace key_len must be 1..={MAX_KEY_LEN}, got {key_len}"
                )));
            }
            for (i, item) in items.iter().enumerate() {
                if item.key.len() != key_len {
                    return Err(Error::Parse {
                        location: format!("{}: item {i}", path.display()),
                        msg: format!(
                            "key is {} bytes but the format fixes {key_len}",
                            item.key.len()
                        ),
                    });
                }
                w.write_all(item.key.as_slice())?;
                if has_values {
                    let v = u32::try_from(item.value).map_err(|_| Error::Parse {
                        location: format!("{}: item {i}", path.display()),
                        msg: format!("value {} exceeds the raw u32 range", item.value),
                    })?;
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a whole trace back; gzip is detected from the leading magic bytes.
pub fn read_trace(path: &Path, fmt: TraceFormat) -> Result<Vec<StreamItem>> {
    let reader = open_reader(path)?;
    match fmt {
        TraceFormat::Csv => read_csv(path, reader),
        TraceFormat::Raw { key_len, has_values } => read_raw(path, reader, key_len, has_values),
    }
}

fn read_csv(path: &Path, reader: Box<dyn Read>) -> Result<Vec<StreamItem>> {
    let mut items = Vec::new();
    for (lineno, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let at = || format!("{}:{}", path.display(), lineno + 1);
        let (hex, value) = line.split_once(',').ok_or_else(|| Error::Parse {
            location: at(),
            msg: "expected `hexkey,value`".into(),
        })?;
        let key = KeyBytes::from_hex(hex).map_err(|e| Error::Parse {
            location: at(),
            msg: e.to_string(),
        })?;
        let value: u64 = value.trim().parse().map_err(|e| Error::Parse {
            location: at(),
            msg: format!("bad value: {e}"),
        })?;
        items.push(StreamItem { key, value });
    }
    Ok(items)
}

fn read_raw(
    path: &Path,
    reader: Box<dyn Read>,
    key_len: usize,
    has_values: bool,
) -> Result<Vec<StreamItem>> {
    if key_len == 0 || key_len > MAX_KEY_LEN {
        return Err(Error::Config(format!(
            "raw trace key_len must be 1..={MAX_KEY_LEN}, got {key_len}"
        )));
    }
    let mut r = BufReader::new(reader);
    let mut items = Vec::new();
    let record = key_len + if has_values { 4 } else { 0 };
    let mut buf = vec![0u8; record];
    loop {
        // Read one full record, distinguishing clean EOF from truncation.
        let mut filled = 0;
        while filled < record {
            let got = r.read(&mut buf[filled..])?;
            if got == 0 {
                break;
            }
            filled += got;
        }
        if filled == 0 {
            return Ok(items);
        }
        if filled < record {
            return Err(Error::Parse {
                location: format!("{}: record {}", path.display(), items.len()),
                msg: format!("truncated record: {filled} of {record} bytes"),
            });
        }
        let key = KeyBytes::new(&buf[..key_len])?;
        let value = if has_values {
            u32::from_le_bytes(buf[key_len..].try_into().expect("4-byte slice")) as u64
        } else {
            1
        };
        items.push(StreamItem { key, value });
    }
}
