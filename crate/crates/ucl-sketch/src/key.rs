//! Stream keys and items.
//!
//! Keys are opaque byte strings of fixed width per stream (4 bytes for
//! synthetic rank ids, up to 13 for CAIDA-like five-tuples). They are stored
//! inline so the data-plane hot path never allocates.

use std::fmt;

use crate::error::{Error, Result};

/// Maximum supported key width in bytes.
pub const MAX_KEY_LEN: usize = 32;

/// Frequencies and volumes are accumulated in 64 bits everywhere outside the
/// 32-bit data-plane counters.
pub type Count = u64;

/// A fixed-capacity, inline key. Equality and hashing are plain byte
/// comparisons; the unused tail is always zeroed so the derived impls are
/// consistent.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct KeyBytes {
    len: u8,
    bytes: [u8; MAX_KEY_LEN],
}

impl KeyBytes {
    pub fn new(slice: &[u8]) -> Result<Self> {
        if slice.is_empty() || slice.len() > MAX_KEY_LEN {
            return Err(Error::Config(format!(
                "key length must be 1..={MAX_KEY_LEN} bytes, got {}",
                slice.len()
            )));
        }
        let mut bytes = [0u8; MAX_KEY_LEN];
        bytes[..slice.len()].copy_from_slice(slice);
        Ok(KeyBytes { len: slice.len() as u8, bytes })
    }

    /// 4-byte big-endian encoding, the fixed bijection used for synthetic
    /// rank ids.
    pub fn from_u32_be(id: u32) -> Self {
        KeyBytes::new(&id.to_be_bytes()).expect("4-byte key is always valid")
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.bytes[..self.len as usize]
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn to_hex(&self) -> String {
        self.as_slice().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s.len() % 2 != 0 {
            return Err(Error::Parse {
                location: format!("hex key {s:?}"),
                msg: "hex string must have even, nonzero length".into(),
            });
        }
        let mut out = Vec::with_capacity(s.len() / 2);
        for i in (0..s.len()).step_by(2) {
            let byte = u8::from_str_radix(&s[i..i + 2], 16).map_err(|e| Error::Parse {
                location: format!("hex key {s:?}"),
                msg: e.to_string(),
            })?;
            out.push(byte);
        }
        KeyBytes::new(&out)
    }
}

impl fmt::Debug for KeyBytes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Key({})", self.to_hex())
    }
}

/// One stream update: `value` copies of `key` (synthetic traces use 1).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamItem {
    pub key: KeyBytes,
    pub value: Count,
}

impl StreamItem {
    pub fn unit(key: KeyBytes) -> Self {
        StreamItem { key, value: 1 }
    }
}
