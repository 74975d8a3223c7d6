//! Consistent-hashing identifier space.
//!
//! Identifiers live on a ring of `2^bits` points. Every arithmetic operation
//! wraps modulo the ring size. Production code uses 64 bits; tests shrink the
//! ring to 8 bits so that properties can be checked exhaustively.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Default ring width.
pub const DEFAULT_BITS: u32 = 64;

/// A point on the identifier ring.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Identifier(pub u64);

impl Identifier {
    pub fn value(self) -> u64 {
        self.0
    }

    /// Fixed-width lowercase hex, 16 digits.
    pub fn to_hex(self) -> String {
        format!("{:016x}", self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        if s.len() != 16 {
            return Err(Error::InvalidArgument(format!("identifier `{s}` is not 16 hex digits")));
        }
        u64::from_str_radix(s, 16)
            .map(Identifier)
            .map_err(|e| Error::InvalidArgument(format!("identifier `{s}`: {e}")))
    }
}

impl fmt::Debug for Identifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Id({})", self.to_hex())
    }
}

impl fmt::Display for Identifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Identifier {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Identifier {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = <std::borrow::Cow<'de, str>>::deserialize(d)?;
        Identifier::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// The ring itself: just its bit width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RingSpace {
    bits: u32,
}

impl Default for RingSpace {
    fn default() -> Self {
        RingSpace { bits: DEFAULT_BITS }
    }
}

impl RingSpace {
    pub fn new(bits: u32) -> Result<Self> {
        if bits == 0 || bits > 64 {
            return Err(Error::InvalidArgument(format!("ring width {bits} not in [1, 64]")));
        }
        Ok(RingSpace { bits })
    }

    pub fn bits(self) -> u32 {
        self.bits
    }

    fn mask(self) -> u64 {
        if self.bits == 64 {
            u64::MAX
        } else {
            (1u64 << self.bits) - 1
        }
    }

    /// Wraps an arbitrary integer onto the ring.
    pub fn id(self, value: u64) -> Identifier {
        Identifier(value & self.mask())
    }

    pub fn add(self, a: Identifier, delta: u64) -> Identifier {
        Identifier(a.0.wrapping_add(delta) & self.mask())
    }

    /// Clockwise distance from `from` to `to`.
    pub fn distance(self, from: Identifier, to: Identifier) -> u64 {
        to.0.wrapping_sub(from.0) & self.mask()
    }

    /// First `bits` bits (big-endian) of SHA-256(name).
    pub fn hash_id(self, name: &[u8]) -> Result<Identifier> {
        if name.is_empty() {
            return Err(Error::InvalidArgument("cannot hash an empty name".into()));
        }
        let digest = Sha256::digest(name);
        let mut head = [0u8; 8];
        head.copy_from_slice(&digest[..8]);
        let top = u64::from_be_bytes(head);
        Ok(Identifier(if self.bits == 64 { top } else { top >> (64 - self.bits) }))
    }

    /// `(n + 2^(i-1)) mod 2^bits`, for `i` in `[1, bits]`.
    pub fn finger_start(self, n: Identifier, i: u32) -> Result<Identifier> {
        if i == 0 || i > self.bits {
            return Err(Error::InvalidArgument(format!("finger index {i} not in [1, {}]", self.bits)));
        }
        Ok(self.add(n, 1u64 << (i - 1)))
    }

    pub fn contains(self, ivl: RingInterval, x: Identifier) -> bool {
        ivl.contains_in(self, x)
    }
}

/// Hash on the default 64-bit ring.
pub fn hash_id(name: &[u8]) -> Result<Identifier> {
    RingSpace::default().hash_id(name)
}

/// An arc of the ring, walked clockwise from `from` to `to`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RingInterval {
    pub from: Identifier,
    pub to: Identifier,
    pub closed_left: bool,
    pub closed_right: bool,
}

impl RingInterval {
    pub fn open(from: Identifier, to: Identifier) -> Self {
        RingInterval { from, to, closed_left: false, closed_right: false }
    }

    /// `(from, to]`
    pub fn open_closed(from: Identifier, to: Identifier) -> Self {
        RingInterval { from, to, closed_left: false, closed_right: true }
    }

    /// `[from, to)`
    pub fn closed_open(from: Identifier, to: Identifier) -> Self {
        RingInterval { from, to, closed_left: true, closed_right: false }
    }

    fn contains_in(self, ring: RingSpace, x: Identifier) -> bool {
        if x == self.from {
            // `(a, a]` and `[a, a)` wrap the whole ring.
            return self.closed_left || (self.from == self.to && self.closed_right);
        }
        if x == self.to {
            return self.closed_right;
        }
        if self.from == self.to {
            return true;
        }
        ring.distance(self.from, x) < ring.distance(self.from, self.to)
    }
}

/// Membership test on the default 64-bit ring.
pub fn in_interval(x: Identifier, ivl: RingInterval) -> bool {
    RingSpace::default().contains(ivl, x)
}
