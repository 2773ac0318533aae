//! Labelled random streams.
//!
//! Every random draw in the crate comes from a stream obtained with
//! [`derive_rng`]. A stream is identified by the run seed plus a list of
//! labels (purpose, step, member, ...). The labels are folded into a 64-bit
//! key as follows:
//!
//! ```text
//! h = splitmix64(seed)
//! for each label:
//!     v = label as u64            (integers)
//!       | fnv1a64(label bytes)    (strings)
//!     h = splitmix64(h ^ splitmix64(v + tag))   tag = 1 for ints, 2 for strings
//! ```
//!
//! The key seeds a ChaCha8 generator. Identical labels always produce the same
//! stream; changing any label changes the key.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub enum Label<'a> {
    Str(&'a str),
    Int(u64),
}

impl<'a> From<&'a str> for Label<'a> {
    fn from(s: &'a str) -> Self {
        Label::Str(s)
    }
}

impl From<u64> for Label<'_> {
    fn from(v: u64) -> Self {
        Label::Int(v)
    }
}

impl From<usize> for Label<'_> {
    fn from(v: usize) -> Self {
        Label::Int(v as u64)
    }
}

impl From<u32> for Label<'_> {
    fn from(v: u32) -> Self {
        Label::Int(u64::from(v))
    }
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Mixes a seed and labels into a single 64-bit stream key.
pub fn stream_key(seed: u64, labels: &[Label<'_>]) -> u64 {
    let mut h = splitmix64(seed);
    for label in labels {
        let v = match *label {
            Label::Int(v) => splitmix64(v.wrapping_add(1)),
            Label::Str(s) => splitmix64(fnv1a64(s.as_bytes()).wrapping_add(2)),
        };
        h = splitmix64(h ^ v);
    }
    h
}

pub fn derive_rng(seed: u64, labels: &[Label<'_>]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(stream_key(seed, labels))
}

/// Shorthand: `rng!(seed, "rollout", step, member)`.
#[macro_export]
macro_rules! rng {
    ($seed:expr $(, $label:expr)* $(,)?) => {
        $crate::rng::derive_rng($seed, &[$($crate::rng::Label::from($label)),*])
    };
}
