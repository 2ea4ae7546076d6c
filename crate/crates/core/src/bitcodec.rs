//! Binary-reflected Gray code, Hamming distance, and an exhaustive checker
//! for the power-of-two distance property of Gray words.
//!
//! Words are stored packed in a `u64` with the least-significant bit at
//! index 0. The width is fixed at construction and all comparisons require
//! equal widths.

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};

/// Widest word supported by the packed representation.
pub const MAX_WIDTH: u32 = 63;

/// A fixed-width Gray word `G(x)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GrayWord {
    bits: u64,
    width: u32,
}

impl GrayWord {
    /// Wraps raw bits (already Gray coded) as a word of `width` bits.
    pub fn from_bits(bits: u64, width: u32) -> Result<Self> {
        check_width(width)?;
        if bits >> width != 0 {
            return Err(Error::Range { value: bits, bits: width });
        }
        Ok(Self { bits, width })
    }

    /// Parses a most-significant-first `0`/`1` string.
    pub fn parse(s: &str) -> Result<Self> {
        let width = s.len() as u32;
        check_width(width)?;
        let mut bits = 0u64;
        for c in s.chars() {
            bits <<= 1;
            match c {
                '0' => {}
                '1' => bits |= 1,
                other => return Err(Error::Format(format!("invalid bit character {other:?}"))),
            }
        }
        Ok(Self { bits, width })
    }

    pub fn bits(&self) -> u64 {
        self.bits
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    /// Bit `i` (LSB is index 0).
    pub fn bit(&self, i: u32) -> u8 {
        debug_assert!(i < self.width);
        ((self.bits >> i) & 1) as u8
    }

    /// Bits as a vector, LSB first.
    pub fn to_lsb_vec(&self) -> Vec<u8> {
        (0..self.width).map(|i| self.bit(i)).collect()
    }

    /// Most-significant-first `0`/`1` string, the serialization used in CSV dumps.
    pub fn to_bit_string(&self) -> String {
        (0..self.width)
            .rev()
            .map(|i| if self.bit(i) == 1 { '1' } else { '0' })
            .collect()
    }
}

impl fmt::Display for GrayWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_bit_string())
    }
}

fn check_width(width: u32) -> Result<()> {
    if width == 0 || width > MAX_WIDTH {
        return Err(Error::Config(format!(
            "bit width must be in 1..={MAX_WIDTH}, got {width}"
        )));
    }
    Ok(())
}

/// `x XOR (x >> 1)` without range checks.
#[inline]
pub fn gray(x: u64) -> u64 {
    x ^ (x >> 1)
}

/// Inverse of [`gray`] on raw integers.
#[inline]
pub fn gray_inverse(mut g: u64) -> u64 {
    let mut shift = 1;
    while shift < 64 {
        g ^= g >> shift;
        shift <<= 1;
    }
    g
}

/// Encodes `x` as a `width`-bit Gray word.
pub fn gray_encode(x: u64, width: u32) -> Result<GrayWord> {
    check_width(width)?;
    if x >> width != 0 {
        return Err(Error::Range { value: x, bits: width });
    }
    Ok(GrayWord { bits: gray(x), width })
}

pub fn gray_decode(g: &GrayWord) -> u64 {
    gray_inverse(g.bits)
}

/// Number of differing bit positions between two equal-width words.
pub fn hamming_distance(a: &GrayWord, b: &GrayWord) -> Result<u32> {
    if a.width != b.width {
        return Err(Error::Dimension(format!(
            "hamming distance of {}-bit and {}-bit words",
            a.width, b.width
        )));
    }
    Ok((a.bits ^ b.bits).count_ones())
}

/// Hamming distance of two unpacked binary vectors.
pub fn hamming_distance_bits(a: &[u8], b: &[u8]) -> Result<u32> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "hamming distance of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).filter(|(x, y)| x != y).count() as u32)
}

/// Smallest width giving every position in `[0, len)` a distinct word.
pub fn min_width_for_length(len: usize) -> u32 {
    let len = len.max(2) as u64;
    64 - (len - 1).leading_zeros()
}

/// Positional contribution of a Gray-PE pair: `width - d_H(G(i), G(j))`.
///
/// Positions that do not fit in `width` bits wrap modulo `2^width`, which
/// is what a fixed-width hardware register holding the index would do.
pub fn positional_term(i: usize, j: usize, width: u32) -> u32 {
    let mask = if width >= 64 { u64::MAX } else { (1u64 << width) - 1 };
    let gi = gray(i as u64 & mask);
    let gj = gray(j as u64 & mask);
    width - (gi ^ gj).count_ones()
}

/// Two position pairs at different distances that receive the same
/// Gray-PE contribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct PositionalCollision {
    pub first: (usize, usize),
    pub second: (usize, usize),
    pub term: u32,
}

/// Searches `[0, len)` for two off-diagonal pairs whose relative
/// distances differ but whose positional terms at `width` bits agree.
///
/// The search compares pairs anchored at position 0 first, then the
/// full set; it returns `None` only when every distinct distance has a
/// distinct contribution.
pub fn find_positional_collision(len: usize, width: u32) -> Option<PositionalCollision> {
    let mut seen: Vec<Option<(usize, usize)>> = vec![None; width as usize + 1];
    for i in 0..len {
        for j in (i + 1)..len {
            let term = positional_term(i, j, width) as usize;
            match seen[term] {
                Some((a, b)) if b - a != j - i => {
                    return Some(PositionalCollision {
                        first: (a, b),
                        second: (i, j),
                        term: term as u32,
                    });
                }
                Some(_) => {}
                None => seen[term] = Some((i, j)),
            }
        }
    }
    None
}

/// A pair that violated the power-of-two distance property.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Counterexample {
    pub a: u64,
    pub n: u32,
    pub distance: u32,
    pub expected: u32,
}

/// Outcome of [`verify_theorem1`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Theorem1Report {
    pub max_width: u32,
    pub pairs_checked: u64,
    /// Pair counts indexed by observed Hamming distance.
    pub distance_histogram: Vec<u64>,
    pub counterexamples: Vec<Counterexample>,
}

impl Theorem1Report {
    pub fn passed(&self) -> bool {
        self.counterexamples.is_empty()
    }
}

/// Largest width accepted by [`verify_theorem1`].
pub const THEOREM1_MAX_WIDTH: u32 = 20;

/// Exhaustively checks `d_H(G(a), G(a + 2^n))` for every `a + 2^n < 2^max_width`.
///
/// Narrower widths are subsumed: a word of fewer bits is the same word
/// zero-padded, so the pairs below `2^b` for every `b <= max_width` are
/// all covered by the single sweep.
pub fn verify_theorem1(max_width: u32) -> Result<Theorem1Report> {
    verify_theorem1_with(max_width, gray)
}

/// [`verify_theorem1`] with a caller-supplied encoder; used to confirm the
/// checker rejects a broken encoding.
pub fn verify_theorem1_with(max_width: u32, encode: impl Fn(u64) -> u64) -> Result<Theorem1Report> {
    if !(2..=THEOREM1_MAX_WIDTH).contains(&max_width) {
        return Err(Error::Config(format!(
            "theorem check width must be in 2..={THEOREM1_MAX_WIDTH}, got {max_width}"
        )));
    }
    let limit = 1u64 << max_width;
    let mut pairs = 0u64;
    let mut histogram = vec![0u64; max_width as usize + 1];
    let mut counterexamples = Vec::new();
    for n in 0..max_width {
        let step = 1u64 << n;
        let expected = if n == 0 { 1 } else { 2 };
        for a in 0..limit - step {
            let distance = (encode(a) ^ encode(a + step)).count_ones();
            pairs += 1;
            if let Some(slot) = histogram.get_mut(distance as usize) {
                *slot += 1;
            }
            if distance != expected && counterexamples.len() < 16 {
                counterexamples.push(Counterexample { a, n, distance, expected });
            }
        }
    }
    Ok(Theorem1Report {
        max_width,
        pairs_checked: pairs,
        distance_histogram: histogram,
        counterexamples,
    })
}
