//! Fixed-point piecewise-linear log2 for the Log-PE bias.
//!
//! An `N`-bit input `x` is split into its exponent `e = floor(log2 x)` and
//! normalized mantissa `x / 2^e` in `[1, 2)`. The fractional part of the
//! mantissa is cut into `K` equal-width segments, each holding a line
//! `a * t + b` in `P`-bit sign-magnitude fixed point with `P - 2` fraction
//! bits, where `t` is the offset inside the segment. Evaluation is integer
//! only: a leading-zero count, shifts, one multiply and one add.
//!
//! The bias uses `log2(L-1) - log2(|i-j|+1)`. When the ratio is an exact
//! power of two both mantissas coincide, so the segment terms cancel and the
//! ceiling sees an exact integer.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::attention::{log_pe_bias, RelativeBias};
use crate::error::{config_err, Error, Result};

pub const MAX_INPUT_BITS: u32 = 16;
pub const MIN_PARAM_BITS: u32 = 4;
pub const MAX_PARAM_BITS: u32 = 31;

/// One table segment: slope and intercept in fixed point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Segment {
    pub a: i32,
    pub b: i32,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Log2Lut {
    n_bits: u32,
    k_segments: u32,
    p_bits: u32,
    segments: Vec<Segment>,
    max_abs_error: f64,
}

fn check_shape(n: u32, k: u32, p: u32) -> Result<()> {
    if !(1..=MAX_INPUT_BITS).contains(&n) {
        return Err(config_err(format!("input width must be in 1..={MAX_INPUT_BITS}, got {n}")));
    }
    if !(MIN_PARAM_BITS..=MAX_PARAM_BITS).contains(&p) {
        return Err(config_err(format!(
            "parameter width must be in {MIN_PARAM_BITS}..={MAX_PARAM_BITS}, got {p}"
        )));
    }
    if k == 0 || !k.is_power_of_two() || k > 1 << (n - 1) {
        return Err(config_err(format!(
            "segment count must be a power of two in 1..={}, got {k}",
            1u32 << (n - 1)
        )));
    }
    Ok(())
}

/// Builds a table by least-squares fitting `log2` on every segment.
pub fn build_log2_lut(n_bits: u32, k_segments: u32, p_bits: u32) -> Result<Log2Lut> {
    check_shape(n_bits, k_segments, p_bits)?;
    let frac = p_bits - 2;
    let limit = 1i64 << (p_bits - 1);
    let shift = n_bits - 1 - k_segments.trailing_zeros();
    let scale = (1u64 << (n_bits - 1)) as f64;
    let width = 1u64 << shift;
    let mut segments = Vec::with_capacity(k_segments as usize);
    for idx in 0..k_segments as u64 {
        let pts: Vec<(f64, f64)> = (0..width)
            .map(|d| {
                let t = d as f64 / scale;
                let u = (idx * width + d) as f64 / scale;
                (t, (1.0 + u).log2())
            })
            .collect();
        let (a, b) = least_squares(&pts);
        let quant = |v: f64| -> Result<i32> {
            let q = (v * (1u64 << frac) as f64).round() as i64;
            if q.abs() >= limit {
                return Err(Error::Build(format!(
                    "coefficient {v} overflows {p_bits}-bit fixed point in segment {idx}"
                )));
            }
            Ok(q as i32)
        };
        segments.push(Segment { a: quant(a)?, b: quant(b)? });
    }
    let mut lut = Log2Lut { n_bits, k_segments, p_bits, segments, max_abs_error: 0.0 };
    lut.max_abs_error = lut.scan_error();
    Ok(lut)
}

fn least_squares(pts: &[(f64, f64)]) -> (f64, f64) {
    let n = pts.len() as f64;
    if pts.len() == 1 {
        return (0.0, pts[0].1);
    }
    let (st, sy) = pts.iter().fold((0.0, 0.0), |(a, b), &(t, y)| (a + t, b + y));
    let (mt, my) = (st / n, sy / n);
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for &(t, y) in pts {
        sxy += (t - mt) * (y - my);
        sxx += (t - mt) * (t - mt);
    }
    let a = sxy / sxx;
    (a, my - a * mt)
}

impl Log2Lut {
    pub fn n_bits(&self) -> u32 {
        self.n_bits
    }

    pub fn k_segments(&self) -> u32 {
        self.k_segments
    }

    pub fn p_bits(&self) -> u32 {
        self.p_bits
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Fraction bits of the fixed-point coefficients and outputs.
    pub fn frac_bits(&self) -> u32 {
        self.p_bits - 2
    }

    /// Largest `|eval(x) - log2(x)|` over every representable input.
    pub fn max_abs_error(&self) -> f64 {
        self.max_abs_error
    }

    /// `K * (N + 2P)` bits.
    pub fn storage_bits(&self) -> u64 {
        u64::from(self.k_segments) * u64::from(self.n_bits + 2 * self.p_bits)
    }

    pub fn storage_bytes(&self) -> f64 {
        self.storage_bits() as f64 / 8.0
    }

    /// `log2(x)` in fixed point with [`Log2Lut::frac_bits`] fraction bits.
    pub fn eval_fixed(&self, x: u32) -> Result<i64> {
        if x == 0 || u64::from(x) >= 1u64 << self.n_bits {
            return Err(config_err(format!("input {x} outside [1, 2^{})", self.n_bits)));
        }
        let top = self.n_bits - 1;
        let e = 31 - x.leading_zeros();
        let u = (u64::from(x) << (top - e)) - (1u64 << top);
        let shift = top - self.k_segments.trailing_zeros();
        let seg = self.segments[(u >> shift) as usize];
        let d = (u & ((1u64 << shift) - 1)) as i64;
        let frac = self.frac_bits();
        Ok((i64::from(e) << frac) + i64::from(seg.b) + ((i64::from(seg.a) * d) >> top))
    }

    pub fn eval(&self, x: u32) -> Result<f64> {
        Ok(self.eval_fixed(x)? as f64 / (1u64 << self.frac_bits()) as f64)
    }

    fn scan_error(&self) -> f64 {
        (1..1u32 << self.n_bits)
            .map(|x| (self.eval(x).expect("in range") - f64::from(x).log2()).abs())
            .fold(0.0, f64::max)
    }

    /// `max(0, ceil(log2(num / den)))` using the table for both logarithms.
    pub fn ceil_log2_ratio(&self, num: u32, den: u32) -> Result<u32> {
        if den == 0 {
            return Err(config_err("zero denominator"));
        }
        if den >= num {
            return Ok(0);
        }
        let diff = self.eval_fixed(num)? - self.eval_fixed(den)?;
        if diff <= 0 {
            return Ok(0);
        }
        let one = 1i64 << self.frac_bits();
        Ok(((diff + one - 1) >> self.frac_bits()) as u32)
    }

    /// Serializes as: `N`, `K`, `P` as little-endian `u16`, then `K` pairs
    /// `(a, b)` of `P`-bit sign-magnitude words packed MSB-first.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for v in [self.n_bits, self.k_segments, self.p_bits] {
            out.extend_from_slice(&(v as u16).to_le_bytes());
        }
        let mut bits = BitWriter::default();
        for s in &self.segments {
            bits.push(sign_magnitude(s.a, self.p_bits), self.p_bits);
            bits.push(sign_magnitude(s.b, self.p_bits), self.p_bits);
        }
        out.extend(bits.finish());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 6 {
            return Err(Error::Format("table header truncated".into()));
        }
        let word = |i: usize| u32::from(u16::from_le_bytes([bytes[2 * i], bytes[2 * i + 1]]));
        let (n, k, p) = (word(0), word(1), word(2));
        check_shape(n, k, p).map_err(|e| Error::Format(e.to_string()))?;
        let body = &bytes[6..];
        let need = (2 * k as usize * p as usize).div_ceil(8);
        if body.len() != need {
            return Err(Error::Format(format!("expected {need} coefficient bytes, found {}", body.len())));
        }
        let mut reader = BitReader { bytes: body, pos: 0 };
        let segments = (0..k)
            .map(|_| {
                let a = from_sign_magnitude(reader.take(p), p);
                let b = from_sign_magnitude(reader.take(p), p);
                Segment { a, b }
            })
            .collect();
        let mut lut = Log2Lut { n_bits: n, k_segments: k, p_bits: p, segments, max_abs_error: 0.0 };
        lut.max_abs_error = lut.scan_error();
        Ok(lut)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn sign_magnitude(v: i32, p: u32) -> u64 {
    let mag = u64::from(v.unsigned_abs());
    if v < 0 {
        (1 << (p - 1)) | mag
    } else {
        mag
    }
}

fn from_sign_magnitude(w: u64, p: u32) -> i32 {
    let mag = (w & ((1 << (p - 1)) - 1)) as i32;
    if w >> (p - 1) & 1 == 1 {
        -mag
    } else {
        mag
    }
}

#[derive(Default)]
struct BitWriter {
    bytes: Vec<u8>,
    used: u32,
}

impl BitWriter {
    fn push(&mut self, value: u64, width: u32) {
        for i in (0..width).rev() {
            if self.used % 8 == 0 {
                self.bytes.push(0);
            }
            let bit = (value >> i & 1) as u8;
            *self.bytes.last_mut().expect("pushed above") |= bit << (7 - self.used % 8);
            self.used += 1;
        }
    }

    fn finish(self) -> Vec<u8> {
        self.bytes
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl BitReader<'_> {
    fn take(&mut self, width: u32) -> u64 {
        let mut v = 0;
        for _ in 0..width {
            let bit = self.bytes[self.pos / 8] >> (7 - self.pos % 8) & 1;
            v = v << 1 | u64::from(bit);
            self.pos += 1;
        }
        v
    }
}

/// Longest sequence covered by [`recorded_exact_lut`].
pub const RECORDED_MAX_LEN: usize = 512;
/// `(N, K, P)` of the cheapest table reproducing the exact bias for every
/// length up to [`RECORDED_MAX_LEN`], as found by [`search_exact_lut`].
pub const RECORDED_NKP: (u32, u32, u32) = (9, 1, 11);

pub fn recorded_exact_lut() -> Result<Log2Lut> {
    let (n, k, p) = RECORDED_NKP;
    build_log2_lut(n, k, p)
}

/// Log-PE bias with both logarithms taken from `lut`.
pub fn lut_log_pe_bias(len: usize, lut: &Log2Lut) -> Result<RelativeBias> {
    if len < 2 {
        return Err(config_err(format!("sequence length must be at least 2, got {len}")));
    }
    if (len - 1) as u64 >= 1u64 << lut.n_bits() {
        return Err(config_err(format!(
            "length {len} needs {}-bit inputs, table has {}",
            usize::BITS - (len - 1).leading_zeros(),
            lut.n_bits()
        )));
    }
    let profile = (0..len)
        .map(|d| lut.ceil_log2_ratio((len - 1) as u32, (d + 1) as u32))
        .collect::<Result<Vec<_>>>()?;
    Ok(RelativeBias::from_distance_profile(&profile))
}

/// Input width needed for every length up to `max_len`.
pub fn input_bits_for(max_len: usize) -> u32 {
    (usize::BITS - max_len.saturating_sub(1).leading_zeros()).max(1)
}

/// Mismatching `(L-1, |i-j|+1)` pairs for every `L` in `2..=max_len`.
///
/// Each bias entry depends only on that pair, so this covers every entry of
/// every matrix.
pub fn count_ratio_mismatches(lut: &Log2Lut, max_len: usize) -> Result<u64> {
    let mut bad = 0;
    for num in 1..max_len as u32 {
        for den in 1..=num {
            let exact = crate::attention::ceil_log2_ratio(u64::from(num), u64::from(den));
            if lut.ceil_log2_ratio(num, den)? != exact {
                bad += 1;
            }
        }
    }
    Ok(bad)
}

/// Number of entries where the table bias differs from the exact bias,
/// comparing full matrices for every `L` in `2..=max_len`.
pub fn count_matrix_mismatches(lut: &Log2Lut, max_len: usize) -> Result<u64> {
    let mut bad = 0;
    for len in 2..=max_len {
        let exact = log_pe_bias(len)?;
        let approx = lut_log_pe_bias(len, lut)?;
        bad += exact.view().iter().zip(approx.view().iter()).filter(|(a, b)| a != b).count() as u64;
    }
    Ok(bad)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LutSearchResult {
    pub n_bits: u32,
    pub k_segments: u32,
    pub p_bits: u32,
    pub storage_bits: u64,
    pub max_abs_error: f64,
    pub candidates_tried: usize,
}

/// Cheapest `(K, P)` (by storage, then `K`) with `K <= k_max`, `P <= p_max`
/// whose bias matches the exact one for every length up to `max_len`.
pub fn search_exact_lut(max_len: usize, k_max: u32, p_max: u32) -> Result<Option<(Log2Lut, LutSearchResult)>> {
    if max_len < 2 {
        return Err(config_err("maximum length must be at least 2"));
    }
    let n = input_bits_for(max_len);
    let mut cands = Vec::new();
    let mut k = 1;
    while k <= k_max && k <= 1 << (n - 1) {
        for p in MIN_PARAM_BITS..=p_max.min(MAX_PARAM_BITS) {
            cands.push((u64::from(k) * u64::from(n + 2 * p), k, p));
        }
        k *= 2;
    }
    cands.sort_unstable();
    for (tried, &(bits, k, p)) in cands.iter().enumerate() {
        let lut = match build_log2_lut(n, k, p) {
            Ok(l) => l,
            Err(Error::Build(_)) => continue,
            Err(e) => return Err(e),
        };
        if count_ratio_mismatches(&lut, max_len)? == 0 {
            let res = LutSearchResult {
                n_bits: n,
                k_segments: k,
                p_bits: p,
                storage_bits: bits,
                max_abs_error: lut.max_abs_error(),
                candidates_tried: tried + 1,
            };
            return Ok(Some((lut, res)));
        }
    }
    Ok(None)
}
