//! Spiking attention maps.
//!
//! Every map here is built from binary query/key tensors shaped
//! `[T, L, D]`. Rows are packed into `u64` words so that the XNOR score
//! reduces to `width - popcount(q ^ k)` and the dot score to
//! `popcount(q & k)`.
//!
//! Positional schemes:
//! - Gray-PE appends `G(l)` to both the query and key row of position `l`
//!   before the XNOR, which contributes `b - d_H(G(i), G(j))`.
//! - The 2D form appends `G(row) || G(col)` of a row-major patch grid.
//! - Log-PE adds `max(0, ceil(log2((L-1)/(|i-j|+1))))` after the XNOR.
//! - Complete RPE adds the unquantized ratio and is real valued.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bitcodec::{gray, min_width_for_length, MAX_WIDTH};
use crate::error::{config_err, dim_err, Error, Result};

/// Binary activations indexed `[time-step, position, channel]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpikeTensor {
    data: Array3<u8>,
}

impl SpikeTensor {
    pub fn new(data: Array3<u8>) -> Result<Self> {
        if data.iter().any(|&x| x > 1) {
            return Err(Error::Numeric("spike tensor holds a value other than 0 or 1".into()));
        }
        Ok(Self { data })
    }

    pub fn zeros(steps: usize, len: usize, channels: usize) -> Self {
        Self { data: Array3::zeros((steps, len, channels)) }
    }

    /// Thresholds a real tensor at 0.5; used to lift `{0.0, 1.0}` activations.
    pub fn from_real(values: ArrayView3<'_, f64>) -> Self {
        Self { data: values.mapv(|x| u8::from(x >= 0.5)) }
    }

    /// Bernoulli(`rate`) spikes.
    pub fn random<R: Rng + ?Sized>(steps: usize, len: usize, channels: usize, rate: f64, rng: &mut R) -> Self {
        let data = Array3::from_shape_simple_fn((steps, len, channels), || u8::from(rng.random_bool(rate)));
        Self { data }
    }

    pub fn steps(&self) -> usize {
        self.data.dim().0
    }

    pub fn len(&self) -> usize {
        self.data.dim().1
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn view(&self) -> ArrayView3<'_, u8> {
        self.data.view()
    }

    pub fn to_real(&self) -> Array3<f64> {
        self.data.mapv(f64::from)
    }

    /// Reorders positions so that output position `i` holds input position `perm[i]`.
    pub fn permute_positions(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.len())?;
        Ok(Self { data: self.data.select(Axis(1), perm) })
    }
}

pub(crate) fn check_permutation(perm: &[usize], len: usize) -> Result<()> {
    let mut seen = vec![false; len];
    if perm.len() != len {
        return Err(dim_err(format!("permutation of length {} for {len} positions", perm.len())));
    }
    for &p in perm {
        if p >= len || std::mem::replace(&mut seen[p], true) {
            return Err(dim_err("not a permutation"));
        }
    }
    Ok(())
}

/// Non-negative integer attention scores `[T, L, L]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMap {
    scores: Array3<u32>,
}

impl AttnMap {
    pub fn scores(&self) -> ArrayView3<'_, u32> {
        self.scores.view()
    }

    pub fn into_inner(self) -> Array3<u32> {
        self.scores
    }

    pub fn to_real(&self) -> Array3<f64> {
        self.scores.mapv(f64::from)
    }

    pub fn get(&self, t: usize, i: usize, j: usize) -> u32 {
        self.scores[[t, i, j]]
    }

    pub fn from_scores(scores: Array3<u32>) -> Self {
        Self { scores }
    }

    /// Map with rows and columns reordered as in [`SpikeTensor::permute_positions`].
    pub fn permute_positions(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.scores.dim().1)?;
        let rows = self.scores.select(Axis(1), perm);
        Ok(Self { scores: rows.select(Axis(2), perm) })
    }
}

/// Log-PE bias matrix `R[i][j]`; symmetric and Toeplitz.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelativeBias {
    r: Array2<u32>,
}

impl RelativeBias {
    pub fn len(&self) -> usize {
        self.r.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    pub fn view(&self) -> ArrayView2<'_, u32> {
        self.r.view()
    }

    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.r[[i, j]]
    }

    /// Builds a bias from a per-distance profile `profile[|i - j|]`.
    pub fn from_distance_profile(profile: &[u32]) -> Self {
        let len = profile.len();
        Self { r: Array2::from_shape_fn((len, len), |(i, j)| profile[i.abs_diff(j)]) }
    }

    pub fn zeros(len: usize) -> Self {
        Self { r: Array2::zeros((len, len)) }
    }
}

/// Patch grid for the 2D encoding; positions flatten row-major, `l = row * w + col`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid2D {
    pub h: usize,
    pub w: usize,
}

impl Grid2D {
    pub fn new(h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(config_err(format!("grid must be at least 1x1, got {h}x{w}")));
        }
        Ok(Self { h, w })
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn coords(&self, l: usize) -> (usize, usize) {
        (l / self.w, l % self.w)
    }
}

/// Rows packed into `u64` words, one row per (time-step, position).
struct PackedRows {
    steps: usize,
    len: usize,
    width: usize,
    words: usize,
    data: Vec<u64>,
}

impl PackedRows {
    /// Packs `spikes` and appends `extra(l)` (the low `extra_bits` bits) to each row of position `l`.
    fn pack(spikes: &SpikeTensor, extra_bits: usize, extra: impl Fn(usize) -> u64) -> Self {
        let (steps, len, channels) = spikes.data.dim();
        let width = channels + extra_bits;
        let words = width.div_ceil(64).max(1);
        let mut data = vec![0u64; steps * len * words];
        for t in 0..steps {
            for l in 0..len {
                let row = &mut data[(t * len + l) * words..][..words];
                for (d, &bit) in spikes.data.slice(s![t, l, ..]).iter().enumerate() {
                    if bit != 0 {
                        row[d / 64] |= 1 << (d % 64);
                    }
                }
                let ext = extra(l);
                for e in 0..extra_bits {
                    if (ext >> e) & 1 == 1 {
                        let d = channels + e;
                        row[d / 64] |= 1 << (d % 64);
                    }
                }
            }
        }
        Self { steps, len, width, words, data }
    }

    fn row(&self, t: usize, l: usize) -> &[u64] {
        &self.data[(t * self.len + l) * self.words..][..self.words]
    }
}

fn check_pair(q: &SpikeTensor, k: &SpikeTensor) -> Result<()> {
    if q.data.dim() != k.data.dim() {
        return Err(dim_err(format!(
            "query shape {:?} does not match key shape {:?}",
            q.data.dim(),
            k.data.dim()
        )));
    }
    Ok(())
}

fn pairwise(q: &PackedRows, k: &PackedRows, score: impl Fn(&[u64], &[u64]) -> u32) -> Array3<u32> {
    let mut out = Array3::zeros((q.steps, q.len, k.len));
    for t in 0..q.steps {
        for i in 0..q.len {
            let qi = q.row(t, i);
            for j in 0..k.len {
                out[[t, i, j]] = score(qi, k.row(t, j));
            }
        }
    }
    out
}

fn xnor_packed(q: &PackedRows, k: &PackedRows) -> Array3<u32> {
    let width = q.width as u32;
    pairwise(q, k, |a, b| {
        width - a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum::<u32>()
    })
}

/// Dot-product spiking attention, `sum_d Q[t,i,d] * K[t,j,d]`.
pub fn ssa_dot_map(q: &SpikeTensor, k: &SpikeTensor) -> Result<AttnMap> {
    check_pair(q, k)?;
    let qp = PackedRows::pack(q, 0, |_| 0);
    let kp = PackedRows::pack(k, 0, |_| 0);
    let scores = pairwise(&qp, &kp, |a, b| a.iter().zip(b).map(|(x, y)| (x & y).count_ones()).sum());
    Ok(AttnMap { scores })
}

/// XNOR spiking attention, `D - d_H(Q[t,i], K[t,j])`.
pub fn xnor_map(q: &SpikeTensor, k: &SpikeTensor) -> Result<AttnMap> {
    check_pair(q, k)?;
    let qp = PackedRows::pack(q, 0, |_| 0);
    let kp = PackedRows::pack(k, 0, |_| 0);
    Ok(AttnMap { scores: xnor_packed(&qp, &kp) })
}

fn check_gray_width(len: usize, bits: u32, what: &str) -> Result<()> {
    let need = min_width_for_length(len);
    if bits < need || bits > MAX_WIDTH {
        return Err(config_err(format!(
            "{what} needs between {need} and {MAX_WIDTH} Gray bits for {len} positions, got {bits}"
        )));
    }
    Ok(())
}

/// Gray-PE: XNOR over `[Q || G(i)]` and `[K || G(j)]`.
pub fn gray_pe_map(q: &SpikeTensor, k: &SpikeTensor, bits: u32) -> Result<AttnMap> {
    check_pair(q, k)?;
    check_gray_width(q.len(), bits, "Gray-PE")?;
    let extra = |l: usize| gray(l as u64);
    let qp = PackedRows::pack(q, bits as usize, extra);
    let kp = PackedRows::pack(k, bits as usize, extra);
    Ok(AttnMap { scores: xnor_packed(&qp, &kp) })
}

/// 2D Gray-PE: XNOR over `[Q || G(row) || G(col)]` against the same for keys.
pub fn gray_pe_2d_map(q: &SpikeTensor, k: &SpikeTensor, grid: Grid2D, bits_h: u32, bits_w: u32) -> Result<AttnMap> {
    check_pair(q, k)?;
    if grid.len() != q.len() {
        return Err(config_err(format!(
            "grid {}x{} does not cover {} positions",
            grid.h,
            grid.w,
            q.len()
        )));
    }
    check_gray_width(grid.h, bits_h, "2D Gray-PE height axis")?;
    check_gray_width(grid.w, bits_w, "2D Gray-PE width axis")?;
    if bits_h + bits_w > MAX_WIDTH {
        return Err(config_err("2D Gray-PE words exceed 63 bits"));
    }
    let extra = |l: usize| {
        let (row, col) = grid.coords(l);
        gray(row as u64) | (gray(col as u64) << bits_h)
    };
    let total = (bits_h + bits_w) as usize;
    let qp = PackedRows::pack(q, total, extra);
    let kp = PackedRows::pack(k, total, extra);
    Ok(AttnMap { scores: xnor_packed(&qp, &kp) })
}

/// `max(0, ceil(log2(num / den)))` in exact integer arithmetic.
pub fn ceil_log2_ratio(num: u64, den: u64) -> u32 {
    debug_assert!(den > 0);
    if num <= den {
        return 0;
    }
    let mut n = 0;
    while (den << n) < num {
        n += 1;
    }
    n
}

/// Log-PE bias for a sequence of `len` positions.
pub fn log_pe_bias(len: usize) -> Result<RelativeBias> {
    if len < 2 {
        return Err(config_err(format!("Log-PE needs at least 2 positions, got {len}")));
    }
    let profile: Vec<u32> = (0..len)
        .map(|d| ceil_log2_ratio(len as u64 - 1, d as u64 + 1))
        .collect();
    Ok(RelativeBias::from_distance_profile(&profile))
}

/// XNOR map plus a relative bias broadcast over time-steps.
pub fn log_pe_map(q: &SpikeTensor, k: &SpikeTensor, bias: &RelativeBias) -> Result<AttnMap> {
    check_pair(q, k)?;
    if bias.len() != q.len() {
        return Err(dim_err(format!(
            "bias covers {} positions but the sequence has {}",
            bias.len(),
            q.len()
        )));
    }
    let mut map = xnor_map(q, k)?;
    for mut step in map.scores.outer_iter_mut() {
        step += &bias.r;
    }
    Ok(map)
}

/// Unquantized relative bias `(L-1)/(|i-j|+1)`, kept only for the ablation.
pub fn complete_rpe_bias(len: usize) -> Result<Array2<f64>> {
    if len < 2 {
        return Err(config_err(format!("complete RPE needs at least 2 positions, got {len}")));
    }
    let top = (len - 1) as f64;
    Ok(Array2::from_shape_fn((len, len), |(i, j)| top / (i.abs_diff(j) + 1) as f64))
}

/// XNOR map plus the complete RPE bias; real valued by construction.
pub fn complete_rpe_map(q: &SpikeTensor, k: &SpikeTensor) -> Result<Array3<f64>> {
    let bias = complete_rpe_bias(q.len())?;
    let mut map = xnor_map(q, k)?.to_real();
    for mut step in map.outer_iter_mut() {
        step += &bias;
    }
    Ok(map)
}

/// Positional term `b - d_H(G(i), G(j))` of Gray-PE as an `L x L` matrix.
pub fn gray_term_matrix(len: usize, bits: u32) -> Result<Array2<u32>> {
    check_gray_width(len, bits, "Gray-PE")?;
    Ok(Array2::from_shape_fn((len, len), |(i, j)| {
        bits - (gray(i as u64) ^ gray(j as u64)).count_ones()
    }))
}

/// `sigma * (scores @ V)` per time-step.
pub fn attend(map: &AttnMap, v: &SpikeTensor, sigma: f64) -> Result<Array3<f64>> {
    attend_real(map.to_real().view(), v, sigma)
}

/// [`attend`] for real-valued score maps (complete RPE).
pub fn attend_real(scores: ArrayView3<'_, f64>, v: &SpikeTensor, sigma: f64) -> Result<Array3<f64>> {
    let (steps, rows, cols) = scores.dim();
    if steps != v.steps() || cols != v.len() || rows != v.len() {
        return Err(dim_err(format!(
            "map shape {:?} incompatible with values shape {:?}",
            scores.dim(),
            v.data.dim()
        )));
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(config_err(format!("sigma must be positive, got {sigma}")));
    }
    let values = v.to_real();
    let mut out = Array3::zeros((steps, rows, v.channels()));
    for t in 0..steps {
        let prod = scores.index_axis(Axis(0), t).dot(&values.index_axis(Axis(0), t));
        out.index_axis_mut(Axis(0), t).assign(&(prod * sigma));
    }
    Ok(out)
}

/// Positional scheme applied when building a map.
#[derive(Clone, Debug, PartialEq)]
pub enum PositionalScheme {
    /// Dot-product scores with no positional term.
    Dot,
    /// XNOR scores with no positional term.
    Xnor,
    Gray { bits: u32 },
    Gray2d { grid: Grid2D, bits_h: u32, bits_w: u32 },
    Log { bias: RelativeBias },
    CompleteRpe,
}

impl PositionalScheme {
    /// Number of channels compared per row: `D` plus any appended Gray bits.
    pub fn effective_width(&self, channels: usize) -> usize {
        match self {
            Self::Gray { bits } => channels + *bits as usize,
            Self::Gray2d { bits_h, bits_w, .. } => channels + (*bits_h + *bits_w) as usize,
            _ => channels,
        }
    }

    /// Whether the scores are `sum NOT(q XOR k)` (as opposed to a dot product).
    pub fn is_xnor(&self) -> bool {
        !matches!(self, Self::Dot)
    }

    /// Builds the (real-valued) score map for this scheme.
    pub fn scores(&self, q: &SpikeTensor, k: &SpikeTensor) -> Result<Array3<f64>> {
        Ok(match self {
            Self::Dot => ssa_dot_map(q, k)?.to_real(),
            Self::Xnor => xnor_map(q, k)?.to_real(),
            Self::Gray { bits } => gray_pe_map(q, k, *bits)?.to_real(),
            Self::Gray2d { grid, bits_h, bits_w } => gray_pe_2d_map(q, k, *grid, *bits_h, *bits_w)?.to_real(),
            Self::Log { bias } => log_pe_map(q, k, bias)?.to_real(),
            Self::CompleteRpe => complete_rpe_map(q, k)?,
        })
    }
}
