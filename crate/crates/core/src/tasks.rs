//! Synthetic position-sensitive datasets and evaluation metrics.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayView2, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Error, Result};

const SHARED_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const VAL_STREAM: u64 = 2;

/// Generator settings for one synthetic task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TaskSpec {
    /// Classify the token `offset` positions before the last one.
    OffsetCopy { len: usize, vocab: usize, offset: usize, train_samples: usize, val_samples: usize },
    /// Forecast the next `horizon` values of `channels` noisy sinusoid mixtures.
    Sinusoid {
        len: usize,
        horizon: usize,
        channels: usize,
        #[serde(default)]
        noise_std: f64,
        train_samples: usize,
        val_samples: usize,
    },
}

impl TaskSpec {
    pub fn name(&self) -> &'static str {
        match self {
            Self::OffsetCopy { .. } => "offset-copy",
            Self::Sinusoid { .. } => "sinusoid",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::OffsetCopy { len, .. } | Self::Sinusoid { len, .. } => *len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self) -> usize {
        match self {
            Self::OffsetCopy { vocab, .. } => *vocab,
            Self::Sinusoid { channels, .. } => *channels,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, Self::OffsetCopy { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::OffsetCopy { len, vocab, offset, train_samples, val_samples } => {
                check_offset_copy(len, vocab, offset)?;
                check_samples(train_samples, val_samples)
            }
            Self::Sinusoid { len, horizon, channels, noise_std, train_samples, val_samples } => {
                check_sinusoid(len, horizon, channels, noise_std)?;
                check_samples(train_samples, val_samples)
            }
        }
    }

    /// Train and validation splits drawn from disjoint streams of `seed`.
    pub fn generate(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        match *self {
            Self::OffsetCopy { len, vocab, offset, train_samples, val_samples } => Ok((
                offset_copy_stream(len, vocab, offset, train_samples, seed, TRAIN_STREAM),
                offset_copy_stream(len, vocab, offset, val_samples, seed, VAL_STREAM),
            )),
            Self::Sinusoid { len, horizon, channels, noise_std, train_samples, val_samples } => {
                let bank = FrequencyBank::draw(channels, seed);
                Ok((
                    sinusoid_stream(&bank, len, horizon, train_samples, noise_std, seed, TRAIN_STREAM),
                    sinusoid_stream(&bank, len, horizon, val_samples, noise_std, seed, VAL_STREAM),
                ))
            }
        }
    }
}

fn check_samples(train: usize, val: usize) -> Result<()> {
    if train == 0 || val == 0 {
        return Err(config_err("train and validation splits must be non-empty"));
    }
    Ok(())
}

fn check_offset_copy(len: usize, vocab: usize, offset: usize) -> Result<()> {
    if vocab < 2 {
        return Err(config_err(format!("vocabulary must have at least 2 tokens, got {vocab}")));
    }
    if offset >= len {
        return Err(config_err(format!("offset {offset} out of range for length {len}")));
    }
    Ok(())
}

fn check_sinusoid(len: usize, horizon: usize, channels: usize, noise_std: f64) -> Result<()> {
    if len == 0 || horizon == 0 || channels == 0 {
        return Err(config_err("length, horizon and channel count must be positive"));
    }
    if !(noise_std.is_finite() && noise_std >= 0.0) {
        return Err(config_err(format!("noise standard deviation must be non-negative, got {noise_std}")));
    }
    Ok(())
}

/// Targets of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes { labels: Vec<usize>, classes: usize },
    /// Shaped `[sample, channel, horizon]`.
    Values(Array3<f64>),
}

/// Inputs shaped `[sample, position, feature]` with matching targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Array3<f64>,
    pub targets: Targets,
}

const CACHE_MAGIC: &[u8; 4] = b"SPKD";
const CACHE_VERSION: u32 = 1;

impl Dataset {
    pub fn samples(&self) -> usize {
        self.inputs.len_of(Axis(0))
    }

    pub fn seq_len(&self) -> usize {
        self.inputs.len_of(Axis(1))
    }

    pub fn features(&self) -> usize {
        self.inputs.len_of(Axis(2))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        let (n, l, f) = self.inputs.dim();
        for v in [n, l, f] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        match &self.targets {
            Targets::Classes { labels, classes } => {
                out.push(0);
                out.extend_from_slice(&(*classes as u64).to_le_bytes());
                for &y in labels {
                    out.extend_from_slice(&(y as u64).to_le_bytes());
                }
            }
            Targets::Values(v) => {
                out.push(1);
                let (_, c, h) = v.dim();
                out.extend_from_slice(&(c as u64).to_le_bytes());
                out.extend_from_slice(&(h as u64).to_le_bytes());
                v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
            }
        }
        self.inputs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != CACHE_MAGIC {
            return Err(Error::Format("not a dataset cache".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != CACHE_VERSION {
            return Err(Error::Format(format!("unsupported dataset cache version {version}")));
        }
        let (n, l, f) = (r.u64()? as usize, r.u64()? as usize, r.u64()? as usize);
        let targets = match r.take(1)?[0] {
            0 => {
                let classes = r.u64()? as usize;
                let labels = (0..n).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
                Targets::Classes { labels, classes }
            }
            1 => {
                let (c, h) = (r.u64()? as usize, r.u64()? as usize);
                let vals = (0..n * c * h).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                Targets::Values(Array3::from_shape_vec((n, c, h), vals).map_err(|e| Error::Format(e.to_string()))?)
            }
            k => return Err(Error::Format(format!("unknown target kind {k}"))),
        };
        let vals = (0..n * l * f).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes in dataset cache".into()));
        }
        let inputs = Array3::from_shape_vec((n, l, f), vals).map_err(|e| Error::Format(e.to_string()))?;
        Ok(Self { inputs, targets })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let s = self.bytes.get(self.pos..end).ok_or_else(|| Error::Format("truncated dataset cache".into()))?;
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Cache file names for the two splits of a task keyed by `digest`.
pub fn cache_paths(dir: &Path, digest: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{digest}.train.bin")), dir.join(format!("{digest}.val.bin")))
}

/// Loads both splits from `dir` when cached, otherwise generates and stores them.
pub fn load_or_generate(spec: &TaskSpec, seed: u64, dir: &Path, digest: &str) -> Result<(Dataset, Dataset)> {
    let (tp, vp) = cache_paths(dir, digest);
    if tp.exists() && vp.exists() {
        if let (Ok(t), Ok(v)) = (Dataset::load(&tp), Dataset::load(&vp)) {
            return Ok((t, v));
        }
        log::warn!("ignoring unreadable dataset cache in {}", dir.display());
    }
    let (train, val) = spec.generate(seed)?;
    fs::create_dir_all(dir)?;
    train.save(&tp)?;
    val.save(&vp)?;
    Ok((train, val))
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One-hot token sequences; the label is the token at position `len - 1 - offset`.
///
/// Every sequence holds each token `len / vocab` times (the remainder going
/// to distinct random tokens), so token counts carry no information about
/// the label.
pub fn gen_offset_copy(len: usize, vocab: usize, offset: usize, n_samples: usize, seed: u64) -> Result<Dataset> {
    check_offset_copy(len, vocab, offset)?;
    Ok(offset_copy_stream(len, vocab, offset, n_samples, seed, TRAIN_STREAM))
}

fn offset_copy_stream(len: usize, vocab: usize, offset: usize, n: usize, seed: u64, stream: u64) -> Dataset {
    let mut rng = stream_rng(seed, stream);
    let mut inputs = Array3::zeros((n, len, vocab));
    let mut labels = Vec::with_capacity(n);
    let mut tokens = Vec::with_capacity(len);
    let mut all: Vec<usize> = (0..vocab).collect();
    for s in 0..n {
        tokens.clear();
        for t in 0..vocab {
            tokens.extend(std::iter::repeat_n(t, len / vocab));
        }
        all.shuffle(&mut rng);
        tokens.extend_from_slice(&all[..len % vocab]);
        tokens.shuffle(&mut rng);
        for (l, &t) in tokens.iter().enumerate() {
            inputs[[s, l, t]] = 1.0;
        }
        labels.push(tokens[len - 1 - offset]);
    }
    Dataset { inputs, targets: Targets::Classes { labels, classes: vocab } }
}

/// Per-channel angular frequencies shared by both splits.
struct FrequencyBank {
    omegas: Vec<[f64; 2]>,
}

impl FrequencyBank {
    fn draw(channels: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, SHARED_STREAM);
        let omegas = (0..channels)
            .map(|_| [2.0 * PI / rng.random_range(4.0..12.0), 2.0 * PI / rng.random_range(12.0..32.0)])
            .collect();
        Self { omegas }
    }
}

/// Windows of two-component sinusoid mixtures with Gaussian noise; targets
/// are the next `horizon` values of every channel.
pub fn gen_sinusoid_forecast(
    len: usize,
    horizon: usize,
    channels: usize,
    n_samples: usize,
    noise_std: f64,
    seed: u64,
) -> Result<Dataset> {
    check_sinusoid(len, horizon, channels, noise_std)?;
    let bank = FrequencyBank::draw(channels, seed);
    Ok(sinusoid_stream(&bank, len, horizon, n_samples, noise_std, seed, TRAIN_STREAM))
}

fn sinusoid_stream(
    bank: &FrequencyBank,
    len: usize,
    horizon: usize,
    n: usize,
    noise_std: f64,
    seed: u64,
    stream: u64,
) -> Dataset {
    let mut rng = stream_rng(seed, stream);
    let channels = bank.omegas.len();
    let noise = Normal::new(0.0, noise_std).expect("validated");
    let mut inputs = Array3::zeros((n, len, channels));
    let mut targets = Array3::zeros((n, channels, horizon));
    for s in 0..n {
        for (c, om) in bank.omegas.iter().enumerate() {
            let amp = [rng.random_range(0.5..1.5), rng.random_range(0.25..0.75)];
            let phase = [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)];
            let at = |t: usize| (0..2).map(|m| amp[m] * (om[m] * t as f64 + phase[m]).sin()).sum::<f64>();
            for t in 0..len + horizon {
                let mut v = at(t);
                if noise_std > 0.0 {
                    v += noise.sample(&mut rng);
                }
                if t < len {
                    inputs[[s, t, c]] = v;
                } else {
                    targets[[s, c, t - len]] = v;
                }
            }
        }
    }
    Dataset { inputs, targets: Targets::Values(targets) }
}

/// Evaluation summary; absent metrics serialize as `null`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub r2: Option<f64>,
    pub rse: Option<f64>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain struct")
    }
}

/// Fraction of rows whose arg-max matches the label.
pub fn accuracy(logits: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
    if logits.nrows() != labels.len() || labels.is_empty() {
        return Err(dim_err(format!("{} logit rows for {} labels", logits.nrows(), labels.len())));
    }
    let hits = logits
        .outer_iter()
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
            best.0 == y
        })
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Per-`(channel, horizon)` R² with the cells that were left out.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct R2Score {
    pub value: f64,
    /// `(channel, horizon)` cells whose target has zero variance.
    pub excluded: Vec<(usize, usize)>,
}

fn check_metric_shapes(pred: &ArrayView3<'_, f64>, target: &ArrayView3<'_, f64>) -> Result<()> {
    if pred.dim() != target.dim() {
        return Err(dim_err(format!("prediction {:?} vs target {:?}", pred.dim(), target.dim())));
    }
    Ok(())
}

/// R² over `[sample, channel, horizon]` arrays.
///
/// For each `(c, l)`, `1 - sum_m (Y - Yhat)^2 / sum_m (Y - Ybar_{c,l})^2`
/// with `Ybar_{c,l}` the sample mean, averaged over cells. Cells with zero
/// target variance are excluded and listed.
pub fn r2_report(pred: ArrayView3<'_, f64>, target: ArrayView3<'_, f64>) -> Result<R2Score> {
    check_metric_shapes(&pred, &target)?;
    let (m, c, h) = target.dim();
    if m < 2 {
        return Err(dim_err("R² needs at least two samples"));
    }
    let mut sum = 0.0;
    let mut cells = 0usize;
    let mut excluded = Vec::new();
    for ci in 0..c {
        for hi in 0..h {
            let y = target.slice(ndarray::s![.., ci, hi]);
            let p = pred.slice(ndarray::s![.., ci, hi]);
            let mean = y.mean().expect("non-empty");
            let den: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
            if den == 0.0 {
                excluded.push((ci, hi));
                continue;
            }
            let num: f64 = y.iter().zip(p.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            sum += 1.0 - num / den;
            cells += 1;
        }
    }
    if cells == 0 {
        return Err(Error::Numeric(format!("every target cell has zero variance: {excluded:?}")));
    }
    if !excluded.is_empty() {
        log::warn!("R² excludes zero-variance cells {excluded:?}");
    }
    Ok(R2Score { value: sum / cells as f64, excluded })
}

pub fn metric_r2(pred: ArrayView3<'_, f64>, target: ArrayView3<'_, f64>) -> Result<f64> {
    r2_report(pred, target).map(|r| r.value)
}

/// Term-by-term R²: the mean of `1 - (Y - Yhat)^2 / (Y - Ybar_{c,l})^2`
/// over every entry whose deviation from the cell mean is non-zero.
pub fn metric_r2_elementwise(pred: ArrayView3<'_, f64>, target: ArrayView3<'_, f64>) -> Result<f64> {
    check_metric_shapes(&pred, &target)?;
    if target.len_of(Axis(0)) < 2 {
        return Err(dim_err("R² needs at least two samples"));
    }
    let means = target.mean_axis(Axis(0)).expect("non-empty");
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((idx, &y), &p) in target.indexed_iter().zip(pred.iter()) {
        let dev = y - means[[idx.1, idx.2]];
        if dev == 0.0 {
            continue;
        }
        sum += 1.0 - (y - p) * (y - p) / (dev * dev);
        count += 1;
    }
    if count == 0 {
        return Err(Error::Numeric("every target entry equals its cell mean".into()));
    }
    Ok(sum / count as f64)
}

/// `sqrt(sum (Y - Yhat)^2 / sum (Y - Ybar)^2)` with `Ybar` the global mean.
pub fn metric_rse(pred: ArrayView3<'_, f64>, target: ArrayView3<'_, f64>) -> Result<f64> {
    check_metric_shapes(&pred, &target)?;
    let mean = target.mean().ok_or_else(|| dim_err("empty target"))?;
    let den: f64 = target.iter().map(|v| (v - mean) * (v - mean)).sum();
    if den == 0.0 {
        return Err(Error::Numeric("RSE denominator is zero".into()));
    }
    let num: f64 = target.iter().zip(pred.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((num / den).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn col(v: &[f64]) -> Array3<f64> {
        Array3::from_shape_vec((v.len(), 1, 1), v.to_vec()).unwrap()
    }

    #[test]
    fn offset_copy_labels() {
        let ds = gen_offset_copy(16, 8, 3, 50, 7).unwrap();
        let Targets::Classes { labels, classes } = &ds.targets else { panic!() };
        assert_eq!(*classes, 8);
        for (s, &y) in labels.iter().enumerate() {
            assert_eq!(ds.inputs[[s, 12, y]], 1.0);
            let counts = ds.inputs.index_axis(Axis(0), s).sum_axis(Axis(0));
            assert!(counts.iter().all(|&c| c == 2.0));
        }
    }

    #[test]
    fn offset_zero_is_last_token() {
        let ds = gen_offset_copy(10, 4, 0, 20, 1).unwrap();
        let Targets::Classes { labels, .. } = &ds.targets else { panic!() };
        for (s, &y) in labels.iter().enumerate() {
            assert_eq!(ds.inputs[[s, 9, y]], 1.0);
        }
    }

    #[test]
    fn offset_copy_errors() {
        assert!(matches!(gen_offset_copy(16, 8, 16, 1, 0), Err(Error::Config(_))));
        assert!(matches!(gen_offset_copy(16, 1, 3, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn generators_are_deterministic() {
        let a = gen_offset_copy(16, 8, 3, 30, 11).unwrap();
        let b = gen_offset_copy(16, 8, 3, 30, 11).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let a = gen_sinusoid_forecast(32, 4, 2, 10, 0.1, 5).unwrap();
        let b = gen_sinusoid_forecast(32, 4, 2, 10, 0.1, 5).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn splits_differ() {
        let spec = TaskSpec::OffsetCopy { len: 16, vocab: 8, offset: 3, train_samples: 20, val_samples: 20 };
        let (t, v) = spec.generate(3).unwrap();
        assert_ne!(t.inputs, v.inputs);
    }

    #[test]
    fn noiseless_sinusoid_continues_the_window() {
        let ds = gen_sinusoid_forecast(8, 1, 1, 3, 0.0, 2).unwrap();
        let bank = FrequencyBank::draw(1, 2);
        let Targets::Values(y) = &ds.targets else { panic!() };
        // Recover amplitudes and phases from the window by least squares on
        // the known frequencies, then extrapolate.
        for s in 0..3 {
            let om = bank.omegas[0];
            let basis = |t: f64| [(om[0] * t).sin(), (om[0] * t).cos(), (om[1] * t).sin(), (om[1] * t).cos()];
            let mut ata = [[0.0; 4]; 4];
            let mut atb = [0.0; 4];
            for t in 0..8 {
                let b = basis(t as f64);
                for i in 0..4 {
                    atb[i] += b[i] * ds.inputs[[s, t, 0]];
                    for j in 0..4 {
                        ata[i][j] += b[i] * b[j];
                    }
                }
            }
            let coef = solve4(ata, atb);
            let b = basis(8.0);
            let pred: f64 = (0..4).map(|i| coef[i] * b[i]).sum();
            assert_abs_diff_eq!(pred, y[[s, 0, 0]], epsilon = 1e-6);
        }
    }

    fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> [f64; 4] {
        for i in 0..4 {
            let p = (i..4).max_by(|&x, &y| a[x][i].abs().total_cmp(&a[y][i].abs())).unwrap();
            a.swap(i, p);
            b.swap(i, p);
            for r in i + 1..4 {
                let f = a[r][i] / a[i][i];
                for c in i..4 {
                    a[r][c] -= f * a[i][c];
                }
                b[r] -= f * b[i];
            }
        }
        let mut x = [0.0; 4];
        for i in (0..4).rev() {
            x[i] = (b[i] - (i + 1..4).map(|c| a[i][c] * x[c]).sum::<f64>()) / a[i][i];
        }
        x
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_sinusoid_forecast(6, 2, 3, 4, 0.5, 9).unwrap();
        let p = dir.path().join("d.bin");
        ds.save(&p).unwrap();
        assert_eq!(Dataset::load(&p).unwrap(), ds);
        let ds = gen_offset_copy(6, 3, 2, 4, 9).unwrap();
        assert_eq!(Dataset::from_bytes(&ds.to_bytes()).unwrap(), ds);
        let bytes = ds.to_bytes();
        assert!(Dataset::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn r2_examples() {
        let y = col(&[1.0, 2.0, 3.0]);
        assert_eq!(metric_r2(y.view(), y.view()).unwrap(), 1.0);
        let mean = col(&[2.0, 2.0, 2.0]);
        assert_eq!(metric_r2(mean.view(), y.view()).unwrap(), 0.0);
        let p = col(&[1.0, 2.0, 4.0]);
        assert_abs_diff_eq!(metric_r2(p.view(), y.view()).unwrap(), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(metric_r2_elementwise(p.view(), y.view()).unwrap(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn r2_zero_variance() {
        let y = Array3::from_shape_vec((2, 2, 1), vec![1.0, 5.0, 3.0, 5.0]).unwrap();
        let r = r2_report(y.view(), y.view()).unwrap();
        assert_eq!(r.excluded, vec![(1, 0)]);
        assert_eq!(r.value, 1.0);
        let flat = col(&[4.0, 4.0]);
        assert!(matches!(metric_r2(flat.view(), flat.view()), Err(Error::Numeric(_))));
    }

    #[test]
    fn rse_examples() {
        let y = col(&[0.0, 2.0]);
        assert_eq!(metric_rse(y.view(), y.view()).unwrap(), 0.0);
        let p = col(&[1.0, 1.0]);
        assert_abs_diff_eq!(metric_rse(p.view(), y.view()).unwrap(), 1.0, epsilon = 1e-15);
        let flat = col(&[3.0, 3.0]);
        assert!(matches!(metric_rse(flat.view(), flat.view()), Err(Error::Numeric(_))));
    }

    #[test]
    fn report_json_keys() {
        let r = MetricReport { loss: 0.5, accuracy: Some(0.75), r2: None, rse: None };
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["accuracy"], 0.75);
        assert!(v["r2"].is_null());
    }

    #[test]
    fn spec_rejects_unknown_keys() {
        let ok: TaskSpec = toml::from_str(
            "kind = \"offset-copy\"\nlen = 16\nvocab = 8\noffset = 3\ntrain_samples = 4\nval_samples = 4",
        )
        .unwrap();
        assert_eq!(ok.len(), 16);
        let bad = toml::from_str::<TaskSpec>(
            "kind = \"offset-copy\"\nlen = 16\nvocab = 8\noffset = 3\ntrain_samples = 4\nval_samples = 4\nextra = 1",
        );
        assert!(bad.is_err());
    }
}
