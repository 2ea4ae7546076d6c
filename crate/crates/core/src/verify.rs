//! Property suites that back the `verify` command.
//!
//! Each suite returns named checks with a JSON detail payload; a failing
//! check carries its first counterexample.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::attention::{gray_pe_map, log_pe_bias, xnor_map, PositionalScheme, SpikeTensor};
use crate::bitcodec::{gray, hamming_distance_bits, min_width_for_length, verify_theorem1_with};
use crate::error::{config_err, Result};
use crate::lut::{count_matrix_mismatches, recorded_exact_lut, Log2Lut, RECORDED_MAX_LEN};
use crate::model::{Head, Model, ModelConfig, PeVariant};
use crate::neuron::Surrogate;
use crate::tasks::{accuracy, metric_r2, metric_rse};
use crate::tensor::{grad_check, AttentionSpec, BatchNormState, DiffTensor, ParamStore};

/// Width of the exhaustive Gray-code sweep.
pub const THEOREM1_WIDTH: u32 = 12;
/// Tolerance on finite-difference gradient checks.
pub const GRAD_TOLERANCE: f64 = 1e-4;
const SEED: u64 = 0x5eed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    All,
    Theorem1,
    Attention,
    Gradients,
    Lut,
    Metrics,
}

impl Scope {
    pub const SUITES: [Scope; 5] = [Self::Theorem1, Self::Attention, Self::Gradients, Self::Lut, Self::Metrics];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::All => "all",
            Self::Theorem1 => "theorem1",
            Self::Attention => "attention",
            Self::Gradients => "gradients",
            Self::Lut => "lut",
            Self::Metrics => "metrics",
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scope {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        std::iter::once(Self::All)
            .chain(Self::SUITES)
            .find(|v| v.as_str() == s)
            .ok_or_else(|| config_err(format!("unknown verification scope {s:?}")))
    }
}

/// Knobs for the suites. `gray` stands in for the Gray encoder wherever a
/// suite needs an independent copy, so a broken encoder can be injected.
#[derive(Clone, Copy)]
pub struct VerifyOptions {
    pub gray: fn(u64) -> u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { gray }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub seconds: f64,
    pub detail: Value,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub suite: Scope,
    pub passed: bool,
    pub checks: Vec<Check>,
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub suites: Vec<SuiteReport>,
}

impl VerifyReport {
    pub fn failures(&self) -> impl Iterator<Item = (&SuiteReport, &Check)> {
        self.suites.iter().flat_map(|s| s.checks.iter().filter(|c| !c.passed).map(move |c| (s, c)))
    }
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, Value)>) -> Result<Check> {
    let start = Instant::now();
    let (passed, detail) = f()?;
    Ok(Check { name: name.to_string(), passed, seconds: start.elapsed().as_secs_f64(), detail })
}

/// Runs the suites selected by `scope`.
pub fn run(scope: Scope, opts: &VerifyOptions) -> Result<VerifyReport> {
    let scopes: Vec<Scope> = if scope == Scope::All { Scope::SUITES.to_vec() } else { vec![scope] };
    let mut suites = Vec::new();
    for s in scopes {
        let checks = match s {
            Scope::Theorem1 => theorem1_suite(opts)?,
            Scope::Attention => attention_suite(opts)?,
            Scope::Gradients => gradient_suite()?,
            Scope::Lut => lut_suite()?,
            Scope::Metrics => metrics_suite()?,
            Scope::All => unreachable!("expanded above"),
        };
        let passed = checks.iter().all(|c| c.passed);
        log::info!("suite {s}: {}", if passed { "pass" } else { "FAIL" });
        suites.push(SuiteReport { suite: s, passed, checks });
    }
    Ok(VerifyReport { passed: suites.iter().all(|s| s.passed), suites })
}

pub fn theorem1_suite(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let check = timed("power-of-two distance", || {
        let report = verify_theorem1_with(THEOREM1_WIDTH, opts.gray)?;
        Ok((report.passed(), serde_json::to_value(&report).expect("plain data")))
    })?;
    Ok(vec![check])
}

/// XNOR score against `D - d_H` on `100 x 100` row pairs per width.
pub fn xnor_duality(widths: &[usize], rng: &mut ChaCha8Rng) -> Result<(bool, Value)> {
    let rows = 100;
    let mut pairs = 0u64;
    for &d in widths {
        let q = SpikeTensor::random(1, rows, d, 0.5, rng);
        let k = SpikeTensor::random(1, rows, d, 0.5, rng);
        let map = xnor_map(&q, &k)?;
        for i in 0..rows {
            let qi: Vec<u8> = q.view().slice(ndarray::s![0, i, ..]).to_vec();
            for j in 0..rows {
                let kj: Vec<u8> = k.view().slice(ndarray::s![0, j, ..]).to_vec();
                let expected = d as u32 - hamming_distance_bits(&qi, &kj)?;
                pairs += 1;
                if map.get(0, i, j) != expected {
                    return Ok((false, json!({"width": d, "i": i, "j": j, "score": map.get(0, i, j), "expected": expected})));
                }
            }
        }
    }
    Ok((true, json!({"widths": widths, "pairs": pairs})))
}

/// Gray-PE map against the XNOR map plus `b - d_H(G(i), G(j))`.
pub fn gray_decomposition(max_len: usize, instances: usize, encode: fn(u64) -> u64, rng: &mut ChaCha8Rng) -> Result<(bool, Value)> {
    let d = 8;
    let mut entries = 0u64;
    for len in 1..=max_len {
        let bits = min_width_for_length(len);
        for _ in 0..instances {
            let rate = rng.random_range(0.1..0.9);
            let q = SpikeTensor::random(1, len, d, rate, rng);
            let k = SpikeTensor::random(1, len, d, rate, rng);
            let gray_map = gray_pe_map(&q, &k, bits)?;
            let plain = xnor_map(&q, &k)?;
            for i in 0..len {
                for j in 0..len {
                    let term = bits - (encode(i as u64) ^ encode(j as u64)).count_ones();
                    entries += 1;
                    if gray_map.get(0, i, j) != plain.get(0, i, j) + term {
                        return Ok((
                            false,
                            json!({"len": len, "bits": bits, "i": i, "j": j,
                                   "gray_pe": gray_map.get(0, i, j), "xnor": plain.get(0, i, j), "term": term}),
                        ));
                    }
                }
            }
        }
    }
    Ok((true, json!({"max_len": max_len, "instances_per_len": instances, "entries": entries})))
}

/// Independent form of `max(0, ceil(log2(num / den)))`: the exponent of the
/// next power of two at or above `ceil(num / den)`.
fn log_bias_oracle(num: u64, den: u64) -> u32 {
    num.div_ceil(den).next_power_of_two().trailing_zeros()
}

/// Symmetry, monotonicity in `|i - j|`, the diagonal value and agreement with
/// [`log_bias_oracle`] for every `L` in `2..=max_len`.
pub fn log_bias_properties(max_len: usize) -> Result<(bool, Value)> {
    for len in 2..=max_len {
        let bias = log_pe_bias(len)?;
        let r = bias.view();
        let fail = |what: &str, i: usize, j: usize| Ok((false, json!({"len": len, "property": what, "i": i, "j": j, "value": r[[i, j]]})));
        if len >= 3 && r[[0, 0]] != log_bias_oracle(len as u64 - 1, 1) {
            return fail("diagonal", 0, 0);
        }
        for i in 0..len {
            for j in 0..len {
                let dist = i.abs_diff(j);
                if r[[i, j]] != r[[j, i]] {
                    return fail("symmetric", i, j);
                }
                if r[[i, j]] != log_bias_oracle(len as u64 - 1, dist as u64 + 1) {
                    return fail("oracle", i, j);
                }
                if j + 1 < len && j >= i && r[[i, j + 1]] > r[[i, j]] {
                    return fail("non-increasing", i, j);
                }
            }
        }
    }
    Ok((true, json!({"lengths": format!("2..={max_len}")})))
}

fn permutation_input(len: usize, features: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
    Array3::from_shape_simple_fn((1, len, features), || rng.random_range(-1.5..1.5))
}

fn permute_map(map: &Array3<f64>, perm: &[usize]) -> Array3<f64> {
    map.select(Axis(1), perm).select(Axis(2), perm)
}

/// Whether every block's map of the permuted input is the permuted map.
fn maps_commute(model: &mut Model, x: &Array3<f64>, perm: &[usize]) -> Result<bool> {
    let base = model.attention_maps(x.view())?;
    let px = x.select(Axis(1), perm);
    let moved = model.attention_maps(px.view())?;
    Ok(base.iter().zip(&moved).all(|(a, b)| permute_map(a, perm) == *b))
}

/// End-to-end permutation behaviour of an untrained model at `L = 8`:
/// equivariant maps without PE, and some permutation that breaks it with Gray-PE.
pub fn permutation_property(rng: &mut ChaCha8Rng) -> Result<(bool, Value)> {
    let len = 8;
    let features = 4;
    let head = Head::Classification { classes: 3 };
    let mut plain = Model::new(ModelConfig::small(len, features, PeVariant::None, head), SEED)?;
    let mut graypos = Model::new(ModelConfig::small(len, features, PeVariant::Gray, head), SEED)?;
    let trials = 20;
    let mut gray_changed = 0;
    for trial in 0..trials {
        let x = permutation_input(len, features, rng);
        let mut perm: Vec<usize> = (0..len).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), rng);
        if !maps_commute(&mut plain, &x, &perm)? {
            return Ok((false, json!({"variant": "none", "trial": trial, "perm": perm})));
        }
        if !maps_commute(&mut graypos, &x, &perm)? {
            gray_changed += 1;
        }
    }
    let passed = gray_changed > 0;
    Ok((passed, json!({"len": len, "trials": trials, "gray_permutations_changing_map": gray_changed})))
}

/// Maps built through [`PositionalScheme`] agree with the direct functions.
fn scheme_consistency(rng: &mut ChaCha8Rng) -> Result<(bool, Value)> {
    let q = SpikeTensor::random(2, 12, 16, 0.4, rng);
    let k = SpikeTensor::random(2, 12, 16, 0.4, rng);
    let bits = min_width_for_length(12);
    let ok = PositionalScheme::Gray { bits }.scores(&q, &k)? == gray_pe_map(&q, &k, bits)?.to_real()
        && PositionalScheme::Xnor.scores(&q, &k)? == xnor_map(&q, &k)?.to_real();
    Ok((ok, json!({"len": 12, "width": 16})))
}

pub fn attention_suite(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    Ok(vec![
        timed("xnor hamming duality", || xnor_duality(&[4, 32, 256], &mut rng))?,
        timed("gray-pe decomposition", || gray_decomposition(64, 100, opts.gray, &mut rng))?,
        timed("log-pe matrix", || log_bias_properties(512))?,
        timed("scheme dispatch", || scheme_consistency(&mut rng))?,
        timed("permutation", || permutation_property(&mut rng))?,
    ])
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn binary_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| f64::from(u8::from(rng.random_bool(0.5))))
}

fn grad_detail(report: &crate::tensor::GradCheckReport, store: &ParamStore) -> (bool, Value) {
    let worst = report.worst.map(|(id, e)| json!({"param": store.name(id), "index": e}));
    (
        report.max_rel_error < GRAD_TOLERANCE,
        json!({"max_rel_error": report.max_rel_error, "entries": report.entries_checked, "worst": worst}),
    )
}

fn grad_linear_bn(rng: &mut ChaCha8Rng) -> Result<(bool, Value)> {
    let weights = random_matrix(12, 3, rng);
    let mut store = ParamStore::new();
    let x = store.insert("x", DiffTensor::from_matrix(random_matrix(12, 4, rng), true));
    let w = store.insert("w", DiffTensor::from_matrix(random_matrix(4, 3, rng), true));
    let mut bn = BatchNormState::new(&mut store, "bn", 3);
    for v in store.get_mut(bn.gamma).values.iter_mut() {
        *v = rng.random_range(0.5..1.5);
    }
    let ids = [x, w, bn.gamma, bn.beta];
    let report = grad_check(&mut store, &ids, 1e-5, |tape, store| {
        let xv = tape.param(store, x);
        let wv = tape.param(store, w);
        let y = tape.linear(xv, wv)?;
        let z = tape.batch_norm(y, store, &mut bn, true)?;
        let c = tape.constant(weights.clone());
        let p = tape.mul(z, c)?;
        Ok(tape.sum(p))
    })?;
    Ok(grad_detail(&report, &store))
}

fn grad_attention(scheme: PositionalScheme, rng: &mut ChaCha8Rng) -> Result<(bool, Value)> {
    let (slices, len, d) = (3, 6, 5);
    let rows = slices * len;
    let q = binary_matrix(rows, d, rng);
    let k = binary_matrix(rows, d, rng);
    let weights = random_matrix(rows, d, rng);
    let mut store = ParamStore::new();
    let v = store.insert("v", DiffTensor::from_matrix(random_matrix(rows, d, rng), true));
    let ls = store.insert("log_sigma", DiffTensor::from_matrix(Array2::from_elem((1, 1), -1.2), true));
    let spec = AttentionSpec { slices, len };
    let report = grad_check(&mut store, &[v, ls], 1e-5, |tape, store| {
        let qv = tape.constant(q.clone());
        let kv = tape.constant(k.clone());
        let vv = tape.param(store, v);
        let s = tape.param(store, ls);
        let sigma = tape.exp(s);
        let a = tape.spiking_attention(qv, kv, vv, sigma, &scheme, spec)?;
        let c = tape.constant(weights.clone());
        let p = tape.mul(a, c)?;
        Ok(tape.sum(p))
    })?;
    Ok(grad_detail(&report, &store))
}

fn grad_losses(rng: &mut ChaCha8Rng) -> Result<(bool, Value)> {
    let labels = [0usize, 2, 1, 2, 0];
    let target = random_matrix(5, 3, rng);
    let mut store = ParamStore::new();
    let z = store.insert("logits", DiffTensor::from_matrix(random_matrix(5, 3, rng) * 2.0, true));
    let report = grad_check(&mut store, &[z], 1e-5, |tape, store| {
        let zv = tape.param(store, z);
        let ce = tape.softmax_cross_entropy(zv, &labels)?;
        let mse = tape.mse(zv, target.clone())?;
        tape.add(ce, mse)
    })?;
    Ok(grad_detail(&report, &store))
}

fn grad_reshapes(rng: &mut ChaCha8Rng) -> Result<(bool, Value)> {
    let (steps, n, d) = (3, 4, 2);
    let weights = random_matrix(2, 2 * d, rng);
    let mut store = ParamStore::new();
    let x = store.insert("x", DiffTensor::from_matrix(random_matrix(n, d, rng), true));
    let y = store.insert("y", DiffTensor::from_matrix(random_matrix(steps * n, d, rng), true));
    let b = store.insert("bias", DiffTensor::from_matrix(random_matrix(1, 2 * d, rng), true));
    let report = grad_check(&mut store, &[x, y, b], 1e-5, |tape, store| {
        let xv = tape.param(store, x);
        let rep = tape.repeat_time(xv, steps)?;
        let yv = tape.param(store, y);
        let prod = tape.mul(rep, yv)?;
        let m = tape.mean_time(prod, steps)?;
        let sel = tape.select_rows(m, vec![3, 1, 0, 2])?;
        let r = tape.reshape(sel, 2, 2 * d)?;
        let bv = tape.param(store, b);
        let r = tape.add_row(r, bv)?;
        let e = tape.exp(r);
        let c = tape.constant(weights.clone());
        let p = tape.mul(e, c)?;
        let s = tape.sum(p);
        Ok(tape.scale(s, 0.5))
    })?;
    Ok(grad_detail(&report, &store))
}

fn surrogate_peak() -> Result<(bool, Value)> {
    let mut worst = 0.0f64;
    for alpha in [0.5, 1.0, 2.0, 4.0] {
        let s = Surrogate::new(alpha)?;
        worst = worst.max((s.grad(0.0) - alpha / 2.0).abs());
    }
    Ok((worst <= 1e-12, json!({"max_abs_error": worst})))
}

pub fn gradient_suite() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let len = 6;
    Ok(vec![
        timed("linear and batch norm", || grad_linear_bn(&mut rng))?,
        timed("attention xnor", || grad_attention(PositionalScheme::Xnor, &mut rng))?,
        timed("attention dot", || grad_attention(PositionalScheme::Dot, &mut rng))?,
        timed("attention gray", || grad_attention(PositionalScheme::Gray { bits: min_width_for_length(len) }, &mut rng))?,
        timed("attention log", || grad_attention(PositionalScheme::Log { bias: log_pe_bias(len)? }, &mut rng))?,
        timed("attention complete rpe", || grad_attention(PositionalScheme::CompleteRpe, &mut rng))?,
        timed("cross entropy and mse", || grad_losses(&mut rng))?,
        timed("time and row ops", || grad_reshapes(&mut rng))?,
        timed("surrogate peak", surrogate_peak)?,
    ])
}

fn lut_exactness(lut: &Log2Lut) -> Result<(bool, Value)> {
    let bad = count_matrix_mismatches(lut, RECORDED_MAX_LEN)?;
    Ok((
        bad == 0,
        json!({"n": lut.n_bits(), "k": lut.k_segments(), "p": lut.p_bits(), "max_len": RECORDED_MAX_LEN,
               "mismatches": bad, "max_abs_error": lut.max_abs_error()}),
    ))
}

fn lut_storage(lut: &Log2Lut) -> Result<(bool, Value)> {
    let expected = u64::from(lut.k_segments()) * u64::from(lut.n_bits() + 2 * lut.p_bits());
    let bytes = lut.to_bytes();
    let round_trip = Log2Lut::from_bytes(&bytes)? == *lut;
    Ok((
        lut.storage_bits() == expected && round_trip,
        json!({"storage_bits": lut.storage_bits(), "expected": expected, "file_bytes": bytes.len(), "round_trip": round_trip}),
    ))
}

pub fn lut_suite() -> Result<Vec<Check>> {
    let lut = recorded_exact_lut()?;
    Ok(vec![timed("exact for all lengths", || lut_exactness(&lut))?, timed("storage", || lut_storage(&lut))?])
}

fn metric_anchors(rng: &mut ChaCha8Rng) -> Result<(bool, Value)> {
    let y = Array3::from_shape_simple_fn((40, 2, 3), || rng.random_range(-2.0..2.0));
    let means = y.mean_axis(Axis(0)).expect("non-empty");
    let mean_pred = Array3::from_shape_fn(y.dim(), |(_, c, h)| means[[c, h]]);
    let perfect_r2 = metric_r2(y.view(), y.view())?;
    let perfect_rse = metric_rse(y.view(), y.view())?;
    let mean_r2 = metric_r2(mean_pred.view(), y.view())?;
    let global = Array3::from_elem(y.dim(), y.mean().expect("non-empty"));
    let global_rse = metric_rse(global.view(), y.view())?;
    let ok = perfect_r2 == 1.0 && perfect_rse == 0.0 && mean_r2.abs() < 1e-12 && (global_rse - 1.0).abs() < 1e-12;
    Ok((ok, json!({"perfect_r2": perfect_r2, "perfect_rse": perfect_rse, "mean_r2": mean_r2, "global_mean_rse": global_rse})))
}

fn metric_monotone(rng: &mut ChaCha8Rng) -> Result<(bool, Value)> {
    let y = Array3::from_shape_simple_fn((60, 2, 2), || rng.random_range(-1.0..1.0));
    let noise = Array3::from_shape_simple_fn(y.dim(), || rng.random_range(-1.0..1.0));
    let mut last: Option<(f64, f64)> = None;
    let mut trace = Vec::new();
    for scale in [0.0, 0.1, 0.3, 1.0, 3.0] {
        let pred = &y + &(&noise * scale);
        let r2 = metric_r2(pred.view(), y.view())?;
        let rse = metric_rse(pred.view(), y.view())?;
        trace.push(json!({"scale": scale, "r2": r2, "rse": rse}));
        if r2 > 1.0 || rse < 0.0 || last.is_some_and(|(a, b)| r2 > a || rse < b) {
            return Ok((false, json!(trace)));
        }
        last = Some((r2, rse));
    }
    Ok((true, json!(trace)))
}

fn accuracy_range(rng: &mut ChaCha8Rng) -> Result<(bool, Value)> {
    let logits = random_matrix(50, 4, rng);
    let labels: Vec<usize> = (0..50).map(|_| rng.random_range(0..4)).collect();
    let acc = accuracy(logits.view(), &labels)?;
    let argmax: Vec<usize> = logits
        .outer_iter()
        .map(|r| r.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b }).0)
        .collect();
    let perfect = accuracy(logits.view(), &argmax)?;
    Ok(((0.0..=1.0).contains(&acc) && perfect == 1.0, json!({"random": acc, "self": perfect})))
}

pub fn metrics_suite() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    Ok(vec![
        timed("anchors", || metric_anchors(&mut rng))?,
        timed("monotone in noise", || metric_monotone(&mut rng))?,
        timed("accuracy range", || accuracy_range(&mut rng))?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_matches_examples() {
        assert_eq!(log_bias_oracle(15, 1), 4);
        assert_eq!(log_bias_oracle(15, 4), 2);
        assert_eq!(log_bias_oracle(15, 15), 0);
        assert_eq!(log_bias_oracle(1, 1), 0);
    }

    #[test]
    fn plain_binary_breaks_theorem_and_decomposition() {
        let opts = VerifyOptions { gray: |x| x };
        let t = theorem1_suite(&opts).unwrap();
        assert!(!t[0].passed);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(!gray_decomposition(8, 2, opts.gray, &mut rng).unwrap().0);
    }

    #[test]
    fn scope_names() {
        for s in std::iter::once(Scope::All).chain(Scope::SUITES) {
            assert_eq!(s.as_str().parse::<Scope>().unwrap(), s);
        }
        assert!("everything".parse::<Scope>().is_err());
    }
}
