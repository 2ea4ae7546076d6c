use ndarray::{Array2, Array3, Axis};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spikerpe_core::attention::{complete_rpe_bias, gray_pe_map, log_pe_bias, xnor_map, SpikeTensor};
use spikerpe_core::bitcodec::{gray, gray_decode, gray_encode, hamming_distance, hamming_distance_bits, min_width_for_length};
use spikerpe_core::lut::{lut_log_pe_bias, recorded_exact_lut};
use spikerpe_core::neuron::{LifParams, Surrogate};
use spikerpe_core::tasks::{accuracy, metric_r2, metric_rse};
use spikerpe_core::tensor::{BatchNormState, DiffTensor, ParamStore, Tape};

fn bits(len: usize) -> impl Strategy<Value = Vec<u8>> {
    proptest::collection::vec(0u8..=1, len)
}

fn row_tensor(v: &[u8]) -> SpikeTensor {
    SpikeTensor::new(Array3::from_shape_vec((1, 1, v.len()), v.to_vec()).unwrap()).unwrap()
}

fn width_and_pair() -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
    prop_oneof![Just(4usize), Just(32), Just(256)].prop_flat_map(|d| (bits(d), bits(d)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn gray_round_trip_and_adjacency(x in 0u64..(1 << 20)) {
        let w = gray_encode(x, 21).unwrap();
        prop_assert_eq!(gray_decode(&w), x);
        let next = gray_encode(x + 1, 21).unwrap();
        prop_assert_eq!(hamming_distance(&w, &next).unwrap(), 1);
    }

    #[test]
    fn xnor_score_is_width_minus_hamming((q, k) in width_and_pair()) {
        let map = xnor_map(&row_tensor(&q), &row_tensor(&k)).unwrap();
        prop_assert_eq!(map.get(0, 0, 0), q.len() as u32 - hamming_distance_bits(&q, &k).unwrap());
    }

    #[test]
    fn gray_pe_splits_into_content_and_position(len in 1usize..=64, seed in any::<u64>(), rate in 0.05f64..0.95) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = SpikeTensor::random(2, len, 7, rate, &mut rng);
        let k = SpikeTensor::random(2, len, 7, rate, &mut rng);
        let b = min_width_for_length(len);
        let with_pe = gray_pe_map(&q, &k, b).unwrap();
        let plain = xnor_map(&q, &k).unwrap();
        for t in 0..2 {
            for i in 0..len {
                for j in 0..len {
                    let term = b - (gray(i as u64) ^ gray(j as u64)).count_ones();
                    prop_assert_eq!(with_pe.get(t, i, j), plain.get(t, i, j) + term);
                }
            }
        }
    }

    #[test]
    fn log_bias_shape(len in 2usize..=512) {
        let r = log_pe_bias(len).unwrap();
        let v = r.view();
        if len >= 3 {
            let diag = (len as u64 - 1).next_power_of_two().trailing_zeros();
            prop_assert_eq!(v[[0, 0]], diag);
        }
        for i in 0..len {
            for j in 0..len {
                prop_assert_eq!(v[[i, j]], v[[j, i]]);
                if j > i {
                    prop_assert!(v[[i, j]] <= v[[i, j - 1]]);
                }
            }
        }
    }

    #[test]
    fn lut_bias_is_exact(len in 2usize..=512) {
        let lut = recorded_exact_lut().unwrap();
        prop_assert_eq!(lut_log_pe_bias(len, &lut).unwrap(), log_pe_bias(len).unwrap());
    }

    #[test]
    fn spikes_are_binary(vals in proptest::collection::vec(-4.0f64..4.0, 24)) {
        let mut tape = Tape::new();
        let x = tape.constant(Array2::from_shape_vec((8, 3), vals).unwrap());
        let s = tape.spike(x, 4, LifParams::default(), Surrogate::default()).unwrap();
        prop_assert!(tape.value(s).iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn metric_ranges(seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = Array3::from_shape_simple_fn((20, 2, 3), || rng.random_range(-3.0..3.0));
        let p = Array3::from_shape_simple_fn((20, 2, 3), || rng.random_range(-3.0..3.0));
        prop_assert!(metric_r2(p.view(), y.view()).unwrap() <= 1.0);
        prop_assert!(metric_rse(p.view(), y.view()).unwrap() >= 0.0);
        let logits = Array2::from_shape_simple_fn((20, 4), || rng.random_range(-1.0..1.0));
        let labels: Vec<usize> = (0..20).map(|_| rng.random_range(0..4)).collect();
        let acc = accuracy(logits.view(), &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&acc));
    }
}

#[test]
fn batch_norm_standardizes_large_batches() {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for rows in [64, 200] {
        let x = Array2::from_shape_simple_fn((rows, 6), || rng.random_range(-3.0..5.0));
        let mut store = ParamStore::new();
        let mut bn = BatchNormState::new(&mut store, "bn", 6);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = tape.batch_norm(xv, &store, &mut bn, true).unwrap();
        let out = tape.value(y);
        for col in out.axis_iter(Axis(1)) {
            let mean = col.mean().unwrap();
            let var = col.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }
}

#[test]
fn surrogate_peak_is_half_alpha() {
    for alpha in [0.5, 2.0, 5.0] {
        assert!((Surrogate::new(alpha).unwrap().grad(0.0) - alpha / 2.0).abs() < 1e-12);
    }
}

#[test]
fn complete_rpe_dominates_binary_scores() {
    let b = complete_rpe_bias(64).unwrap();
    assert_eq!(b[[10, 10]], 63.0);
    assert_eq!(b[[0, 1]], 31.5);
}

#[test]
fn parameter_store_gradients_start_at_zero() {
    let mut store = ParamStore::new();
    let id = store.insert("w", DiffTensor::from_matrix(Array2::ones((2, 2)), true));
    assert!(store.get(id).grad.iter().all(|&g| g == 0.0));
}
