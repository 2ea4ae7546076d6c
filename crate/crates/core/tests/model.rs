use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spikerpe_core::bitcodec::gray;
use spikerpe_core::model::{load_weights, save_weights, train, Head, Model, ModelConfig, PeVariant, SigmaSetting, TrainConfig};
use spikerpe_core::tasks::TaskSpec;
use spikerpe_core::tensor::Tape;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn cls(len: usize, pe: PeVariant) -> ModelConfig {
    ModelConfig::small(len, 4, pe, Head::Classification { classes: 4 })
}

fn input(b: usize, l: usize, f: usize, seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_simple_fn((b, l, f), || rng.random_range(-1.5..1.5))
}

#[test]
fn same_seed_same_model() {
    let x = input(3, 8, 4, 1);
    let mut a = Model::new(cls(8, PeVariant::Log), 9).unwrap();
    let mut b = Model::new(cls(8, PeVariant::Log), 9).unwrap();
    assert_eq!(a.predict(x.view()).unwrap(), b.predict(x.view()).unwrap());
}

fn train_mode_output(m: &mut Model, x: &Array3<f64>) -> Array2<f64> {
    let mut tape = Tape::new();
    let out = m.forward(&mut tape, x.view(), true).unwrap();
    tape.value(out.output).clone()
}

#[test]
fn gray_changes_output_not_parameter_count() {
    let x = input(16, 8, 4, 2);
    let mut plain = Model::new(cls(8, PeVariant::None), 3).unwrap();
    let mut gray_model = Model::new(cls(8, PeVariant::Gray), 3).unwrap();
    assert_eq!(plain.trainable_count(), gray_model.trainable_count());
    assert_ne!(train_mode_output(&mut plain, &x), train_mode_output(&mut gray_model, &x));
}

#[test]
fn zero_sigma_ignores_values() {
    let mut cfg = cls(8, PeVariant::Gray);
    cfg.sigma = SigmaSetting::Fixed(0.0);
    let mut m = Model::new(cfg, 4).unwrap();
    let x = input(2, 8, 4, 3);
    let before = m.predict(x.view()).unwrap();
    let ids: Vec<_> = m.params().iter().filter(|(_, n, _)| n.ends_with(".v.w")).map(|(id, _, _)| id).collect();
    assert!(!ids.is_empty());
    for id in ids {
        m.params_mut().get_mut(id).values.mapv_inplace(|v| -3.0 * v + 0.7);
    }
    assert_eq!(before, m.predict(x.view()).unwrap());
}

#[test]
fn gray_distance_automorphism_hides_offset() {
    // Reflecting the low two bits within each group of four preserves every
    // pairwise Gray distance at L = 16 and fixes the last position.
    let perm = [0usize, 3, 2, 1, 6, 5, 4, 7, 8, 11, 10, 9, 14, 13, 12, 15];
    for i in 0..16 {
        for j in 0..16 {
            let d = |a: usize, b: usize| (gray(a as u64) ^ gray(b as u64)).count_ones();
            assert_eq!(d(i, j), d(perm[i], perm[j]));
        }
    }
    assert_eq!((perm[12], perm[14], perm[15]), (14, 12, 15));
    let mut m = Model::new(cls(16, PeVariant::Gray), 5).unwrap();
    let x = input(4, 16, 4, 6);
    let moved = x.select(Axis(1), &perm);
    let a = m.predict(x.view()).unwrap();
    let b = m.predict(moved.view()).unwrap();
    for (u, v) in a.iter().zip(b.iter()) {
        assert!((u - v).abs() < 1e-9, "{u} vs {v}");
    }
}

#[test]
fn loss_drops_when_copying_last_token() {
    let spec = TaskSpec::OffsetCopy { len: 8, vocab: 4, offset: 0, train_samples: 128, val_samples: 64 };
    let (tr, va) = spec.generate(2).unwrap();
    let mut cfg = cls(8, PeVariant::Log);
    cfg.d_model = 16;
    cfg.d_ffn = 32;
    let mut m = Model::new(cfg, 2).unwrap();
    let tc = TrainConfig { epochs: 6, batch_size: 16, lr: 3e-3, ..Default::default() };
    let h = train(&mut m, &tr, &va, &tc, 2, |_| {}).unwrap();
    let first = h.records[1].train_loss.unwrap();
    let last = h.records.last().unwrap().train_loss.unwrap();
    assert!(last < first, "{first} -> {last}");
    assert!(h.max_accuracy().unwrap() > 0.5);
}

#[test]
fn weights_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.spkr");
    let mut a = Model::new(cls(8, PeVariant::Crpe), 8).unwrap();
    save_weights(&a, &path).unwrap();
    let mut b = Model::new(cls(8, PeVariant::Crpe), 99).unwrap();
    load_weights(&mut b, &path).unwrap();
    let x = input(2, 8, 4, 7);
    let (pa, pb) = (a.predict(x.view()).unwrap(), b.predict(x.view()).unwrap());
    for (u, v) in pa.iter().zip(pb.iter()) {
        assert!((u - v).abs() < 1e-4);
    }
}
