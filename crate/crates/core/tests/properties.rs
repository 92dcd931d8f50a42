//! Property tests over random shapes, values and configurations.

use proptest::prelude::*;
use tint_core::checkpoint::Checkpoint;
use tint_core::data::container::{decode, encode, read_tensor_file, write_tensor_file};
use tint_core::model::{ModelConfig, TintModel};
use tint_core::ops;
use tint_core::tensor::{DType, Tensor};
use tint_core::train::{lr_at_epoch, read_pgm, write_pgm, Saliency, TrainConfig};

fn f32_tensor(max_rank: usize, max_extent: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(1..=max_extent, 0..=max_rank).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), n)
            .prop_map(move |d| Tensor::f32(shape.clone(), d.into_iter().map(f64::from).collect()).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn tnsr_round_trip_is_bit_exact(t in f32_tensor(4, 6)) {
        let bytes = encode(&t).unwrap();
        prop_assert_eq!(bytes.len(), 7 + 8 * t.rank() + 4 * t.numel());
        let back = decode(&bytes).unwrap();
        prop_assert!(back.bit_eq(&t));
        prop_assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn tnsr_file_round_trip(t in f32_tensor(3, 5)) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tnsr");
        write_tensor_file(&p, &t).unwrap();
        prop_assert!(read_tensor_file(&p).unwrap().bit_eq(&t));
    }

    #[test]
    fn truncated_tnsr_is_rejected(t in f32_tensor(3, 4), cut in 0usize..1000) {
        let bytes = encode(&t).unwrap();
        let cut = cut % bytes.len();
        prop_assert!(decode(&bytes[..cut]).is_err());
    }

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), scale in -4.0f64..4.0) {
        let cfg = ModelConfig { seed, ..ModelConfig::test_config() };
        let mut model = TintModel::build(cfg).unwrap();
        for (_, t) in model.store_mut().params_mut() {
            for v in t.data_mut() { *v *= scale; }
            t.round_in_place();
        }
        let ck = Checkpoint::new(model);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        for (name, t) in ck.model.store().params() {
            prop_assert!(back.model.store().param(name).unwrap().bit_eq(t), "{}", name);
        }
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn pgm_round_trip(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..=1.0)).collect();
        let s = Saliency { map: Tensor::f64(vec![h, w], data.clone()).unwrap(), degenerate: false };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        write_pgm(&p, &s).unwrap();
        let pgm = read_pgm(&p).unwrap();
        prop_assert_eq!((pgm.width, pgm.height, pgm.maxval), (w, h, 255));
        let expect: Vec<u8> = data.iter().map(|v| (v * 255.0).round() as u8).collect();
        prop_assert_eq!(pgm.pixels, expect);
    }

    #[test]
    fn lr_is_non_increasing(a in 0u64..200, b in 0u64..200) {
        let cfg = TrainConfig::default();
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(lr_at_epoch(&cfg, hi) <= lr_at_epoch(&cfg, lo));
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::f64(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-50.0..50.0)).collect()).unwrap();
        let y = ops::softmax(&x, 1).unwrap();
        for r in y.data().chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(r.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn broadcast_add_commutes(a in f32_tensor(3, 3), b in f32_tensor(3, 3)) {
        if ops::broadcast_shape(a.shape(), b.shape()).is_some() {
            let x = ops::add(&a, &b);
            let y = ops::add(&b, &a);
            match (x, y) {
                (Ok(x), Ok(y)) => prop_assert!(x.bit_eq(&y)),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "asymmetric result"),
            }
        } else {
            prop_assert!(ops::add(&a, &b).is_err());
        }
    }

    #[test]
    fn permute_then_inverse_is_identity(seed in any::<u64>()) {
        use rand::{seq::SliceRandom, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let shape = [2usize, 3, 4, 1];
        let x = Tensor::f64(shape.to_vec(), (0..24).map(f64::from).collect()).unwrap();
        let mut perm = vec![0, 1, 2, 3];
        perm.shuffle(&mut rng);
        let y = ops::permute(&x, &perm).unwrap();
        prop_assert!(ops::permute(&y, &ops::inverse_perm(&perm)).unwrap().bit_eq(&x));
    }
}

#[test]
fn f64_tensors_are_not_written() {
    assert!(encode(&Tensor::scalar(1.0, DType::F64)).is_err());
}
