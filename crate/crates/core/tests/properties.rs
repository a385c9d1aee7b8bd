mod common;

use proptest::prelude::*;
use retinex_gan::adversarial::{cycle_loss_r, cycle_loss_s, loss_report, PatchDiscriminator};
use retinex_gan::enhancement::{Direction, GeneratorBundle};
use retinex_gan::imaging::{degrade, recompose, sample_patches, DegradationParams, ImageTensor, PatchSpec};
use retinex_gan::metrics::{mse, niqe_ratio, ssim};
use retinex_gan::nn::ParamSet;
use retinex_gan::{Checkpoint, CheckpointMeta, DecompNet, EnhanceNet, Error, NiqeModel, Tensor, TrainConfig};

fn image(h: usize, w: usize, c: usize) -> impl Strategy<Value = ImageTensor<f64>> {
    prop::collection::vec(0.0f64..=1.0, h * w * c).prop_map(move |d| ImageTensor::new(h, w, c, d).unwrap())
}

fn sized_image(c: usize) -> impl Strategy<Value = ImageTensor<f64>> {
    (11usize..24, 11usize..24).prop_flat_map(move |(h, w)| image(h, w, c))
}

fn pair() -> impl Strategy<Value = (ImageTensor<f64>, ImageTensor<f64>)> {
    (11usize..24, 11usize..24).prop_flat_map(|(h, w)| (image(h, w, 3), image(h, w, 3)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn metrics_are_symmetric((a, b) in pair()) {
        prop_assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn uniform_shift_gives_squared_mse(a in sized_image(3), delta in 0.0f64..0.5) {
        let shifted_data = a.data().iter().map(|v| v * (1.0 - delta) + delta).collect::<Vec<_>>();
        let base_data = a.data().iter().map(|v| v * (1.0 - delta)).collect::<Vec<_>>();
        let base = ImageTensor::new(a.height(), a.width(), 3, base_data).unwrap();
        let shifted = ImageTensor::new(a.height(), a.width(), 3, shifted_data).unwrap();
        prop_assert!((mse(&base, &shifted).unwrap() - delta * delta).abs() < 1e-12);
    }

    #[test]
    fn ssim_of_an_image_with_itself_is_one(a in sized_image(3)) {
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-6);
        prop_assert_eq!(mse(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn recompose_with_unit_illumination_is_identity(r in sized_image(3)) {
        let ones = ImageTensor::filled(r.height(), r.width(), 1, 1.0).unwrap();
        prop_assert_eq!(recompose(&r, &ones).unwrap(), r);
    }

    #[test]
    fn recompose_is_monotone_in_illumination(
        (r, i) in (4usize..10).prop_flat_map(|s| (image(s, s, 3), image(s, s, 1))),
        at in any::<prop::sample::Index>(),
        bump in 0.0f64..1.0,
    ) {
        let mut raised = i.clone();
        let k = at.index(i.data().len());
        let (y, x) = (k / i.width(), k % i.width());
        raised.set(y, x, 0, (i.get(y, x, 0) + bump).min(1.0));
        let lo = recompose(&r, &i).unwrap();
        let hi = recompose(&r, &raised).unwrap();
        prop_assert!(lo.data().iter().zip(hi.data()).all(|(a, b)| b >= a));
    }

    #[test]
    fn identity_degradation_is_bit_identical(a in sized_image(3)) {
        prop_assert_eq!(degrade(&a, &DegradationParams::identity()).unwrap(), a);
    }

    #[test]
    fn patch_sampling_is_seeded_and_in_bounds(a in sized_image(3), size in 1usize..11, count in 1usize..8, seed: u64) {
        let spec = PatchSpec { count, size, seed };
        let p1 = sample_patches(&a, &spec).unwrap();
        prop_assert_eq!(&p1, &sample_patches(&a, &spec).unwrap());
        prop_assert_eq!(p1.len(), count);
        prop_assert!(p1.iter().all(|p| p.height() == size && p.width() == size));
    }

    #[test]
    fn cycle_total_is_sum_of_terms(seed: u64, size in 2usize..9) {
        let st = common::random_state(2, size, seed);
        let dh = PatchDiscriminator::<f64>::new(&common::pixel_disc_spec(), "d_high", seed).unwrap();
        let dl = PatchDiscriminator::<f64>::new(&common::pixel_disc_spec(), "d_low", seed ^ 1).unwrap();
        let r = loss_report(&st, &dh, &dl).unwrap();
        let (s, c, t) = (r.get("cyc_S").unwrap(), r.get("cyc_R").unwrap(), r.get("cyc_total").unwrap());
        prop_assert!((t - (s + c)).abs() <= 1e-9);
        prop_assert!((s - cycle_loss_s(&st).unwrap()).abs() <= 1e-12);
        prop_assert!((c - cycle_loss_r(&st).unwrap()).abs() <= 1e-12);
        prop_assert!(r.iter().all(|(_, v)| v.is_finite() && v >= 0.0));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(
        tensors in prop::collection::vec(prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..40), 1..5),
        seed: u64,
    ) {
        let mut params = ParamSet::<f32>::new();
        for (k, d) in tensors.iter().enumerate() {
            params.insert(format!("net.t{k}"), Tensor::from_vec(&[d.len()], d.clone()).unwrap());
        }
        let meta = CheckpointMeta { architecture: "test".into(), seed, iterations: 3, config: serde_json::json!({"k": 1}) };
        let ck = Checkpoint::new(meta, params);
        let bytes = ck.to_bytes();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        for (name, t) in ck.params.iter() {
            let u = back.params.get(name).unwrap();
            prop_assert!(t.data().iter().zip(u.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        prop_assert_eq!(&back.meta, &ck.meta);
        let cut = bytes.len() - 1;
        match Checkpoint::<f32>::from_bytes(&bytes[..cut]) {
            Err(Error::Checkpoint(msg)) => prop_assert!(msg.contains("net.t"), "{}", msg),
            other => prop_assert!(false, "expected a checkpoint error, got {:?}", other),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn decomposition_outputs_stay_in_unit_range(seed: u64, scale in 0.1f64..20.0, s in image(8, 8, 3)) {
        let mut net = DecompNet::<f64>::new(common::tiny_decomp(), seed).unwrap();
        let names: Vec<String> = net.params().names().cloned().collect();
        for n in names {
            for v in net.params_mut().get_mut(&n).unwrap().data_mut() {
                *v = *v * scale + 0.1 * scale;
            }
        }
        let d = net.decompose(&s).unwrap();
        prop_assert!(d.reflectance.data().iter().chain(d.illumination.data()).all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn generate_preserves_shape(seed: u64, s in image(8, 8, 3)) {
        let decomp = DecompNet::<f64>::new(common::tiny_decomp(), seed).unwrap();
        let g2 = EnhanceNet::<f64>::new(&common::tiny_unet(), Direction::LowToHigh, seed ^ 7).unwrap();
        let (out, _) = GeneratorBundle::new(&decomp, &g2).generate(&s).unwrap();
        prop_assert_eq!((out.height(), out.width(), out.channels()), (8, 8, 3));
    }

    #[test]
    fn lr_schedule_matches_closed_form(epochs in 1usize..600, lr in 1e-5f64..1e-2, decay in 0.1f64..1.0) {
        let cfg = TrainConfig { epochs, lr_gen: lr, lr_disc: lr, decay, ..TrainConfig::default() };
        let half = epochs.div_ceil(2);
        for e in [0, half.saturating_sub(1), half, epochs] {
            let want = lr * decay.powi((e / half.max(1)) as i32);
            prop_assert!((cfg.lr_gen_at(e) - want).abs() <= 1e-15 * want.max(1.0));
        }
    }
}

#[test]
fn niqe_ratio_of_ground_truth_with_itself_is_exactly_one() {
    let gt: ImageTensor<f64> = retinex_gan::imaging::load_image(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/tests/fixtures/natural.png"
    ))
    .unwrap();
    assert_eq!(niqe_ratio(&gt, &gt, NiqeModel::builtin()).unwrap(), 1.0);
}
