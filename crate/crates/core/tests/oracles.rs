mod common;

use common::suites::loss_oracle_cases;
use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use retinex_gan::decomposition::{decomp_loss, DecompLossWeights, DecompositionResult};
use retinex_gan::imaging::{load_image, ImageTensor};
use retinex_gan::metrics::{mse, niqe, ssim};
use retinex_gan::NiqeModel;

fn fixture(name: &str) -> ImageTensor<f64> {
    load_image(format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"))).unwrap()
}

#[test]
fn losses_match_hand_computations() {
    for (label, got, want) in loss_oracle_cases() {
        assert!((got - want).abs() <= 1e-6, "{label}: {got} vs {want}");
    }
}

// Reference values from scikit-image 0.25 `structural_similarity(gaussian_weights=True,
// sigma=1.5, use_sample_covariance=False, data_range=1)` on the Rec.601 luma of the
// 8-bit fixtures, and numpy's mean squared error over all channels.
const SKIMAGE_SSIM: f64 = 0.6439556684190888;
const NUMPY_MSE: f64 = 0.015660007569204153;

#[test]
fn ssim_and_mse_match_reference_implementations() {
    let a = fixture("ssim_a.png");
    let b = fixture("ssim_b.png");
    assert!((ssim(&a, &b).unwrap() - SKIMAGE_SSIM).abs() < 1e-4);
    assert!((mse(&a, &b).unwrap() - NUMPY_MSE).abs() < 1e-9);
}

#[test]
fn niqe_prefers_natural_photo_over_noise() {
    let model = NiqeModel::builtin();
    let natural = fixture("natural.png");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let noise = ImageTensor::<f64>::new(
        natural.height(),
        natural.width(),
        3,
        rand_tensor(&[natural.height() * natural.width() * 3], 0.0, 1.0, &mut rng).into_data(),
    )
    .unwrap();
    let n_nat = niqe(&natural, model).unwrap();
    let n_noise = niqe(&noise, model).unwrap();
    assert!(n_nat.is_finite() && n_nat < n_noise, "natural {n_nat} vs noise {n_noise}");
}

/// Direct loop transcription of the decomposition loss.
fn oracle_decomp(
    low: &DecompositionResult<f64>,
    high: &DecompositionResult<f64>,
    s_low: &ImageTensor<f64>,
    s_high: &ImageTensor<f64>,
    w: &DecompLossWeights,
) -> f64 {
    let (h, wd) = (s_low.height(), s_low.width());
    let n = (h * wd * 3) as f64;
    let recon = |r: &ImageTensor<f64>, i: &ImageTensor<f64>, s: &ImageTensor<f64>| {
        let mut t = 0.0;
        for y in 0..h {
            for x in 0..wd {
                for c in 0..3 {
                    t += (r.get(y, x, c) * i.get(y, x, 0) - s.get(y, x, c)).abs();
                }
            }
        }
        t / n
    };
    let rec = recon(&low.reflectance, &low.illumination, s_low)
        + recon(&high.reflectance, &high.illumination, s_high)
        + w.w_cross
            * (recon(&high.reflectance, &low.illumination, s_low) + recon(&low.reflectance, &high.illumination, s_high));
    let mut inv = 0.0;
    for y in 0..h {
        for x in 0..wd {
            for c in 0..3 {
                inv += (low.reflectance.get(y, x, c) - high.reflectance.get(y, x, c)).abs();
            }
        }
    }
    inv /= n;
    let smooth = |d: &DecompositionResult<f64>| {
        let gray = |y: usize, x: usize| {
            (0..3).map(|c| [0.299, 0.587, 0.114][c] * d.reflectance.get(y, x, c)).sum::<f64>()
        };
        let il = |y: usize, x: usize| d.illumination.get(y, x, 0);
        let (mut sx, mut sy) = (0.0, 0.0);
        for y in 0..h {
            for x in 0..wd {
                if x + 1 < wd {
                    sx += (il(y, x + 1) - il(y, x)).abs() * (-10.0 * (gray(y, x + 1) - gray(y, x)).abs()).exp();
                }
                if y + 1 < h {
                    sy += (il(y + 1, x) - il(y, x)).abs() * (-10.0 * (gray(y + 1, x) - gray(y, x)).abs()).exp();
                }
            }
        }
        (sx + sy) / (h * wd) as f64
    };
    w.w_recon * rec + w.w_invariant_reflectance * inv + w.w_illum_smoothness * (smooth(low) + smooth(high))
}

#[test]
fn decomposition_loss_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut img = |c: usize| {
        ImageTensor::<f64>::new(8, 8, c, rand_tensor(&[8 * 8 * c], 0.0, 1.0, &mut rng).into_data()).unwrap()
    };
    let low = DecompositionResult {
        reflectance: img(3),
        illumination: img(1),
    };
    let high = DecompositionResult {
        reflectance: img(3),
        illumination: img(1),
    };
    let (sl, sh) = (img(3), img(3));
    let w = DecompLossWeights::default();
    let got = decomp_loss(&low, &high, &sl, &sh, &w).unwrap().get("total").unwrap();
    let want = oracle_decomp(&low, &high, &sl, &sh, &w);
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
}
