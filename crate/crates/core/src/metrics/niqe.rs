//! Natural image quality evaluator.
//!
//! Luma on a 0–255 scale is normalized into MSCN coefficients (7×7 Gaussian,
//! σ = 7/6, stabilizer 1). Each `P×P` patch yields 18 features: an
//! asymmetric generalized Gaussian fit of the coefficients and of their
//! horizontal, vertical and two diagonal neighbour products. The same is
//! repeated on a 2×2 box-downsampled copy with `P/2` patches. A multivariate
//! Gaussian fitted to the test image's patch features is compared against the
//! pristine model:
//!
//! `d = sqrt((μ₁ − μ₂)ᵀ pinv((Σ₁ + Σ₂) / 2) (μ₁ − μ₂))`.

use std::path::Path;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use super::filter_same;
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::scalar::Scalar;

pub const NIQE_FEATURES: usize = 36;
const MSCN_TAPS: usize = 7;
const MSCN_SIGMA: f64 = 7.0 / 6.0;
const MSCN_C: f64 = 1.0;
const SHARPNESS_FRACTION: f64 = 0.75;

static BUILTIN: &str = include_str!("../../data/niqe_model.json");

/// Pristine-corpus multivariate Gaussian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NiqeModel {
    pub mu: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    pub patch_size: usize,
}

impl NiqeModel {
    /// The model shipped with the crate.
    pub fn builtin() -> &'static NiqeModel {
        static MODEL: OnceLock<NiqeModel> = OnceLock::new();
        MODEL.get_or_init(|| {
            let m: NiqeModel = serde_json::from_str(BUILTIN).expect("embedded NIQE model parses");
            m.validate().expect("embedded NIQE model is valid");
            m
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: NiqeModel =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("bad NIQE model: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Config(format!("NIQE model {} does not exist", path.display()))
            } else {
                Error::io(path, e)
            }
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let n = NIQE_FEATURES;
        if self.mu.len() != n || self.cov.len() != n || self.cov.iter().any(|r| r.len() != n) {
            return Err(Error::Config(format!("NIQE model must hold {n} means and a {n}x{n} covariance")));
        }
        if self.patch_size < 4 || !self.patch_size.is_multiple_of(2) {
            return Err(Error::Config(format!("NIQE patch size {} must be even and ≥ 4", self.patch_size)));
        }
        if self.mu.iter().chain(self.cov.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::Config("NIQE model contains non-finite values".into()));
        }
        Ok(())
    }
}

/// `(α, ρ(α))` over α ∈ [0.2, 10] in steps of 0.001, with
/// `ρ(α) = Γ(2/α)² / (Γ(1/α) Γ(3/α))`.
fn shape_table() -> &'static [(f64, f64)] {
    static TABLE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    TABLE.get_or_init(|| {
        (200..=10_000)
            .map(|i| {
                let a = i as f64 / 1000.0;
                (a, gamma(2.0 / a).powi(2) / (gamma(1.0 / a) * gamma(3.0 / a)))
            })
            .collect()
    })
}

/// Moment-matching AGGD fit: `(α, mean parameter, σ_left, σ_right)`.
fn aggd_fit(values: &[f64]) -> (f64, f64, f64, f64) {
    let side = |keep: fn(f64) -> bool| {
        let (s, n) = values
            .iter()
            .filter(|v| keep(**v))
            .fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
        (n > 0).then(|| (s / n as f64).sqrt())
    };
    let (left, right) = match (side(|v| v < 0.0), side(|v| v >= 0.0)) {
        (Some(l), Some(r)) => (l, r),
        (Some(l), None) => (l, l),
        (None, Some(r)) => (r, r),
        (None, None) => return (10.0, 0.0, 0.0, 0.0),
    };
    let n = values.len() as f64;
    let mean_sq = values.iter().map(|v| v * v).sum::<f64>() / n;
    if mean_sq == 0.0 || right == 0.0 {
        return (10.0, 0.0, 0.0, 0.0);
    }
    let g = left / right;
    let mean_abs = values.iter().map(|v| v.abs()).sum::<f64>() / n;
    let r_hat = mean_abs * mean_abs / mean_sq;
    let r_norm = r_hat * (g.powi(3) + 1.0) * (g + 1.0) / (g * g + 1.0).powi(2);
    let alpha = shape_table()
        .iter()
        .min_by(|a, b| (a.1 - r_norm).abs().total_cmp(&(b.1 - r_norm).abs()))
        .expect("table is non-empty")
        .0;
    let (g1, g2, g3) = (gamma(1.0 / alpha), gamma(2.0 / alpha), gamma(3.0 / alpha));
    let ratio = (g1 / g3).sqrt();
    let (bl, br) = (ratio * left, ratio * right);
    (alpha, (br - bl) * g2 / g1, bl, br)
}

/// MSCN coefficients and local deviation maps.
fn mscn(img: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let taps = super::gaussian_taps(MSCN_TAPS / 2, MSCN_SIGMA);
    let mu = filter_same(img, h, w, &taps);
    let sq: Vec<f64> = img.iter().map(|v| v * v).collect();
    let mu_sq = filter_same(&sq, h, w, &taps);
    let sigma: Vec<f64> = mu.iter().zip(&mu_sq).map(|(m, s)| (s - m * m).abs().sqrt()).collect();
    let coef = img
        .iter()
        .zip(&mu)
        .zip(&sigma)
        .map(|((v, m), s)| (v - m) / (s + MSCN_C))
        .collect();
    (coef, sigma)
}

/// 18 features of one `p×p` patch at `(py, px)` of a coefficient map of width `w`.
fn patch_block(coef: &[f64], w: usize, py: usize, px: usize, p: usize) -> [f64; 18] {
    let at = |y: usize, x: usize| coef[(py + y) * w + px + x];
    let mut own = Vec::with_capacity(p * p);
    for y in 0..p {
        for x in 0..p {
            own.push(at(y, x));
        }
    }
    let (alpha, _, bl, br) = aggd_fit(&own);
    let mut out = [0.0; 18];
    out[0] = alpha;
    out[1] = (bl + br) / 2.0;
    let shifts: [(usize, usize, usize, usize); 4] = [(0, 0, 0, 1), (0, 0, 1, 0), (0, 0, 1, 1), (0, 1, 1, 0)];
    for (k, &(y0, x0, y1, x1)) in shifts.iter().enumerate() {
        let mut prod = Vec::with_capacity(p * p);
        for y in 0..p - 1 {
            for x in 0..p - 1 {
                prod.push(at(y + y0, x + x0) * at(y + y1, x + x1));
            }
        }
        let (a, n, l, r) = aggd_fit(&prod);
        out[2 + 4 * k..6 + 4 * k].copy_from_slice(&[a, n, l, r]);
    }
    out
}

/// Per-patch feature vectors and patch sharpness (mean local deviation).
pub fn niqe_features<T: Scalar>(img: &ImageTensor<T>, patch: usize) -> Result<Vec<([f64; NIQE_FEATURES], f64)>> {
    if patch < 4 || !patch.is_multiple_of(2) {
        return Err(Error::Config(format!("NIQE patch size {patch} must be even and ≥ 4")));
    }
    let (h, w) = (img.height(), img.width());
    if h < patch || w < patch {
        return Err(Error::Precondition(format!(
            "NIQE needs at least {patch}x{patch} pixels, got {h}x{w}"
        )));
    }
    let (ph, pw) = (h / patch, w / patch);
    let (ch, cw) = (ph * patch, pw * patch);
    let luma = img.luma();
    let full: Vec<f64> = (0..ch)
        .flat_map(|y| (0..cw).map(move |x| (y, x)))
        .map(|(y, x)| 255.0 * luma[y * w + x])
        .collect();
    let (hh, hw) = (ch / 2, cw / 2);
    let half: Vec<f64> = (0..hh)
        .flat_map(|y| (0..hw).map(move |x| (y, x)))
        .map(|(y, x)| {
            let s = full[2 * y * cw + 2 * x]
                + full[2 * y * cw + 2 * x + 1]
                + full[(2 * y + 1) * cw + 2 * x]
                + full[(2 * y + 1) * cw + 2 * x + 1];
            s / 4.0
        })
        .collect();
    let (c1, sigma1) = mscn(&full, ch, cw);
    let (c2, _) = mscn(&half, hh, hw);
    let hp = patch / 2;
    let mut out = Vec::with_capacity(ph * pw);
    for by in 0..ph {
        for bx in 0..pw {
            let mut f = [0.0; NIQE_FEATURES];
            f[..18].copy_from_slice(&patch_block(&c1, cw, by * patch, bx * patch, patch));
            f[18..].copy_from_slice(&patch_block(&c2, hw, by * hp, bx * hp, hp));
            let mut sharp = 0.0;
            for y in 0..patch {
                for x in 0..patch {
                    sharp += sigma1[(by * patch + y) * cw + bx * patch + x];
                }
            }
            out.push((f, sharp / (patch * patch) as f64));
        }
    }
    Ok(out)
}

fn mean_cov(rows: &[[f64; NIQE_FEATURES]]) -> (DVector<f64>, DMatrix<f64>) {
    let n = rows.len();
    let d = NIQE_FEATURES;
    let mut mu = DVector::zeros(d);
    for r in rows {
        mu += DVector::from_row_slice(r);
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    if n > 1 {
        for r in rows {
            let c = DVector::from_row_slice(r) - &mu;
            cov += &c * c.transpose();
        }
        cov /= (n - 1) as f64;
    }
    (mu, cov)
}

/// Distance of `img`'s patch statistics from the pristine model; lower is more natural.
pub fn niqe<T: Scalar>(img: &ImageTensor<T>, model: &NiqeModel) -> Result<f64> {
    let feats: Vec<[f64; NIQE_FEATURES]> = niqe_features(img, model.patch_size)?.into_iter().map(|(f, _)| f).collect();
    let (mu, cov) = mean_cov(&feats);
    let d = NIQE_FEATURES;
    let model_mu = DVector::from_vec(model.mu.clone());
    let model_cov = DMatrix::from_fn(d, d, |i, j| model.cov[i][j]);
    let pooled = (model_cov + cov) / 2.0;
    let svd = pooled.svd(true, true);
    let tol = d as f64 * f64::EPSILON * svd.singular_values.max();
    let inv = svd.pseudo_inverse(tol).map_err(|e| Error::Precondition(format!("NIQE pseudo-inverse failed: {e}")))?;
    let diff = model_mu - mu;
    let q = (diff.transpose() * inv * diff)[(0, 0)];
    Ok(q.max(0.0).sqrt())
}

/// `niqe(pred) / niqe(gt)`.
pub fn niqe_ratio<T: Scalar>(pred: &ImageTensor<T>, gt: &ImageTensor<T>, model: &NiqeModel) -> Result<f64> {
    let p = niqe(pred, model)?;
    let g = niqe(gt, model)?;
    if g <= 0.0 {
        return Err(Error::Precondition("ground-truth NIQE is zero; ratio undefined".into()));
    }
    Ok(p / g)
}

/// Fits a pristine model: patches sharper than 0.75 × the sharpest patch of
/// their image are pooled across `images`.
pub fn fit_niqe_model<T: Scalar>(images: &[ImageTensor<T>], patch_size: usize) -> Result<NiqeModel> {
    let mut rows = Vec::new();
    for img in images {
        let feats = niqe_features(img, patch_size)?;
        let max = feats.iter().map(|(_, s)| *s).fold(0.0, f64::max);
        rows.extend(
            feats
                .into_iter()
                .filter(|(_, s)| *s > SHARPNESS_FRACTION * max)
                .map(|(f, _)| f),
        );
    }
    if rows.len() < 2 {
        return Err(Error::Precondition(format!(
            "need at least 2 sharp patches to fit a NIQE model, got {}",
            rows.len()
        )));
    }
    let (mu, cov) = mean_cov(&rows);
    let model = NiqeModel {
        mu: mu.iter().copied().collect(),
        cov: (0..NIQE_FEATURES).map(|i| cov.row(i).iter().copied().collect()).collect(),
        patch_size,
    };
    model.validate()?;
    Ok(model)
}
