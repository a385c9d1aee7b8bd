//! Full-reference (MSE, SSIM) and no-reference (NIQE) image quality metrics.

mod eval;
mod niqe;

pub use eval::{evaluate, write_report, ImageMetrics, MetricReport, MetricRow};
pub use niqe::{fit_niqe_model, niqe, niqe_features, niqe_ratio, NiqeModel, NIQE_FEATURES};

use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::scalar::Scalar;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn same_shape<T: Scalar>(a: &ImageTensor<T>, b: &ImageTensor<T>) -> Result<()> {
    let sa = (a.height(), a.width(), a.channels());
    let sb = (b.height(), b.width(), b.channels());
    if sa != sb {
        return Err(Error::Shape(format!("image shapes differ: {sa:?} vs {sb:?}")));
    }
    Ok(())
}

/// Mean over all elements of `(a - b)²`.
pub fn mse<T: Scalar>(a: &ImageTensor<T>, b: &ImageTensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.data().len() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        / n)
}

/// Normalized 1-D Gaussian taps at offsets `-radius..=radius`.
pub(crate) fn gaussian_taps(radius: usize, sigma: f64) -> Vec<f64> {
    let r = radius as f64;
    let taps: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - r;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable correlation keeping only fully covered positions.
pub(crate) fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Separable correlation with edge replication; output has the input size.
pub(crate) fn filter_same(img: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * img[y * w + clamp(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[clamp(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// SSIM of the Rec. 601 luma planes: 11×11 Gaussian window (σ = 1.5),
/// population statistics, `C1 = 0.01²`, `C2 = 0.03²` for a unit data range,
/// averaged over every fully covered window position.
pub fn ssim<T: Scalar>(a: &ImageTensor<T>, b: &ImageTensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Precondition(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let x = a.luma();
    let y = b.luma();
    let taps = gaussian_taps(SSIM_WINDOW / 2, SSIM_SIGMA);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<f64>>();
    let (mx, _, _) = filter_valid(&x, h, w, &taps);
    let (my, _, _) = filter_valid(&y, h, w, &taps);
    let (mxx, _, _) = filter_valid(&prod(&x, &x), h, w, &taps);
    let (myy, _, _) = filter_valid(&prod(&y, &y), h, w, &taps);
    let (mxy, _, _) = filter_valid(&prod(&x, &y), h, w, &taps);
    let n = mx.len() as f64;
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .sum();
    Ok(total / n)
}
