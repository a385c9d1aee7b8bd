//! Image tensors, PNG I/O, patch sampling, synthetic degradation and the
//! fixed retinex recomposition `S = R ∘ I`.

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Rec. 601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// An `H×W×C` image with interleaved channels and values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> ImageTensor<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!("images have 1 or 3 channels, got {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(Error::Precondition(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds an image, clamping every value into `[0, 1]` (NaN maps to 0).
    pub fn from_clamped(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        let data = data
            .into_iter()
            .map(|v| if v.is_nan() { T::zero() } else { v.max(T::zero()).min(T::one()) })
            .collect();
        Self::new(height, width, channels, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        assert!(v >= T::zero() && v <= T::one(), "pixel value {v} outside [0, 1]");
        let i = (y * self.width + x) * self.channels + c;
        self.data[i] = v;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Luma plane (Rec. 601) as a row-major `f64` buffer; 1-channel images pass through.
    pub fn luma(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.data.iter().map(|v| v.as_f64()).collect();
        }
        self.data
            .chunks_exact(3)
            .map(|p| {
                LUMA_WEIGHTS[0] * p[0].as_f64() + LUMA_WEIGHTS[1] * p[1].as_f64() + LUMA_WEIGHTS[2] * p[2].as_f64()
            })
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ImageTensor<U> {
        ImageTensor {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// `[1, C, H, W]` network tensor.
    pub fn to_nchw(&self) -> Tensor<T> {
        let (h, w, c) = (self.height, self.width, self.channels);
        Tensor::from_fn(&[1, c, h, w], |i| {
            let ch = i / (h * w);
            let p = i % (h * w);
            self.data[p * c + ch]
        })
    }

    /// Stacks images of identical shape into `[N, C, H, W]`.
    pub fn batch(images: &[Self]) -> Result<Tensor<T>> {
        let parts: Vec<Tensor<T>> = images.iter().map(Self::to_nchw).collect();
        Tensor::stack(&parts)
    }

    /// Extracts sample `idx` of an NCHW tensor, clamping into `[0, 1]`.
    pub fn from_nchw(t: &Tensor<T>, idx: usize) -> Result<Self> {
        let (_, c, h, w) = t.dims4();
        let base = idx * c * h * w;
        let data = (0..h * w * c)
            .map(|i| {
                let p = i / c;
                let ch = i % c;
                t.data()[base + ch * h * w + p]
            })
            .collect();
        Self::from_clamped(h, w, c, data)
    }

    /// Axis-aligned crop.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Precondition(format!(
                "crop {height}x{width}@({top},{left}) outside {}x{} image",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(height * width * c);
        for y in top..top + height {
            let row = (y * self.width + left) * c;
            data.extend_from_slice(&self.data[row..row + width * c]);
        }
        Ok(Self {
            height,
            width,
            channels: c,
            data,
        })
    }

    /// Bilinear resize (half-pixel centres, edge clamped).
    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Precondition("resize to an empty image".into()));
        }
        if (height, width) == (self.height, self.width) {
            return Ok(self.clone());
        }
        let c = self.channels;
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut data = Vec::with_capacity(height * width * c);
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f64;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f64;
                for ch in 0..c {
                    let a = self.get(y0, x0, ch).as_f64();
                    let b = self.get(y0, x1, ch).as_f64();
                    let d = self.get(y1, x0, ch).as_f64();
                    let e = self.get(y1, x1, ch).as_f64();
                    let v = (a * (1.0 - tx) + b * tx) * (1.0 - ty) + (d * (1.0 - tx) + e * tx) * ty;
                    data.push(T::lit(v));
                }
            }
        }
        Self::from_clamped(height, width, c, data)
    }
}

/// Reads an 8-bit RGB or grayscale PNG into `[0, 1]`.
pub fn load_image<T: Scalar>(path: impl AsRef<Path>) -> Result<ImageTensor<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let format = image::guess_format(&bytes).map_err(|e| Error::Format {
        path: path.into(),
        reason: e.to_string(),
    })?;
    if format != image::ImageFormat::Png {
        return Err(Error::Format {
            path: path.into(),
            reason: format!("{format:?} is not PNG"),
        });
    }
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(|e| Error::Format {
        path: path.into(),
        reason: e.to_string(),
    })?;
    let to_unit = |v: u8| T::lit(f64::from(v) / 255.0);
    match img {
        DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            ImageTensor::new(h as usize, w as usize, 1, g.into_raw().into_iter().map(to_unit).collect())
        }
        DynamicImage::ImageRgb8(rgb) => {
            let (w, h) = rgb.dimensions();
            ImageTensor::new(h as usize, w as usize, 3, rgb.into_raw().into_iter().map(to_unit).collect())
        }
        other => Err(Error::Format {
            path: path.into(),
            reason: format!("expected 8-bit RGB or grayscale, got {:?}", other.color()),
        }),
    }
}

fn quantize<T: Scalar>(v: T) -> u8 {
    (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes an image as an 8-bit PNG (grayscale for 1-channel images).
pub fn save_image<T: Scalar>(img: &ImageTensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    let (w, h) = (img.width as u32, img.height as u32);
    let dynamic = if img.channels == 1 {
        DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, bytes).expect("sized buffer"))
    } else {
        DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, bytes).expect("sized buffer"))
    };
    dynamic.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format {
            path: path.into(),
            reason: other.to_string(),
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
}

impl PatchSpec {
    /// 16 patches of 64×64.
    pub fn standard(seed: u64) -> Self {
        Self {
            count: 16,
            size: 64,
            seed,
        }
    }
}

/// Top-left offsets of `count` uniformly placed square patches (with replacement).
pub fn patch_offsets(height: usize, width: usize, spec: &PatchSpec, rng: &mut impl Rng) -> Result<Vec<(usize, usize)>> {
    if spec.size == 0 || spec.size > height.min(width) {
        return Err(Error::Precondition(format!(
            "patch size {} does not fit a {height}x{width} image",
            spec.size
        )));
    }
    Ok((0..spec.count)
        .map(|_| {
            (
                rng.random_range(0..=height - spec.size),
                rng.random_range(0..=width - spec.size),
            )
        })
        .collect())
}

/// Samples `spec.count` random square patches, deterministically for a fixed seed.
pub fn sample_patches<T: Scalar>(img: &ImageTensor<T>, spec: &PatchSpec) -> Result<Vec<ImageTensor<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    patch_offsets(img.height, img.width, spec, &mut rng)?
        .into_iter()
        .map(|(y, x)| img.crop(y, x, spec.size, spec.size))
        .collect()
}

/// `S[y, x, c] = R[y, x, c] · I[y, x, 0]`.
pub fn recompose<T: Scalar>(reflectance: &ImageTensor<T>, illumination: &ImageTensor<T>) -> Result<ImageTensor<T>> {
    if reflectance.channels != 3 || illumination.channels != 1 {
        return Err(Error::Shape(format!(
            "recompose expects 3-channel R and 1-channel I, got {} and {}",
            reflectance.channels, illumination.channels
        )));
    }
    if (reflectance.height, reflectance.width) != (illumination.height, illumination.width) {
        return Err(Error::Shape(format!(
            "R is {}x{} but I is {}x{}",
            reflectance.height, reflectance.width, illumination.height, illumination.width
        )));
    }
    let data = reflectance
        .data
        .chunks_exact(3)
        .zip(&illumination.data)
        .flat_map(|(rgb, &i)| [rgb[0] * i, rgb[1] * i, rgb[2] * i])
        .collect();
    ImageTensor::new(reflectance.height, reflectance.width, 3, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationParams {
    pub gamma: f64,
    pub gain: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl DegradationParams {
    pub fn identity() -> Self {
        Self {
            gamma: 1.0,
            gain: 1.0,
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !(self.gain > 0.0 && self.gain <= 1.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::Precondition(format!("invalid degradation parameters {self:?}")));
        }
        Ok(())
    }
}

/// `clamp(gain · S^gamma + N(0, sigma²), 0, 1)` with seeded noise.
pub fn degrade<T: Scalar>(img: &ImageTensor<T>, p: &DegradationParams) -> Result<ImageTensor<T>> {
    p.validate()?;
    if img.channels != 3 {
        return Err(Error::Precondition("degrade expects a 3-channel image".into()));
    }
    if p.gamma == 1.0 && p.gain == 1.0 && p.noise_sigma == 0.0 {
        return Ok(img.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let noise = (p.noise_sigma > 0.0).then(|| Normal::new(0.0, p.noise_sigma).expect("sigma > 0"));
    let data = img
        .data
        .iter()
        .map(|&v| {
            let mut out = p.gain * v.as_f64().powf(p.gamma);
            if let Some(n) = &noise {
                out += n.sample(&mut rng);
            }
            T::lit(out.clamp(0.0, 1.0))
        })
        .collect();
    ImageTensor::new(img.height, img.width, 3, data)
}

/// A seeded procedural well-lit scene: smooth colour gradients, textured
/// blobs and stripes under a soft, bright illumination field.
pub fn synthetic_scene<T: Scalar>(size: usize, seed: u64) -> ImageTensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut col = || [rng.random_range(0.2..1.0), rng.random_range(0.2..1.0), rng.random_range(0.2..1.0)];
    let c0 = col();
    let c1 = col();
    let blob_colors: Vec<[f64; 3]> = (0..5).map(|_| col()).collect();
    let blobs: Vec<(f64, f64, f64, f64)> = (0..5)
        .map(|_| {
            (
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.08..0.3),
                rng.random_range(0.08..0.3),
            )
        })
        .collect();
    let stripe_freq = rng.random_range(6.0..18.0);
    let stripe_angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let light_x = rng.random_range(0.0..1.0);
    let light_y = rng.random_range(0.0..1.0);
    let mut data = Vec::with_capacity(size * size * 3);
    let n = size as f64;
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / n;
            let v = (y as f64 + 0.5) / n;
            let t = 0.5 * (u + v);
            let mut px = [0.0; 3];
            for (ch, p) in px.iter_mut().enumerate() {
                *p = c0[ch] * (1.0 - t) + c1[ch] * t;
            }
            let s = (stripe_freq * (u * stripe_angle.cos() + v * stripe_angle.sin())).sin();
            for p in px.iter_mut() {
                *p *= 0.85 + 0.15 * s;
            }
            for ((bx, by, rx, ry), bc) in blobs.iter().zip(&blob_colors) {
                let d = ((u - bx) / rx).powi(2) + ((v - by) / ry).powi(2);
                if d < 1.0 {
                    let a = (1.0 - d).sqrt().min(1.0);
                    for (ch, p) in px.iter_mut().enumerate() {
                        *p = *p * (1.0 - a) + bc[ch] * a;
                    }
                }
            }
            let dist2 = (u - light_x).powi(2) + (v - light_y).powi(2);
            let light = 0.75 + 0.25 * (-dist2 * 2.0).exp();
            for p in px {
                data.push(T::lit((p * light).clamp(0.0, 1.0)));
            }
        }
    }
    ImageTensor::new(size, size, 3, data).expect("valid synthetic image")
}
