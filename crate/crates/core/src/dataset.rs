//! Directory-backed image collections.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::{degrade, load_image, save_image, synthetic_scene, DegradationParams, ImageTensor};
use crate::scalar::Scalar;

/// Sorted `*.png` file names directly inside `dir`.
pub fn png_names(dir: &Path) -> Result<Vec<String>> {
    let rd = std::fs::read_dir(dir).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Config(format!("directory {} does not exist", dir.display()))
        } else {
            Error::io(dir, e)
        }
    })?;
    let mut names = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.path().is_file() && name.to_ascii_lowercase().ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// Loads every PNG in `dir` (sorted by name), resizing to `size×size` when given.
pub fn load_dir<T: Scalar>(dir: &Path, size: Option<usize>) -> Result<Vec<(String, ImageTensor<T>)>> {
    png_names(dir)?
        .into_iter()
        .map(|name| {
            let img: ImageTensor<T> = load_image(dir.join(&name))?;
            if img.channels() != 3 {
                return Err(Error::Config(format!("{name} is not an RGB image")));
            }
            let img = match size {
                Some(s) => img.resize(s, s)?,
                None => img,
            };
            Ok((name, img))
        })
        .collect()
}

/// Independent pools of low-light and well-lit images; no correspondence is assumed.
#[derive(Clone, Debug)]
pub struct UnpairedDataset<T> {
    pub low: Vec<ImageTensor<T>>,
    pub high: Vec<ImageTensor<T>>,
}

impl<T: Scalar> UnpairedDataset<T> {
    pub fn new(low: Vec<ImageTensor<T>>, high: Vec<ImageTensor<T>>) -> Result<Self> {
        if low.is_empty() || high.is_empty() {
            return Err(Error::Config(format!(
                "unpaired dataset needs both pools non-empty ({} low, {} high)",
                low.len(),
                high.len()
            )));
        }
        let shape = (low[0].height(), low[0].width());
        if low.iter().chain(&high).any(|i| (i.height(), i.width()) != shape || i.channels() != 3) {
            return Err(Error::Config("unpaired images must share one RGB size".into()));
        }
        Ok(Self { low, high })
    }

    /// Loads both folders, resizing every image to `size×size`.
    pub fn load(low_dir: &Path, high_dir: &Path, size: usize) -> Result<Self> {
        let low = load_dir(low_dir, Some(size))?.into_iter().map(|(_, i)| i).collect();
        let high = load_dir(high_dir, Some(size))?.into_iter().map(|(_, i)| i).collect();
        Self::new(low, high)
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.low[0].height(), self.low[0].width())
    }
}

/// Seeded synthetic corpus: aligned pairs for decomposition training plus two
/// unpaired pools built from disjoint scene sets, so no low-light image has a
/// well-lit counterpart among the unpaired high images.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus<T> {
    pub paired: Vec<(String, ImageTensor<T>, ImageTensor<T>)>,
    pub unpaired_low: Vec<(String, ImageTensor<T>)>,
    pub unpaired_high: Vec<(String, ImageTensor<T>)>,
}

/// Random low-light degradation: gamma 1.8–2.6, gain 0.25–0.45, noise σ 0.01.
pub fn random_degradation(rng: &mut impl Rng) -> DegradationParams {
    DegradationParams {
        gamma: rng.random_range(1.8..2.6),
        gain: rng.random_range(0.25..0.45),
        noise_sigma: 0.01,
        seed: rng.random(),
    }
}

impl<T: Scalar> SyntheticCorpus<T> {
    /// `n` pairs and `n` images in each unpaired pool, all `size×size`.
    pub fn generate(n: usize, size: usize, seed: u64) -> Result<Self> {
        if n == 0 || size == 0 {
            return Err(Error::Config("synthetic corpus needs n ≥ 1 and size ≥ 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = |rng: &mut ChaCha8Rng| synthetic_scene::<T>(size, rng.random());
        let mut paired = Vec::with_capacity(n);
        for k in 0..n {
            let hi = scene(&mut rng);
            let lo = degrade(&hi, &random_degradation(&mut rng))?;
            paired.push((format!("pair_{k:03}.png"), lo, hi));
        }
        let mut unpaired_high = Vec::with_capacity(n);
        for k in 0..n {
            unpaired_high.push((format!("high_{k:03}.png"), scene(&mut rng)));
        }
        let mut unpaired_low = Vec::with_capacity(n);
        for k in 0..n {
            let base = scene(&mut rng);
            unpaired_low.push((format!("low_{k:03}.png"), degrade(&base, &random_degradation(&mut rng))?));
        }
        Ok(Self {
            paired,
            unpaired_low,
            unpaired_high,
        })
    }

    /// Writes `paired/{low,high}/`, `unpaired/low/` and `unpaired/high/` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let sub = |p: &str| {
            let d = dir.join(p);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e)).map(|_| d)
        };
        let (pl, ph, ul, uh) = (sub("paired/low")?, sub("paired/high")?, sub("unpaired/low")?, sub("unpaired/high")?);
        for (name, lo, hi) in &self.paired {
            save_image(lo, pl.join(name))?;
            save_image(hi, ph.join(name))?;
        }
        for (name, img) in &self.unpaired_low {
            save_image(img, ul.join(name))?;
        }
        for (name, img) in &self.unpaired_high {
            save_image(img, uh.join(name))?;
        }
        Ok(())
    }

    pub fn paired_dataset(&self) -> Result<crate::decomposition::PairedDataset<T>> {
        crate::decomposition::PairedDataset::new(self.paired.clone())
    }

    /// Unpaired pools resized to `size×size`.
    pub fn unpaired_dataset(&self, size: usize) -> Result<UnpairedDataset<T>> {
        let low = self.unpaired_low.iter().map(|(_, i)| i.resize(size, size)).collect::<Result<_>>()?;
        let high = self.unpaired_high.iter().map(|(_, i)| i.resize(size, size)).collect::<Result<_>>()?;
        UnpairedDataset::new(low, high)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_seeded_and_darker_on_the_low_side() {
        let a = SyntheticCorpus::<f32>::generate(3, 16, 1).unwrap();
        let b = SyntheticCorpus::<f32>::generate(3, 16, 1).unwrap();
        assert_eq!(a.paired, b.paired);
        assert_eq!(a.unpaired_low, b.unpaired_low);
        for (_, lo, hi) in &a.paired {
            assert!(lo.mean() < hi.mean());
        }
        let c = SyntheticCorpus::<f32>::generate(3, 16, 2).unwrap();
        assert_ne!(a.unpaired_high, c.unpaired_high);
    }

    #[test]
    fn missing_directory_is_config_error() {
        assert!(png_names(Path::new("/no/such/dir")).unwrap_err().is_config());
    }
}
