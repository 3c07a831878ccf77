//! Image containers and the deterministic sinusoidal-texture generator used
//! for desk-scale experiments.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::{Container, Dtype};
use crate::error::{MoodError, Result};

/// Patch size the toy encoder uses unless configured otherwise.
pub const DEFAULT_PATCH_SIZE: usize = 4;

const NOISE_AMPLITUDE: f64 = 0.1;
const TEXTURE_AMPLITUDE: f64 = 0.35;

/// An `H×W×C` image stored row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(MoodError::Geometry(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(MoodError::Shape(format!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
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

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// A labelled set of equally-shaped images with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    images: Vec<Image>,
    labels: Vec<usize>,
    class_count: usize,
}

impl ImageDataset {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if images.is_empty() {
            return Err(MoodError::Data("image dataset is empty".into()));
        }
        if class_count == 0 {
            return Err(MoodError::Validation("class_count must be positive".into()));
        }
        if labels.len() != images.len() {
            return Err(MoodError::Validation(format!(
                "{} labels for {} images",
                labels.len(),
                images.len()
            )));
        }
        let shape = images[0].shape();
        for (i, img) in images.iter().enumerate() {
            if img.shape() != shape {
                return Err(MoodError::Shape(format!(
                    "image {i} has shape {:?}, expected {shape:?}",
                    img.shape()
                )));
            }
            if let Some(v) = img.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(MoodError::Validation(format!("image {i} holds value {v} outside [0,1]")));
            }
        }
        if let Some(l) = labels.iter().find(|&&l| l >= class_count) {
            return Err(MoodError::Validation(format!(
                "label {l} outside [0, {class_count})"
            )));
        }
        Ok(ImageDataset {
            images,
            labels,
            class_count,
        })
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `(H, W, C)` shared by every image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        self.images[0].shape()
    }

    /// Checks that `patch` tiles every image.
    pub fn check_patch_size(&self, patch: usize) -> Result<()> {
        let (h, w, _) = self.image_shape();
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(MoodError::Geometry(format!(
                "{h}x{w} images are not divisible into {patch}x{patch} patches"
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn to_container(&self) -> Container {
        let (h, w, c) = self.image_shape();
        let mut out = Container::new(
            "image_dataset",
            json!({ "height": h, "width": w, "channels": c, "class_count": self.class_count }),
        );
        let pixels: Vec<f64> = self.images.iter().flat_map(|i| i.data.iter().copied()).collect();
        out.push("images", Dtype::F64, vec![self.len(), h, w, c], pixels);
        out.push(
            "labels",
            Dtype::F64,
            vec![self.len()],
            self.labels.iter().map(|&l| l as f64).collect(),
        );
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load_kind(path, "image_dataset")?;
        let dim = |key: &str| -> Result<usize> {
            c.meta
                .get(key)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| MoodError::Format(format!("image dataset meta lacks {key:?}")))
        };
        let (h, w, ch, k) = (dim("height")?, dim("width")?, dim("channels")?, dim("class_count")?);
        let n = match c.tensor_shape("labels")? {
            [n] => *n,
            other => return Err(MoodError::Format(format!("label tensor has shape {other:?}"))),
        };
        let label_values = c.tensor("labels", &[n])?;
        let pixels = c.tensor("images", &[n, h, w, ch])?;
        let per = h * w * ch;
        let images = pixels
            .chunks_exact(per.max(1))
            .map(|p| Image::new(h, w, ch, p.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let labels = label_values
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(MoodError::Format(format!("bad label value {v}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        ImageDataset::new(images, labels, k).map_err(|e| MoodError::Format(e.to_string()))
    }
}

/// Which part of the frequency plane a generated dataset draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrequencyBand {
    /// Max-norm frequency in `1..=side/4` cycles per image.
    Low,
    /// Max-norm frequency strictly between `side/4` and `side/2`.
    High,
}

/// Canonical integer frequency vectors `(fx, fy)` of a band, in class order.
///
/// Only one of each conjugate pair `±(fx, fy)` is listed (`fx > 0`, or
/// `fx == 0` and `fy > 0`). Nyquist-rate vectors are excluded because their
/// amplitude depends on phase.
pub fn band_frequencies(side: usize, band: FrequencyBand) -> Vec<(i64, i64)> {
    let s = side as i64;
    let quarter = s / 4;
    let half = s / 2;
    let in_band = |r: i64| match band {
        FrequencyBand::Low => (1..=quarter).contains(&r),
        FrequencyBand::High => r > quarter && r < half && 2 * r < s,
    };
    let mut out = Vec::new();
    for fx in 0..half {
        for fy in -(half - 1)..half {
            if fx == 0 && fy <= 0 {
                continue;
            }
            let r = fx.abs().max(fy.abs());
            if in_band(r) {
                out.push((fx, fy));
            }
        }
    }
    out.sort_by_key(|&(fx, fy)| (fx.abs().max(fy.abs()), fx.abs() + fy.abs(), -fx, -fy));
    out
}

/// Generates `class_count · per_class` sinusoidal textures.
///
/// Class `c` is the `c`-th frequency of the low band (or the high band when
/// `ood` is set) with a random per-image phase, plus uniform noise in
/// `[-0.1, 0.1]`, clipped to `[0, 1]`. Samples are ordered class-major.
pub fn generate_synthetic(
    class_count: usize,
    per_class: usize,
    side: usize,
    channels: usize,
    ood: bool,
    seed: u64,
) -> Result<ImageDataset> {
    if class_count == 0 || per_class == 0 || side == 0 || channels == 0 {
        return Err(MoodError::Parameter(
            "class_count, per_class, side and channels must all be positive".into(),
        ));
    }
    if side % DEFAULT_PATCH_SIZE != 0 {
        return Err(MoodError::Geometry(format!(
            "side {side} is not divisible by the patch size {DEFAULT_PATCH_SIZE}"
        )));
    }
    let band = if ood { FrequencyBand::High } else { FrequencyBand::Low };
    let freqs = band_frequencies(side, band);
    if freqs.len() < class_count {
        return Err(MoodError::Parameter(format!(
            "side {side} offers only {} distinct {band:?}-band textures, {class_count} requested",
            freqs.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(class_count * per_class);
    let mut labels = Vec::with_capacity(class_count * per_class);
    for (class, &(fx, fy)) in freqs.iter().take(class_count).enumerate() {
        for _ in 0..per_class {
            let phase = rng.gen_range(0.0..2.0 * PI);
            let mut data = Vec::with_capacity(side * side * channels);
            for y in 0..side {
                for x in 0..side {
                    let theta = 2.0 * PI * (fx * x as i64 + fy * y as i64) as f64 / side as f64;
                    let base = 0.5 + TEXTURE_AMPLITUDE * (theta + phase).cos();
                    for _ in 0..channels {
                        let noise = rng.gen_range(-NOISE_AMPLITUDE..=NOISE_AMPLITUDE);
                        data.push((base + noise).clamp(0.0, 1.0));
                    }
                }
            }
            images.push(Image::new(side, side, channels, data)?);
            labels.push(class);
        }
    }
    ImageDataset::new(images, labels, class_count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    /// Brute-force 2-D DFT magnitude peak, canonicalized to the half plane.
    fn dominant_frequency(img: &Image) -> (i64, i64) {
        let s = img.height() as i64;
        let mean = img.as_slice().iter().sum::<f64>() / img.as_slice().len() as f64;
        let mut best = ((0, 0), -1.0);
        for ky in 0..s {
            for kx in 0..s {
                if kx == 0 && ky == 0 {
                    continue;
                }
                let (mut re, mut im) = (0.0, 0.0);
                for y in 0..s {
                    for x in 0..s {
                        let v = img.get(y as usize, x as usize, 0) - mean;
                        let a = -2.0 * PI * (kx * x + ky * y) as f64 / s as f64;
                        re += v * a.cos();
                        im += v * a.sin();
                    }
                }
                let mag = re.hypot(im);
                if mag > best.1 {
                    best = ((kx, ky), mag);
                }
            }
        }
        let (kx, ky) = best.0;
        // map to signed frequencies, then to the canonical half plane
        let signed = |k: i64| if k > s / 2 { k - s } else { k };
        let (fx, fy) = (signed(kx), signed(ky));
        if fx > 0 || (fx == 0 && fy > 0) {
            (fx, fy)
        } else {
            (-fx, -fy)
        }
    }

    #[test]
    fn contract_shape_and_range() {
        let ds = generate_synthetic(2, 10, 8, 1, false, 7).unwrap();
        assert_eq!(ds.len(), 20);
        assert_eq!(ds.image_shape(), (8, 8, 1));
        assert_eq!(ds.labels().iter().copied().collect::<BTreeSet<_>>(), BTreeSet::from([0, 1]));
        for img in ds.images() {
            assert!(img.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_synthetic(2, 10, 8, 1, false, 7).unwrap();
        let b = generate_synthetic(2, 10, 8, 1, false, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(2, 10, 8, 1, false, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn id_and_ood_dominant_frequencies_are_disjoint() {
        let id = generate_synthetic(2, 10, 8, 1, false, 7).unwrap();
        let ood = generate_synthetic(2, 10, 8, 1, true, 7).unwrap();
        let id_peaks: BTreeSet<_> = id.images().iter().map(dominant_frequency).collect();
        let ood_peaks: BTreeSet<_> = ood.images().iter().map(dominant_frequency).collect();
        assert!(id_peaks.is_disjoint(&ood_peaks), "{id_peaks:?} vs {ood_peaks:?}");
        // each class is recovered exactly
        for (img, &l) in id.images().iter().zip(id.labels()) {
            assert_eq!(dominant_frequency(img), band_frequencies(8, FrequencyBand::Low)[l]);
        }
        for (img, &l) in ood.images().iter().zip(ood.labels()) {
            assert_eq!(dominant_frequency(img), band_frequencies(8, FrequencyBand::High)[l]);
        }
    }

    #[test]
    fn bands_are_disjoint_and_ordered() {
        let low = band_frequencies(8, FrequencyBand::Low);
        let high = band_frequencies(8, FrequencyBand::High);
        assert_eq!(&low[..2], &[(1, 0), (0, 1)]);
        assert_eq!(low.len(), 12);
        assert_eq!(high.len(), 12);
        assert!(low.iter().all(|f| !high.contains(f)));
    }

    #[test]
    fn preconditions() {
        assert!(matches!(generate_synthetic(2, 10, 6, 1, false, 0), Err(MoodError::Geometry(_))));
        assert!(generate_synthetic(0, 10, 8, 1, false, 0).is_err());
        assert!(generate_synthetic(2, 1, 4, 1, true, 0).is_err());
        assert!(generate_synthetic(13, 1, 8, 1, false, 0).is_err());
    }

    #[test]
    fn dataset_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let ds = generate_synthetic(3, 4, 8, 2, false, 1).unwrap();
        ds.save(&path).unwrap();
        assert_eq!(ImageDataset::load(&path).unwrap(), ds);
    }

    #[test]
    fn dataset_invariants() {
        let img = Image::new(2, 2, 1, vec![0.0; 4]).unwrap();
        let other = Image::new(4, 4, 1, vec![0.0; 16]).unwrap();
        assert!(ImageDataset::new(vec![img.clone(), other], vec![0, 0], 1).is_err());
        assert!(ImageDataset::new(vec![img.clone()], vec![1], 1).is_err());
        let bad = Image::new(2, 2, 1, vec![1.5; 4]).unwrap();
        assert!(ImageDataset::new(vec![bad], vec![0], 1).is_err());
    }
}
