//! Dataset sources: a builtin synthetic generator and PNG manifests.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Error, Result};
use crate::image::{Image, LabeledDataset};
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    fn stream_base(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Validation => 1 << 32,
            Split::Test => 2 << 32,
        }
    }
}

/// Sinusoidal gratings: class `k` fixes the orientation (`k mod m`) and the
/// spatial frequency (`k / m`), with `m = ⌈K/2⌉`. Phase, contrast and
/// pixel noise are drawn per sample; `phases > 0` restricts the phase to
/// that many evenly spaced values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub phases: usize,
}

fn default_noise() -> f64 {
    0.03
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            height: 16,
            width: 16,
            channels: 1,
            train: 2000,
            validation: 500,
            test: 500,
            noise: default_noise(),
            phases: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 20 {
            return config_err("synthetic generator supports 2..=20 classes");
        }
        if self.height < 4 || self.width < 4 || self.channels == 0 {
            return config_err("synthetic images must be at least 4×4 with one channel");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return config_err("synthetic noise must be finite and non-negative");
        }
        Ok(())
    }

    fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Validation => self.validation,
            Split::Test => self.test,
        }
    }

    /// Sample `index` of `split`; labels cycle through the classes.
    pub fn sample(&self, split: Split, index: usize, seed: u64) -> (Image, usize) {
        let label = index % self.num_classes;
        let mut rng = stream(seed, split.stream_base() + index as u64);
        let orientations = self.num_classes.div_ceil(2);
        let theta = PI * (label % orientations) as f64 / orientations as f64;
        // Cycles across the shorter side.
        let cycles = [2.0, 4.0][label / orientations];
        let side = self.height.min(self.width) as f64;
        let k = 2.0 * PI * cycles / side;
        let (kx, ky) = (k * theta.cos(), k * theta.sin());
        let phase = match self.phases {
            0 => rng.random_range(0.0..2.0 * PI),
            p => 2.0 * PI * rng.random_range(0..p) as f64 / p as f64,
        };
        let contrast = rng.random_range(0.3..0.45);
        let tint: Vec<f64> = (0..self.channels)
            .map(|_| rng.random_range(0.85..1.0))
            .collect();
        let noise = Normal::new(0.0, self.noise).expect("validated noise");
        let mut px = Array3::zeros((self.height, self.width, self.channels));
        for ((r, c, ch), v) in px.indexed_iter_mut() {
            let g = (kx * c as f64 + ky * r as f64 + phase).sin();
            *v = 0.5 + contrast * tint[ch] * g + noise.sample(&mut rng);
        }
        (Image::clamped(px), label)
    }

    pub fn generate(&self, split: Split, seed: u64) -> Result<LabeledDataset> {
        self.validate()?;
        let (images, labels) = (0..self.count(split))
            .map(|i| self.sample(split, i, seed))
            .unzip();
        LabeledDataset::new(images, labels, self.num_classes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
    pub split: Split,
}

/// PNG files under `root` with labels and split tags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Reads a manifest; a relative `root` is resolved against the
    /// manifest's own directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if m.root.is_relative() {
            m.root = path.parent().unwrap_or(Path::new(".")).join(&m.root);
        }
        Ok(m)
    }

    pub fn num_classes(&self) -> usize {
        self.entries.iter().map(|e| e.label + 1).max().unwrap_or(0)
    }

    /// Paths must exist and labels must cover `[0, K)` without gaps.
    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            let p = self.root.join(&e.path);
            if !p.is_file() {
                return input_err(format!("manifest entry {} does not exist", p.display()));
            }
        }
        let k = self.num_classes();
        let mut seen = vec![false; k];
        for e in &self.entries {
            seen[e.label] = true;
        }
        if let Some(gap) = seen.iter().position(|s| !s) {
            return input_err(format!("labels are not dense: class {gap} has no samples"));
        }
        Ok(())
    }

    /// Loads one split, converting to `channels` (1 → luma, 3 → RGB) and
    /// checking the geometry.
    pub fn load_split(
        &self,
        split: Split,
        height: usize,
        width: usize,
        channels: usize,
    ) -> Result<LabeledDataset> {
        self.validate()?;
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for e in self.entries.iter().filter(|e| e.split == split) {
            images.push(load_png(&self.root.join(&e.path), height, width, channels)?);
            labels.push(e.label);
        }
        LabeledDataset::new(images, labels, self.num_classes())
    }
}

pub fn load_png(path: &Path, height: usize, width: usize, channels: usize) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    if img.height() as usize != height || img.width() as usize != width {
        return input_err(format!(
            "{} is {}×{}, expected {height}×{width}",
            path.display(),
            img.height(),
            img.width()
        ));
    }
    let data: Vec<u8> = match channels {
        1 => img.to_luma8().into_raw(),
        3 => img.to_rgb8().into_raw(),
        c => return config_err(format!("{c} channels unsupported for PNG input")),
    };
    Image::from_vec(
        height,
        width,
        channels,
        data.iter().map(|&b| f64::from(b) / 255.0).collect(),
    )
}

pub fn save_png(image: &Image, path: &Path) -> Result<()> {
    let (h, w, c) = image.dims();
    let bytes: Vec<u8> = image
        .as_slice()
        .iter()
        .map(|v| (v * 255.0).round() as u8)
        .collect();
    let color = match c {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => return config_err(format!("{c} channels unsupported for PNG output")),
    };
    image::save_buffer(path, &bytes, w as u32, h as u32, color)
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let spec = SyntheticSpec {
            train: 40,
            ..SyntheticSpec::default()
        };
        let a = spec.generate(Split::Train, 3).unwrap();
        let b = spec.generate(Split::Train, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, spec.generate(Split::Train, 4).unwrap());
        for k in 0..10 {
            assert_eq!(a.labels().iter().filter(|&&l| l == k).count(), 4);
        }
        assert!(a
            .images()
            .iter()
            .all(|im| im.as_slice().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn splits_do_not_share_samples() {
        let spec = SyntheticSpec::default();
        assert_ne!(
            spec.sample(Split::Train, 0, 1).0,
            spec.sample(Split::Test, 0, 1).0
        );
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec::default();
        let mut entries = Vec::new();
        for i in 0..4 {
            let (im, label) = spec.sample(Split::Train, i, 0);
            let name = format!("{i}.png");
            save_png(&im, &dir.path().join(&name)).unwrap();
            entries.push(ManifestEntry {
                path: name.into(),
                label: label % 2,
                split: if i < 3 { Split::Train } else { Split::Test },
            });
        }
        let m = DatasetManifest {
            root: ".".into(),
            entries,
        };
        let mpath = dir.path().join("manifest.json");
        std::fs::write(&mpath, serde_json::to_string(&m).unwrap()).unwrap();
        let loaded = DatasetManifest::load(&mpath).unwrap();
        let train = loaded.load_split(Split::Train, 16, 16, 1).unwrap();
        assert_eq!(train.len(), 3);
        assert_eq!(train.num_classes(), 2);
        let (orig, _) = spec.sample(Split::Train, 0, 0);
        assert!(train.images()[0].linf_distance(&orig) <= 0.5 / 255.0 + 1e-12);
        assert!(matches!(
            loaded.load_split(Split::Train, 8, 8, 1),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn missing_manifest_entry_is_named() {
        let m = DatasetManifest {
            root: "/nonexistent".into(),
            entries: vec![ManifestEntry {
                path: "a.png".into(),
                label: 0,
                split: Split::Train,
            }],
        };
        let err = m.validate().unwrap_err().to_string();
        assert!(err.contains("/nonexistent/a.png"));
    }
}
