//! Images, patch sequences and labeled datasets.

use ndarray::{Array2, Array3};

use crate::error::{dim_err, input_err, Result};
use crate::tape::Matrix;

/// An `H×W×C` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pixels: Array3<f64>,
}

impl Image {
    /// Validates that every value is finite and within `[0, 1]`.
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return input_err(format!("pixel value {v} outside [0, 1]"));
        }
        Ok(Self { pixels })
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        let pixels = Array3::from_shape_vec((height, width, channels), data)
            .map_err(|e| crate::Error::Dimension(e.to_string()))?;
        Self::new(pixels)
    }

    /// Builds an image from values that are clamped into `[0, 1]`.
    pub fn clamped(mut pixels: Array3<f64>) -> Self {
        pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Self { pixels }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self::clamped(Array3::from_elem((height, width, channels), value))
    }

    pub(crate) fn from_trusted(pixels: Array3<f64>) -> Self {
        debug_assert!(pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        Self { pixels }
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.pixels.dim()
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array3<f64> {
        self.pixels
    }

    pub fn as_slice(&self) -> &[f64] {
        self.pixels.as_slice().expect("standard layout")
    }

    pub fn linf_distance(&self, other: &Image) -> f64 {
        self.pixels
            .iter()
            .zip(other.pixels.iter())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn l2_distance(&self, other: &Image) -> f64 {
        self.pixels
            .iter()
            .zip(other.pixels.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Number of patches of side `patch` in an `height×width` image.
pub fn num_patches(height: usize, width: usize, patch: usize) -> Result<usize> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return dim_err(format!(
            "patch size {patch} does not divide image {height}×{width}"
        ));
    }
    Ok((height / patch) * (width / patch))
}

/// Splits `pixels` into `N = (H/P)(W/P)` flattened patches in row-major
/// patch order. Row `i` holds patch `i` flattened as `(dy, dx, c)`.
pub fn patchify_array(pixels: &Array3<f64>, patch: usize) -> Result<Matrix> {
    let (h, w, c) = pixels.dim();
    let n = num_patches(h, w, patch)?;
    let per_row = w / patch;
    let mut out = Array2::zeros((n, patch * patch * c));
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let (py, px) = (i / per_row, i % per_row);
        let mut k = 0;
        for dy in 0..patch {
            for dx in 0..patch {
                for ch in 0..c {
                    row[k] = pixels[[py * patch + dy, px * patch + dx, ch]];
                    k += 1;
                }
            }
        }
    }
    Ok(out)
}

pub fn patchify(image: &Image, patch: usize) -> Result<Matrix> {
    patchify_array(&image.pixels, patch)
}

/// Inverse of [`patchify_array`].
pub fn unpatchify_array(
    patches: &Matrix,
    height: usize,
    width: usize,
    channels: usize,
    patch: usize,
) -> Result<Array3<f64>> {
    let n = num_patches(height, width, patch)?;
    if patches.dim() != (n, patch * patch * channels) {
        return dim_err(format!(
            "patch matrix {:?} does not match {n} patches of {patch}×{patch}×{channels}",
            patches.dim()
        ));
    }
    let per_row = width / patch;
    let mut out = Array3::zeros((height, width, channels));
    for (i, row) in patches.rows().into_iter().enumerate() {
        let (py, px) = (i / per_row, i % per_row);
        let mut k = 0;
        for dy in 0..patch {
            for dx in 0..patch {
                for ch in 0..channels {
                    out[[py * patch + dy, px * patch + dx, ch]] = row[k];
                    k += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Reassembles an image from patches, clamping into `[0, 1]`.
pub fn unpatchify(
    patches: &Matrix,
    height: usize,
    width: usize,
    channels: usize,
    patch: usize,
) -> Result<Image> {
    unpatchify_array(patches, height, width, channels, patch).map(Image::clamped)
}

/// Images paired with class labels in `[0, num_classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    images: Vec<Image>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return input_err(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            ));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
            return input_err(format!("label {l} outside [0, {num_classes})"));
        }
        if let Some(first) = images.first() {
            if let Some(bad) = images.iter().find(|im| im.dims() != first.dims()) {
                return dim_err(format!(
                    "mixed image geometry {:?} vs {:?}",
                    bad.dims(),
                    first.dims()
                ));
            }
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Image, usize)> {
        self.images.iter().zip(self.labels.iter().copied())
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
        }
    }
}
