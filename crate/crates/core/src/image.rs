//! Spectral rasters and label maps.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAX_REFLECTANCE: f64 = 10.0;

/// `H × W × d` raster, band-interleaved by pixel, with per-band center
/// wavelengths in nanometres.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralImage {
    height: usize,
    width: usize,
    wavelengths: Vec<f64>,
    values: Vec<f64>,
}

impl SpectralImage {
    pub fn new(height: usize, width: usize, wavelengths: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if height == 0 || height != width {
            return Err(Error::Data(format!("image must be square and non-empty, got {height}×{width}")));
        }
        if wavelengths.is_empty() {
            return Err(Error::Data("image needs at least one band".into()));
        }
        if wavelengths.windows(2).any(|w| !(w[0] < w[1])) || wavelengths.iter().any(|w| !w.is_finite()) {
            return Err(Error::Data("wavelengths must be finite and strictly increasing".into()));
        }
        if values.len() != height * width * wavelengths.len() {
            return Err(Error::Data(format!(
                "{} values for {}×{}×{}",
                values.len(),
                height,
                width,
                wavelengths.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=MAX_REFLECTANCE).contains(v)) {
            return Err(Error::Data(format!("reflectance values must lie in [0, {MAX_REFLECTANCE}]")));
        }
        Ok(Self { height, width, wavelengths, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.wavelengths.len()
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let d = self.bands();
        let i = (y * self.width + x) * d;
        &self.values[i..i + d]
    }

    /// `(H·W) × d` matrix view (rows are pixels).
    pub fn as_matrix(&self) -> Tensor {
        Tensor::new(&[self.height * self.width, self.bands()], self.values.clone()).expect("validated")
    }
}

/// `H × W` class labels in `[0, classes)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMap {
    height: usize,
    width: usize,
    classes: usize,
    labels: Vec<u16>,
}

impl SegmentationMap {
    pub fn new(height: usize, width: usize, classes: usize, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Data(format!("{} labels for {}×{}", labels.len(), height, width)));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Data(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Self { height, width, classes, labels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u16 {
        self.labels[y * self.width + x]
    }

    pub fn as_indices(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }
}
