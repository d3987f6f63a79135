//! Synthetic spectral scenes with controllable domain shifts, dataset
//! splitting and the SPXR raster container.

pub mod spxr;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::image::{SegmentationMap, SpectralImage, MAX_REFLECTANCE};
use crate::numerics::Rng;
use crate::profile::DESK_WAVELENGTHS;

/// Scene generator settings. Class signatures are mean reflectance spectra
/// over the configured bands.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub size: usize,
    pub wavelengths: Vec<f64>,
    pub classes: usize,
    /// Number of Voronoi sites per scene.
    pub blobs: usize,
    pub signatures: Vec<Vec<f64>>,
    /// Per-class spread of the signature between scenes (multiplicative).
    pub signature_jitter: f64,
    pub noise_std: f64,
    /// Amplitude of the multiplicative illumination field.
    pub illumination: f64,
    pub seed: u64,
}

fn smooth_signature(wavelengths: &[f64], rng: &mut Rng) -> Vec<f64> {
    let (lo, hi) = (wavelengths[0], wavelengths[wavelengths.len() - 1]);
    let base = rng.range(0.15, 0.5);
    let bumps: Vec<(f64, f64, f64)> = (0..2)
        .map(|_| {
            let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
            (rng.range(lo, hi), rng.range(150.0, 400.0), sign * rng.range(0.1, 0.4))
        })
        .collect();
    wavelengths
        .iter()
        .map(|&l| {
            let v = base + bumps.iter().map(|&(c, w, a)| a * libm::exp(-((l - c) / w) * ((l - c) / w))).sum::<f64>();
            v.clamp(0.05, 1.5)
        })
        .collect()
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Draws `classes` smooth signatures whose pairwise distances exceed `min_dist`.
pub fn draw_signatures(wavelengths: &[f64], classes: usize, min_dist: f64, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    for _ in 0..1000 {
        let sigs: Vec<Vec<f64>> = (0..classes).map(|_| smooth_signature(wavelengths, rng)).collect();
        let ok = (0..classes).all(|i| (i + 1..classes).all(|j| l2(&sigs[i], &sigs[j]) > min_dist));
        if ok {
            return Ok(sigs);
        }
    }
    Err(Error::InvalidArgument(format!("could not draw {classes} signatures separated by {min_dist}")))
}

impl SceneConfig {
    pub fn desk(seed: u64) -> Self {
        Self::with_bands(32, DESK_WAVELENGTHS.to_vec(), 4, seed)
    }

    pub fn with_bands(size: usize, wavelengths: Vec<f64>, classes: usize, seed: u64) -> Self {
        let noise_std = 0.03;
        let mut rng = Rng::derive(seed, 0x5167);
        let signatures = draw_signatures(&wavelengths, classes, 0.25, &mut rng).unwrap_or_default();
        Self { size, wavelengths, classes, blobs: 5, signatures, signature_jitter: 0.08, noise_std, illumination: 0.2, seed }
    }

    pub fn bands(&self) -> usize {
        self.wavelengths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Data(m));
        if self.size == 0 {
            return bad("scene size must be positive".into());
        }
        if self.classes < 2 {
            return bad(format!("class count {} < 2", self.classes));
        }
        if self.blobs == 0 {
            return bad("at least one Voronoi site is needed".into());
        }
        if self.wavelengths.windows(2).any(|w| !(w[0] < w[1])) || self.wavelengths.is_empty() {
            return bad("wavelengths must be strictly increasing".into());
        }
        if self.signatures.len() != self.classes || self.signatures.iter().any(|s| s.len() != self.bands()) {
            return bad(format!("need {} signatures of length {}", self.classes, self.bands()));
        }
        if !(self.noise_std >= 0.0) || !(self.illumination >= 0.0 && self.illumination < 1.0) || !(self.signature_jitter >= 0.0) {
            return bad("noise, jitter and illumination must be nonnegative (illumination < 1)".into());
        }
        for i in 0..self.classes {
            for j in i + 1..self.classes {
                let d = l2(&self.signatures[i], &self.signatures[j]);
                if d <= 3.0 * self.noise_std {
                    return bad(format!("signatures {i} and {j} are {d:.4} apart, need > {}", 3.0 * self.noise_std));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftKind {
    /// Signatures blended towards an independent re-draw.
    Regional,
    /// Smooth per-band gain and offset.
    Seasonal,
}

/// Spectral transformation separating a target domain from the source.
/// Magnitude 0 is the identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainShift {
    pub kind: ShiftKind,
    pub magnitude: f64,
    pub seed: u64,
}

impl DomainShift {
    pub fn none() -> Self {
        Self { kind: ShiftKind::Seasonal, magnitude: 0.0, seed: 0 }
    }

    fn normalized(wavelengths: &[f64], l: f64) -> f64 {
        let (lo, hi) = (wavelengths[0], wavelengths[wavelengths.len() - 1]);
        if hi > lo {
            (l - lo) / (hi - lo)
        } else {
            0.0
        }
    }

    fn curve_params(&self) -> [f64; 5] {
        let mut rng = Rng::derive(self.seed, 0x5ea5);
        [rng.range(0.7, 1.3), rng.range(0.0, core::f64::consts::TAU), rng.range(0.6, 1.0), rng.range(0.0, core::f64::consts::TAU), rng.range(0.05, 0.12)]
    }

    /// Multiplicative gain at wavelength `l` (seasonal shifts only).
    pub fn gain(&self, wavelengths: &[f64], l: f64) -> f64 {
        if self.kind != ShiftKind::Seasonal || self.magnitude == 0.0 {
            return 1.0;
        }
        let [f, phi, amp, _, _] = self.curve_params();
        let u = Self::normalized(wavelengths, l);
        libm::exp(self.magnitude * amp * libm::sin(core::f64::consts::TAU * f * u + phi))
    }

    /// Additive offset at wavelength `l` (seasonal shifts only).
    pub fn offset(&self, wavelengths: &[f64], l: f64) -> f64 {
        if self.kind != ShiftKind::Seasonal || self.magnitude == 0.0 {
            return 0.0;
        }
        let [f, _, _, psi, off] = self.curve_params();
        let u = Self::normalized(wavelengths, l);
        self.magnitude * off * libm::cos(core::f64::consts::TAU * f * u + psi)
    }

    /// Shifted class signatures.
    pub fn apply(&self, config: &SceneConfig) -> Result<Vec<Vec<f64>>> {
        if !(self.magnitude >= 0.0) {
            return Err(Error::Data("shift magnitude must be nonnegative".into()));
        }
        if self.magnitude == 0.0 {
            return Ok(config.signatures.clone());
        }
        let wl = &config.wavelengths;
        match self.kind {
            ShiftKind::Seasonal => Ok(config
                .signatures
                .iter()
                .map(|s| s.iter().zip(wl).map(|(v, &l)| (v * self.gain(wl, l) + self.offset(wl, l)).max(0.0)).collect())
                .collect()),
            ShiftKind::Regional => {
                let m = self.magnitude.min(1.0);
                let mut rng = Rng::derive(self.seed, 0x4e61);
                let redraw: Vec<Vec<f64>> = (0..config.classes).map(|_| smooth_signature(wl, &mut rng)).collect();
                Ok(config
                    .signatures
                    .iter()
                    .zip(&redraw)
                    .map(|(s, r)| s.iter().zip(r).map(|(a, b)| (1.0 - m) * a + m * b).collect())
                    .collect())
            }
        }
    }
}

/// One generated (or loaded) scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: SpectralImage,
    pub labels: Option<SegmentationMap>,
}

/// Voronoi label map from `blobs` random sites with random classes.
pub fn voronoi_labels(size: usize, blobs: usize, classes: usize, rng: &mut Rng) -> Vec<u16> {
    let sites: Vec<(f64, f64, u16)> = (0..blobs)
        .map(|_| (rng.range(0.0, size as f64), rng.range(0.0, size as f64), rng.below(classes) as u16))
        .collect();
    let mut labels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut best = (f64::INFINITY, 0u16);
            for &(sx, sy, c) in &sites {
                let d = (px - sx) * (px - sx) + (py - sy) * (py - sy);
                if d < best.0 {
                    best = (d, c);
                }
            }
            labels.push(best.1);
        }
    }
    labels
}

/// Smooth multiplicative illumination field in `[1 − a, 1 + a]`.
pub fn illumination_field(size: usize, amplitude: f64, rng: &mut Rng) -> Vec<f64> {
    let tau = core::f64::consts::TAU;
    let (fx, fy) = (rng.range(0.5, 1.5), rng.range(0.5, 1.5));
    let (px, py) = (rng.range(0.0, tau), rng.range(0.0, tau));
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let u = x as f64 / size as f64;
            let v = y as f64 / size as f64;
            out.push(1.0 + amplitude * libm::sin(tau * fx * u + px) * libm::cos(tau * fy * v + py));
        }
    }
    out
}

fn quantize(v: f64) -> f64 {
    v.clamp(0.0, MAX_REFLECTANCE) as f32 as f64
}

/// Generates scene `index` of the stream defined by `config.seed`. Spectra
/// are `signature × illumination + noise`, clipped to the valid range and
/// rounded to 32-bit precision; the shift changes spectra only.
pub fn generate(config: &SceneConfig, shift: Option<&DomainShift>, index: u64) -> Result<Scene> {
    config.validate()?;
    let signatures = match shift {
        Some(s) => s.apply(config)?,
        None => config.signatures.clone(),
    };
    let mut rng = Rng::derive(config.seed, 0x1000 + index);
    let n = config.size;
    let d = config.bands();
    let labels = voronoi_labels(n, config.blobs, config.classes, &mut rng);
    let light = illumination_field(n, config.illumination, &mut rng);
    let scene_sigs: Vec<Vec<f64>> = signatures
        .iter()
        .map(|s| {
            let g = 1.0 + config.signature_jitter * rng.normal();
            s.iter().map(|v| v * g.max(0.1)).collect()
        })
        .collect();
    let mut values = Vec::with_capacity(n * n * d);
    for (p, &c) in labels.iter().enumerate() {
        for &v in &scene_sigs[c as usize] {
            let noise = if config.noise_std > 0.0 { config.noise_std * rng.normal() } else { 0.0 };
            values.push(quantize(v * light[p] + noise));
        }
    }
    let wavelengths = config.wavelengths.iter().map(|&w| w as f32 as f64).collect();
    Ok(Scene {
        image: SpectralImage::new(n, n, wavelengths, values)?,
        labels: Some(SegmentationMap::new(n, n, config.classes, labels)?),
    })
}

/// `count` consecutive scenes starting at `first`.
pub fn generate_many(config: &SceneConfig, shift: Option<&DomainShift>, first: u64, count: usize) -> Result<Vec<Scene>> {
    (0..count as u64).map(|i| generate(config, shift, first + i)).collect()
}

/// Seeded partition of `0..n` into train/test index lists (both ascending).
pub fn split(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::InvalidArgument(format!("train fraction {train_fraction} outside [0, 1]")));
    }
    let n_train = libm::round(train_fraction * n as f64) as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::Data(format!("split of {n} scenes at {train_fraction} leaves an empty partition")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    Rng::derive(seed, 0x5917).shuffle(&mut order);
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

#[cfg(test)]
mod tests;
