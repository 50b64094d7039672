use std::f64::consts::PI;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{Error, Image, Result};

/// Multi-scale Gabor bank with a single orientation.
///
/// With `orientation = 0` the carrier varies down the image rows, so the bank
/// responds to horizontal bands. `sigma_ratio` sets the envelope width across
/// the stripes as a multiple of the wavelength; `aspect` < 1 stretches the
/// envelope along the stripes. Kernels span `kernel_size_factor * wavelength`
/// pixels (rounded to an odd size).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaborBankConfig {
    pub wavelengths: Vec<f64>,
    pub orientation: f64,
    pub sigma_ratio: f64,
    pub aspect: f64,
    pub kernel_size_factor: f64,
    pub rectify: Rectify,
}

/// How signed filter responses are folded before taking the bank maximum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rectify {
    Abs,
    /// Positive part only: bright-stripe responses, no side lobes.
    Positive,
    /// Modulus of the complex (even + i odd) response.
    Magnitude,
}

impl Default for GaborBankConfig {
    fn default() -> Self {
        GaborBankConfig {
            wavelengths: vec![4.0, 8.0, 16.0],
            orientation: 0.0,
            sigma_ratio: 0.56,
            aspect: 0.5,
            kernel_size_factor: 2.0,
            rectify: Rectify::Abs,
        }
    }
}

impl GaborBankConfig {
    /// Default bank with wavelengths scaled from the 64 px reference.
    pub fn for_resolution(size: usize) -> Self {
        let s = size as f64 / 64.0;
        let base = GaborBankConfig::default();
        GaborBankConfig {
            wavelengths: base.wavelengths.iter().map(|w| w * s).collect(),
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.wavelengths.is_empty() {
            return Err(Error::Config("gabor: at least one wavelength required".into()));
        }
        if self.wavelengths.iter().any(|&w| !(w > 1.0)) {
            return Err(Error::Config("gabor: wavelengths must exceed 1 pixel".into()));
        }
        if self.wavelengths.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("gabor: wavelengths must be strictly increasing".into()));
        }
        if !(self.sigma_ratio > 0.0 && self.aspect > 0.0 && self.kernel_size_factor > 0.0) {
            return Err(Error::Config(
                "gabor: sigma_ratio, aspect and kernel_size_factor must be positive".into(),
            ));
        }
        Ok(())
    }

    fn radius(&self, wavelength: f64) -> usize {
        ((self.kernel_size_factor * wavelength / 2.0).round() as usize).max(1)
    }
}

/// Zero-mean, unit-L1 even Gabor kernel.
pub fn gabor_kernel(cfg: &GaborBankConfig, wavelength: f64) -> Array2<f64> {
    kernel(cfg, wavelength, false)
}

/// Odd (sine-carrier) companion of [`gabor_kernel`].
pub fn gabor_kernel_odd(cfg: &GaborBankConfig, wavelength: f64) -> Array2<f64> {
    kernel(cfg, wavelength, true)
}

fn kernel(cfg: &GaborBankConfig, wavelength: f64, odd: bool) -> Array2<f64> {
    let r = cfg.radius(wavelength) as isize;
    let sigma = cfg.sigma_ratio * wavelength;
    let (sin, cos) = cfg.orientation.sin_cos();
    let size = (2 * r + 1) as usize;
    let mut k = Array2::from_shape_fn((size, size), |(i, j)| {
        let dy = i as f64 - r as f64;
        let dx = j as f64 - r as f64;
        let across = -dx * sin + dy * cos;
        let along = dx * cos + dy * sin;
        let env = (-(across * across + cfg.aspect * cfg.aspect * along * along) / (2.0 * sigma * sigma)).exp();
        let phase = 2.0 * PI * across / wavelength;
        env * if odd { phase.sin() } else { phase.cos() }
    });
    let mean = k.mean().unwrap_or(0.0);
    k.mapv_inplace(|v| v - mean);
    let l1: f64 = k.iter().map(|v| v.abs()).sum();
    if l1 > 0.0 {
        k.mapv_inplace(|v| v / l1);
    }
    k
}

fn reflect(i: isize, n: isize) -> usize {
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Correlation with symmetric-reflect padding.
fn filter(img: &Image, k: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    let (kh, kw) = k.dim();
    let (rh, rw) = ((kh / 2) as isize, (kw / 2) as isize);
    let src: Vec<f64> = img.iter().map(|&v| v as f64).collect();
    let row_idx: Vec<Vec<usize>> = (0..h as isize)
        .map(|r| (-rh..=rh).map(|d| reflect(r + d, h as isize)).collect())
        .collect();
    let col_idx: Vec<Vec<usize>> = (0..w as isize)
        .map(|c| (-rw..=rw).map(|d| reflect(c + d, w as isize)).collect())
        .collect();
    let kern: Vec<f64> = k.iter().copied().collect();
    Array2::from_shape_fn((h, w), |(r, c)| {
        let mut acc = 0.0;
        for (i, &rr) in row_idx[r].iter().enumerate() {
            let krow = &kern[i * kw..(i + 1) * kw];
            let srow = &src[rr * w..(rr + 1) * w];
            for (kv, &cc) in krow.iter().zip(&col_idx[c]) {
                acc += kv * srow[cc];
            }
        }
        acc
    })
}

/// Per-pixel maximum of the rectified bank responses, scaled to `[0, 1]` by
/// its own maximum (all zeros for a flat input).
pub fn gabor_response(img: &Image, cfg: &GaborBankConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    let (h, w) = img.dim();
    let mut out = Array2::<f64>::zeros((h, w));
    for &wl in &cfg.wavelengths {
        let size = 2 * cfg.radius(wl) + 1;
        if size > h.min(w) {
            return Err(Error::KernelTooLarge {
                wavelength: wl,
                size,
                height: h,
                width: w,
            });
        }
        let mut resp = filter(img, &gabor_kernel(cfg, wl));
        match cfg.rectify {
            Rectify::Abs => resp.mapv_inplace(f64::abs),
            Rectify::Positive => resp.mapv_inplace(|r| r.max(0.0)),
            Rectify::Magnitude => {
                let odd = filter(img, &gabor_kernel_odd(cfg, wl));
                resp.zip_mut_with(&odd, |e, &o| *e = e.hypot(o));
            }
        }
        out.zip_mut_with(&resp, |o, &r| *o = o.max(r));
    }
    let max = out.iter().cloned().fold(0.0, f64::max);
    if max > 1e-9 {
        out.mapv_inplace(|v| v / max);
    } else {
        out.fill(0.0);
    }
    Ok(out)
}
