//! Layered-retina phantoms.
//!
//! Each phantom is a dark background crossed by one curved band made of
//! `layers` bright strata separated by dimmer gaps, with multiplicative
//! speckle (Gaussian in log-intensity). The generator also returns the band
//! mask, which is the ground truth for ROI extraction.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{BScanImage, DatasetIndex, Label, Split};
use crate::exec::Exec;
use crate::seed::rng_for;
use crate::{Error, Image, Mask, Result};

/// Pixel-unit fields are expressed at `size`; [`PhantomConfig::for_resolution`]
/// rescales the 64 px defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub size: usize,
    pub layers: usize,
    pub layer_thickness: (f64, f64),
    pub gap_thickness: (f64, f64),
    /// Band top (at the image centre column) as a fraction of the height.
    pub band_top: (f64, f64),
    /// Peak-to-centre sag of the band over half the width, pixels.
    pub curvature_amplitude: f64,
    /// Maximum absolute slope of the band (rows per column).
    pub tilt: f64,
    pub speckle_sigma: f64,
    pub background: (f64, f64),
    pub slices_per_patient: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            size: 64,
            layers: 5,
            layer_thickness: (2.0, 3.5),
            gap_thickness: (1.5, 2.5),
            band_top: (0.28, 0.40),
            curvature_amplitude: 4.0,
            tilt: 0.06,
            speckle_sigma: 0.05,
            background: (0.03, 0.08),
            slices_per_patient: 1,
        }
    }
}

impl PhantomConfig {
    pub fn for_resolution(size: usize) -> Self {
        let base = PhantomConfig::default();
        let s = size as f64 / base.size as f64;
        PhantomConfig {
            size,
            layer_thickness: (base.layer_thickness.0 * s, base.layer_thickness.1 * s),
            gap_thickness: (base.gap_thickness.0 * s, base.gap_thickness.1 * s),
            curvature_amplitude: base.curvature_amplitude * s,
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("phantom: {m}")));
        if self.size < super::MIN_SIDE {
            return bad("size below minimum");
        }
        if self.layers == 0 {
            return bad("layers must be at least 1");
        }
        if self.slices_per_patient == 0 {
            return bad("slices_per_patient must be at least 1");
        }
        for (name, (lo, hi)) in [
            ("layer_thickness", self.layer_thickness),
            ("gap_thickness", self.gap_thickness),
            ("band_top", self.band_top),
            ("background", self.background),
        ] {
            if !(lo <= hi) || lo < 0.0 {
                return bad(&format!("{name} range must satisfy 0 <= min <= max"));
            }
        }
        let (min_layer, max_layer) = self.layer_thickness;
        if min_layer <= 0.0 || max_layer <= 0.0 {
            return bad("layer thickness must be positive");
        }
        let max_band = self.layers as f64 * self.layer_thickness.1
            + (self.layers - 1) as f64 * self.gap_thickness.1;
        let lowest = self.band_top.1 * self.size as f64
            + self.curvature_amplitude
            + self.tilt * self.size as f64 / 2.0
            + max_band;
        if lowest > self.size as f64 {
            return bad("band can extend below the image; reduce layers, thickness or band_top");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub image: BScanImage,
    /// Ground-truth retinal band.
    pub band_mask: Mask,
}

#[derive(Debug, Clone)]
struct Geometry {
    top: f64,
    curvature: f64,
    slope: f64,
    /// `(start, end, intensity)` offsets below the band top.
    layers: Vec<(f64, f64, f64)>,
    band_thickness: f64,
    gap_level: f64,
    background: f64,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn draw_geometry<R: Rng + ?Sized>(cfg: &PhantomConfig, rng: &mut R) -> Geometry {
    let h = cfg.size as f64;
    let top = uniform(rng, cfg.band_top) * h;
    let curvature = uniform(rng, (-cfg.curvature_amplitude, cfg.curvature_amplitude));
    let slope = uniform(rng, (-cfg.tilt, cfg.tilt));
    let mut layers = Vec::with_capacity(cfg.layers);
    let mut offset = 0.0;
    for i in 0..cfg.layers {
        let thickness = uniform(rng, cfg.layer_thickness);
        let intensity = if i + 1 == cfg.layers {
            uniform(rng, (0.85, 1.0))
        } else {
            uniform(rng, (0.45, 0.85))
        };
        layers.push((offset, offset + thickness, intensity));
        offset += thickness;
        if i + 1 < cfg.layers {
            offset += uniform(rng, cfg.gap_thickness);
        }
    }
    Geometry {
        top,
        curvature,
        slope,
        layers,
        band_thickness: offset,
        gap_level: uniform(rng, (0.18, 0.28)),
        background: uniform(rng, cfg.background),
    }
}

fn logistic(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Smooth indicator of `[start, end]`.
fn soft_box(t: f64, start: f64, end: f64) -> f64 {
    const SOFTNESS: f64 = 0.35;
    logistic((t - start) / SOFTNESS) * logistic((end - t) / SOFTNESS)
}

fn render<R: Rng + ?Sized>(cfg: &PhantomConfig, g: &Geometry, rng: &mut R) -> (Image, Mask) {
    let n = cfg.size;
    let half = n as f64 / 2.0;
    let mut img = Image::zeros((n, n));
    let mut band = Mask::from_elem((n, n), false);
    for c in 0..n {
        let u = (c as f64 + 0.5 - half) / half;
        let top = g.top + g.curvature * u * u + g.slope * (c as f64 + 0.5 - half);
        for r in 0..n {
            let t = r as f64 + 0.5 - top;
            let mut v = g.background + (g.gap_level - g.background) * soft_box(t, 0.0, g.band_thickness);
            for &(s, e, intensity) in &g.layers {
                v += (intensity - g.gap_level) * soft_box(t, s, e);
            }
            if cfg.speckle_sigma > 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                v *= (cfg.speckle_sigma * z - 0.5 * cfg.speckle_sigma * cfg.speckle_sigma).exp();
            }
            img[[r, c]] = v.clamp(0.0, 1.0) as f32;
            band[[r, c]] = (0.0..g.band_thickness).contains(&t);
        }
    }
    (img, band)
}

pub fn synthetic_patient_id(k: usize) -> String {
    format!("syn{k:05}")
}

/// `n` normal phantoms with their band masks. Pure in `(cfg, n, seed)`.
///
/// Image `i` belongs to patient `i / slices_per_patient`; slices of one
/// patient share geometry up to a one-pixel vertical jitter and differ in
/// speckle.
pub fn synthesize_phantoms(cfg: &PhantomConfig, n: usize, seed: u64) -> Result<Vec<Phantom>> {
    if n == 0 {
        return Err(Error::InvalidInput("phantom count must be positive".into()));
    }
    cfg.validate()?;
    let per = cfg.slices_per_patient;
    let scale = cfg.size as f64 / 64.0;
    let out = Exec::default().map_range(n, |i| {
        let patient = i / per;
        let slice = i % per;
        let mut geo = draw_geometry(cfg, &mut rng_for(seed, "phantom-geometry", &[patient as u64]));
        let mut rng = rng_for(seed, "phantom-slice", &[patient as u64, slice as u64]);
        if per > 1 {
            geo.top += uniform(&mut rng, (-scale, scale));
        }
        let (pixels, band_mask) = render(cfg, &geo, &mut rng);
        let pid = synthetic_patient_id(patient);
        let name = format!("{}-{}-{}", Label::Normal.token(), pid, slice);
        BScanImage::new(pixels, pid, Label::Normal).map(|image| Phantom {
            image: image.with_name(name),
            band_mask,
        })
    });
    out.into_iter().collect()
}

/// Synthetic training split of `n` normal phantoms.
pub fn generate_synthetic_dataset(cfg: &PhantomConfig, n: usize, seed: u64) -> Result<DatasetIndex> {
    let phantoms = synthesize_phantoms(cfg, n, seed)?;
    DatasetIndex::new(phantoms.into_iter().map(|p| p.image).collect(), Split::Train)
}

/// Row-wise mean intensity.
pub fn row_profile(img: &Image) -> Vec<f64> {
    img.rows()
        .into_iter()
        .map(|r| r.iter().map(|&v| v as f64).sum::<f64>() / r.len() as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn deterministic_in_seed() {
        let cfg = PhantomConfig::default();
        let a = synthesize_phantoms(&cfg, 1, 7).unwrap();
        let b = synthesize_phantoms(&cfg, 1, 7).unwrap();
        assert_eq!(a[0].image.pixels, b[0].image.pixels);
        let c = synthesize_phantoms(&cfg, 1, 8).unwrap();
        assert_ne!(a[0].image.pixels, c[0].image.pixels);
    }

    #[test]
    fn distinct_patients() {
        let idx = generate_synthetic_dataset(&PhantomConfig::default(), 200, 3).unwrap();
        assert_eq!(idx.len(), 200);
        let ids: HashSet<_> = idx.entries.iter().map(|e| e.patient_id.clone()).collect();
        assert_eq!(ids.len(), 200);
        assert_eq!(idx.patient_count(), 200);
    }

    #[test]
    fn zero_count_rejected() {
        assert!(synthesize_phantoms(&PhantomConfig::default(), 0, 1).is_err());
    }

    fn local_maxima_in(profile: &[f64], lo: usize, hi: usize) -> usize {
        (lo.max(1)..hi.min(profile.len() - 1))
            .filter(|&i| profile[i] > profile[i - 1] && profile[i] >= profile[i + 1])
            .count()
    }

    #[test]
    fn five_layers_give_five_profile_peaks() {
        let cfg = PhantomConfig {
            curvature_amplitude: 0.0,
            tilt: 0.0,
            speckle_sigma: 0.0,
            ..PhantomConfig::default()
        };
        for seed in 0..10 {
            let p = &synthesize_phantoms(&cfg, 1, seed).unwrap()[0];
            let prof = row_profile(&p.image.pixels);
            let rows: Vec<usize> = (0..64).filter(|&r| p.band_mask[[r, 0]]).collect();
            let (lo, hi) = (rows[0], *rows.last().unwrap() + 1);
            assert_eq!(local_maxima_in(&prof, lo, hi), 5, "seed {seed}");
        }
        // the default (curved, speckled) phantom keeps at least as many peaks
        let p = &synthesize_phantoms(&PhantomConfig::default(), 1, 7).unwrap()[0];
        let prof = row_profile(&p.image.pixels);
        let rows: Vec<usize> = (0..64).filter(|&r| p.band_mask.row(r).iter().any(|&b| b)).collect();
        assert!(local_maxima_in(&prof, rows[0], *rows.last().unwrap() + 1) >= 5);
    }

    #[test]
    fn band_is_brighter_than_background() {
        for p in synthesize_phantoms(&PhantomConfig::default(), 20, 11).unwrap() {
            let (mut inside, mut n_in, mut outside, mut n_out) = (0.0, 0, 0.0, 0);
            for ((r, c), &v) in p.image.pixels.indexed_iter() {
                if p.band_mask[[r, c]] {
                    inside += v as f64;
                    n_in += 1;
                } else {
                    outside += v as f64;
                    n_out += 1;
                }
            }
            assert!(n_in > 0 && n_out > 0);
            assert!(inside / n_in as f64 > 3.0 * outside / n_out as f64);
        }
    }

    #[test]
    fn slices_share_patient() {
        let cfg = PhantomConfig {
            slices_per_patient: 3,
            ..PhantomConfig::default()
        };
        let idx = generate_synthetic_dataset(&cfg, 7, 1).unwrap();
        assert_eq!(idx.patient_count(), 3);
        assert_eq!(idx.group_of("syn00000"), &[0, 1, 2]);
        assert_eq!(idx.group_of("syn00002"), &[6]);
    }
}
