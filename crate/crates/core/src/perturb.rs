//! Negative-sample synthesis confined to the retinal ROI.
//!
//! Two perturbation families: a smooth vertical displacement of the layers
//! (sinusoidal bump and/or local thickening, resampled bilinearly) and
//! fluid-like dark ellipses with cosine-tapered edges. Only pixels with
//! `roi = 1` are ever written, so everything outside the ROI is bit-identical
//! to the input.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::roi::RoiMask;
use crate::{Error, Image, Mask, Result};

/// Consecutive no-op draws tolerated by [`perturb`].
pub const MAX_ATTEMPTS: usize = 5;

/// Width of the cosine taper at ellipse edges, pixels.
pub const FLUID_TAPER: f64 = 2.0;

/// Inclusive range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Span<T> {
    pub min: T,
    pub max: T,
}

impl<T: PartialOrd + Copy> Span<T> {
    pub const fn new(min: T, max: T) -> Self {
        Span { min, max }
    }

    fn is_valid(&self) -> bool {
        self.min <= self.max
    }
}

impl Span<f64> {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.max > self.min {
            rng.random_range(self.min..=self.max)
        } else {
            self.min
        }
    }

    fn scaled(self, s: f64) -> Self {
        Span::new(self.min * s, self.max * s)
    }
}

impl Span<usize> {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(self.min..=self.max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeProbabilities {
    pub deform: f64,
    pub fluid: f64,
    pub both: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    pub deform_amplitude: Span<f64>,
    pub deform_wavelength: Span<f64>,
    pub thicken_factor: Span<f64>,
    pub fluid_count: Span<usize>,
    pub fluid_radius: Span<f64>,
    pub fluid_darkness: Span<f64>,
    pub modes: ModeProbabilities,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig {
            deform_amplitude: Span::new(2.0, 6.0),
            deform_wavelength: Span::new(16.0, 48.0),
            thicken_factor: Span::new(1.1, 1.5),
            fluid_count: Span::new(1, 3),
            fluid_radius: Span::new(3.0, 10.0),
            fluid_darkness: Span::new(0.4, 0.9),
            modes: ModeProbabilities {
                deform: 0.4,
                fluid: 0.4,
                both: 0.2,
            },
        }
    }
}

impl PerturbConfig {
    /// Defaults with pixel-unit ranges scaled from the 64 px reference.
    pub fn for_resolution(size: usize) -> Self {
        let s = size as f64 / 64.0;
        let base = PerturbConfig::default();
        PerturbConfig {
            deform_amplitude: base.deform_amplitude.scaled(s),
            deform_wavelength: base.deform_wavelength.scaled(s),
            fluid_radius: base.fluid_radius.scaled(s),
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("perturb: {m}")));
        let spans = [
            ("deform_amplitude", self.deform_amplitude),
            ("deform_wavelength", self.deform_wavelength),
            ("thicken_factor", self.thicken_factor),
            ("fluid_radius", self.fluid_radius),
            ("fluid_darkness", self.fluid_darkness),
        ];
        for (name, s) in spans {
            if !s.is_valid() || !s.min.is_finite() || !s.max.is_finite() {
                return bad(&format!("{name} needs min <= max"));
            }
        }
        if !self.fluid_count.is_valid() {
            return bad("fluid_count needs min <= max");
        }
        if self.deform_amplitude.min < 0.0 || self.deform_wavelength.min <= 0.0 {
            return bad("deform amplitude must be >= 0 and wavelength > 0");
        }
        if self.thicken_factor.min < 1.0 {
            return bad("thicken_factor must be >= 1");
        }
        if self.fluid_radius.min <= 0.0 {
            return bad("fluid_radius must be positive");
        }
        if self.fluid_darkness.min < 0.0 || self.fluid_darkness.max > 1.0 {
            return bad("fluid_darkness must lie in [0, 1]");
        }
        let m = self.modes;
        if [m.deform, m.fluid, m.both].iter().any(|&p| p < 0.0) || (m.deform + m.fluid + m.both - 1.0).abs() > 1e-9 {
            return bad("mode probabilities must be non-negative and sum to 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbMode {
    Deform,
    Fluid,
    Both,
}

/// Drawn parameters of one layer deformation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformParams {
    /// Signed bump height in pixels (positive moves content down).
    pub amplitude: f64,
    pub wavelength: f64,
    pub center_col: f64,
    /// Local vertical stretch about the band centre (1 = none).
    pub thicken: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center_row: f64,
    pub center_col: f64,
    pub radius_rows: f64,
    pub radius_cols: f64,
    pub darkness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbParams {
    pub mode: PerturbMode,
    pub deform: Option<DeformParams>,
    pub fluid: Vec<Ellipse>,
    pub attempts: usize,
}

impl PerturbParams {
    /// `key: value` lines for the side-car audit file.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mode = match self.mode {
            PerturbMode::Deform => "deform",
            PerturbMode::Fluid => "fluid",
            PerturbMode::Both => "both",
        };
        let _ = writeln!(s, "mode: {mode}");
        let _ = writeln!(s, "attempts: {}", self.attempts);
        if let Some(d) = &self.deform {
            let _ = writeln!(s, "deform_amplitude: {}", d.amplitude);
            let _ = writeln!(s, "deform_wavelength: {}", d.wavelength);
            let _ = writeln!(s, "deform_center_col: {}", d.center_col);
            let _ = writeln!(s, "deform_thicken: {}", d.thicken);
        }
        let _ = writeln!(s, "fluid_count: {}", self.fluid.len());
        for (i, e) in self.fluid.iter().enumerate() {
            let _ = writeln!(
                s,
                "fluid_{i}: center=({}, {}) radii=({}, {}) darkness={}",
                e.center_row, e.center_col, e.radius_rows, e.radius_cols, e.darkness
            );
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub image: Image,
    /// Pixels the perturbation materially changed (ground truth for localization).
    pub lesion_mask: Mask,
    pub params: PerturbParams,
}

fn check_roi(img: &Image, roi: &RoiMask) -> Result<()> {
    if roi.dim() != img.dim() {
        return Err(Error::shape(format!("{:?}", img.dim()), format!("{:?}", roi.dim())));
    }
    if roi.is_empty() {
        return Err(Error::EmptyRoi);
    }
    Ok(())
}

/// Raised-cosine window, 1 at `d = 0`, 0 for `|d| >= half`; C1 everywhere.
fn raised_cosine(d: f64, half: f64) -> f64 {
    if d.abs() >= half {
        0.0
    } else {
        0.5 * (1.0 + (PI * d / half).cos())
    }
}

impl DeformParams {
    pub fn draw<R: Rng + ?Sized>(roi: &RoiMask, cfg: &PerturbConfig, rng: &mut R) -> Self {
        let (_, w) = roi.dim();
        let amplitude = cfg.deform_amplitude.sample(rng);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let wavelength = cfg.deform_wavelength.sample(rng);
        let center_col = rng.random_range(0.0..w as f64);
        // bump only, thickening only, or both
        let (amplitude, thicken) = match rng.random_range(0..3u8) {
            0 => (amplitude, 1.0),
            1 => (0.0, cfg.thicken_factor.sample(rng)),
            _ => (amplitude, cfg.thicken_factor.sample(rng)),
        };
        DeformParams {
            amplitude: sign * amplitude,
            wavelength,
            center_col,
            thicken,
        }
    }
}

/// Applies a drawn deformation. `out(r, c) = in(r - dy(r, c), c)` inside the
/// ROI, with `dy = w(c) * (A + (r - centre(c)) * (1 - 1/s))` and `w` a raised
/// cosine of width `wavelength` about `center_col`.
pub fn apply_deform(img: &Image, roi: &RoiMask, p: &DeformParams) -> (Image, Mask) {
    let (h, w) = img.dim();
    let mut out = img.clone();
    let mut lesion = Mask::from_elem((h, w), false);
    let stretch = 1.0 - 1.0 / p.thicken;
    for c in 0..w {
        let weight = raised_cosine(c as f64 - p.center_col, p.wavelength / 2.0);
        if weight == 0.0 {
            continue;
        }
        let rows: Vec<usize> = (0..h).filter(|&r| roi.mask[[r, c]]).collect();
        if rows.is_empty() {
            continue;
        }
        let centre = rows.iter().sum::<usize>() as f64 / rows.len() as f64;
        for &r in &rows {
            let dy = weight * (p.amplitude + (r as f64 - centre) * stretch);
            if dy == 0.0 {
                continue;
            }
            let src = (r as f64 - dy).clamp(0.0, (h - 1) as f64);
            let r0 = src.floor() as usize;
            let r1 = (r0 + 1).min(h - 1);
            let f = (src - r0 as f64) as f32;
            out[[r, c]] = img[[r0, c]] * (1.0 - f) + img[[r1, c]] * f;
            if dy.abs() >= 0.5 {
                lesion[[r, c]] = true;
            }
        }
    }
    (out, lesion)
}

pub fn draw_fluid<R: Rng + ?Sized>(roi: &RoiMask, cfg: &PerturbConfig, rng: &mut R) -> Vec<Ellipse> {
    let k = cfg.fluid_count.sample(rng);
    let pixels: Vec<(usize, usize)> = roi
        .mask
        .indexed_iter()
        .filter(|(_, &b)| b)
        .map(|(ix, _)| ix)
        .collect();
    (0..k)
        .map(|_| {
            let (r, c) = pixels[rng.random_range(0..pixels.len())];
            Ellipse {
                center_row: r as f64,
                center_col: c as f64,
                radius_rows: cfg.fluid_radius.sample(rng),
                radius_cols: cfg.fluid_radius.sample(rng),
                darkness: cfg.fluid_darkness.sample(rng),
            }
        })
        .collect()
}

/// Attenuation weight in `[0, 1]`: 1 in the core, cosine taper over
/// [`FLUID_TAPER`] pixels inside the rim, 0 outside.
pub fn ellipse_weight(e: &Ellipse, r: f64, c: f64) -> f64 {
    let dr = (r - e.center_row) / e.radius_rows;
    let dc = (c - e.center_col) / e.radius_cols;
    let rho = (dr * dr + dc * dc).sqrt();
    if rho >= 1.0 {
        return 0.0;
    }
    let inner = (1.0 - FLUID_TAPER / e.radius_rows.min(e.radius_cols)).max(0.0);
    if rho <= inner {
        1.0
    } else {
        0.5 * (1.0 + (PI * (rho - inner) / (1.0 - inner)).cos())
    }
}

pub fn apply_fluid(img: &Image, roi: &RoiMask, ellipses: &[Ellipse]) -> (Image, Mask) {
    let mut out = img.clone();
    let mut lesion = Mask::from_elem(img.dim(), false);
    for ((r, c), v) in out.indexed_iter_mut() {
        if !roi.mask[[r, c]] {
            continue;
        }
        let mut factor = 1.0;
        let mut strongest: f64 = 0.0;
        for e in ellipses {
            let wgt = ellipse_weight(e, r as f64, c as f64);
            factor *= 1.0 - e.darkness * wgt;
            strongest = strongest.max(wgt);
        }
        if factor != 1.0 {
            *v = (*v as f64 * factor) as f32;
        }
        lesion[[r, c]] = strongest >= 0.5;
    }
    (out, lesion)
}

pub fn deform_layers<R: Rng + ?Sized>(img: &Image, roi: &RoiMask, cfg: &PerturbConfig, rng: &mut R) -> Result<Perturbation> {
    check_roi(img, roi)?;
    let params = DeformParams::draw(roi, cfg, rng);
    let (image, lesion_mask) = apply_deform(img, roi, &params);
    Ok(Perturbation {
        image,
        lesion_mask,
        params: PerturbParams {
            mode: PerturbMode::Deform,
            deform: Some(params),
            fluid: Vec::new(),
            attempts: 1,
        },
    })
}

pub fn insert_fluid_regions<R: Rng + ?Sized>(
    img: &Image,
    roi: &RoiMask,
    cfg: &PerturbConfig,
    rng: &mut R,
) -> Result<Perturbation> {
    check_roi(img, roi)?;
    let ellipses = draw_fluid(roi, cfg, rng);
    let (image, lesion_mask) = apply_fluid(img, roi, &ellipses);
    Ok(Perturbation {
        image,
        lesion_mask,
        params: PerturbParams {
            mode: PerturbMode::Fluid,
            deform: None,
            fluid: ellipses,
            attempts: 1,
        },
    })
}

fn draw_mode<R: Rng + ?Sized>(m: &ModeProbabilities, rng: &mut R) -> PerturbMode {
    let u: f64 = rng.random();
    if u < m.deform {
        PerturbMode::Deform
    } else if u < m.deform + m.fluid {
        PerturbMode::Fluid
    } else {
        PerturbMode::Both
    }
}

/// Deform, fluid or both per `cfg.modes`; redraws up to [`MAX_ATTEMPTS`] times
/// until the output differs from the input.
pub fn perturb<R: Rng + ?Sized>(img: &Image, roi: &RoiMask, cfg: &PerturbConfig, rng: &mut R) -> Result<Perturbation> {
    check_roi(img, roi)?;
    for attempt in 1..=MAX_ATTEMPTS {
        let mode = draw_mode(&cfg.modes, rng);
        let mut out = match mode {
            PerturbMode::Deform => deform_layers(img, roi, cfg, rng)?,
            PerturbMode::Fluid => insert_fluid_regions(img, roi, cfg, rng)?,
            PerturbMode::Both => {
                let d = deform_layers(img, roi, cfg, rng)?;
                let f = insert_fluid_regions(&d.image, roi, cfg, rng)?;
                let mut lesion = d.lesion_mask;
                lesion.zip_mut_with(&f.lesion_mask, |a, &b| *a |= b);
                Perturbation {
                    image: f.image,
                    lesion_mask: lesion,
                    params: PerturbParams {
                        mode: PerturbMode::Both,
                        deform: d.params.deform,
                        fluid: f.params.fluid,
                        attempts: 1,
                    },
                }
            }
        };
        if out.image != *img {
            out.params.attempts = attempt;
            return Ok(out);
        }
    }
    Err(Error::NoOpPerturbation(MAX_ATTEMPTS))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_phantoms, PhantomConfig};
    use crate::roi::{extract_roi, RoiConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn phantom_with_roi(seed: u64) -> (Image, RoiMask) {
        let p = synthesize_phantoms(&PhantomConfig::default(), 1, seed).unwrap().remove(0);
        let roi = extract_roi(&p.image.pixels, &RoiConfig::default()).unwrap();
        (p.image.pixels, roi)
    }

    fn assert_confined(input: &Image, output: &Image, roi: &RoiMask) {
        for ((r, c), &v) in output.indexed_iter() {
            if !roi.mask[[r, c]] {
                assert_eq!(v.to_bits(), input[[r, c]].to_bits());
            }
        }
    }

    #[test]
    fn zero_amplitude_is_identity() {
        let (img, roi) = phantom_with_roi(1);
        let cfg = PerturbConfig {
            deform_amplitude: Span::new(0.0, 0.0),
            thicken_factor: Span::new(1.0, 1.0),
            ..PerturbConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            assert_eq!(deform_layers(&img, &roi, &cfg, &mut rng).unwrap().image, img);
        }
    }

    #[test]
    fn deform_and_fluid_are_confined() {
        let (img, roi) = phantom_with_roi(2);
        let cfg = PerturbConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            assert_confined(&img, &deform_layers(&img, &roi, &cfg, &mut rng).unwrap().image, &roi);
            assert_confined(&img, &insert_fluid_regions(&img, &roi, &cfg, &mut rng).unwrap().image, &roi);
        }
    }

    #[test]
    fn bump_moves_centreline_by_amplitude() {
        // single bright line at row 32 inside a flat band roi
        let img = Image::from_shape_fn((64, 64), |(r, _)| {
            (0.1 + 0.8 * (-((r as f32 - 32.0).powi(2)) / 2.0).exp()).min(1.0)
        });
        let roi = RoiMask::new(Mask::from_shape_fn((64, 64), |(r, _)| (16..48).contains(&r)));
        let p = DeformParams {
            amplitude: 4.0,
            wavelength: 32.0,
            center_col: 32.0,
            thicken: 1.0,
        };
        let (out, lesion) = apply_deform(&img, &roi, &p);
        let argmax = |im: &Image, c: usize| (0..64).max_by(|&a, &b| im[[a, c]].total_cmp(&im[[b, c]])).unwrap();
        let shift = argmax(&out, 32) as i64 - argmax(&img, 32) as i64;
        assert!((3..=5).contains(&shift), "shift {shift}");
        assert_eq!(argmax(&out, 0), 32);
        assert!(lesion[[32, 32]] && !lesion[[32, 0]]);
    }

    #[test]
    fn full_darkness_blacks_out_core() {
        let img = Image::from_elem((64, 64), 0.6);
        let roi = RoiMask::new(Mask::from_elem((64, 64), true));
        let e = Ellipse {
            center_row: 32.0,
            center_col: 32.0,
            radius_rows: 8.0,
            radius_cols: 10.0,
            darkness: 1.0,
        };
        let (out, lesion) = apply_fluid(&img, &roi, &[e]);
        assert_eq!(out[[32, 32]], 0.0);
        assert_eq!(out[[29, 30]], 0.0);
        assert!(lesion[[32, 32]]);
        assert_eq!(out[[32, 50]], 0.6);
    }

    #[test]
    fn no_ellipses_is_identity() {
        let (img, roi) = phantom_with_roi(3);
        let cfg = PerturbConfig {
            fluid_count: Span::new(0, 0),
            ..PerturbConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(insert_fluid_regions(&img, &roi, &cfg, &mut rng).unwrap().image, img);
    }

    #[test]
    fn fluid_cores_get_darker() {
        let (img, roi) = phantom_with_roi(4);
        let cfg = PerturbConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let p = insert_fluid_regions(&img, &roi, &cfg, &mut rng).unwrap();
            let (mut before, mut after, mut n) = (0.0, 0.0, 0);
            for ((r, c), &m) in roi.mask.indexed_iter() {
                if m && p.params.fluid.iter().any(|e| ellipse_weight(e, r as f64, c as f64) == 1.0) {
                    before += img[[r, c]] as f64;
                    after += p.image[[r, c]] as f64;
                    n += 1;
                }
            }
            if n > 0 && before > 0.0 {
                assert!(after < before);
            }
        }
    }

    #[test]
    fn empty_roi_is_an_error() {
        let img = Image::zeros((64, 64));
        let roi = RoiMask::new(Mask::from_elem((64, 64), false));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = PerturbConfig::default();
        assert!(matches!(deform_layers(&img, &roi, &cfg, &mut rng), Err(Error::EmptyRoi)));
        assert!(matches!(insert_fluid_regions(&img, &roi, &cfg, &mut rng), Err(Error::EmptyRoi)));
        assert!(matches!(perturb(&img, &roi, &cfg, &mut rng), Err(Error::EmptyRoi)));
    }

    #[test]
    fn deform_only_mode_matches_direct_call() {
        let (img, roi) = phantom_with_roi(5);
        let cfg = PerturbConfig {
            modes: ModeProbabilities {
                deform: 1.0,
                fluid: 0.0,
                both: 0.0,
            },
            ..PerturbConfig::default()
        };
        for seed in 0..10 {
            let a = perturb(&img, &roi, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let _: f64 = rng.random();
            let b = deform_layers(&img, &roi, &cfg, &mut rng).unwrap();
            if a.params.attempts == 1 {
                assert_eq!(a.image, b.image);
            }
        }
    }

    #[test]
    fn mode_frequencies() {
        let m = ModeProbabilities {
            deform: 0.5,
            fluid: 0.5,
            both: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let deform = (0..1000).filter(|_| draw_mode(&m, &mut rng) == PerturbMode::Deform).count();
        assert!((450..=550).contains(&deform), "{deform}");
    }

    #[test]
    fn perturb_invariants_over_seeds() {
        let (img, roi) = phantom_with_roi(6);
        let cfg = PerturbConfig::default();
        let roi_n = roi.count() as f64;
        for seed in 0..100 {
            let p = perturb(&img, &roi, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_confined(&img, &p.image, &roi);
            let change: f64 = p.image.iter().zip(img.iter()).map(|(a, b)| (a - b).abs() as f64).sum();
            assert!(change > 0.0);
            assert!(change / roi_n <= 0.5);
            let again = perturb(&img, &roi, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(again.image, p.image);
        }
    }

    #[test]
    fn misconfigured_ranges_exhaust_attempts() {
        let (img, roi) = phantom_with_roi(7);
        let cfg = PerturbConfig {
            deform_amplitude: Span::new(0.0, 0.0),
            thicken_factor: Span::new(1.0, 1.0),
            fluid_count: Span::new(0, 0),
            ..PerturbConfig::default()
        };
        let err = perturb(&img, &roi, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::NoOpPerturbation(5)));
    }

    #[test]
    fn validation() {
        assert!(PerturbConfig::default().validate().is_ok());
        let mut bad = PerturbConfig::default();
        bad.modes.both = 0.3;
        assert!(bad.validate().is_err());
        let bad = PerturbConfig {
            fluid_radius: Span::new(5.0, 2.0),
            ..PerturbConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sidecar_lists_parameters() {
        let (img, roi) = phantom_with_roi(8);
        let p = perturb(&img, &roi, &PerturbConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let text = p.params.to_text();
        assert!(text.starts_with("mode: "));
        assert!(text.contains("fluid_count: "));
    }
}
