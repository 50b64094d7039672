//! Retinal band extraction.
//!
//! Pipeline: border-connected white artifacts are painted with the background
//! median, a horizontal multi-scale Gabor bank enhances the layered texture,
//! the maximum response is binarized (Otsu by default) and the mask is cleaned
//! with a horizontal closing, a small opening and removal of small components.
//!
//! The rectified Gabor response also fires on the dark side of the band edges
//! (side lobes of the even kernel), so by default the binarized response is
//! intersected with an intensity gate: the locally averaged image must clear
//! its own Otsu threshold. A band-shape check rejects masks that are broken
//! into many vertical runs per column, which is what texture-free noise gives.

mod gabor;
pub mod morphology;

pub use gabor::{gabor_kernel, gabor_response, GaborBankConfig, Rectify};

use std::collections::VecDeque;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::exec::Exec;
use crate::{Error, Image, Mask, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RoiMask {
    pub mask: Mask,
    /// Fraction of foreground pixels.
    pub coverage: f64,
}

impl RoiMask {
    pub fn new(mask: Mask) -> Self {
        let n = mask.len().max(1);
        let coverage = mask.iter().filter(|&&b| b).count() as f64 / n as f64;
        RoiMask { mask, coverage }
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&b| b)
    }

    pub fn dim(&self) -> (usize, usize) {
        self.mask.dim()
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    Otsu,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Binarized {
    pub mask: RoiMask,
    pub threshold: f64,
    /// Between-class over total variance of the Otsu split (1 for `Fixed`).
    pub separability: f64,
    /// Set when the response was constant and no split exists.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiConfig {
    pub gabor: GaborBankConfig,
    pub threshold: Threshold,
    /// Border-connected pixels brighter than this are cropping artifacts.
    pub border_threshold: f32,
    pub min_coverage: f64,
    pub max_coverage: f64,
    /// Components smaller than this fraction of the image are dropped.
    pub min_component_fraction: f64,
    /// Intersect the response mask with `mean3x3(image) >= otsu(mean3x3(image))`.
    pub intensity_gate: bool,
    /// Upper bound on the mean number of foreground runs per column.
    pub max_column_runs: f64,
    pub close_element: (usize, usize),
    pub open_element: (usize, usize),
}

impl Default for RoiConfig {
    fn default() -> Self {
        RoiConfig {
            gabor: GaborBankConfig::default(),
            threshold: Threshold::Otsu,
            border_threshold: 0.95,
            min_coverage: 0.05,
            max_coverage: 0.80,
            min_component_fraction: 0.005,
            intensity_gate: true,
            max_column_runs: 2.0,
            close_element: (3, 9),
            open_element: (3, 3),
        }
    }
}

impl RoiConfig {
    pub fn for_resolution(size: usize) -> Self {
        RoiConfig {
            gabor: GaborBankConfig::for_resolution(size),
            ..RoiConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.gabor.validate()?;
        if !(0.0 <= self.min_coverage && self.min_coverage <= self.max_coverage && self.max_coverage <= 1.0) {
            return Err(Error::Config("roi: need 0 <= min_coverage <= max_coverage <= 1".into()));
        }
        if !(self.max_column_runs >= 1.0) {
            return Err(Error::Config("roi: max_column_runs must be at least 1".into()));
        }
        let (a, b) = self.close_element;
        let (c, d) = self.open_element;
        if a == 0 || b == 0 || c == 0 || d == 0 {
            return Err(Error::Config("roi: structuring elements must be non-empty".into()));
        }
        Ok(())
    }
}

fn median(mut v: Vec<f32>) -> f32 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f32::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Paints near-saturated regions connected to the image border with the median
/// of the remaining pixels. Bright regions that do not touch the border are
/// left alone.
pub fn remove_background_artifacts(img: &Image, threshold: f32) -> Image {
    let (h, w) = img.dim();
    let mut artifact = Mask::from_elem((h, w), false);
    let mut queue = VecDeque::new();
    for r in 0..h {
        for c in 0..w {
            let on_border = r == 0 || c == 0 || r + 1 == h || c + 1 == w;
            if on_border && img[[r, c]] > threshold && !artifact[[r, c]] {
                artifact[[r, c]] = true;
                queue.push_back((r, c));
            }
        }
    }
    if queue.is_empty() {
        return img.clone();
    }
    while let Some((r, c)) = queue.pop_front() {
        let neighbours = [
            (r.wrapping_sub(1), c),
            (r + 1, c),
            (r, c.wrapping_sub(1)),
            (r, c + 1),
        ];
        for (rr, cc) in neighbours {
            if rr < h && cc < w && !artifact[[rr, cc]] && img[[rr, cc]] > threshold {
                artifact[[rr, cc]] = true;
                queue.push_back((rr, cc));
            }
        }
    }
    let fill = median(
        img.iter()
            .zip(artifact.iter())
            .filter(|(_, &a)| !a)
            .map(|(&v, _)| v)
            .collect(),
    );
    let mut out = img.clone();
    out.zip_mut_with(&artifact, |v, &a| {
        if a {
            *v = fill;
        }
    });
    out
}

/// Otsu split of values in `[0, 1]` on a 256-bin histogram.
///
/// Returns `(threshold, separability)` where the threshold is the midpoint of
/// the plateau of maximal between-class variance, or `None` when all values
/// share a bin.
pub fn otsu_threshold<I: IntoIterator<Item = f64>>(values: I) -> Option<(f64, f64)> {
    const BINS: usize = 256;
    let mut hist = [0u64; BINS];
    let mut n = 0u64;
    for v in values {
        let b = ((v.clamp(0.0, 1.0) * BINS as f64) as usize).min(BINS - 1);
        hist[b] += 1;
        n += 1;
    }
    if n == 0 {
        return None;
    }
    let centre = |b: usize| (b as f64 + 0.5) / BINS as f64;
    let total = n as f64;
    let mean: f64 = hist.iter().enumerate().map(|(b, &c)| centre(b) * c as f64).sum::<f64>() / total;
    let var: f64 = hist
        .iter()
        .enumerate()
        .map(|(b, &c)| (centre(b) - mean).powi(2) * c as f64)
        .sum::<f64>()
        / total;
    if var <= 0.0 {
        return None;
    }
    // class 0 = bins < k
    let mut best = f64::NEG_INFINITY;
    let (mut first, mut last) = (0, 0);
    let (mut w0, mut s0) = (0.0, 0.0);
    for k in 1..BINS {
        w0 += hist[k - 1] as f64;
        s0 += centre(k - 1) * hist[k - 1] as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = s0 / w0;
        let m1 = (mean * total - s0) / w1;
        let between = w0 * w1 * (m0 - m1).powi(2) / (total * total);
        if between > best * (1.0 + 1e-12) {
            best = between;
            first = k;
            last = k;
        } else if (between - best).abs() <= best * 1e-12 {
            last = k;
        }
    }
    let k = 0.5 * (first + last) as f64;
    Some((k / BINS as f64, (best / var).min(1.0)))
}

/// Thresholds a `[0, 1]` response into a mask (`response >= threshold`).
pub fn binarize(response: &Array2<f64>, method: Threshold) -> Binarized {
    let (threshold, separability) = match method {
        Threshold::Fixed(t) => (t, 1.0),
        Threshold::Otsu => match otsu_threshold(response.iter().copied()) {
            Some(t) => t,
            None => {
                return Binarized {
                    mask: RoiMask::new(Mask::from_elem(response.dim(), false)),
                    threshold: f64::INFINITY,
                    separability: 0.0,
                    degenerate: true,
                }
            }
        },
    };
    let mask = response.mapv(|v| v >= threshold);
    let degenerate = !mask.iter().any(|&b| b);
    Binarized {
        mask: RoiMask::new(mask),
        threshold,
        separability,
        degenerate,
    }
}

/// 3x3 box mean with edge-truncated windows.
fn local_mean(img: &Image) -> Array2<f64> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        let (r0, r1) = (r.saturating_sub(1), (r + 1).min(h - 1));
        let (c0, c1) = (c.saturating_sub(1), (c + 1).min(w - 1));
        let mut acc = 0.0;
        for rr in r0..=r1 {
            for cc in c0..=c1 {
                acc += img[[rr, cc]] as f64;
            }
        }
        acc / ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64
    })
}

/// Pixels whose local mean intensity clears the Otsu threshold of the local
/// means (all pixels when the image is flat).
pub fn intensity_gate(img: &Image) -> Mask {
    let mean = local_mean(img);
    match otsu_threshold(mean.iter().copied()) {
        Some((t, _)) => mean.mapv(|v| v >= t),
        None => Mask::from_elem(img.dim(), true),
    }
}

/// Mean number of maximal vertical foreground runs per column.
pub fn mean_column_runs(mask: &Mask) -> f64 {
    let (h, w) = mask.dim();
    if w == 0 {
        return 0.0;
    }
    let mut runs = 0usize;
    for c in 0..w {
        let mut prev = false;
        for r in 0..h {
            let v = mask[[r, c]];
            if v && !prev {
                runs += 1;
            }
            prev = v;
        }
    }
    runs as f64 / w as f64
}

fn cleanup_once(mask: &Mask, cfg: &RoiConfig) -> Mask {
    use morphology::{close, open, remove_small_components};
    let closed = close(mask, cfg.close_element.0, cfg.close_element.1);
    let opened = open(&closed, cfg.open_element.0, cfg.open_element.1);
    let min_area = (cfg.min_component_fraction * mask.len() as f64).ceil() as usize;
    remove_small_components(&opened, min_area)
}

/// Close, open and drop small components, repeated until the mask stops
/// changing (at most 16 rounds), so the result is a fixed point.
pub fn cleanup(mask: &Mask, cfg: &RoiConfig) -> Mask {
    let mut cur = cleanup_once(mask, cfg);
    for _ in 0..15 {
        let next = cleanup_once(&cur, cfg);
        if next == cur {
            break;
        }
        cur = next;
    }
    cur
}

/// Full retinal band extraction. Fails when the response has no usable split,
/// the cleaned mask is not band-shaped, or its coverage leaves
/// `[min_coverage, max_coverage]`; callers skip the sample in that case.
pub fn extract_roi(img: &Image, cfg: &RoiConfig) -> Result<RoiMask> {
    cfg.validate()?;
    let cleaned = remove_background_artifacts(img, cfg.border_threshold);
    let response = gabor_response(&cleaned, &cfg.gabor)?;
    let b = binarize(&response, cfg.threshold);
    if b.degenerate {
        return Err(Error::RoiFailed("flat filter response".into()));
    }
    let mut mask = b.mask.mask;
    if cfg.intensity_gate {
        mask.zip_mut_with(&intensity_gate(&cleaned), |m, &g| *m &= g);
    }
    let roi = RoiMask::new(cleanup(&mask, cfg));
    let runs = mean_column_runs(&roi.mask);
    if runs > cfg.max_column_runs {
        return Err(Error::RoiFailed(format!(
            "no layered band ({runs:.2} runs per column > {})",
            cfg.max_column_runs
        )));
    }
    if roi.coverage < cfg.min_coverage || roi.coverage > cfg.max_coverage {
        return Err(Error::RoiFailed(format!(
            "coverage {:.3} outside [{}, {}]",
            roi.coverage, cfg.min_coverage, cfg.max_coverage
        )));
    }
    Ok(roi)
}

/// [`extract_roi`] over many images.
pub fn extract_rois(images: &[&Image], cfg: &RoiConfig, exec: Exec) -> Vec<Result<RoiMask>> {
    exec.map(images, |img| extract_roi(img, cfg))
}
