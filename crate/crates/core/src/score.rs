//! Image scores, localization maps and decision thresholds.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::{ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::exec::Exec;
use crate::model::{ModelParams, Vqgan};
use crate::roi::otsu_threshold;
use crate::train::load_checkpoint;
use crate::{Error, Image, Mask, Result};

/// Anything that maps an image to its reconstruction.
pub trait Reconstructor: Sync {
    fn reconstruct(&self, x: &Image) -> Result<Image>;
}

/// A trained VQGAN generator.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: Vqgan,
    pub params: ModelParams,
}

impl TrainedModel {
    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        let state = load_checkpoint(path)?;
        Ok(TrainedModel {
            model: Vqgan::new(state.config.model.clone())?,
            params: state.params,
        })
    }

    pub fn resolution(&self) -> usize {
        self.model.config().input_resolution
    }
}

impl Reconstructor for TrainedModel {
    fn reconstruct(&self, x: &Image) -> Result<Image> {
        Ok(self.model.reconstruct(x, &self.params)?.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyScore {
    pub id: String,
    pub value: f64,
}

/// `mean |x - x_hat|`.
pub fn l1_score(x: &Image, x_hat: &Image) -> Result<f64> {
    crate::loss::l1_loss(x, x_hat)
}

pub fn image_score(x: &Image, model: &dyn Reconstructor) -> Result<f64> {
    l1_score(x, &model.reconstruct(x)?)
}

/// Scores many images, in input order.
pub fn score_images<R: Reconstructor>(
    images: &[(String, &Image)],
    model: &R,
    exec: Exec,
) -> Result<Vec<AnomalyScore>> {
    exec.map(images, |(id, x)| {
        image_score(x, model).map(|value| AnomalyScore { id: id.clone(), value })
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

fn gaussian_1d(window: usize, sigma: f64) -> Vec<f64> {
    let r = (window / 2) as f64;
    let w: Vec<f64> = (0..window)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian mean with edge-truncated, renormalized windows.
fn gaussian_mean(a: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = a.dim();
    let r = (k.len() / 2) as isize;
    let pass = |src: &Array2<f64>, vertical: bool| {
        Array2::from_shape_fn((h, w), |(i, j)| {
            let (mut acc, mut norm) = (0.0, 0.0);
            for (t, &kv) in k.iter().enumerate() {
                let off = t as isize - r;
                let (ii, jj) = if vertical {
                    (i as isize + off, j as isize)
                } else {
                    (i as isize, j as isize + off)
                };
                if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                    acc += kv * src[[ii as usize, jj as usize]];
                    norm += kv;
                }
            }
            acc / norm
        })
    };
    pass(&pass(a, false), true)
}

/// Per-pixel SSIM with Gaussian-weighted local statistics and `L = 1`.
pub fn ssim_map(x: &Image, y: &Image, cfg: &SsimConfig) -> Result<Array2<f64>> {
    if x.dim() != y.dim() {
        return Err(Error::shape(format!("{:?}", x.dim()), format!("{:?}", y.dim())));
    }
    if cfg.window % 2 == 0 || cfg.window == 0 {
        return Err(Error::Config(format!("SSIM window must be odd, got {}", cfg.window)));
    }
    let (h, w) = x.dim();
    if cfg.window > h || cfg.window > w {
        return Err(Error::InvalidInput(format!(
            "SSIM window {} is larger than the {h}x{w} image",
            cfg.window
        )));
    }
    let k = gaussian_1d(cfg.window, cfg.sigma);
    let xf = x.mapv(|v| v as f64);
    let yf = y.mapv(|v| v as f64);
    let mx = gaussian_mean(&xf, &k);
    let my = gaussian_mean(&yf, &k);
    let sxx = gaussian_mean(&(&xf * &xf), &k);
    let syy = gaussian_mean(&(&yf * &yf), &k);
    let sxy = gaussian_mean(&(&xf * &yf), &k);
    let c1 = cfg.k1 * cfg.k1;
    let c2 = cfg.k2 * cfg.k2;
    Ok(Array2::from_shape_fn((h, w), |p| {
        let (ux, uy) = (mx[p], my[p]);
        let vx = (sxx[p] - ux * ux).max(0.0);
        let vy = (syy[p] - uy * uy).max(0.0);
        let cxy = sxy[p] - ux * uy;
        let s = ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        s.clamp(-1.0, 1.0)
    }))
}

/// Per-pixel error field used for localization.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    pub values: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapMetric {
    /// `alpha |x - x_hat| + beta (1 - SSIM) / 2`.
    #[default]
    Weighted,
    L1,
    /// `(1 - SSIM) / 2`.
    Ssim,
    Mse,
}

impl MapMetric {
    pub const ALL: [MapMetric; 4] = [MapMetric::Weighted, MapMetric::L1, MapMetric::Ssim, MapMetric::Mse];

    pub fn as_str(self) -> &'static str {
        match self {
            MapMetric::Weighted => "weighted",
            MapMetric::L1 => "l1",
            MapMetric::Ssim => "ssim",
            MapMetric::Mse => "mse",
        }
    }

    /// Column title in metric-comparison tables.
    pub fn title(self) -> &'static str {
        match self {
            MapMetric::Weighted => "Weighted",
            MapMetric::L1 => "L1",
            MapMetric::Ssim => "SSIM",
            MapMetric::Mse => "MSE",
        }
    }
}

impl fmt::Display for MapMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MapMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MapMetric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown map metric `{s}` (expected weighted, l1, ssim or mse)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapConfig {
    pub metric: MapMetric,
    pub alpha: f64,
    pub beta: f64,
    pub ssim: SsimConfig,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig {
            metric: MapMetric::Weighted,
            alpha: 0.6,
            beta: 0.4,
            ssim: SsimConfig::default(),
        }
    }
}

/// `alpha |x - x_hat| + beta (1 - SSIM(x, x_hat)) / 2`, clamped to `[0, 1]`.
pub fn anomaly_map(x: &Image, x_hat: &Image, alpha: f64, beta: f64) -> Result<AnomalyMap> {
    error_map(
        x,
        x_hat,
        &MapConfig {
            alpha,
            beta,
            ..MapConfig::default()
        },
    )
}

pub fn error_map(x: &Image, x_hat: &Image, cfg: &MapConfig) -> Result<AnomalyMap> {
    if x.dim() != x_hat.dim() {
        return Err(Error::shape(format!("{:?}", x.dim()), format!("{:?}", x_hat.dim())));
    }
    if !(cfg.alpha >= 0.0 && cfg.beta >= 0.0) {
        return Err(Error::Config("map weights must be non-negative".into()));
    }
    let residual = |p: (usize, usize)| (x[p] as f64 - x_hat[p] as f64).abs();
    let values = match cfg.metric {
        MapMetric::L1 => Array2::from_shape_fn(x.dim(), residual),
        MapMetric::Mse => Array2::from_shape_fn(x.dim(), |p| residual(p).powi(2)),
        MapMetric::Ssim => ssim_map(x, x_hat, &cfg.ssim)?.mapv(|s| (1.0 - s) / 2.0),
        MapMetric::Weighted => {
            let structural = if cfg.beta > 0.0 {
                Some(ssim_map(x, x_hat, &cfg.ssim)?)
            } else {
                None
            };
            Array2::from_shape_fn(x.dim(), |p| {
                let s = structural.as_ref().map_or(0.0, |m| cfg.beta * (1.0 - m[p]) / 2.0);
                (cfg.alpha * residual(p) + s).clamp(0.0, 1.0)
            })
        }
    };
    Ok(AnomalyMap { values })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub t_star: f64,
    pub j: f64,
    pub fitted_on: String,
}

/// Youden-optimal threshold; an image is anomalous when `score > t_star`.
///
/// Candidates are `-inf`, `+inf` and the midpoints between consecutive
/// distinct scores. Among candidates of equal `J` the midpoint of the widest
/// gap wins (the infinite sentinels rank last, `-inf` before `+inf`).
pub fn select_threshold_youden(scores: &[f64], labels: &[bool]) -> Result<Threshold> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!("{} labels", scores.len()), format!("{}", labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("scores contain NaN".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count() as i64;
    let neg = labels.len() as i64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut pairs: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

    // J scaled by pos*neg: tp*neg + tn*pos - pos*neg. Threshold -inf flags
    // everything: tp = pos, tn = 0.
    let (mut tp, mut tn) = (pos, 0i64);
    let scaled = |tp: i64, tn: i64| tp * neg + tn * pos - pos * neg;
    let mut best = (scaled(tp, tn), f64::NEG_INFINITY, -1.0f64);
    let mut i = 0;
    while i < pairs.len() {
        let v = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == v {
            if pairs[i].1 {
                tp -= 1;
            } else {
                tn += 1;
            }
            i += 1;
        }
        let (t, gap) = if i < pairs.len() {
            (0.5 * (v + pairs[i].0), pairs[i].0 - v)
        } else {
            (f64::INFINITY, -1.0)
        };
        let j = scaled(tp, tn);
        if j > best.0 || (j == best.0 && gap > best.2) {
            best = (j, t, gap);
        }
    }
    Ok(Threshold {
        t_star: best.1,
        j: best.0 as f64 / (pos * neg) as f64,
        fitted_on: String::new(),
    })
}

/// `score > t_star`.
pub fn classify(scores: &[f64], t_star: f64) -> Vec<bool> {
    scores.iter().map(|&s| s > t_star).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Binarization {
    #[default]
    Otsu,
    /// Flag values above the given percentile (0..=100).
    Percentile(f64),
    Fixed(f64),
}

impl fmt::Display for Binarization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Binarization::Otsu => f.write_str("otsu"),
            Binarization::Percentile(p) => write!(f, "percentile:{p}"),
            Binarization::Fixed(t) => write!(f, "fixed:{t}"),
        }
    }
}

impl FromStr for Binarization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let num = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| Error::Config(format!("bad number `{v}` in binarization `{s}`")))
        };
        match s.split_once(':') {
            None if s == "otsu" => Ok(Binarization::Otsu),
            Some(("percentile", v)) => {
                let p = num(v)?;
                if !(0.0..=100.0).contains(&p) {
                    return Err(Error::Config(format!("percentile must lie in [0, 100], got {p}")));
                }
                Ok(Binarization::Percentile(p))
            }
            Some(("fixed", v)) => Ok(Binarization::Fixed(num(v)?)),
            _ => Err(Error::Config(format!(
                "unknown binarization `{s}` (expected otsu, percentile:<p> or fixed:<t>)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinarizedMap {
    pub mask: Mask,
    pub threshold: f64,
    /// No usable split: empty candidate set or a flat map under Otsu.
    pub degenerate: bool,
}

/// Thresholds a map. With `roi`, only ROI pixels are considered and
/// everything outside it is predicted negative.
pub fn binarize_map(map: &AnomalyMap, method: Binarization, roi: Option<&Mask>) -> Result<BinarizedMap> {
    if let Some(r) = roi {
        if r.dim() != map.values.dim() {
            return Err(Error::shape(format!("{:?}", map.values.dim()), format!("{:?}", r.dim())));
        }
    }
    let inside = |p: (usize, usize)| roi.is_none_or(|r| r[p]);
    let mut vals: Vec<f64> = map
        .values
        .indexed_iter()
        .filter(|&(p, _)| inside(p))
        .map(|(_, &v)| v)
        .collect();
    let empty = || BinarizedMap {
        mask: Mask::from_elem(map.values.dim(), false),
        threshold: f64::INFINITY,
        degenerate: true,
    };
    if vals.is_empty() {
        return Ok(empty());
    }
    // predicate: Otsu flags v >= t, the others v > t
    let (threshold, inclusive) = match method {
        Binarization::Fixed(t) => (t, false),
        Binarization::Percentile(p) => {
            vals.sort_by(f64::total_cmp);
            let n = vals.len();
            let k = ((p / 100.0) * n as f64).ceil() as usize;
            (if k == 0 { f64::NEG_INFINITY } else { vals[k.min(n) - 1] }, false)
        }
        Binarization::Otsu => {
            let (lo, hi) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            if hi <= lo {
                return Ok(empty());
            }
            match otsu_threshold(vals.iter().map(|&v| (v - lo) / (hi - lo))) {
                Some((t, _)) => (lo + t * (hi - lo), true),
                None => return Ok(empty()),
            }
        }
    };
    let mask = Array2::from_shape_fn(map.values.dim(), |p| {
        let v = map.values[p];
        inside(p) && if inclusive { v >= threshold } else { v > threshold }
    });
    Ok(BinarizedMap {
        degenerate: !mask.iter().any(|&b| b),
        mask,
        threshold,
    })
}

/// Writes `map` as a 16-bit grayscale PNG, values in `[0, 1]` scaled to the
/// full `u16` range (clamped).
pub fn save_map_u16(path: &Path, map: &AnomalyMap) -> Result<()> {
    let (h, w) = map.values.dim();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |c, r| {
        let v = map.values[[r as usize, c as usize]].clamp(0.0, 1.0);
        Luma([(v * 65535.0).round() as u16])
    });
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Piecewise-linear blue-cyan-yellow-red ramp on `t` in `[0, 1]`.
fn ramp(t: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 4] = [[0.0, 0.0, 0.5], [0.0, 0.8, 1.0], [1.0, 0.9, 0.0], [0.8, 0.0, 0.0]];
    let x = t.clamp(0.0, 1.0) * 3.0;
    let i = (x.floor() as usize).min(2);
    let f = x - i as f64;
    let mut out = [0u8; 3];
    for (k, o) in out.iter_mut().enumerate() {
        *o = ((STOPS[i][k] * (1.0 - f) + STOPS[i + 1][k] * f) * 255.0).round() as u8;
    }
    out
}

/// Writes a color heatmap of `map`, stretched to its own min..max.
pub fn save_heatmap(path: &Path, map: &AnomalyMap) -> Result<()> {
    let (lo, hi) = map
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (h, w) = map.values.dim();
    let buf = RgbImage::from_fn(w as u32, h as u32, |c, r| {
        Rgb(ramp((map.values[[r as usize, c as usize]] - lo) / span))
    });
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Offset(f32);

    impl Reconstructor for Offset {
        fn reconstruct(&self, x: &Image) -> Result<Image> {
            Ok(x.mapv(|v| v + self.0))
        }
    }

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Image {
        Image::from_shape_fn((n, n), |_| rng.random())
    }

    #[test]
    fn image_score_examples() {
        let x = Image::from_elem((8, 8), 0.5);
        assert_eq!(image_score(&x, &Offset(0.0)).unwrap(), 0.0);
        assert!((image_score(&x, &Offset(0.25)).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn ssim_axioms() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = SsimConfig::default();
        for _ in 0..5 {
            let x = random(&mut rng, 24);
            let y = random(&mut rng, 24);
            let s = ssim_map(&x, &x, &cfg).unwrap();
            assert!(s.iter().all(|&v| (v - 1.0).abs() < 1e-9));
            let a = ssim_map(&x, &y, &cfg).unwrap();
            let b = ssim_map(&y, &x, &cfg).unwrap();
            assert!(a.iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-9));
            assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        assert!(ssim_map(&Image::zeros((8, 8)), &Image::zeros((8, 8)), &cfg).is_err());
        let even = SsimConfig { window: 4, ..cfg };
        assert!(ssim_map(&Image::zeros((8, 8)), &Image::zeros((8, 8)), &even).is_err());
    }

    #[test]
    fn ssim_of_constant_images() {
        let x = Image::from_elem((16, 16), 0.5);
        let y = Image::from_elem((16, 16), 0.6);
        let c1 = 0.01f64 * 0.01;
        let (a, b) = (0.5f64, 0.6f32 as f64);
        let expected = (2.0 * a * b + c1) / (a * a + b * b + c1);
        let s = ssim_map(&x, &y, &SsimConfig::default()).unwrap();
        assert!(s.iter().all(|&v| (v - expected).abs() < 1e-6));
    }

    #[test]
    fn anomaly_map_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 16);
        assert!(anomaly_map(&x, &x, 0.6, 0.4).unwrap().values.iter().all(|&v| v.abs() < 1e-9));
        let y = random(&mut rng, 16);
        let m = anomaly_map(&x, &y, 0.6, 0.0).unwrap();
        for (p, &v) in m.values.indexed_iter() {
            assert_eq!(v, 0.6 * (x[p] as f64 - y[p] as f64).abs());
        }
        let m = anomaly_map(&x, &y, 0.6, 0.4).unwrap();
        assert!(m.values.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(anomaly_map(&x, &Image::zeros((4, 4)), 0.6, 0.4).is_err());
    }

    #[test]
    fn youden_examples() {
        let t = select_threshold_youden(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap();
        assert!((t.t_star - 0.5).abs() < 1e-12);
        assert_eq!(t.j, 1.0);
        let c = select_threshold_youden(&[0.3, 0.6, 2.4, 2.7], &[false, false, true, true]).unwrap();
        assert!((c.t_star - 3.0 * t.t_star).abs() < 1e-12);
        assert!(matches!(
            select_threshold_youden(&[0.1, 0.2], &[true, true]),
            Err(Error::SingleClass)
        ));
    }

    #[test]
    fn youden_prefers_the_widest_gap() {
        // J = 0.5 at 0.15 (gap 0.1) and at 0.7 (gap 0.4)
        let t = select_threshold_youden(&[0.1, 0.2, 0.5, 0.9], &[false, true, false, true]).unwrap();
        assert!((t.j - 0.5).abs() < 1e-12);
        assert!((t.t_star - 0.7).abs() < 1e-12, "{t:?}");
    }

    #[test]
    fn classify_is_strict() {
        assert_eq!(classify(&[0.4, 0.5, 0.6], 0.5), vec![false, false, true]);
        assert!(classify(&[0.1, 0.2], 0.9).iter().all(|&b| !b));
    }

    #[test]
    fn binarization_examples() {
        let gt = Mask::from_shape_fn((16, 16), |(r, c)| (4..8).contains(&r) && c > 5);
        let map = AnomalyMap {
            values: gt.mapv(|b| if b { 1.0 } else { 0.0 }),
        };
        assert_eq!(binarize_map(&map, Binarization::Fixed(0.5), None).unwrap().mask, gt);

        let bimodal = AnomalyMap {
            values: gt.mapv(|b| if b { 0.9 } else { 0.05 }),
        };
        assert_eq!(binarize_map(&bimodal, Binarization::Otsu, None).unwrap().mask, gt);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noisy = AnomalyMap {
            values: Array2::from_shape_fn((20, 20), |_| rng.random()),
        };
        let b = binarize_map(&noisy, Binarization::Percentile(99.0), None).unwrap();
        assert!(b.mask.iter().filter(|&&v| v).count() <= 4);

        let roi = Mask::from_shape_fn((16, 16), |(r, _)| r < 6);
        let b = binarize_map(&map, Binarization::Fixed(0.5), Some(&roi)).unwrap();
        assert!(b.mask.indexed_iter().all(|(p, &v)| v == (gt[p] && roi[p])));

        let flat = AnomalyMap {
            values: Array2::from_elem((8, 8), 0.3),
        };
        let b = binarize_map(&flat, Binarization::Otsu, None).unwrap();
        assert!(b.degenerate && !b.mask.iter().any(|&v| v));
    }

    #[test]
    fn parsing() {
        assert_eq!("otsu".parse::<Binarization>().unwrap(), Binarization::Otsu);
        assert_eq!("percentile:99".parse::<Binarization>().unwrap(), Binarization::Percentile(99.0));
        assert_eq!("fixed:0.5".parse::<Binarization>().unwrap(), Binarization::Fixed(0.5));
        assert!("percentile:120".parse::<Binarization>().is_err());
        assert!("median".parse::<Binarization>().is_err());
        for m in MapMetric::ALL {
            assert_eq!(m.as_str().parse::<MapMetric>().unwrap(), m);
        }
    }
}
