//! Objective terms and their analytic gradients.
//!
//! Value functions accumulate in `f64` whatever the element type; gradient
//! functions return the element type so the same code serves `f32` training
//! and `f64` finite-difference checks. Every loss is a mean, so values do not
//! scale with resolution.

use ndarray::Array2;
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::model::{LatentGrid, QuantizedLatent};
use crate::nn::{Layer, Net, NetBuilder, Tape, Tensor};
use crate::seed::rng_for;
use crate::{Error, Image, Mask, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_l1: f64,
    pub lambda_perc: f64,
    pub lambda_vq: f64,
    pub lambda_triplet: f64,
    pub lambda_gan: f64,
    pub beta_commit: f64,
    pub alpha_roi: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_l1: 1.0,
            lambda_perc: 1.0,
            lambda_vq: 1.0,
            lambda_triplet: 1.0,
            lambda_gan: 0.8,
            beta_commit: 0.25,
            alpha_roi: 6.0,
            margin: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_l1", self.lambda_l1),
            ("lambda_perc", self.lambda_perc),
            ("lambda_vq", self.lambda_vq),
            ("lambda_triplet", self.lambda_triplet),
            ("lambda_gan", self.lambda_gan),
            ("beta_commit", self.beta_commit),
            ("alpha_roi", self.alpha_roi),
        ];
        for (name, v) in all {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("margin must be positive, got {}", self.margin)));
        }
        Ok(())
    }
}

fn f<T: Float>(v: T) -> f64 {
    v.to_f64().expect("float conversion")
}

fn t<T: Float>(v: f64) -> T {
    T::from(v).expect("float conversion")
}

fn same_shape<A, B>(a: &Array2<A>, b: &Array2<B>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("{:?}", a.dim()), format!("{:?}", b.dim())));
    }
    Ok(())
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("length {a}"), format!("length {b}")));
    }
    Ok(())
}

/// `mean |x_t - x_hat|`.
pub fn l1_loss<T: Float>(x_t: &Array2<T>, x_hat: &Array2<T>) -> Result<f64> {
    same_shape(x_t, x_hat)?;
    let n = x_t.len().max(1) as f64;
    Ok(x_t.iter().zip(x_hat).map(|(&a, &b)| f(a - b).abs()).sum::<f64>() / n)
}

/// Subgradient of [`l1_loss`] w.r.t. `x_hat` (0 where the residual is 0).
pub fn l1_grad<T: Float>(x_t: &Array2<T>, x_hat: &Array2<T>) -> Result<Array2<T>> {
    same_shape(x_t, x_hat)?;
    let n: T = t(x_t.len().max(1) as f64);
    let mut g = x_hat - x_t;
    g.mapv_inplace(|d| {
        if d > T::zero() {
            T::one() / n
        } else if d < T::zero() {
            -T::one() / n
        } else {
            T::zero()
        }
    });
    Ok(g)
}

/// `(1/N) sum (1 + alpha roi_i)(x_i - x_hat_i)^2`.
pub fn roi_loss<T: Float>(x: &Array2<T>, x_hat: &Array2<T>, roi: &Mask, alpha: f64) -> Result<f64> {
    same_shape(x, x_hat)?;
    same_shape(x, roi)?;
    let n = x.len().max(1) as f64;
    let s: f64 = x
        .iter()
        .zip(x_hat)
        .zip(roi)
        .map(|((&a, &b), &r)| {
            let d = f(a - b);
            (1.0 + if r { alpha } else { 0.0 }) * d * d
        })
        .sum();
    Ok(s / n)
}

/// Gradient of [`roi_loss`] w.r.t. `x_hat`.
pub fn roi_loss_grad<T: Float>(x: &Array2<T>, x_hat: &Array2<T>, roi: &Mask, alpha: f64) -> Result<Array2<T>> {
    same_shape(x, x_hat)?;
    same_shape(x, roi)?;
    let n = x.len().max(1) as f64;
    let mut g = x_hat - x;
    g.zip_mut_with(roi, |d, &r| {
        *d = *d * t(2.0 * (1.0 + if r { alpha } else { 0.0 }) / n);
    });
    Ok(g)
}

/// Plain mean squared error.
pub fn mse<T: Float>(x: &Array2<T>, x_hat: &Array2<T>) -> Result<f64> {
    same_shape(x, x_hat)?;
    let n = x.len().max(1) as f64;
    Ok(x.iter().zip(x_hat).map(|(&a, &b)| f(a - b).powi(2)).sum::<f64>() / n)
}

/// `mean ||sg[z_e] - z_q||^2 + beta mean ||z_e - sg[z_q]||^2` over all
/// elements; numerically `(1 + beta) mean (z_e - z_q)^2`.
pub fn vq_loss_values<T: Float>(z_e: &[T], z_q: &[T], beta: f64) -> Result<f64> {
    same_len(z_e.len(), z_q.len())?;
    let n = z_e.len().max(1) as f64;
    let s: f64 = z_e.iter().zip(z_q).map(|(&a, &b)| f(a - b).powi(2)).sum();
    Ok((1.0 + beta) * s / n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VqGrads<T> {
    /// Commitment term only: `2 beta (z_e - z_q) / n`.
    pub encoder: Vec<T>,
    /// Codebook term only: `2 (z_q - z_e) / n`.
    pub codebook: Vec<T>,
}

pub fn vq_loss_grads<T: Float>(z_e: &[T], z_q: &[T], beta: f64) -> Result<VqGrads<T>> {
    same_len(z_e.len(), z_q.len())?;
    let n = z_e.len().max(1) as f64;
    let ce: T = t(2.0 * beta / n);
    let cq: T = t(2.0 / n);
    Ok(VqGrads {
        encoder: z_e.iter().zip(z_q).map(|(&a, &b)| ce * (a - b)).collect(),
        codebook: z_e.iter().zip(z_q).map(|(&a, &b)| cq * (b - a)).collect(),
    })
}

pub fn vq_loss(z_e: &LatentGrid, z_q: &QuantizedLatent, beta: f64) -> Result<f64> {
    if z_e.values.dim() != z_q.vectors.dim() {
        return Err(Error::shape(format!("{:?}", z_e.values.dim()), format!("{:?}", z_q.vectors.dim())));
    }
    let a: Vec<f32> = z_e.values.iter().copied().collect();
    let b: Vec<f32> = z_q.vectors.iter().copied().collect();
    vq_loss_values(&a, &b, beta)
}

fn sq_dist<T: Float>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f(x - y).powi(2)).sum()
}

/// `max(||fa - fp||^2 - ||fa - fn||^2 + margin, 0)`.
pub fn triplet_loss<T: Float>(fa: &[T], fp: &[T], fneg: &[T], margin: f64) -> Result<f64> {
    same_len(fa.len(), fp.len())?;
    same_len(fa.len(), fneg.len())?;
    Ok((sq_dist(fa, fp) - sq_dist(fa, fneg) + margin).max(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletGrads<T> {
    pub anchor: Vec<T>,
    pub positive: Vec<T>,
    pub negative: Vec<T>,
}

/// Gradients of [`triplet_loss`]; all zero when the hinge is inactive.
pub fn triplet_grads<T: Float>(fa: &[T], fp: &[T], fneg: &[T], margin: f64) -> Result<TripletGrads<T>> {
    let active = triplet_loss(fa, fp, fneg, margin)? > 0.0;
    let two: T = t(2.0);
    let zero = vec![T::zero(); fa.len()];
    if !active {
        return Ok(TripletGrads {
            anchor: zero.clone(),
            positive: zero.clone(),
            negative: zero,
        });
    }
    Ok(TripletGrads {
        anchor: fp.iter().zip(fneg).map(|(&p, &n)| two * (n - p)).collect(),
        positive: fa.iter().zip(fp).map(|(&a, &p)| two * (p - a)).collect(),
        negative: fa.iter().zip(fneg).map(|(&a, &n)| two * (a - n)).collect(),
    })
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GanLosses {
    pub discriminator: f64,
    pub generator: f64,
}

/// `D = -mean log s(real) - mean log(1 - s(fake))`, `G = -mean log s(fake)`.
pub fn gan_losses<T: Float>(real: &Array2<T>, fake: &Array2<T>) -> Result<GanLosses> {
    same_shape(real, fake)?;
    let n = real.len().max(1) as f64;
    let d_real: f64 = real.iter().map(|&r| softplus(-f(r))).sum::<f64>() / n;
    let d_fake: f64 = fake.iter().map(|&x| softplus(f(x))).sum::<f64>() / n;
    let g: f64 = fake.iter().map(|&x| softplus(-f(x))).sum::<f64>() / n;
    Ok(GanLosses {
        discriminator: d_real + d_fake,
        generator: g,
    })
}

/// Gradients of the discriminator loss w.r.t. `(real, fake)` logits.
pub fn gan_discriminator_grads<T: Float>(real: &Array2<T>, fake: &Array2<T>) -> Result<(Array2<T>, Array2<T>)> {
    same_shape(real, fake)?;
    let n = real.len().max(1) as f64;
    Ok((
        real.mapv(|r| t(-logistic(-f(r)) / n)),
        fake.mapv(|x| t(logistic(f(x)) / n)),
    ))
}

/// Gradient of the non-saturating generator loss w.r.t. fake logits.
pub fn gan_generator_grad<T: Float>(fake: &Array2<T>) -> Array2<T> {
    let n = fake.len().max(1) as f64;
    fake.mapv(|x| t(-logistic(-f(x)) / n))
}

/// Per-step values of every objective term (unweighted except `pixel`, which
/// is the already-weighted pixel reconstruction term).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub pixel: f64,
    pub perc: f64,
    pub vq: f64,
    pub triplet: f64,
    pub gan: f64,
}

/// `pixel + l_perc perc + l_vq vq + l_triplet triplet + l_gan gan`.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> f64 {
    parts.pixel + w.lambda_perc * parts.perc + w.lambda_vq * parts.vq + w.lambda_triplet * parts.triplet + w.lambda_gan * parts.gan
}

/// Perceptual distance contract: non-negative, zero on identical inputs,
/// symmetric, differentiable in its second argument.
pub trait PerceptualDistance: Send + Sync {
    fn distance(&self, x: &Image, y: &Image) -> Result<f64>;

    /// Distance and its gradient w.r.t. `y`.
    fn distance_grad(&self, x: &Image, y: &Image) -> Result<(f64, Image)>;
}

/// `lambda_l1 * mean|x_t - x_hat| + lambda_perc * perc(x_t, x_hat)`.
pub fn rec_loss(x_t: &Image, x_hat: &Image, w: &LossWeights, perc: &dyn PerceptualDistance) -> Result<f64> {
    let l1 = l1_loss(x_t, x_hat)?;
    let p = if w.lambda_perc > 0.0 { perc.distance(x_t, x_hat)? } else { 0.0 };
    Ok(w.lambda_l1 * l1 + w.lambda_perc * p)
}

/// Frozen, randomly initialized three-stage conv net; features are
/// unit-normalized across channels at each position and compared with the
/// summed per-stage mean squared difference.
#[derive(Debug, Clone)]
pub struct RandomConvPerceptual {
    stages: Vec<(Net, Vec<f32>)>,
}

const PERC_EPS: f64 = 1e-6;

impl RandomConvPerceptual {
    pub fn new(seed: u64) -> Self {
        let mut rng = rng_for(seed, "perceptual", &[]);
        let widths = [(1usize, 8usize, 1usize), (8, 16, 2), (16, 16, 2)];
        let stages = widths
            .iter()
            .map(|&(cin, cout, stride)| {
                NetBuilder::new(&mut rng)
                    .conv(cin, cout, 3, stride, 1)
                    .layer(Layer::LeakyRelu(0.2))
                    .build()
            })
            .collect();
        RandomConvPerceptual { stages }
    }

    fn input(img: &Image) -> Tensor {
        let mut t = Tensor::from_image(img);
        for v in &mut t.data {
            *v = 2.0 * *v - 1.0;
        }
        t
    }

    fn features(&self, img: &Image) -> Vec<Tensor> {
        let mut x = Self::input(img);
        let mut out = Vec::with_capacity(self.stages.len());
        for (net, p) in &self.stages {
            x = net.forward(p, x);
            out.push(x.clone());
        }
        out
    }

    fn features_tape(&self, img: &Image) -> (Vec<Tensor>, Vec<Tape>) {
        let mut x = Self::input(img);
        let mut out = Vec::with_capacity(self.stages.len());
        let mut tapes = Vec::with_capacity(self.stages.len());
        for (net, p) in &self.stages {
            let (y, tape) = net.forward_tape(p, x);
            out.push(y.clone());
            tapes.push(tape);
            x = y;
        }
        (out, tapes)
    }

    /// Channel-normalized feature vectors, `[position][channel]`, and norms.
    fn normalized(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let n = t.h * t.w;
        let mut u = vec![0.0; t.c * n];
        let mut norms = vec![0.0; n];
        for (pos, norm) in norms.iter_mut().enumerate() {
            let s: f64 = (0..t.c).map(|c| (t.data[c * n + pos] as f64).powi(2)).sum();
            *norm = (s + PERC_EPS).sqrt();
            for c in 0..t.c {
                u[pos * t.c + c] = t.data[c * n + pos] as f64 / *norm;
            }
        }
        (u, norms)
    }

    fn check(x: &Image, y: &Image) -> Result<()> {
        same_shape(x, y)?;
        let (h, w) = x.dim();
        if h < 4 || w < 4 {
            return Err(Error::InvalidInput("perceptual distance needs images of at least 4x4".into()));
        }
        Ok(())
    }
}

impl PerceptualDistance for RandomConvPerceptual {
    fn distance(&self, x: &Image, y: &Image) -> Result<f64> {
        Self::check(x, y)?;
        let fx = self.features(x);
        let fy = self.features(y);
        let mut total = 0.0;
        for (a, b) in fx.iter().zip(&fy) {
            let (ua, _) = Self::normalized(a);
            let (ub, _) = Self::normalized(b);
            let n = (a.h * a.w) as f64;
            total += ua.iter().zip(&ub).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / n;
        }
        Ok(total)
    }

    fn distance_grad(&self, x: &Image, y: &Image) -> Result<(f64, Image)> {
        Self::check(x, y)?;
        let fx = self.features(x);
        let (fy, tapes) = self.features_tape(y);
        let mut total = 0.0;
        let mut feature_grads = Vec::with_capacity(fy.len());
        for (a, b) in fx.iter().zip(&fy) {
            let (ua, _) = Self::normalized(a);
            let (ub, norms) = Self::normalized(b);
            let n = b.h * b.w;
            total += ua.iter().zip(&ub).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / n as f64;
            // d/du_b = 2 (u_b - u_a) / n; d u / d f = (I - u u^T) / norm
            let mut g = Tensor::zeros(b.c, b.h, b.w);
            for (pos, &norm) in norms.iter().enumerate() {
                let gu: Vec<f64> = (0..b.c)
                    .map(|c| 2.0 * (ub[pos * b.c + c] - ua[pos * b.c + c]) / n as f64)
                    .collect();
                let dot: f64 = (0..b.c).map(|c| gu[c] * ub[pos * b.c + c]).sum();
                for c in 0..b.c {
                    g.data[c * n + pos] = ((gu[c] - ub[pos * b.c + c] * dot) / norm) as f32;
                }
            }
            feature_grads.push(g);
        }
        let mut g: Option<Tensor> = None;
        for (((net, p), tape), fg) in self.stages.iter().zip(tapes).zip(feature_grads).rev() {
            let mut upstream = fg;
            if let Some(gn) = g.take() {
                upstream.add_assign(&gn);
            }
            g = Some(net.backward(p, tape, upstream, None));
        }
        let gx = g.expect("at least one stage");
        let mut img = gx.to_image();
        img.mapv_inplace(|v| 2.0 * v);
        Ok((total, img))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rec_loss_examples() {
        let perc = RandomConvPerceptual::new(0);
        let w = LossWeights {
            lambda_perc: 0.0,
            ..LossWeights::default()
        };
        let xt = array![[0.0f32, 1.0], [1.0, 0.0]];
        let xh = array![[0.5f32, 1.0], [1.0, 0.0]];
        assert!((l1_loss(&xt, &xh).unwrap() - 0.125).abs() < 1e-12);
        let img = Image::from_elem((8, 8), 0.25);
        assert_eq!(rec_loss(&img, &img, &LossWeights::default(), &perc).unwrap(), 0.0);
        let shifted = img.mapv(|v| v + 0.5);
        assert!((rec_loss(&img, &shifted, &w, &perc).unwrap() - 0.5).abs() < 1e-7);
    }

    #[test]
    fn roi_loss_examples() {
        let x = array![[0.0f64, 0.0]];
        let xh = array![[0.1f64, 0.2]];
        let roi = array![[true, false]];
        assert!((roi_loss(&x, &xh, &roi, 6.0).unwrap() - 0.055).abs() < 1e-12);
        assert!((roi_loss(&x, &xh, &roi, 0.0).unwrap() - mse(&x, &xh).unwrap()).abs() < 1e-12);
        assert_eq!(roi_loss(&x, &x, &roi, 6.0).unwrap(), 0.0);
        assert!(roi_loss(&x, &array![[0.0f64]], &roi, 6.0).is_err());
    }

    #[test]
    fn vq_examples() {
        assert!((vq_loss_values(&[1.0f64, 0.0], &[0.0, 0.0], 0.25).unwrap() - 0.625).abs() < 1e-12);
        assert_eq!(vq_loss_values(&[0.3f64, 0.1], &[0.3, 0.1], 0.25).unwrap(), 0.0);
        assert!(vq_loss_values(&[0.3f64], &[0.3, 0.1], 0.25).is_err());
    }

    #[test]
    fn triplet_examples() {
        let z = [0.3f64, -0.2];
        assert_eq!(triplet_loss(&z, &z, &z, 1.0).unwrap(), 1.0);
        assert_eq!(triplet_loss(&[0.0f64], &[0.0], &[2.0], 1.0).unwrap(), 0.0);
        assert_eq!(triplet_loss(&[0.0f64, 0.0], &[1.0, 0.0], &[1.0, 1.0], 1.0).unwrap(), 0.0);
        assert!((triplet_loss(&[0.0f64, 0.0], &[1.0, 0.0], &[0.5, 0.5], 1.0).unwrap() - 1.5).abs() < 1e-12);
        let g = triplet_grads(&[0.0f64], &[0.0], &[2.0], 1.0).unwrap();
        assert!(g.anchor.iter().chain(&g.positive).chain(&g.negative).all(|&v| v == 0.0));
    }

    #[test]
    fn gan_examples() {
        let zeros = Array2::<f64>::zeros((4, 4));
        let l = gan_losses(&zeros, &zeros).unwrap();
        assert!((l.discriminator - 2.0 * 2f64.ln()).abs() < 1e-9);
        assert!((l.generator - 2f64.ln()).abs() < 1e-9);
        let real = Array2::from_elem((2, 2), 100.0f64);
        let fake = Array2::from_elem((2, 2), -100.0f64);
        let l = gan_losses(&real, &fake).unwrap();
        assert!(l.discriminator < 1e-40 && l.discriminator >= 0.0);
        assert!(l.generator.is_finite() && (l.generator - 100.0).abs() < 1e-9);
        let l = gan_losses(&fake, &real).unwrap();
        assert!(l.discriminator.is_finite() && (l.discriminator - 200.0).abs() < 1e-9);
    }

    #[test]
    fn gan_gradients_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let real = Array2::from_shape_fn((3, 3), |_| rng.random_range(-3.0..3.0f64));
        let fake = Array2::from_shape_fn((3, 3), |_| rng.random_range(-3.0..3.0f64));
        let (gr, gf) = gan_discriminator_grads(&real, &fake).unwrap();
        let gg = gan_generator_grad(&fake);
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..3 {
                let mut rp = real.clone();
                rp[[i, j]] += h;
                let mut rm = real.clone();
                rm[[i, j]] -= h;
                let fd = (gan_losses(&rp, &fake).unwrap().discriminator - gan_losses(&rm, &fake).unwrap().discriminator) / (2.0 * h);
                assert!((fd - gr[[i, j]]).abs() < 1e-7);
                let mut fp = fake.clone();
                fp[[i, j]] += h;
                let mut fm = fake.clone();
                fm[[i, j]] -= h;
                let fd = (gan_losses(&real, &fp).unwrap().discriminator - gan_losses(&real, &fm).unwrap().discriminator) / (2.0 * h);
                assert!((fd - gf[[i, j]]).abs() < 1e-7);
                let fd = (gan_losses(&real, &fp).unwrap().generator - gan_losses(&real, &fm).unwrap().generator) / (2.0 * h);
                assert!((fd - gg[[i, j]]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn total_loss_is_a_weighted_sum() {
        let parts = LossParts {
            pixel: 0.1,
            perc: 0.2,
            vq: 0.3,
            triplet: 0.4,
            gan: 0.5,
        };
        let ones = LossWeights {
            lambda_l1: 1.0,
            lambda_perc: 1.0,
            lambda_vq: 1.0,
            lambda_triplet: 1.0,
            lambda_gan: 1.0,
            ..LossWeights::default()
        };
        assert!((total_loss(&parts, &ones) - 1.5).abs() < 1e-12);
        assert_eq!(total_loss(&LossParts::default(), &ones), 0.0);
        let no_gan = LossWeights { lambda_gan: 0.0, ..ones };
        assert!((total_loss(&parts, &no_gan) - 1.0).abs() < 1e-12);
    }

    fn random_image(rng: &mut ChaCha8Rng, n: usize) -> Image {
        Image::from_shape_fn((n, n), |_| rng.random())
    }

    #[test]
    fn perceptual_axioms() {
        let perc = RandomConvPerceptual::new(3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let x = random_image(&mut rng, 16);
            let y = random_image(&mut rng, 16);
            assert_eq!(perc.distance(&x, &x).unwrap(), 0.0);
            let (a, b) = (perc.distance(&x, &y).unwrap(), perc.distance(&y, &x).unwrap());
            assert!(a > 0.0 && (a - b).abs() < 1e-6);
        }
        assert!(perc.distance(&Image::zeros((8, 8)), &Image::zeros((8, 9))).is_err());
    }

    #[test]
    fn perceptual_grows_with_noise() {
        let perc = RandomConvPerceptual::new(3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let eps = [0.01f32, 0.05, 0.1, 0.2];
        let mut mean = [0.0f64; 4];
        for _ in 0..20 {
            let x = random_image(&mut rng, 32);
            let noise = Image::from_shape_fn((32, 32), |_| rng.random_range(-1.0..1.0f32));
            for (k, &e) in eps.iter().enumerate() {
                let y = &x + &(&noise * e);
                mean[k] += perc.distance(&x, &y).unwrap() / 20.0;
            }
        }
        assert!(mean.windows(2).all(|w| w[1] >= w[0]), "{mean:?}");
    }

    #[test]
    fn perceptual_gradient_matches_differences() {
        let perc = RandomConvPerceptual::new(4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_image(&mut rng, 12);
        let y = random_image(&mut rng, 12);
        let (d, g) = perc.distance_grad(&x, &y).unwrap();
        assert!((d - perc.distance(&x, &y).unwrap()).abs() < 1e-9);
        let h = 2e-3f32;
        for (i, j) in [(0, 0), (3, 7), (6, 6), (11, 2), (9, 10)] {
            let mut yp = y.clone();
            yp[[i, j]] += h;
            let mut ym = y.clone();
            ym[[i, j]] -= h;
            let fd = (perc.distance(&x, &yp).unwrap() - perc.distance(&x, &ym).unwrap()) / (2.0 * h as f64);
            let an = g[[i, j]] as f64;
            assert!((fd - an).abs() < 0.05 * fd.abs().max(an.abs()) + 1e-4, "({i},{j}) fd {fd} an {an}");
        }
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let w = LossWeights { margin: 0.0, ..LossWeights::default() };
        assert!(w.validate().is_err());
        let w = LossWeights { lambda_vq: -1.0, ..LossWeights::default() };
        assert!(w.validate().is_err());
    }
}
