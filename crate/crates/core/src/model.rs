//! Encoder, codebook, decoder and patch discriminator.
//!
//! Encoder: `conv3x3 -> [silu, conv3x3/2, resblock] x S -> silu, conv1x1 -> d`
//! with `S = log2(downsample_factor)`. The decoder mirrors it with nearest
//! upsampling and ends in a sigmoid so reconstructions stay in `[0, 1]`. The
//! discriminator is a stack of stride-2 `4x4` convolutions with LeakyReLU(0.2)
//! followed by a `3x3` convolution to one logit per patch.
//!
//! All generator-side parameters (encoder, codebook, decoder) share one flat
//! vector laid out in that order; the discriminator has its own.

use std::ops::Range;

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Layer, Net, NetBuilder, Tensor};
use crate::seed::rng_for;
use crate::{Error, Image, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_resolution: usize,
    pub codebook_size: usize,
    pub codebook_dim: usize,
    pub downsample_factor: usize,
    /// Encoder widths: `channels[0]` at full resolution, `channels[i]` after
    /// the `i`-th stride-2 stage.
    pub channels: Vec<usize>,
    pub disc_channels: Vec<usize>,
    /// Spatial reduction of the discriminator's logit map.
    pub disc_patch_factor: usize,
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            input_resolution: 64,
            codebook_size: 32,
            codebook_dim: 16,
            downsample_factor: 4,
            channels: vec![8, 16, 32],
            disc_channels: vec![16, 32, 32],
            disc_patch_factor: 8,
        }
    }

    pub fn paper() -> Self {
        ModelConfig {
            input_resolution: 256,
            codebook_size: 256,
            codebook_dim: 256,
            downsample_factor: 16,
            channels: vec![32, 64, 128, 128, 256],
            disc_channels: vec![64, 128, 256],
            disc_patch_factor: 8,
        }
    }

    pub fn stages(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize
    }

    pub fn latent_side(&self) -> usize {
        self.input_resolution / self.downsample_factor
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model: {m}")));
        if !self.downsample_factor.is_power_of_two() || self.downsample_factor < 2 {
            return bad(format!("downsample_factor {} must be a power of two >= 2", self.downsample_factor));
        }
        if self.input_resolution % self.downsample_factor != 0 {
            return bad(format!(
                "input_resolution {} is not divisible by downsample_factor {}",
                self.input_resolution, self.downsample_factor
            ));
        }
        if self.codebook_size < 2 {
            return bad("codebook_size must be at least 2".into());
        }
        if self.codebook_dim < 1 {
            return bad("codebook_dim must be at least 1".into());
        }
        if self.channels.len() != self.stages() + 1 || self.channels.contains(&0) {
            return bad(format!(
                "channels needs {} positive widths for downsample_factor {}",
                self.stages() + 1,
                self.downsample_factor
            ));
        }
        if !self.disc_patch_factor.is_power_of_two() || self.disc_patch_factor < 2 {
            return bad("disc_patch_factor must be a power of two >= 2".into());
        }
        if self.input_resolution % self.disc_patch_factor != 0 {
            return bad("input_resolution must be divisible by disc_patch_factor".into());
        }
        let layers = self.disc_patch_factor.trailing_zeros() as usize;
        if self.disc_channels.len() != layers || self.disc_channels.contains(&0) {
            return bad(format!("disc_channels needs {layers} positive widths"));
        }
        Ok(())
    }
}

/// Pre-quantization latents, `values[[i, j, k]]` = channel `k` at `(i, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub values: Array3<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// `M x d`.
    pub entries: Array2<f32>,
    pub usage: Vec<u64>,
}

impl Codebook {
    pub fn new(entries: Array2<f32>) -> Self {
        let m = entries.nrows();
        Codebook {
            entries,
            usage: vec![0; m],
        }
    }

    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    pub fn dim(&self) -> usize {
        self.entries.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLatent {
    pub indices: Array2<usize>,
    pub vectors: Array3<f32>,
}

impl QuantizedLatent {
    /// Code histogram of this latent.
    pub fn usage(&self, m: usize) -> Vec<u64> {
        let mut u = vec![0; m];
        for &i in &self.indices {
            u[i] += 1;
        }
        u
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletEmbedding {
    pub vector: Array1<f32>,
}

/// Index of the nearest row of `entries` (`M x d`, row-major) to `z` under
/// squared Euclidean distance in `f64`; ties go to the lowest index.
pub fn nearest_code(z: &[f32], entries: &[f32], d: usize) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (m, e) in entries.chunks_exact(d).enumerate() {
        let dist: f64 = z.iter().zip(e).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
        if dist < best_d {
            best_d = dist;
            best = m;
        }
    }
    best
}

pub fn quantize(grid: &LatentGrid, codebook: &Codebook) -> Result<QuantizedLatent> {
    let (h, w, d) = grid.values.dim();
    if d != codebook.dim() {
        return Err(Error::shape(format!("latent depth {}", codebook.dim()), format!("depth {d}")));
    }
    let entries = codebook.entries.as_standard_layout();
    let flat = entries.as_slice().expect("standard layout");
    let mut indices = Array2::zeros((h, w));
    let mut vectors = Array3::zeros((h, w, d));
    for i in 0..h {
        for j in 0..w {
            let z: Vec<f32> = grid.values.slice(ndarray::s![i, j, ..]).to_vec();
            let m = nearest_code(&z, flat, d);
            indices[[i, j]] = m;
            vectors.slice_mut(ndarray::s![i, j, ..]).assign(&codebook.entries.row(m));
        }
    }
    Ok(QuantizedLatent { indices, vectors })
}

/// Spatial mean of a latent grid.
pub fn embed_grid(grid: &LatentGrid) -> TripletEmbedding {
    let (h, w, d) = grid.values.dim();
    let n = (h * w).max(1) as f64;
    let mut acc = vec![0.0f64; d];
    for ((_, _, k), &v) in grid.values.indexed_iter() {
        acc[k] += v as f64;
    }
    TripletEmbedding {
        vector: acc.into_iter().map(|s| (s / n) as f32).collect(),
    }
}

/// `C x H x W` tensor to an `H x W x C` grid.
pub fn tensor_to_grid(t: &Tensor) -> LatentGrid {
    let values = Array3::from_shape_fn((t.h, t.w, t.c), |(i, j, k)| t.data[(k * t.h + i) * t.w + j]);
    LatentGrid { values }
}

pub fn grid_to_tensor(values: &Array3<f32>) -> Tensor {
    let (h, w, c) = values.dim();
    let mut t = Tensor::zeros(c, h, w);
    for ((i, j, k), &v) in values.indexed_iter() {
        t.data[(k * h + i) * w + j] = v;
    }
    t
}

/// Flat parameter vectors of one model instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub generator: Vec<f32>,
    pub discriminator: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Vqgan {
    config: ModelConfig,
    encoder: Net,
    decoder: Net,
    discriminator: Net,
}

fn build<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> (Net, Vec<f32>, Net, Vec<f32>, Net, Vec<f32>) {
    let ch = &cfg.channels;
    let s = cfg.stages();
    let mut enc = NetBuilder::new(&mut *rng).conv(1, ch[0], 3, 1, 1);
    for i in 1..=s {
        enc = enc.layer(Layer::Silu).conv(ch[i - 1], ch[i], 3, 2, 1).residual(ch[i]);
    }
    let (encoder, pe) = enc.layer(Layer::Silu).conv(ch[s], cfg.codebook_dim, 1, 1, 0).build();

    let mut dec = NetBuilder::new(&mut *rng).conv(cfg.codebook_dim, ch[s], 3, 1, 1);
    for i in (1..=s).rev() {
        dec = dec
            .residual(ch[i])
            .layer(Layer::Silu)
            .layer(Layer::Upsample2)
            .conv(ch[i], ch[i - 1], 3, 1, 1);
    }
    let (decoder, pd) = dec
        .layer(Layer::Silu)
        .conv(ch[0], 1, 3, 1, 1)
        .layer(Layer::Sigmoid)
        .build();

    let mut disc = NetBuilder::new(&mut *rng);
    let mut cin = 1;
    for &c in &cfg.disc_channels {
        disc = disc.conv(cin, c, 4, 2, 1).layer(Layer::LeakyRelu(0.2));
        cin = c;
    }
    let (discriminator, px) = disc.conv(cin, 1, 3, 1, 1).build();
    (encoder, pe, decoder, pd, discriminator, px)
}

impl Vqgan {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (encoder, _, decoder, _, discriminator, _) = build(&config, &mut ChaCha8Rng::seed_from_u64(0));
        Ok(Vqgan {
            config,
            encoder,
            decoder,
            discriminator,
        })
    }

    /// Fresh parameters: He-normal convolutions, zero biases, codebook
    /// uniform in `[-1/M, 1/M]`.
    pub fn init_params(&self, seed: u64) -> ModelParams {
        let mut rng = rng_for(seed, "model-init", &[]);
        let (_, pe, _, pd, _, px) = build(&self.config, &mut rng);
        let m = self.config.codebook_size;
        let bound = 1.0 / m as f32;
        let mut generator = pe;
        generator.extend((0..m * self.config.codebook_dim).map(|_| rng.random_range(-bound..=bound)));
        generator.extend(pd);
        ModelParams {
            generator,
            discriminator: px,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder_net(&self) -> &Net {
        &self.encoder
    }

    pub fn decoder_net(&self) -> &Net {
        &self.decoder
    }

    pub fn discriminator_net(&self) -> &Net {
        &self.discriminator
    }

    pub fn encoder_range(&self) -> Range<usize> {
        0..self.encoder.param_count()
    }

    pub fn codebook_range(&self) -> Range<usize> {
        let start = self.encoder.param_count();
        start..start + self.config.codebook_size * self.config.codebook_dim
    }

    pub fn decoder_range(&self) -> Range<usize> {
        let start = self.codebook_range().end;
        start..start + self.decoder.param_count()
    }

    pub fn generator_len(&self) -> usize {
        self.decoder_range().end
    }

    pub fn discriminator_len(&self) -> usize {
        self.discriminator.param_count()
    }

    pub fn check_params(&self, p: &ModelParams) -> Result<()> {
        if p.generator.len() != self.generator_len() || p.discriminator.len() != self.discriminator_len() {
            return Err(Error::shape(
                format!("{}+{} parameters", self.generator_len(), self.discriminator_len()),
                format!("{}+{}", p.generator.len(), p.discriminator.len()),
            ));
        }
        Ok(())
    }

    pub fn check_image(&self, img: &Image) -> Result<()> {
        let r = self.config.input_resolution;
        if img.dim() != (r, r) {
            return Err(Error::shape(format!("{r}x{r} image"), format!("{}x{}", img.nrows(), img.ncols())));
        }
        Ok(())
    }

    pub fn codebook(&self, generator: &[f32]) -> Codebook {
        let (m, d) = (self.config.codebook_size, self.config.codebook_dim);
        Codebook::new(Array2::from_shape_vec((m, d), generator[self.codebook_range()].to_vec()).expect("codebook shape"))
    }

    pub fn encode(&self, img: &Image, p: &ModelParams) -> Result<LatentGrid> {
        self.check_image(img)?;
        let t = self.encoder.forward(&p.generator[self.encoder_range()], Tensor::from_image(img));
        Ok(tensor_to_grid(&t))
    }

    pub fn decode(&self, q: &QuantizedLatent, p: &ModelParams) -> Result<Image> {
        let s = self.config.latent_side();
        let expected = (s, s, self.config.codebook_dim);
        if q.vectors.dim() != expected {
            return Err(Error::shape(format!("{expected:?}"), format!("{:?}", q.vectors.dim())));
        }
        let y = self.decoder.forward(&p.generator[self.decoder_range()], grid_to_tensor(&q.vectors));
        Ok(y.to_image())
    }

    /// `decode(quantize(encode(x)))` with the codes used.
    pub fn reconstruct(&self, img: &Image, p: &ModelParams) -> Result<(Image, QuantizedLatent)> {
        let z = self.encode(img, p)?;
        let q = quantize(&z, &self.codebook(&p.generator))?;
        Ok((self.decode(&q, p)?, q))
    }

    pub fn discriminate(&self, img: &Image, p: &ModelParams) -> Result<Array2<f32>> {
        self.check_image(img)?;
        let y = self.discriminator.forward(&p.discriminator, Tensor::from_image(img));
        Ok(Array2::from_shape_vec((y.h, y.w), y.data).expect("logit shape"))
    }

    pub fn embed(&self, img: &Image, p: &ModelParams) -> Result<TripletEmbedding> {
        Ok(embed_grid(&self.encode(img, p)?))
    }

    /// Re-seeds codebook rows whose usage is zero with `candidates` (latent
    /// vectors, `d` each) picked at random.
    pub fn reseed_dead_codes<R: Rng + ?Sized>(
        &self,
        generator: &mut [f32],
        usage: &[u64],
        candidates: &[Vec<f32>],
        rng: &mut R,
    ) -> usize {
        if candidates.is_empty() {
            return 0;
        }
        let d = self.config.codebook_dim;
        let start = self.codebook_range().start;
        let mut n = 0;
        for (m, &u) in usage.iter().enumerate() {
            if u == 0 {
                let c = &candidates[rng.random_range(0..candidates.len())];
                generator[start + m * d..start + (m + 1) * d].copy_from_slice(c);
                n += 1;
            }
        }
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn model() -> (Vqgan, ModelParams) {
        let m = Vqgan::new(ModelConfig::desk()).unwrap();
        let p = m.init_params(1);
        (m, p)
    }

    fn random_image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_shape_fn((64, 64), |_| rng.random())
    }

    #[test]
    fn shapes() {
        let (m, p) = model();
        let x = random_image(0);
        let z = m.encode(&x, &p).unwrap();
        assert_eq!(z.values.dim(), (16, 16, 16));
        let (y, q) = m.reconstruct(&x, &p).unwrap();
        assert_eq!(y.dim(), (64, 64));
        assert_eq!(q.indices.dim(), (16, 16));
        assert_eq!(m.discriminate(&x, &p).unwrap().dim(), (8, 8));
        assert_eq!(m.embed(&x, &p).unwrap().vector.len(), 16);
        assert!(z.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn deterministic_forward() {
        let (m, p) = model();
        let x = random_image(1);
        assert_eq!(m.encode(&x, &p).unwrap(), m.encode(&x, &p).unwrap());
        assert_eq!(m.reconstruct(&x, &p).unwrap().0, m.reconstruct(&x, &p).unwrap().0);
        assert_eq!(m.discriminate(&x, &p).unwrap(), m.discriminate(&x, &p).unwrap());
        assert_eq!(m.init_params(1), p);
    }

    #[test]
    fn wrong_resolution_is_rejected() {
        let (m, p) = model();
        let err = m.encode(&Image::zeros((32, 32)), &p).unwrap_err();
        assert!(err.to_string().contains("64x64"), "{err}");
        assert!(m.discriminate(&Image::zeros((64, 32)), &p).is_err());
    }

    #[test]
    fn decode_range_over_random_inputs() {
        let (m, p) = model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let vectors = Array3::from_shape_fn((16, 16, 16), |_| rng.random_range(-5.0..5.0f32));
            let q = QuantizedLatent {
                indices: Array2::zeros((16, 16)),
                vectors,
            };
            let y = m.decode(&q, &p).unwrap();
            assert!(y.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        let bad = QuantizedLatent {
            indices: Array2::zeros((8, 8)),
            vectors: Array3::zeros((8, 8, 16)),
        };
        assert!(m.decode(&bad, &p).is_err());
    }

    #[test]
    fn quantize_examples() {
        let cb = Codebook::new(array![[0.0, 0.0], [1.0, 1.0]]);
        let grid = |v: [f32; 2]| LatentGrid {
            values: Array3::from_shape_vec((1, 1, 2), v.to_vec()).unwrap(),
        };
        assert_eq!(quantize(&grid([0.1, 0.2]), &cb).unwrap().indices[[0, 0]], 0);
        assert_eq!(quantize(&grid([0.9, 0.7]), &cb).unwrap().indices[[0, 0]], 1);
        assert_eq!(quantize(&grid([0.5, 0.5]), &cb).unwrap().indices[[0, 0]], 0);
        let bad = LatentGrid {
            values: Array3::zeros((1, 1, 3)),
        };
        assert!(quantize(&bad, &cb).is_err());
    }

    #[test]
    fn quantized_vectors_are_codebook_rows() {
        let (m, p) = model();
        let (_, q) = m.reconstruct(&random_image(2), &p).unwrap();
        let cb = m.codebook(&p.generator);
        for ((i, j), &k) in q.indices.indexed_iter() {
            for c in 0..16 {
                assert_eq!(q.vectors[[i, j, c]], cb.entries[[k, c]]);
            }
        }
        assert_eq!(q.usage(32).iter().sum::<u64>(), 256);
    }

    #[test]
    fn constant_grid_embeds_to_its_value() {
        let v = [0.5f32, -1.0, 2.0];
        let g = LatentGrid {
            values: Array3::from_shape_fn((4, 4, 3), |(_, _, k)| v[k]),
        };
        assert_eq!(embed_grid(&g).vector.to_vec(), v.to_vec());
    }

    #[test]
    fn grid_tensor_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let values = Array3::from_shape_fn((3, 5, 2), |_| rng.random::<f32>());
        assert_eq!(tensor_to_grid(&grid_to_tensor(&values)).values, values);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::desk().validate().is_ok());
        assert!(ModelConfig::paper().validate().is_ok());
        let mut c = ModelConfig::desk();
        c.input_resolution = 66;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.codebook_size = 1;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.channels = vec![8, 16];
        assert!(c.validate().is_err());
    }

    #[test]
    fn paper_preset_shapes() {
        let c = ModelConfig::paper();
        assert_eq!((c.input_resolution, c.codebook_size, c.codebook_dim), (256, 256, 256));
        assert_eq!(c.latent_side(), 16);
    }

    #[test]
    fn dead_codes_are_reseeded() {
        let (m, mut p) = model();
        let mut usage = vec![1; 32];
        usage[3] = 0;
        let cand = vec![vec![7.0f32; 16]];
        let n = m.reseed_dead_codes(&mut p.generator, &usage, &cand, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(n, 1);
        assert!(m.codebook(&p.generator).entries.row(3).iter().all(|&v| v == 7.0));
        assert!(m.codebook(&p.generator).entries.row(2).iter().all(|&v| v != 7.0));
    }
}
