//! Minimal convolutional networks with hand-written backpropagation.
//!
//! A [`Net`] is a sequence of [`Layer`]s over single-sample `C x H x W`
//! tensors. Parameters live in one flat `f32` slice owned by the caller; each
//! layer stores offsets into it, so a whole network is updated by one
//! optimizer step over one vector. Convolutions are lowered to im2col + GEMM.

mod adam;
mod conv;

pub use adam::Adam;
pub use conv::Conv2d;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::Image;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length");
        Tensor { c, h, w, data }
    }

    pub fn from_image(img: &Image) -> Self {
        let (h, w) = img.dim();
        Tensor::from_vec(1, h, w, img.iter().copied().collect())
    }

    /// First channel as an image.
    pub fn to_image(&self) -> Image {
        Image::from_shape_vec((self.h, self.w), self.data[..self.h * self.w].to_vec()).expect("shape")
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d),
    Silu,
    LeakyRelu(f32),
    /// Nearest-neighbour 2x upsampling.
    Upsample2,
    Sigmoid,
    /// `y = x + body(x)`; the body must preserve the shape.
    Residual(Vec<Layer>),
}

/// Per-layer values kept from the forward pass for backpropagation.
#[derive(Debug, Clone)]
pub enum Cache {
    Conv { cols: Vec<f32>, in_shape: (usize, usize, usize) },
    Input(Tensor),
    Output(Tensor),
    Shape(usize, usize, usize),
    Residual(Vec<Cache>),
}

pub type Tape = Vec<Cache>;

impl Layer {
    fn forward(&self, p: &[f32], x: Tensor, tape: Option<&mut Tape>) -> Tensor {
        match self {
            Layer::Conv(conv) => {
                let in_shape = x.shape();
                let (y, cols) = conv.forward(p, &x);
                if let Some(t) = tape {
                    t.push(Cache::Conv { cols, in_shape });
                }
                y
            }
            Layer::Silu => {
                let mut y = x.clone();
                for v in &mut y.data {
                    *v *= sigmoid(*v);
                }
                if let Some(t) = tape {
                    t.push(Cache::Input(x));
                }
                y
            }
            Layer::LeakyRelu(slope) => {
                let mut y = x.clone();
                for v in &mut y.data {
                    if *v < 0.0 {
                        *v *= slope;
                    }
                }
                if let Some(t) = tape {
                    t.push(Cache::Input(x));
                }
                y
            }
            Layer::Upsample2 => {
                let (c, h, w) = x.shape();
                let mut y = Tensor::zeros(c, 2 * h, 2 * w);
                for ch in 0..c {
                    for r in 0..2 * h {
                        let src = &x.data[ch * h * w + (r / 2) * w..][..w];
                        let dst = &mut y.data[ch * 4 * h * w + r * 2 * w..][..2 * w];
                        for (j, d) in dst.iter_mut().enumerate() {
                            *d = src[j / 2];
                        }
                    }
                }
                if let Some(t) = tape {
                    t.push(Cache::Shape(c, h, w));
                }
                y
            }
            Layer::Sigmoid => {
                let mut y = x;
                for v in &mut y.data {
                    *v = sigmoid(*v);
                }
                if let Some(t) = tape {
                    t.push(Cache::Output(y.clone()));
                }
                y
            }
            Layer::Residual(body) => match tape {
                Some(t) => {
                    let mut inner = Vec::with_capacity(body.len());
                    let mut y = run(body, p, x.clone(), Some(&mut inner));
                    y.add_assign(&x);
                    t.push(Cache::Residual(inner));
                    y
                }
                None => {
                    let mut y = run(body, p, x.clone(), None);
                    y.add_assign(&x);
                    y
                }
            },
        }
    }

    fn backward(&self, p: &[f32], cache: Cache, g: Tensor, grads: Option<&mut [f32]>) -> Tensor {
        match (self, cache) {
            (Layer::Conv(conv), Cache::Conv { cols, in_shape }) => conv.backward(p, &cols, in_shape, &g, grads),
            (Layer::Silu, Cache::Input(x)) => {
                let mut g = g;
                for (gv, &xv) in g.data.iter_mut().zip(&x.data) {
                    let s = sigmoid(xv);
                    *gv *= s * (1.0 + xv * (1.0 - s));
                }
                g
            }
            (Layer::LeakyRelu(slope), Cache::Input(x)) => {
                let mut g = g;
                for (gv, &xv) in g.data.iter_mut().zip(&x.data) {
                    if xv < 0.0 {
                        *gv *= slope;
                    }
                }
                g
            }
            (Layer::Upsample2, Cache::Shape(c, h, w)) => {
                let mut gx = Tensor::zeros(c, h, w);
                for ch in 0..c {
                    for r in 0..2 * h {
                        let src = &g.data[ch * 4 * h * w + r * 2 * w..][..2 * w];
                        let dst = &mut gx.data[ch * h * w + (r / 2) * w..][..w];
                        for (j, &s) in src.iter().enumerate() {
                            dst[j / 2] += s;
                        }
                    }
                }
                gx
            }
            (Layer::Sigmoid, Cache::Output(y)) => {
                let mut g = g;
                for (gv, &yv) in g.data.iter_mut().zip(&y.data) {
                    *gv *= yv * (1.0 - yv);
                }
                g
            }
            (Layer::Residual(body), Cache::Residual(inner)) => {
                let mut gx = back(body, p, inner, g.clone(), grads);
                gx.add_assign(&g);
                gx
            }
            _ => panic!("tape does not match the network"),
        }
    }
}

fn run(layers: &[Layer], p: &[f32], mut x: Tensor, mut tape: Option<&mut Tape>) -> Tensor {
    for l in layers {
        x = l.forward(p, x, tape.as_deref_mut());
    }
    x
}

fn back(layers: &[Layer], p: &[f32], tape: Tape, mut g: Tensor, mut grads: Option<&mut [f32]>) -> Tensor {
    assert_eq!(layers.len(), tape.len(), "tape length");
    for (l, c) in layers.iter().zip(tape).rev() {
        g = l.backward(p, c, g, grads.as_deref_mut());
    }
    g
}

/// A sequential network; parameter offsets are relative to the slice passed
/// to [`Net::forward`].
#[derive(Debug, Clone)]
pub struct Net {
    layers: Vec<Layer>,
    params: usize,
}

impl Net {
    pub fn param_count(&self) -> usize {
        self.params
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn forward(&self, p: &[f32], x: Tensor) -> Tensor {
        debug_assert_eq!(p.len(), self.params);
        run(&self.layers, p, x, None)
    }

    pub fn forward_tape(&self, p: &[f32], x: Tensor) -> (Tensor, Tape) {
        let mut tape = Vec::with_capacity(self.layers.len());
        let y = run(&self.layers, p, x, Some(&mut tape));
        (y, tape)
    }

    /// Backpropagates `g` (gradient w.r.t. the output); accumulates parameter
    /// gradients into `grads` when given and returns the input gradient.
    pub fn backward(&self, p: &[f32], tape: Tape, g: Tensor, grads: Option<&mut [f32]>) -> Tensor {
        if let Some(gr) = &grads {
            debug_assert_eq!(gr.len(), self.params);
        }
        back(&self.layers, p, tape, g, grads)
    }
}

/// Builds a [`Net`] and its He-initialized parameters side by side.
pub struct NetBuilder<'a, R: Rng + ?Sized> {
    layers: Vec<Layer>,
    params: Vec<f32>,
    rng: &'a mut R,
}

impl<'a, R: Rng + ?Sized> NetBuilder<'a, R> {
    pub fn new(rng: &'a mut R) -> Self {
        NetBuilder {
            layers: Vec::new(),
            params: Vec::new(),
            rng,
        }
    }

    fn make_conv(&mut self, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, gain: f32) -> Conv2d {
        let conv = Conv2d::new(cin, cout, k, stride, pad, self.params.len());
        let fan_in = (cin * k * k) as f32;
        let std = gain * (2.0 / fan_in).sqrt();
        for _ in 0..cout * cin * k * k {
            let z: f32 = StandardNormal.sample(&mut *self.rng);
            self.params.push(z * std);
        }
        self.params.extend(std::iter::repeat_n(0.0, cout));
        conv
    }

    pub fn conv(mut self, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        let c = self.make_conv(cin, cout, k, stride, pad, 1.0);
        self.layers.push(Layer::Conv(c));
        self
    }

    pub fn layer(mut self, l: Layer) -> Self {
        self.layers.push(l);
        self
    }

    /// `x + conv3(silu(conv3(silu(x))))` with a down-scaled second conv so the
    /// block starts close to the identity.
    pub fn residual(mut self, ch: usize) -> Self {
        let a = self.make_conv(ch, ch, 3, 1, 1, 1.0);
        let b = self.make_conv(ch, ch, 3, 1, 1, 0.1);
        self.layers.push(Layer::Residual(vec![
            Layer::Silu,
            Layer::Conv(a),
            Layer::Silu,
            Layer::Conv(b),
        ]));
        self
    }

    pub fn build(self) -> (Net, Vec<f32>) {
        let params = self.params.len();
        (
            Net {
                layers: self.layers,
                params,
            },
            self.params,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data.iter().zip(&b.data).map(|(x, y)| *x as f64 * *y as f64).sum()
    }

    /// Checks input and parameter gradients of `<net(x), probe>` against
    /// central differences.
    fn check_gradients(net: &Net, params: &[f32], x: &Tensor, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = net.forward(params, x.clone());
        let probe = random_tensor(&mut rng, y.c, y.h, y.w);
        let (_, tape) = net.forward_tape(params, x.clone());
        let mut grads = vec![0.0; params.len()];
        let gx = net.backward(params, tape, probe.clone(), Some(&mut grads));
        let f = |p: &[f32], x: &Tensor| dot(&net.forward(p, x.clone()), &probe);
        let eps = 1e-2f32;
        for i in (0..x.len()).step_by(7) {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let fd = (f(params, &xp) - f(params, &xm)) / (2.0 * eps as f64);
            assert!((fd - gx.data[i] as f64).abs() < 2e-2 * (1.0 + fd.abs()), "input {i}: fd {fd} an {}", gx.data[i]);
        }
        for i in (0..params.len()).step_by(5) {
            let mut pp = params.to_vec();
            pp[i] += eps;
            let mut pm = params.to_vec();
            pm[i] -= eps;
            let fd = (f(&pp, x) - f(&pm, x)) / (2.0 * eps as f64);
            assert!((fd - grads[i] as f64).abs() < 2e-2 * (1.0 + fd.abs()), "param {i}: fd {fd} an {}", grads[i]);
        }
    }

    #[test]
    fn mixed_network_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (net, params) = NetBuilder::new(&mut rng)
            .conv(2, 3, 3, 2, 1)
            .layer(Layer::Silu)
            .residual(3)
            .layer(Layer::Upsample2)
            .conv(3, 2, 3, 1, 1)
            .layer(Layer::LeakyRelu(0.2))
            .conv(2, 1, 1, 1, 0)
            .layer(Layer::Sigmoid)
            .build();
        let x = random_tensor(&mut rng, 2, 6, 6);
        check_gradients(&net, &params, &x, 2);
    }

    #[test]
    fn strided_k4_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (net, params) = NetBuilder::new(&mut rng)
            .conv(1, 2, 4, 2, 1)
            .layer(Layer::LeakyRelu(0.2))
            .conv(2, 1, 3, 1, 1)
            .build();
        let x = random_tensor(&mut rng, 1, 8, 8);
        assert_eq!(net.forward(&params, x.clone()).shape(), (1, 4, 4));
        check_gradients(&net, &params, &x, 4);
    }

    #[test]
    fn upsample_repeats_pixels() {
        let (net, p) = NetBuilder::new(&mut ChaCha8Rng::seed_from_u64(0)).layer(Layer::Upsample2).build();
        let y = net.forward(&p, Tensor::from_vec(1, 1, 2, vec![1.0, 2.0]));
        assert_eq!(y.data, vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-7);
    }
}
