use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use super::Tensor;

/// 2-D convolution (cross-correlation) with zero padding. Weights are laid
/// out `[cout][cin][k][k]` at `offset`, followed by `cout` biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub offset: usize,
}

impl Conv2d {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, offset: usize) -> Self {
        assert!(cin > 0 && cout > 0 && k > 0 && stride > 0);
        Conv2d {
            cin,
            cout,
            k,
            stride,
            pad,
            offset,
        }
    }

    pub fn param_count(&self) -> usize {
        self.cout * self.cin * self.k * self.k + self.cout
    }

    pub fn out_dim(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn weights<'a>(&self, p: &'a [f32]) -> &'a [f32] {
        &p[self.offset..self.offset + self.cout * self.cin * self.k * self.k]
    }

    fn bias<'a>(&self, p: &'a [f32]) -> &'a [f32] {
        let start = self.offset + self.cout * self.cin * self.k * self.k;
        &p[start..start + self.cout]
    }

    /// `cols[(ci, ky, kx), (oy, ox)]`, zero where the window leaves the input.
    fn im2col(&self, x: &Tensor, oh: usize, ow: usize) -> Vec<f32> {
        let k = self.k;
        let n = oh * ow;
        let mut cols = vec![0.0f32; self.cin * k * k * n];
        for ci in 0..self.cin {
            let plane = &x.data[ci * x.h * x.w..(ci + 1) * x.h * x.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((ci * k + ky) * k + kx) * n..][..n];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * x.w..(iy as usize + 1) * x.w];
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < x.w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f32], (c, h, w): (usize, usize, usize), oh: usize, ow: usize) -> Tensor {
        let k = self.k;
        let n = oh * ow;
        let mut x = Tensor::zeros(c, h, w);
        for ci in 0..c {
            let plane = &mut x.data[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((ci * k + ky) * k + kx) * n..][..n];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, &s) in row[oy * ow..(oy + 1) * ow].iter().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
        x
    }

    /// Returns the output and the im2col buffer needed by the backward pass.
    pub fn forward(&self, p: &[f32], x: &Tensor) -> (Tensor, Vec<f32>) {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (oh, ow) = self.out_dim(x.h, x.w);
        let n = oh * ow;
        let kk = self.cin * self.k * self.k;
        let cols = self.im2col(x, oh, ow);
        let mut y = Tensor::zeros(self.cout, oh, ow);
        for (co, &b) in self.bias(p).iter().enumerate() {
            y.data[co * n..(co + 1) * n].fill(b);
        }
        let w = ArrayView2::from_shape((self.cout, kk), self.weights(p)).expect("weights");
        let c = ArrayView2::from_shape((kk, n), &cols).expect("cols");
        let mut out = ArrayViewMut2::from_shape((self.cout, n), &mut y.data).expect("out");
        general_mat_mul(1.0, &w, &c, 1.0, &mut out);
        (y, cols)
    }

    pub fn backward(
        &self,
        p: &[f32],
        cols: &[f32],
        in_shape: (usize, usize, usize),
        g: &Tensor,
        grads: Option<&mut [f32]>,
    ) -> Tensor {
        let (oh, ow) = (g.h, g.w);
        let n = oh * ow;
        let kk = self.cin * self.k * self.k;
        let gy = ArrayView2::from_shape((self.cout, n), &g.data).expect("grad");
        let c = ArrayView2::from_shape((kk, n), cols).expect("cols");
        if let Some(grads) = grads {
            let wlen = self.cout * kk;
            let (gw, gb) = grads[self.offset..self.offset + wlen + self.cout].split_at_mut(wlen);
            let mut gw = ArrayViewMut2::from_shape((self.cout, kk), gw).expect("gw");
            general_mat_mul(1.0, &gy, &c.t(), 1.0, &mut gw);
            for (co, b) in gb.iter_mut().enumerate() {
                *b += g.data[co * n..(co + 1) * n].iter().sum::<f32>();
            }
        }
        let w = ArrayView2::from_shape((self.cout, kk), self.weights(p)).expect("weights");
        let mut dcols = vec![0.0f32; kk * n];
        let mut dc = ArrayViewMut2::from_shape((kk, n), &mut dcols).expect("dcols");
        general_mat_mul(1.0, &w.t(), &gy, 0.0, &mut dc);
        self.col2im(&dcols, in_shape, oh, ow)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution.
    fn naive(conv: &Conv2d, p: &[f32], x: &Tensor) -> Tensor {
        let (oh, ow) = conv.out_dim(x.h, x.w);
        let mut y = Tensor::zeros(conv.cout, oh, ow);
        let k = conv.k;
        for co in 0..conv.cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = conv.bias(p)[co];
                    for ci in 0..conv.cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < x.h && (ix as usize) < x.w {
                                    acc += p[conv.offset + ((co * conv.cin + ci) * k + ky) * k + kx]
                                        * x.data[(ci * x.h + iy as usize) * x.w + ix as usize];
                                }
                            }
                        }
                    }
                    y.data[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn matches_direct_convolution() {
        for (cin, cout, k, stride, pad, h, w) in [(2, 3, 3, 1, 1, 5, 6), (3, 2, 4, 2, 1, 8, 8), (1, 4, 1, 1, 0, 3, 3), (2, 2, 3, 2, 1, 7, 5)] {
            let conv = Conv2d::new(cin, cout, k, stride, pad, 3);
            let p: Vec<f32> = (0..conv.param_count() + 3).map(|i| ((i * 37 % 19) as f32 - 9.0) / 10.0).collect();
            let x = Tensor::from_vec(cin, h, w, (0..cin * h * w).map(|i| ((i * 13 % 11) as f32 - 5.0) / 7.0).collect());
            let (y, _) = conv.forward(&p, &x);
            let z = naive(&conv, &p, &x);
            assert_eq!(y.shape(), z.shape());
            for (a, b) in y.data.iter().zip(&z.data) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }
}
