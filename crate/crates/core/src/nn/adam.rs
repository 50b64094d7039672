use std::ops::Range;

use serde::{Deserialize, Serialize};

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub t: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl Adam {
    pub fn new(n: usize, lr: f32, beta1: f32, beta2: f32) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) {
        self.step_scaled(params, grads, &[]);
    }

    /// Like [`Adam::step`], with the learning rate multiplied by `scale`
    /// inside each listed range.
    pub fn step_scaled(&mut self, params: &mut [f32], grads: &[f32], scaled: &[(Range<usize>, f32)]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - (self.beta1 as f64).powi(self.t as i32);
        let bc2 = 1.0 - (self.beta2 as f64).powi(self.t as i32);
        let step = (self.lr as f64 * bc2.sqrt() / bc1) as f32;
        let eps = (self.eps as f64 * bc2.sqrt()) as f32;
        for (i, ((p, &g), (m, v))) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .enumerate()
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let lr = scaled
                .iter()
                .find(|(r, _)| r.contains(&i))
                .map_or(step, |&(_, s)| step * s);
            *p -= lr * *m / (v.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut opt = Adam::new(2, 0.1, 0.9, 0.999);
        let mut p = vec![1.0, -1.0];
        opt.step(&mut p, &[3.0, -0.5]);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut opt = Adam::new(1, 0.05, 0.5, 0.9);
        let mut p = vec![3.0f32];
        for _ in 0..500 {
            let g = [2.0 * (p[0] - 1.0)];
            opt.step(&mut p, &g);
        }
        assert!((p[0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn scaled_ranges_move_faster() {
        let mut opt = Adam::new(2, 0.1, 0.9, 0.999);
        let mut p = vec![0.0, 0.0];
        opt.step_scaled(&mut p, &[1.0, 1.0], &[(1..2, 10.0)]);
        assert!((p[0] + 0.1).abs() < 1e-6);
        assert!((p[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut opt = Adam::new(3, 0.1, 0.5, 0.9);
        let mut p = vec![0.5, 0.25, -2.0];
        opt.step(&mut p, &[0.0, 0.0, 0.0]);
        assert_eq!(p, vec![0.5, 0.25, -2.0]);
    }
}
