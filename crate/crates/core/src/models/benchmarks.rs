//! Analytic benchmark objectives. They ignore the batch argument.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};

use super::{LossModel, ModelRng};

#[derive(Debug, Clone, Copy)]
pub struct Sphere {
    pub dim: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Rosenbrock {
    pub dim: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Rastrigin {
    pub dim: usize,
}

/// `sum x_i^2`
pub fn sphere_eval_grad(x: &[f64]) -> (f64, Vec<f64>) {
    (x.iter().map(|v| v * v).sum(), x.iter().map(|v| 2.0 * v).collect())
}

/// `sum (1 - x_i)^2 + 100 (x_{i+1} - x_i^2)^2`
pub fn rosenbrock_eval_grad(x: &[f64]) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len().saturating_sub(1) {
        let a = 1.0 - x[i];
        let b = x[i + 1] - x[i] * x[i];
        loss += a * a + 100.0 * b * b;
        grad[i] += -2.0 * a - 400.0 * x[i] * b;
        grad[i + 1] += 200.0 * b;
    }
    (loss, grad)
}

/// `10 D + sum (x_i^2 - 10 cos(2 pi x_i))`
pub fn rastrigin_eval_grad(x: &[f64]) -> (f64, Vec<f64>) {
    let loss = 10.0 * x.len() as f64 + x.iter().map(|v| v * v - 10.0 * (2.0 * PI * v).cos()).sum::<f64>();
    let grad = x.iter().map(|v| 2.0 * v + 20.0 * PI * (2.0 * PI * v).sin()).collect();
    (loss, grad)
}

fn uniform_init(dim: usize, half_width: f64, seed: u64) -> Vec<f64> {
    let mut rng = ModelRng::seed_from_u64(seed);
    (0..dim).map(|_| rng.gen_range(-half_width..half_width)).collect()
}

impl LossModel for Sphere {
    type Sample = ();

    fn dimension(&self) -> usize {
        self.dim
    }

    fn loss_and_gradient(&self, params: &[f64], _: &[()]) -> (f64, Vec<f64>) {
        sphere_eval_grad(params)
    }

    fn init_params(&self, seed: u64) -> Vec<f64> {
        uniform_init(self.dim, 5.0, seed)
    }
}

impl LossModel for Rosenbrock {
    type Sample = ();

    fn dimension(&self) -> usize {
        self.dim
    }

    fn loss_and_gradient(&self, params: &[f64], _: &[()]) -> (f64, Vec<f64>) {
        rosenbrock_eval_grad(params)
    }

    fn init_params(&self, seed: u64) -> Vec<f64> {
        uniform_init(self.dim, 2.0, seed)
    }
}

impl LossModel for Rastrigin {
    type Sample = ();

    fn dimension(&self) -> usize {
        self.dim
    }

    fn loss_and_gradient(&self, params: &[f64], _: &[()]) -> (f64, Vec<f64>) {
        rastrigin_eval_grad(params)
    }

    fn init_params(&self, seed: u64) -> Vec<f64> {
        uniform_init(self.dim, 5.12, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::gradcheck::{finite_diff_gradient, max_relative_error};

    #[test]
    fn known_values() {
        assert_eq!(sphere_eval_grad(&[0.0, 0.0, 0.0]), (0.0, vec![0.0; 3]));
        assert_eq!(rosenbrock_eval_grad(&[1.0, 1.0]), (0.0, vec![0.0, 0.0]));
        let (l, g) = rosenbrock_eval_grad(&[0.0, 0.0]);
        assert_eq!((l, g), (1.0, vec![-2.0, 0.0]));
        // 0.25 + 10 (1 - cos(pi)) = 20.25
        let (l, _) = rastrigin_eval_grad(&[0.5]);
        assert!((l - 20.25).abs() < 1e-12);
        assert!(rastrigin_eval_grad(&[0.0; 5]).0.abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10 {
            for dim in [1usize, 2, 7] {
                let s = Sphere { dim };
                let x = s.init_params(seed);
                assert!(max_relative_error(&s.gradient(&x, &[]), &finite_diff_gradient(&s, &x, &[], 1e-5)) < 1e-7);
                let r = Rastrigin { dim };
                let x = r.init_params(seed);
                assert!(max_relative_error(&r.gradient(&x, &[]), &finite_diff_gradient(&r, &x, &[], 1e-5)) < 1e-4);
                if dim >= 2 {
                    let r = Rosenbrock { dim };
                    let x = r.init_params(seed);
                    assert!(max_relative_error(&r.gradient(&x, &[]), &finite_diff_gradient(&r, &x, &[], 1e-5)) < 1e-4);
                }
            }
        }
    }
}
