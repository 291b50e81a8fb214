use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction, one moment pair per parameter tensor.
///
/// Tensors without a gradient in a step are left untouched, including their
/// step counters.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    steps: Vec<u64>,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(config: AdamConfig, shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = shapes.into_iter().map(|s| (Matrix::zeros(s), Matrix::zeros(s))).unzip();
        Self {
            config,
            steps: vec![0; m.len()],
            m,
            v,
        }
    }

    /// Updates taken by tensor `i`.
    pub fn steps_taken(&self, i: usize) -> u64 {
        self.steps[i]
    }

    pub fn step(&mut self, params: Vec<&mut Matrix>, grads: &[Option<Matrix>]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grads.len(), self.m.len(), "one gradient slot per parameter");
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            eps,
        } = self.config;
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = array![[1.0, -2.0]];
        let mut opt = Adam::new(AdamConfig::default(), [(1, 2)]);
        opt.step(vec![&mut p], &[Some(array![[0.5, -3.0]])]);
        assert!((p[[0, 0]] - (1.0 - 2e-3)).abs() < 1e-9);
        assert!((p[[0, 1]] - (-2.0 + 2e-3)).abs() < 1e-9);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = array![[3.0, -4.0]];
        let mut opt = Adam::new(
            AdamConfig {
                learning_rate: 0.05,
                ..Default::default()
            },
            [(1, 2)],
        );
        for _ in 0..2000 {
            let g = &p * 2.0;
            opt.step(vec![&mut p], &[Some(g)]);
        }
        assert!(p.iter().all(|x| x.abs() < 1e-3), "{p}");
    }

    #[test]
    fn tensors_without_gradient_are_skipped() {
        let mut a = array![[1.0]];
        let mut b = array![[1.0]];
        let mut opt = Adam::new(AdamConfig::default(), [(1, 1), (1, 1)]);
        opt.step(vec![&mut a, &mut b], &[Some(array![[1.0]]), None]);
        assert_eq!(b[[0, 0]], 1.0);
        assert_eq!(opt.steps_taken(1), 0);
        assert_eq!(opt.steps_taken(0), 1);
    }
}
