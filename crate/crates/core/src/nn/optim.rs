use serde::{Deserialize, Serialize};

use super::layers::{Param, ParamKind};
use super::tensor::Scalar;

/// Adam with bias correction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    #[serde(skip)]
    first: Vec<Vec<f64>>,
    #[serde(skip)]
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update to every learnable parameter, in visiting order.
    /// The order must be identical on every call.
    pub fn step<T: Scalar>(&mut self, params: Vec<&mut Param<T>>) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let learnable = params.into_iter().filter(|p| p.kind == ParamKind::Learnable);
        for (i, p) in learnable.enumerate() {
            if self.first.len() <= i {
                self.first.push(vec![0.0; p.len()]);
                self.second.push(vec![0.0; p.len()]);
            }
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            assert_eq!(m.len(), p.len(), "parameter {i} changed size between steps");
            for (j, (w, g)) in p.value.iter_mut().zip(&p.grad).enumerate() {
                let g = g.as_f64();
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let update = self.learning_rate * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                *w = T::from_f(w.as_f64() - update);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Param::<f64>::new(vec![2], vec![1.0, -1.0]);
        p.grad = vec![0.5, -3.0];
        let mut adam = Adam::new(0.01);
        adam.step(vec![&mut p]);
        // bias-corrected first step is lr * sign(g) up to eps
        assert!((p.value[0] - 0.99).abs() < 1e-9);
        assert!((p.value[1] + 0.99).abs() < 1e-9);
    }

    #[test]
    fn buffers_are_not_updated() {
        let mut b = Param::<f32>::buffer(vec![1], vec![3.0]);
        let mut adam = Adam::new(0.1);
        adam.step(vec![&mut b]);
        assert_eq!(b.value, vec![3.0]);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = Param::<f64>::new(vec![1], vec![5.0]);
        let mut adam = Adam::new(0.1);
        for _ in 0..500 {
            p.grad[0] = 2.0 * (p.value[0] - 2.0);
            adam.step(vec![&mut p]);
        }
        assert!((p.value[0] - 2.0).abs() < 1e-2);
    }
}
