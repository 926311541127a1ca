use super::{OptimizerKind, TrainConfig};

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, dim: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Heavy-ball SGD: `v <- mu v + g; theta <- theta - lr v`.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64, dim: usize) -> Self {
        Self {
            lr,
            momentum,
            velocity: vec![0.0; dim],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        for i in 0..params.len() {
            self.velocity[i] = self.momentum * self.velocity[i] + grad[i];
            params[i] -= self.lr * self.velocity[i];
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OptimizerState {
    Adam(Adam),
    Sgd(SgdMomentum),
}

impl OptimizerState {
    pub fn new(config: &TrainConfig, dim: usize) -> Self {
        match config.optimizer {
            OptimizerKind::Adam => OptimizerState::Adam(Adam::new(config.learning_rate, dim)),
            OptimizerKind::SgdMomentum => {
                OptimizerState::Sgd(SgdMomentum::new(config.learning_rate, config.momentum, dim))
            }
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        match self {
            OptimizerState::Adam(a) => a.step(params, grad),
            OptimizerState::Sgd(s) => s.step(params, grad),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut a = Adam::new(0.1, 2);
        let mut p = [1.0, -1.0];
        a.step(&mut p, &[3.0, -0.5]);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn sgd_minimizes_a_quadratic() {
        let mut s = SgdMomentum::new(0.1, 0.5, 1);
        let mut p = [4.0];
        for _ in 0..200 {
            let g = [2.0 * p[0]];
            s.step(&mut p, &g);
        }
        assert!(p[0].abs() < 1e-6);
    }
}
