//! Adam over a flat parameter vector, and the training budget shared by all fits.

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainBudget {
    pub epochs: usize,
    pub learning_rate: f64,
    /// When set, the step decays geometrically to this value at the last epoch.
    pub final_learning_rate: Option<f64>,
    pub seed: u64,
    /// Independent initializations tried by `fit_function`; the best is kept.
    pub restarts: usize,
    /// Samples per update for operator training; `None` is full batch.
    pub batch_size: Option<usize>,
    /// Rescale the rank layers to the RMS norms of the training data before the first step.
    pub scale_init: bool,
}

impl TrainBudget {
    pub fn new(epochs: usize, learning_rate: f64, seed: u64) -> Self {
        Self {
            epochs,
            learning_rate,
            final_learning_rate: None,
            seed,
            restarts: 1,
            batch_size: None,
            scale_init: true,
        }
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = Some(batch_size);
        self
    }

    pub fn with_scale_init(mut self, on: bool) -> Self {
        self.scale_init = on;
        self
    }

    pub fn with_decay(mut self, final_learning_rate: f64) -> Self {
        self.final_learning_rate = Some(final_learning_rate);
        self
    }

    pub fn with_restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning rate must be positive"));
        }
        if let Some(f) = self.final_learning_rate {
            if !(f > 0.0 && f.is_finite()) {
                return Err(invalid("final learning rate must be positive"));
            }
        }
        if self.batch_size == Some(0) {
            return Err(invalid("batch size must be positive"));
        }
        if self.restarts == 0 {
            return Err(invalid("at least one restart is required"));
        }
        Ok(())
    }

    pub fn rate_at(&self, epoch: usize) -> f64 {
        match self.final_learning_rate {
            None => self.learning_rate,
            Some(f) => {
                let t = if self.epochs > 1 {
                    epoch as f64 / (self.epochs - 1) as f64
                } else {
                    0.0
                };
                self.learning_rate * (f / self.learning_rate).powf(t)
            }
        }
    }
}

impl Default for TrainBudget {
    fn default() -> Self {
        Self::new(1000, 1e-3, 0)
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut opt = Adam::new(2);
        for _ in 0..3000 {
            let g = vec![2.0 * (x[0] - 1.0), 20.0 * (x[1] + 0.5)];
            opt.step(&mut x, &g, 1e-2);
        }
        assert!((x[0] - 1.0).abs() < 1e-3 && (x[1] + 0.5).abs() < 1e-3);
    }

    #[test]
    fn first_step_has_learning_rate_magnitude() {
        let mut x = vec![0.0];
        Adam::new(1).step(&mut x, &[123.0], 0.01);
        assert!((x[0] + 0.01).abs() < 1e-9);
    }

    #[test]
    fn decay_schedule_endpoints() {
        let b = TrainBudget::new(11, 1e-2, 0).with_decay(1e-4);
        assert!((b.rate_at(0) - 1e-2).abs() < 1e-15);
        assert!((b.rate_at(10) - 1e-4).abs() < 1e-15);
        assert!((b.rate_at(5) - 1e-3).abs() < 1e-15);
        assert!(TrainBudget::new(1, 0.0, 0).validate().is_err());
    }
}
