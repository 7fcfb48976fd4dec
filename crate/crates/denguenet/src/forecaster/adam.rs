//! Adam over a flat parameter vector, plus the reduce-on-plateau schedule.

pub(crate) struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(theta.len(), grad.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            theta[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Halves the learning rate when the validation loss has not improved for
/// `patience` epochs; never below `floor`, never stops training.
pub(crate) struct PlateauScheduler {
    factor: f64,
    patience: usize,
    floor: f64,
    best: f64,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize, floor: f64) -> Self {
        PlateauScheduler { factor, patience, floor, best: f64::INFINITY, stale: 0 }
    }

    /// Observes one epoch's validation loss; returns the new learning rate
    /// when a reduction fires.
    pub fn observe(&mut self, val_loss: f64, current_lr: f64) -> Option<f64> {
        if val_loss < self.best {
            self.best = val_loss;
            self.stale = 0;
            return None;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.stale = 0;
            let next = (current_lr * self.factor).max(self.floor);
            if next < current_lr {
                return Some(next);
            }
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut adam = Adam::new(1, 0.1);
        let mut theta = vec![5.0];
        for _ in 0..500 {
            let grad = vec![2.0 * (theta[0] - 3.0)];
            adam.step(&mut theta, &grad);
        }
        assert!((theta[0] - 3.0).abs() < 0.05, "theta {}", theta[0]);
    }

    #[test]
    fn plateau_halves_after_patience_and_respects_floor() {
        let mut sched = PlateauScheduler::new(0.5, 3, 1e-6);
        let mut lr = 8e-6;
        assert_eq!(sched.observe(1.0, lr), None); // improvement
        assert_eq!(sched.observe(1.0, lr), None); // stale 1
        assert_eq!(sched.observe(1.0, lr), None); // stale 2
        let cut = sched.observe(1.0, lr); // stale 3 -> reduce
        assert_eq!(cut, Some(4e-6));
        lr = cut.unwrap();
        for _ in 0..2 {
            assert_eq!(sched.observe(1.0, lr), None);
        }
        assert_eq!(sched.observe(1.0, lr), Some(2e-6));
        assert_eq!(sched.observe(1.0, 2e-6), None);
        assert_eq!(sched.observe(1.0, 2e-6), None);
        assert_eq!(sched.observe(1.0, 2e-6), Some(1e-6));
        // At the floor, no further reductions fire.
        for _ in 0..10 {
            assert_eq!(sched.observe(1.0, 1e-6), None);
        }
    }
}
