//! Flat-vector optimizers. Models expose their trainable partition as a flat
//! `Vec<f64>` in a documented field order; optimizer state is a parallel
//! vector, so the update is a single fixed-order pass.

/// Sign-momentum optimizer (Lion form).
///
/// Per step, with old momentum `m` and gradient `g`:
/// `u = sign(b1*m + (1-b1)*g)`, `m <- b2*m + (1-b2)*g`,
/// `p <- p - lr*(u + wd*p)`. `sign(0) = 0`.
#[derive(Clone, Debug)]
pub struct Lion {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    momentum: Vec<f64>,
}

impl Lion {
    pub fn new(n: usize, lr: f64, weight_decay: f64, beta1: f64, beta2: f64) -> Self {
        Lion {
            lr,
            weight_decay,
            beta1,
            beta2,
            momentum: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.momentum.len());
        assert_eq!(params.len(), grads.len());
        for i in 0..params.len() {
            let interp = self.beta1 * self.momentum[i] + (1.0 - self.beta1) * grads[i];
            let update = sign(interp);
            self.momentum[i] = self.beta2 * self.momentum[i] + (1.0 - self.beta2) * grads[i];
            params[i] -= self.lr * (update + self.weight_decay * params[i]);
        }
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Adagrad.
#[derive(Clone, Debug)]
pub struct Adagrad {
    pub lr: f64,
    pub eps: f64,
    acc: Vec<f64>,
}

impl Adagrad {
    pub fn new(n: usize, lr: f64) -> Self {
        Adagrad {
            lr,
            eps: 1e-8,
            acc: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.acc.len());
        assert_eq!(params.len(), grads.len());
        for i in 0..params.len() {
            let g = grads[i];
            self.acc[i] += g * g;
            params[i] -= self.lr * g / (self.acc[i].sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lion_zero_gradient_zero_momentum_applies_only_decay() {
        let mut opt = Lion::new(3, 0.1, 0.5, 0.9, 0.99);
        let mut p = vec![1.0, -2.0, 0.5];
        let g = vec![0.0; 3];
        opt.step(&mut p, &g);
        // sign(0) = 0, so p <- p - lr*wd*p
        assert!((p[0] - (1.0 - 0.1 * 0.5)).abs() < 1e-15);
        assert!((p[1] - (-2.0 + 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn lion_uses_old_momentum_for_update_direction() {
        let mut opt = Lion::new(1, 1.0, 0.0, 0.9, 0.99);
        // First step: m=0, g=-1 => u = sign(-0.1) = -1 => p increases by lr.
        let mut p = vec![0.0];
        opt.step(&mut p, &[-1.0]);
        assert_eq!(p[0], 1.0);
        // Momentum is now b2*0 + 0.01*(-1) = -0.01.
        // Second step with g=+0.2: interp = 0.9*(-0.01) + 0.1*0.2 = 0.011 > 0.
        opt.step(&mut p, &[0.2]);
        assert_eq!(p[0], 0.0);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut opt = Adam::new(1, 0.1);
        let mut p = vec![3.0];
        for _ in 0..200 {
            let g = vec![2.0 * p[0]];
            opt.step(&mut p, &g);
        }
        assert!(p[0].abs() < 0.05, "adam failed to converge: {}", p[0]);
    }

    #[test]
    fn adagrad_descends_a_quadratic() {
        let mut opt = Adagrad::new(1, 0.5);
        let mut p = vec![3.0];
        for _ in 0..500 {
            let g = vec![2.0 * p[0]];
            opt.step(&mut p, &g);
        }
        assert!(p[0].abs() < 0.05, "adagrad failed to converge: {}", p[0]);
    }
}
