use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

/// Cosine annealing from `initial_lr` at step 0 to `min_lr` at `total_steps`.
/// A zero-length schedule stays at `initial_lr`.
pub fn cosine_lr(step: usize, total_steps: usize, initial_lr: f64, min_lr: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Validation(format!("step {step} is past the last step {total_steps}")));
    }
    if total_steps == 0 {
        return Ok(initial_lr);
    }
    if step == total_steps {
        return Ok(min_lr);
    }
    let t = step as f64 / total_steps as f64;
    Ok(min_lr + 0.5 * (initial_lr - min_lr) * (1.0 + math::cos(math::PI * t)))
}

/// Adam with coupled L2 weight decay (`g += λθ` before the moment updates).
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// One update over parameter slots given in a fixed order.
    pub fn step<'a>(&mut self, lr: f64, slots: impl IntoIterator<Item = (&'a mut [f64], &'a [f64])>) {
        self.t += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for (k, (theta, grad)) in slots.into_iter().enumerate() {
            if self.m.len() <= k {
                self.m.push(vec![0.0; theta.len()]);
                self.v.push(vec![0.0; theta.len()]);
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..theta.len() {
                let g = grad[i] + self.weight_decay * theta[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                theta[i] -= lr * mh / (math::sqrt(vh) + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 1e-4, 5e-6).unwrap(), 1e-4);
        assert_eq!(cosine_lr(100, 100, 1e-4, 5e-6).unwrap(), 5e-6);
        assert!((cosine_lr(50, 100, 1e-4, 5e-6).unwrap() - 5.25e-5).abs() < 1e-18);
        assert!(cosine_lr(101, 100, 1e-4, 5e-6).is_err());
        assert_eq!(cosine_lr(0, 0, 1e-4, 5e-6).unwrap(), 1e-4);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        // With bias correction the first step is lr·sign(g) up to eps.
        let mut opt = Adam::new(0.0);
        let mut theta = vec![1.0, -2.0, 0.5];
        let g = vec![0.3, -4.0, 1e-3];
        opt.step(0.01, [(theta.as_mut_slice(), g.as_slice())]);
        let want = [0.99, -1.99, 0.49];
        for (a, b) in theta.iter().zip(want) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn adam_matches_hand_rolled_two_steps() {
        let mut opt = Adam::new(0.1);
        let mut theta = vec![2.0];
        let grads = [0.5, -1.5];
        let (mut m, mut v, mut th) = (0.0f64, 0.0f64, 2.0f64);
        for (t, &g0) in grads.iter().enumerate() {
            opt.step(0.05, [(theta.as_mut_slice(), &[g0][..])]);
            let g = g0 + 0.1 * th;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let k = (t + 1) as i32;
            let mh = m / (1.0 - libm::pow(0.9, k as f64));
            let vh = v / (1.0 - libm::pow(0.999, k as f64));
            th -= 0.05 * mh / (libm::sqrt(vh) + 1e-8);
        }
        assert!((theta[0] - th).abs() < 1e-15);
        assert_eq!(opt.steps_taken(), 2);
    }
}
