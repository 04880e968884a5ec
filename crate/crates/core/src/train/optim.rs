//! SGD with momentum and the cosine-annealing warm-restart schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub lr_max: f64,
    pub lr_min: f64,
    /// Length of the first cycle in epochs.
    pub t0: f64,
    /// Each cycle is `mult` times longer than the previous one.
    pub mult: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            lr_max: 1e-2,
            lr_min: 1e-5,
            t0: 10.0,
            mult: 2.0,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_min < self.lr_max && self.lr_max.is_finite()) {
            return Err(Error::config(format!("need 0 < lr_min < lr_max, got {} and {}", self.lr_min, self.lr_max)));
        }
        if !(self.t0 > 0.0 && self.mult >= 1.0 && self.mult.is_finite()) {
            return Err(Error::config("restart t0 must be positive and mult >= 1"));
        }
        Ok(())
    }

    /// `(T_cur, T_i)`: position inside the current cycle and its length.
    pub fn cycle_position(&self, progress: f64) -> (f64, f64) {
        let mut start = 0.0;
        let mut len = self.t0;
        while progress >= start + len {
            start += len;
            len *= self.mult;
        }
        (progress - start, len)
    }

    pub fn lr_in_cycle(&self, t_cur: f64, t_i: f64) -> f64 {
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (PI * t_cur / t_i).cos())
    }
}

/// Learning rate after `progress` epochs (fractional within an epoch).
pub fn lr_at(progress: f64, s: &Schedule) -> f64 {
    let (t_cur, t_i) = s.cycle_position(progress.max(0.0));
    s.lr_in_cycle(t_cur, t_i)
}

/// Momentum SGD: `v <- momentum * v + g`, `theta <- theta - lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: f64,
    velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: Vec::new(),
        }
    }

    /// Updates every trainable entry, then clears all gradients.
    pub fn step(&mut self, ps: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.velocity.len() < ps.len() {
            self.velocity.resize(ps.len(), None);
        }
        let (lr, mu) = (T::lit(lr), T::lit(self.momentum));
        for (p, v) in ps.entries_mut().iter_mut().zip(&mut self.velocity) {
            if !p.trainable() {
                continue;
            }
            let v = v.get_or_insert_with(|| Tensor::zeros(p.value.dims()));
            if v.dims() != p.value.dims() || p.grad.dims() != p.value.dims() {
                return Err(Error::state(format!(
                    "optimizer state for {} has shape {:?}, parameter {:?}",
                    p.name,
                    v.dims(),
                    p.value.dims()
                )));
            }
            for ((x, vel), &g) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(p.grad.data()) {
                *vel = mu * *vel + g;
                *x -= lr * *vel;
            }
        }
        ps.zero_grad();
        Ok(())
    }
}

/// One step of a fresh momentum SGD.
pub fn sgd_step<T: Real>(ps: &mut ParamStore<T>, lr: f64, momentum: f64) -> Result<()> {
    Sgd::new(momentum).step(ps, lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Group;

    #[test]
    fn schedule_endpoints() {
        let s = Schedule::default();
        for start in [0.0, 10.0, 30.0, 70.0] {
            assert!((lr_at(start, &s) - 1e-2).abs() < 1e-15);
        }
        for (start, len) in [(0.0, 10.0), (10.0, 20.0), (30.0, 40.0)] {
            assert!((s.lr_in_cycle(len, len) - 1e-5).abs() < 1e-15);
            assert!((lr_at(start + len / 2.0, &s) - 5.005e-3).abs() < 1e-9);
            assert!((lr_at(start + len - 1e-9, &s) - 1e-5).abs() < 1e-9);
        }
        assert_eq!(s.cycle_position(35.0), (5.0, 40.0));
    }

    #[test]
    fn plain_step_and_frozen() {
        let mut ps = ParamStore::<f64>::new();
        let a = ps.add("a", Group::Ae, Tensor::full(&[1], 1.0));
        let v = ps.add("v", Group::Ve, Tensor::full(&[1], 1.0));
        ps.entries_mut()[0].grad.fill(0.5);
        ps.entries_mut()[1].grad.fill(0.5);
        ps.set_frozen(Group::Ve, true);
        sgd_step(&mut ps, 0.1, 0.0).unwrap();
        assert!((ps.value(a).data()[0] - 0.95).abs() < 1e-15);
        assert_eq!(ps.value(v).data()[0], 1.0);
        assert!(ps.entries().iter().all(|p| p.grad.data()[0] == 0.0));
    }

    #[test]
    fn momentum_matches_hand_recursion() {
        let mut ps = ParamStore::<f64>::new();
        let a = ps.add("a", Group::Sc, Tensor::full(&[1], 2.0));
        let mut opt = Sgd::new(0.9);
        let (g1, g2, lr) = (0.3, -0.7, 0.05);
        ps.entries_mut()[0].grad.fill(g1);
        opt.step(&mut ps, lr).unwrap();
        ps.entries_mut()[0].grad.fill(g2);
        opt.step(&mut ps, lr).unwrap();
        let v1 = g1;
        let v2 = 0.9 * v1 + g2;
        let expect = 2.0 - lr * v1 - lr * v2;
        assert!((ps.value(a).data()[0] - expect).abs() < 1e-12);
    }
}
