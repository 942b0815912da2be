use serde::{Deserialize, Serialize};

use super::{Module, Tensor};
use crate::error::{EtpError, Result};

/// Step decay: `base * decay^floor(iteration / every)`.
///
/// With a floor set, decay stops at the first rate below the floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub decay: f64,
    pub every: usize,
    pub floor: Option<f64>,
}

impl LrSchedule {
    pub fn rate(&self, iteration: usize) -> f64 {
        let steps = iteration / self.every.max(1);
        let mut lr = self.base;
        for _ in 0..steps {
            if let Some(floor) = self.floor {
                if lr < floor {
                    break;
                }
            }
            lr *= self.decay;
        }
        lr
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base > 0.0 && self.base.is_finite()) {
            return Err(EtpError::invalid("learning rate must be positive"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(EtpError::invalid("decay factor must lie in (0,1]"));
        }
        if self.every == 0 {
            return Err(EtpError::invalid("decay interval must be at least 1"));
        }
        Ok(())
    }
}

/// SGD with classical momentum: `v <- mu v - lr g; w <- w + v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub schedule: LrSchedule,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, schedule: LrSchedule) -> Self {
        Self {
            momentum,
            schedule,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step<M: Module + ?Sized>(&mut self, model: &mut M, iteration: usize) -> Result<()> {
        let lr = self.schedule.rate(iteration);
        let mut params = model.params_mut();
        if let Some(bad) = params.iter().find(|p| !p.grad.is_finite()) {
            return Err(EtpError::NonFiniteGradient(bad.name.clone()));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(EtpError::Training(format!(
                "optimizer tracks {} parameters, model has {}",
                self.velocity.len(),
                params.len()
            )));
        }
        for (p, v) in params.iter_mut().zip(self.velocity.iter_mut()) {
            if v.shape() != p.value.shape() {
                return Err(EtpError::Training(format!(
                    "velocity shape {:?} does not match parameter `{}`",
                    v.shape(),
                    p.name
                )));
            }
            for ((vel, g), w) in v.data_mut().iter_mut().zip(p.grad.data()).zip(p.value.data_mut()) {
                *vel = self.momentum * *vel - lr * g;
                *w += *vel;
            }
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Param;

    struct One(Param);

    impl Module for One {
        fn params(&self) -> Vec<&Param> {
            vec![&self.0]
        }
        fn params_mut(&mut self) -> Vec<&mut Param> {
            vec![&mut self.0]
        }
    }

    fn schedule(base: f64) -> LrSchedule {
        LrSchedule {
            base,
            decay: 0.1,
            every: 5000,
            floor: None,
        }
    }

    #[test]
    fn plain_gradient_step() {
        let mut m = One(Param::zeros("w", &[1]));
        m.0.grad.data_mut()[0] = 1.0;
        let mut opt = Sgd::new(0.0, schedule(0.1));
        opt.step(&mut m, 0).unwrap();
        assert!((m.0.value.data()[0] + 0.1).abs() < 1e-15);
        assert_eq!(m.0.grad.data()[0], 0.0);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut m = One(Param::new("w", Tensor::row_vector(vec![0.3, -2.0])));
        let before = m.0.value.clone();
        let mut opt = Sgd::new(0.9, schedule(0.1));
        for it in 0..10 {
            opt.step(&mut m, it).unwrap();
        }
        assert_eq!(m.0.value, before);
    }

    #[test]
    fn momentum_accumulates() {
        let mut m = One(Param::zeros("w", &[1]));
        let mut opt = Sgd::new(0.9, schedule(1.0));
        m.0.grad.data_mut()[0] = 1.0;
        opt.step(&mut m, 0).unwrap();
        m.0.grad.data_mut()[0] = 1.0;
        opt.step(&mut m, 1).unwrap();
        // v1 = -1, v2 = -0.9 - 1
        assert!((m.0.value.data()[0] + 2.9).abs() < 1e-12);
    }

    #[test]
    fn step_decay_schedule() {
        let s = schedule(0.1);
        assert_eq!(s.rate(0), 0.1);
        assert_eq!(s.rate(4999), 0.1);
        assert!((s.rate(5000) - 0.01).abs() < 1e-15);
        assert!((s.rate(10_000) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn floor_stops_decay_once_below() {
        let s = LrSchedule {
            floor: Some(1e-5),
            ..schedule(0.1)
        };
        let last = s.rate(90_000);
        assert!(last < 1e-5 && last > 1e-7, "{last}");
        assert_eq!(s.rate(90_000), s.rate(50_000));
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut m = One(Param::zeros("gru.w_r", &[2]));
        m.0.grad.data_mut()[1] = f64::NAN;
        let err = Sgd::new(0.9, schedule(0.1)).step(&mut m, 0).unwrap_err();
        assert!(matches!(err, EtpError::NonFiniteGradient(ref n) if n == "gru.w_r"));
        assert_eq!(m.0.value.data(), &[0.0, 0.0]);
    }
}
