//! SGD with momentum and coupled weight decay, and the step learning-rate
//! schedule.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Piecewise-constant learning rate: `(first epoch, lr)` pairs with 0-based
/// epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    steps: Vec<(usize, f64)>,
}

impl LrSchedule {
    pub fn new(steps: Vec<(usize, f64)>) -> Result<Self> {
        if steps.first().map(|s| s.0) != Some(0) {
            return Err(Error::Config("learning-rate schedule must start at epoch 0".into()));
        }
        if steps.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Config("learning-rate schedule epochs must be strictly increasing".into()));
        }
        if let Some(&(_, lr)) = steps.iter().find(|s| !(s.1 >= 0.0 && s.1.is_finite())) {
            return Err(Error::Config(format!("invalid learning rate {lr}")));
        }
        Ok(Self { steps })
    }

    /// 1e-3, then 1e-4 from epoch 20 and 1e-5 from epoch 50.
    pub fn standard() -> Self {
        Self::new(alloc::vec![(0, 1e-3), (20, 1e-4), (50, 1e-5)]).expect("valid schedule")
    }

    pub fn steps(&self) -> &[(usize, f64)] {
        &self.steps
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.steps.iter().rev().find(|s| s.0 <= epoch).map(|s| s.1).expect("schedule starts at 0")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { momentum: 0.9, weight_decay: 5e-4 }
    }
}

/// `d = g + wd·θ`, `v ← m·v + d` (`v = d` on the first step), `θ ← θ − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub config: SgdConfig,
    velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(config: SgdConfig, params: &ParamStore<T>) -> Self {
        Self { config, velocity: (0..params.len()).map(|_| None).collect() }
    }

    pub fn velocity(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.velocity[id.index()].as_ref()
    }

    pub fn set_velocity(&mut self, id: ParamId, v: Tensor<T>) {
        self.velocity[id.index()] = Some(v);
    }

    /// Parameters without a gradient are left untouched, momentum included.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: Vec<(ParamId, Tensor<T>)>, lr: f64) {
        let (m, wd, lr) = (T::from_f64(self.config.momentum), T::from_f64(self.config.weight_decay), T::from_f64(lr));
        for (id, mut d) in grads {
            assert_eq!(params.entry(id).kind, ParamKind::Weight, "gradient for a buffer");
            let theta = params.get(id);
            assert_eq!(theta.shape(), d.shape(), "gradient shape");
            if wd != T::ZERO {
                for (g, &p) in d.data_mut().iter_mut().zip(theta.data()) {
                    *g += wd * p;
                }
            }
            let v = match &mut self.velocity[id.index()] {
                Some(v) => {
                    for (vi, &di) in v.data_mut().iter_mut().zip(d.data()) {
                        *vi = m * *vi + di;
                    }
                    v
                }
                slot @ None => slot.insert(d),
            };
            let theta = params.get_mut(id);
            for (p, &vi) in theta.data_mut().iter_mut().zip(v.data()) {
                *p -= lr * vi;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Builder;
    use crate::tensor::Shape;

    fn store() -> (ParamStore<f64>, ParamId) {
        let mut b = Builder::<f64>::new(5);
        let id = b.normal("w", Shape::new(1, 1, 2, 3), 1.0);
        (b.finish(), id)
    }

    #[test]
    fn schedule_boundaries() {
        let s = LrSchedule::standard();
        assert_eq!(s.lr_at(0), 1e-3);
        assert_eq!(s.lr_at(19), 1e-3);
        assert_eq!(s.lr_at(20), 1e-4);
        assert_eq!(s.lr_at(49), 1e-4);
        assert_eq!(s.lr_at(50), 1e-5);
        assert_eq!(s.lr_at(99), 1e-5);
        assert!(LrSchedule::new(alloc::vec![(0, 1.0), (5, 0.1), (5, 0.01)]).is_err());
        assert!(LrSchedule::new(alloc::vec![(1, 1.0)]).is_err());
    }

    #[test]
    fn zero_lr_leaves_parameters_bit_identical() {
        let (mut p, id) = store();
        let before = p.get(id).clone();
        let mut sgd = Sgd::new(SgdConfig::default(), &p);
        sgd.step(&mut p, alloc::vec![(id, Tensor::full(before.shape(), 3.0))], 0.0);
        assert_eq!(p.get(id), &before);
    }

    #[test]
    fn weight_decay_scales_by_one_minus_lr_wd() {
        let (mut p, id) = store();
        let before = p.get(id).clone();
        let mut sgd = Sgd::new(SgdConfig::default(), &p);
        sgd.step(&mut p, alloc::vec![(id, Tensor::zeros(before.shape()))], 0.1);
        for (&a, &b) in p.get(id).data().iter().zip(before.data()) {
            assert!((a - b * (1.0 - 0.1 * 5e-4)).abs() <= 1e-15 * b.abs());
        }
    }

    #[test]
    fn momentum_closed_form() {
        let (mut p, id) = store();
        let cfg = SgdConfig { momentum: 0.5, weight_decay: 0.0 };
        let mut sgd = Sgd::new(cfg, &p);
        let g = Tensor::full(p.get(id).shape(), 1.25);
        sgd.step(&mut p, alloc::vec![(id, g.clone())], 0.01);
        sgd.step(&mut p, alloc::vec![(id, g.clone())], 0.01);
        assert!(sgd.velocity(id).unwrap().data().iter().all(|&v| v == 1.25 * (1.0 + 0.5)));
    }
}
