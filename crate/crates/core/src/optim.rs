//! SGD with momentum and decoupled-from-normalization weight decay.

use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: Vec::new() }
    }

    /// `v ← μv + g + wd·p; p ← p − lr·v`. Parameters of kind
    /// [`ParamKind::NoDecay`] skip the decay term; `lr(id)` picks the group rate.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: impl Fn(ParamId) -> f64) {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for (id, g) in grads {
            let kind = store.entry(*id).kind;
            if kind == ParamKind::Buffer {
                continue;
            }
            let wd = if kind == ParamKind::Weight { self.weight_decay } else { 0.0 };
            let rate = lr(*id);
            let p = store.get_mut(*id).data_mut();
            let v = self.velocity[id.index()].get_or_insert_with(|| vec![0.0; p.len()]);
            for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vi = self.momentum * *vi + gi + wd * *pi;
                *pi -= rate * *vi;
            }
        }
    }

    pub fn velocity(&self, id: ParamId) -> Option<&[f64]> {
        self.velocity.get(id.index()).and_then(|v| v.as_deref())
    }
}

/// Step decay by `gamma` at each milestone iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiStep {
    pub base: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl MultiStep {
    pub fn new(base: f64, milestones: Vec<usize>) -> Self {
        Self { base, milestones, gamma: 0.1 }
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| iteration >= m).count();
        self.base * self.gamma.powi(passed as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(kind: ParamKind, v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", kind, Tensor::vector(&[v]));
        (s, id)
    }

    #[test]
    fn plain_gradient_step() {
        let (mut s, id) = one(ParamKind::Weight, 2.0);
        Sgd::new(0.0, 0.0).step(&mut s, &[(id, Tensor::vector(&[0.5]))], |_| 1.0);
        assert_eq!(s.get(id).data(), &[1.5]);
    }

    #[test]
    fn zero_gradient_keeps_param_and_decays_velocity() {
        let (mut s, id) = one(ParamKind::Weight, 2.0);
        let mut opt = Sgd::new(0.9, 0.0);
        opt.step(&mut s, &[(id, Tensor::vector(&[1.0]))], |_| 0.0);
        opt.step(&mut s, &[(id, Tensor::vector(&[0.0]))], |_| 0.0);
        assert_eq!(opt.velocity(id).unwrap(), &[0.9]);
        opt.step(&mut s, &[(id, Tensor::vector(&[0.0]))], |_| 0.0);
        assert!((opt.velocity(id).unwrap()[0] - 0.81).abs() < 1e-15);
        assert_eq!(s.get(id).data(), &[2.0]);
    }

    #[test]
    fn weight_decay_substitution() {
        let (mut s, id) = one(ParamKind::Weight, 1.0);
        Sgd::new(0.0, 5e-4).step(&mut s, &[(id, Tensor::vector(&[0.0]))], |_| 0.1);
        assert!((s.get(id).data()[0] - 0.99995).abs() < 1e-15);

        let (mut s, id) = one(ParamKind::NoDecay, 1.0);
        Sgd::new(0.0, 5e-4).step(&mut s, &[(id, Tensor::vector(&[0.0]))], |_| 0.1);
        assert_eq!(s.get(id).data(), &[1.0]);
    }

    #[test]
    fn schedule_decays_at_milestones() {
        let m = MultiStep::new(0.1, vec![1000, 2000]);
        assert_eq!(m.lr_at(0), 0.1);
        assert!((m.lr_at(1000) - 0.01).abs() < 1e-15);
        assert!((m.lr_at(2500) - 0.001).abs() < 1e-15);
    }
}
