//! Named parameter storage and the per-step forward session.

use std::collections::HashMap;

use crate::autodiff::{BatchStats, Gradients, Mode, RunningStats, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// How the optimizer treats an entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable, subject to weight decay.
    Weight,
    /// Trainable, exempt from weight decay (normalization affine terms, edge importance).
    NoDecay,
    /// Not trained by gradient; batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Ordered, named collection of model tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, kind: ParamKind, value: Tensor) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry { name: name.to_string(), kind, value });
        ParamId(self.entries.len() - 1)
    }

    /// Uniform initialization in `±1/√fan_in`.
    pub fn add_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut Rng) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.range(-bound, bound)).collect();
        self.add(name, ParamKind::Weight, Tensor::new(shape, data).expect("init shape"))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Replaces the value of `id`, requiring an identical shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::Load(format!(
                "parameter {} has shape {:?}, got {:?}",
                e.name,
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = value;
        Ok(())
    }

    /// Copies every entry of `other` whose name starts with `prefix` into the
    /// entry of the same name here. Missing names and shape mismatches fail.
    pub fn load_prefix(&mut self, other: &ParamStore, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for e in other.entries.iter().filter(|e| e.name.starts_with(prefix)) {
            let id = self
                .id(&e.name)
                .ok_or_else(|| Error::Load(format!("unexpected parameter {}", e.name)))?;
            self.set(id, e.value.clone())?;
            n += 1;
        }
        Ok(n)
    }
}

/// Batch-norm parameter handles: trainable affine terms plus running buffers.
#[derive(Clone, Copy, Debug)]
pub struct BatchNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl BatchNormParams {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(&format!("{prefix}.gamma"), ParamKind::NoDecay, Tensor::ones(&[dim])),
            beta: store.add(&format!("{prefix}.beta"), ParamKind::NoDecay, Tensor::zeros(&[dim])),
            mean: store.add(&format!("{prefix}.running_mean"), ParamKind::Buffer, Tensor::zeros(&[dim])),
            var: store.add(&format!("{prefix}.running_var"), ParamKind::Buffer, Tensor::ones(&[dim])),
        }
    }
}

/// Dense linear map `x·W + b`.
#[derive(Clone, Copy, Debug)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearParams {
    pub fn new(store: &mut ParamStore, prefix: &str, din: usize, dout: usize, rng: &mut Rng) -> Self {
        let w = store.add_uniform(&format!("{prefix}.w"), &[din, dout], din, rng);
        let b = store.add_uniform(&format!("{prefix}.b"), &[dout], din, rng);
        Self { w, b }
    }
}

struct StatUpdate {
    bn: BatchNormParams,
    stats: BatchStats,
}

/// One forward/backward pass over a [`ParamStore`].
///
/// Parameters are bound to tape leaves lazily, at most once per session.
pub struct Session<'s> {
    pub tape: Tape,
    pub mode: Mode,
    pub rng: Rng,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
    track_grads: bool,
    stat_updates: Vec<StatUpdate>,
}

impl<'s> Session<'s> {
    /// Session that records gradients for every trainable parameter.
    pub fn train(store: &'s ParamStore, mode: Mode, rng: Rng) -> Self {
        Self::build(store, mode, rng, true)
    }

    /// Eval-mode session without gradient tracking.
    pub fn inference(store: &'s ParamStore) -> Self {
        Self::build(store, Mode::Eval, Rng::new(0, 0), false)
    }

    fn build(store: &'s ParamStore, mode: Mode, rng: Rng, track_grads: bool) -> Self {
        Self {
            tape: Tape::new(),
            mode,
            rng,
            store,
            bound: vec![None; store.len()],
            track_grads,
            stat_updates: Vec::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let e = self.store.entry(id);
        let rg = self.track_grads && e.kind != ParamKind::Buffer;
        let v = self.tape.leaf(e.value.clone(), rg);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.tape.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Batch norm over the last axis; train mode queues a running-stat update.
    pub fn batch_norm(&mut self, x: Var, bn: &BatchNormParams) -> Result<Var> {
        let gamma = self.param(bn.gamma);
        let beta = self.param(bn.beta);
        let running = RunningStats {
            mean: self.store.get(bn.mean).data(),
            var: self.store.get(bn.var).data(),
        };
        let (y, stats) = self.tape.batch_norm(x, gamma, beta, self.mode, running, BN_EPS)?;
        if let Some(stats) = stats {
            self.stat_updates.push(StatUpdate { bn: *bn, stats });
        }
        Ok(y)
    }

    /// `x [..×din] · W + b`.
    pub fn linear(&mut self, x: Var, lin: &LinearParams) -> Result<Var> {
        let w = self.param(lin.w);
        let b = self.param(lin.b);
        let y = self.tape.matmul(x, w)?;
        self.tape.add(y, b)
    }

    /// Runs backward and returns gradients of every bound trainable parameter.
    pub fn backward(&mut self, loss: Var) -> Result<Vec<(ParamId, Tensor)>> {
        let mut grads: Gradients = self.tape.backward(loss)?;
        let mut out = Vec::new();
        for (i, v) in self.bound.iter().enumerate() {
            if let Some(v) = v {
                if self.tape.requires_grad(*v) {
                    out.push((ParamId(i), grads.take(*v)));
                }
            }
        }
        Ok(out)
    }

    /// Moves out the queued statistics so the store can be mutated while the
    /// session's borrow ends.
    pub fn into_stat_updates(self) -> PendingStats {
        PendingStats(self.stat_updates)
    }
}

/// Running-statistic updates (momentum 0.1) detached from their session.
pub struct PendingStats(Vec<StatUpdate>);

impl PendingStats {
    pub fn apply(self, store: &mut ParamStore) {
        for u in self.0 {
            let mean = store.get_mut(u.bn.mean).data_mut();
            for (m, s) in mean.iter_mut().zip(&u.stats.mean) {
                *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * s;
            }
            let var = store.get_mut(u.bn.var).data_mut();
            for (v, s) in var.iter_mut().zip(&u.stats.var) {
                *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * s;
            }
        }
    }

    /// Overwrites the running statistics with the batch statistics, so an
    /// eval-mode pass reproduces the recorded train-mode activations.
    pub fn freeze(self, store: &mut ParamStore) {
        for u in self.0 {
            store.get_mut(u.bn.mean).data_mut().copy_from_slice(&u.stats.mean);
            store.get_mut(u.bn.var).data_mut().copy_from_slice(&u.stats.var);
        }
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}
