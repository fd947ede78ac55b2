//! Named parameter storage, model construction scopes and the per-forward
//! binding of parameters to tape leaves.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::rc::Rc;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::cell::RefCell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Optimised by gradient descent.
    Weight,
    /// State carried alongside the weights (normalisation running statistics).
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    value: Rc<Tensor<T>>,
}

impl<T: Real> ParamEntry<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: BTreeMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), by_name: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: String, kind: ParamKind, value: Tensor<T>) -> ParamId {
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id.0);
        self.entries.push(ParamEntry { name, kind, value: Rc::new(value) });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Rc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn shared(&self, id: ParamId) -> Rc<Tensor<T>> {
        self.entries[id.0].value.clone()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn weights(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.iter().filter(|(_, e)| e.kind == ParamKind::Weight).map(|(id, _)| id)
    }

    /// Number of trainable scalars.
    pub fn num_weights(&self) -> usize {
        self.iter().filter(|(_, e)| e.kind == ParamKind::Weight).map(|(_, e)| e.value.shape().len()).sum()
    }

    /// Names under `prefix` (inclusive of the trailing dot).
    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.by_name.range(prefix.to_string()..).map(|(k, _)| k.as_str()).take_while(move |k| k.starts_with(prefix))
    }

    /// Overwrite values by name. Every tensor must name an existing parameter
    /// of identical shape; all offenders are reported together.
    pub fn assign<'a, I>(&mut self, tensors: I) -> Result<usize>
    where
        I: IntoIterator<Item = (&'a str, Tensor<T>)>,
    {
        let mut unknown = Vec::new();
        let mut bad = Vec::new();
        let mut staged = Vec::new();
        for (name, t) in tensors {
            match self.find(name) {
                None => unknown.push(name.to_string()),
                Some(id) if self.get(id).shape() != t.shape() => {
                    bad.push(format!("{name} (expected {}, found {})", self.get(id).shape(), t.shape()));
                }
                Some(id) => staged.push((id, t)),
            }
        }
        if let Some(first) = unknown.into_iter().next() {
            return Err(Error::UnknownParameter(first));
        }
        if !bad.is_empty() {
            return Err(Error::ParameterShapes(bad));
        }
        let n = staged.len();
        for (id, t) in staged {
            *self.get_mut(id) = t;
        }
        Ok(n)
    }
}

/// Scoped constructor used while assembling a network: every parameter name
/// is the dotted path of the scopes it was created in.
pub struct Builder<T> {
    store: ParamStore<T>,
    path: Vec<String>,
    rng: ChaCha8Rng,
}

impl<T: Real> Builder<T> {
    pub fn new(seed: u64) -> Self {
        Self { store: ParamStore::new(), path: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.path.push(name.to_string());
        let r = f(self);
        self.path.pop();
        r
    }

    fn full_name(&self, leaf: &str) -> String {
        let mut s = String::new();
        for p in &self.path {
            s.push_str(p);
            s.push('.');
        }
        s.push_str(leaf);
        s
    }

    pub fn constant(&mut self, leaf: &str, kind: ParamKind, shape: Shape, value: f64) -> ParamId {
        let name = self.full_name(leaf);
        self.store.insert(name, kind, Tensor::full(shape, T::from_f64(value)))
    }

    /// Zero-mean normal initialisation.
    pub fn normal(&mut self, leaf: &str, shape: Shape, std: f64) -> ParamId {
        let name = self.full_name(leaf);
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64(z * std)
        });
        self.store.insert(name, ParamKind::Weight, t)
    }

    pub fn finish(self) -> ParamStore<T> {
        self.store
    }
}

/// Batch statistics observed during a training forward pass, to be folded
/// into the running averages once the pass is complete.
#[derive(Clone, Debug)]
pub struct NormUpdate<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Binds parameters to a tape for one forward pass.
pub struct Ctx<'a, T: Real> {
    pub tape: &'a Tape<T>,
    params: &'a ParamStore<T>,
    mode: Mode,
    bound: RefCell<Vec<Option<Var<T>>>>,
    norm_updates: RefCell<Vec<NormUpdate<T>>>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(tape: &'a Tape<T>, params: &'a ParamStore<T>, mode: Mode) -> Self {
        Self {
            tape,
            params,
            mode,
            bound: RefCell::new((0..params.len()).map(|_| None).collect()),
            norm_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn training(&self) -> bool {
        self.mode == Mode::Train
    }

    /// The parameter as a tape variable. Weights become differentiable leaves
    /// on a recording tape; a parameter used twice (weight tying) maps to the
    /// same leaf so its gradients accumulate.
    pub fn param(&self, id: ParamId) -> Var<T> {
        let mut bound = self.bound.borrow_mut();
        if let Some(v) = &bound[id.0] {
            return v.clone();
        }
        let entry = &self.params.entries[id.0];
        let v = match entry.kind {
            ParamKind::Weight => self.tape.leaf(entry.value.clone()),
            ParamKind::Buffer => self.tape.constant((*entry.value).clone()),
        };
        bound[id.0] = Some(v.clone());
        v
    }

    pub fn buffer(&self, id: ParamId) -> &Tensor<T> {
        self.params.get(id)
    }

    pub fn record_norm(&self, update: NormUpdate<T>) {
        self.norm_updates.borrow_mut().push(update);
    }

    pub fn take_norm_updates(&self) -> Vec<NormUpdate<T>> {
        core::mem::take(&mut *self.norm_updates.borrow_mut())
    }

    /// Gradients of every bound weight, in parameter order.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
        let bound = self.bound.borrow();
        let mut out = Vec::new();
        for (i, v) in bound.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = grads.take(v) {
                    out.push((ParamId(i), g));
                }
            }
        }
        out
    }
}

/// Fold batch statistics into running averages:
/// `running ← (1 − momentum)·running + momentum·batch`.
pub fn apply_norm_updates<T: Real>(params: &mut ParamStore<T>, updates: &[NormUpdate<T>], momentum: f64) {
    let m = T::from_f64(momentum);
    for u in updates {
        for (id, batch) in [(u.running_mean, &u.batch_mean), (u.running_var, &u.batch_var)] {
            let t = params.get_mut(id);
            for (r, &b) in t.data_mut().iter_mut().zip(batch) {
                *r = (T::ONE - m) * *r + m * b;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_scopes_names() {
        let mut b = Builder::<f32>::new(0);
        let id = b.scoped("gim", |b| b.scoped("reduce", |b| b.normal("weight", Shape::new(2, 2, 1, 1), 1.0)));
        let store = b.finish();
        assert_eq!(store.entry(id).name, "gim.reduce.weight");
        assert_eq!(store.find("gim.reduce.weight"), Some(id));
        assert_eq!(store.names_with_prefix("gim.").count(), 1);
    }

    #[test]
    fn assign_reports_every_bad_shape() {
        let mut b = Builder::<f32>::new(0);
        b.normal("a", Shape::new(1, 1, 1, 2), 1.0);
        b.normal("b", Shape::new(1, 1, 1, 3), 1.0);
        let mut s = b.finish();
        let err = s
            .assign([("a", Tensor::zeros(Shape::new(1, 1, 1, 1))), ("b", Tensor::zeros(Shape::new(1, 1, 1, 1)))])
            .unwrap_err();
        match err {
            Error::ParameterShapes(v) => assert_eq!(v.len(), 2),
            e => panic!("{e:?}"),
        }
        assert!(matches!(s.assign([("zzz", Tensor::zeros(Shape::scalar()))]), Err(Error::UnknownParameter(_))));
    }

    #[test]
    fn tied_parameter_binds_once() {
        let mut b = Builder::<f64>::new(0);
        let id = b.normal("w", Shape::scalar(), 1.0);
        let store = b.finish();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, Mode::Train);
        let a = ctx.param(id);
        let c = ctx.param(id);
        assert_eq!(a.id(), c.id());
        let sum = tape.combine(&[(a, 1.0), (c, 2.0)]);
        let mut g = tape.backward(&sum);
        let grads = ctx.param_grads(&mut g);
        assert_eq!(grads[0].1.data()[0], 3.0);
    }
}
