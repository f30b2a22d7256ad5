//! Named parameter storage and per-pass binding onto a tape.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::RngCore;

use crate::grad::float::Float;
use crate::grad::tape::{Gradients, Tape, Var};
use crate::grad::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Receives gradients and optimizer updates.
    Trainable,
    /// Part of the model but held fixed.
    Frozen,
    /// Non-learned state such as running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
struct Entry<T: Float> {
    name: String,
    value: Tensor<T>,
    kind: ParamKind,
}

/// Ordered, name-addressed collection of model tensors.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Float = f32> {
    entries: Vec<Entry<T>>,
    by_name: BTreeMap<String, usize>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    /// Panics on duplicate names; module construction is static.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "parameter {name:?} registered twice");
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry { name, value, kind });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn set_kind(&mut self, id: ParamId, kind: ParamKind) {
        self.entries[id.0].kind = kind;
    }

    /// Replace a value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) {
        let e = &mut self.entries[id.0];
        assert_eq!(e.value.shape(), value.shape(), "shape change for parameter {}", e.name);
        e.value = value;
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Ids whose name starts with `prefix`.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.entries
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.name.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.kind(id) == ParamKind::Trainable).collect()
    }

    pub fn num_elements(&self, kind: ParamKind) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == kind)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn builder<'a>(&'a mut self, rng: &'a mut dyn RngCore) -> ParamBuilder<'a, T> {
        ParamBuilder {
            store: self,
            rng,
            prefix: String::new(),
        }
    }
}

/// Registers parameters under a dotted name prefix.
pub struct ParamBuilder<'a, T: Float> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut dyn RngCore,
    prefix: String,
}

impl<'a, T: Float> ParamBuilder<'a, T> {
    /// Child builder with `name` appended to the prefix.
    pub fn pp(&mut self, name: impl AsRef<str>) -> ParamBuilder<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn rng(&mut self) -> &mut dyn RngCore {
        self.rng
    }

    pub fn tensor(&mut self, name: &str, value: Tensor<T>, kind: ParamKind) -> ParamId {
        let full = self.full(name);
        self.store.insert(full, value, kind)
    }

    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    pub fn fan_in_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = Tensor::uniform(shape.to_vec(), -bound, bound, &mut *self.rng);
        self.tensor(name, t, ParamKind::Trainable)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], lo: f64, hi: f64) -> ParamId {
        let t = Tensor::uniform(shape.to_vec(), lo, hi, &mut *self.rng);
        self.tensor(name, t, ParamKind::Trainable)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.tensor(name, Tensor::full(shape.to_vec(), T::lit(value)), ParamKind::Trainable)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.tensor(name, Tensor::full(shape.to_vec(), T::lit(value)), ParamKind::Buffer)
    }
}

/// One forward pass: a tape plus lazily bound parameters.
///
/// Each parameter is bound once per pass, so every use shares one variable
/// and gradients from all uses accumulate on it.
pub struct Ctx<'s, T: Float = f32> {
    tape: Tape<T>,
    store: &'s ParamStore<T>,
    bound: RefCell<BTreeMap<ParamId, Var<T>>>,
    training: bool,
    buffer_updates: RefCell<Vec<(ParamId, Tensor<T>)>>,
}

impl<'s, T: Float> Ctx<'s, T> {
    pub fn new(store: &'s ParamStore<T>, training: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: RefCell::new(BTreeMap::new()),
            training,
            buffer_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn param(&self, id: ParamId) -> Var<T> {
        if let Some(v) = self.bound.borrow().get(&id) {
            return v.clone();
        }
        let value = self.store.get(id).clone();
        let var = match self.store.kind(id) {
            ParamKind::Trainable => self.tape.leaf(value),
            ParamKind::Frozen | ParamKind::Buffer => self.tape.constant(value),
        };
        self.bound.borrow_mut().insert(id, var.clone());
        var
    }

    /// Variable already bound for `id`, if any use happened in this pass.
    pub fn bound(&self, id: ParamId) -> Option<Var<T>> {
        self.bound.borrow().get(&id).cloned()
    }

    pub fn bound_ids(&self) -> Vec<ParamId> {
        self.bound.borrow().keys().copied().collect()
    }

    pub fn input(&self, value: Tensor<T>) -> Var<T> {
        self.tape.constant(value)
    }

    pub fn leaf(&self, value: Tensor<T>) -> Var<T> {
        self.tape.leaf(value)
    }

    pub fn no_grad<R>(&self, f: impl FnOnce() -> R) -> R {
        self.tape.no_grad(f)
    }

    pub fn backward(&self, loss: &Var<T>) -> Gradients<T> {
        self.tape.backward(loss)
    }

    /// Gradients of every bound trainable parameter (zeros when unreached).
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
        self.bound
            .borrow()
            .iter()
            .filter(|(id, _)| self.store.kind(**id) == ParamKind::Trainable)
            .map(|(id, v)| (*id, grads.get_or_zeros(v)))
            .collect()
    }

    pub fn push_buffer_update(&self, id: ParamId, value: Tensor<T>) {
        self.buffer_updates.borrow_mut().push((id, value));
    }

    pub fn take_buffer_updates(&self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.buffer_updates.borrow_mut())
    }
}
