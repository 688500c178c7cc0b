//! Named, mutable parameter storage and deterministic initialization.

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::array::{numel, Array};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_PARAM: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Learned by gradient descent.
    Weight,
    /// State carried alongside the weights (e.g. batch-norm running stats).
    Buffer,
}

struct ParamInner {
    id: ParamId,
    name: String,
    kind: ParamKind,
    value: RefCell<Array>,
    trainable: Cell<bool>,
}

/// A shared handle to one named parameter tensor.
///
/// Cloning a `Param` clones the handle; all clones observe updates.
#[derive(Clone)]
pub struct Param(Rc<ParamInner>);

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Param")
            .field("name", &self.0.name)
            .field("shape", &self.0.value.borrow().shape())
            .field("trainable", &self.0.trainable.get())
            .finish()
    }
}

impl Param {
    fn new(name: String, kind: ParamKind, value: Array) -> Self {
        Self(Rc::new(ParamInner {
            id: ParamId(NEXT_PARAM.fetch_add(1, Ordering::Relaxed)),
            name,
            kind,
            value: RefCell::new(value),
            trainable: Cell::new(kind == ParamKind::Weight),
        }))
    }

    pub fn id(&self) -> ParamId {
        self.0.id
    }

    pub fn name(&self) -> &str {
        &self.0.name
    }

    pub fn kind(&self) -> ParamKind {
        self.0.kind
    }

    pub fn value(&self) -> Ref<'_, Array> {
        self.0.value.borrow()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.value.borrow().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.0.value.borrow().len()
    }

    pub fn set_value(&self, value: Array) -> Result<()> {
        let mut slot = self.0.value.borrow_mut();
        if slot.shape() != value.shape() {
            return Err(Error::InvalidInput(format!(
                "parameter {}: shape {:?} does not match {:?}",
                self.0.name,
                value.shape(),
                slot.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn update(&self, f: impl FnOnce(&mut Array)) {
        f(&mut self.0.value.borrow_mut());
    }

    /// Whether gradients flow into this parameter. Buffers never train.
    pub fn is_trainable(&self) -> bool {
        self.0.kind == ParamKind::Weight && self.0.trainable.get()
    }

    pub fn set_trainable(&self, on: bool) {
        self.0.trainable.set(on);
    }

    /// A fresh graph leaf holding a snapshot of the current value.
    pub fn tensor(&self) -> Tensor {
        Tensor::param_leaf(self.value().clone(), self.id(), self.is_trainable())
    }
}

/// Ordered registry of every parameter created through a [`Builder`].
#[derive(Clone, Default)]
pub struct ParamStore(Rc<RefCell<Vec<Param>>>);

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore").field("len", &self.len()).finish()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, p: Param) -> Result<()> {
        let mut list = self.0.borrow_mut();
        if list.iter().any(|q| q.name() == p.name()) {
            return Err(Error::InvalidInput(format!(
                "duplicate parameter name {}",
                p.name()
            )));
        }
        list.push(p);
        Ok(())
    }

    /// All parameters in creation order.
    pub fn params(&self) -> Vec<Param> {
        self.0.borrow().clone()
    }

    pub fn get(&self, name: &str) -> Option<Param> {
        self.0.borrow().iter().find(|p| p.name() == name).cloned()
    }

    pub fn with_prefix(&self, prefix: &str) -> Vec<Param> {
        self.0
            .borrow()
            .iter()
            .filter(|p| p.name().starts_with(prefix))
            .cloned()
            .collect()
    }

    pub fn trainable(&self) -> Vec<Param> {
        self.0
            .borrow()
            .iter()
            .filter(|p| p.is_trainable())
            .cloned()
            .collect()
    }

    pub fn len(&self) -> usize {
        self.0.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.borrow().is_empty()
    }

    /// Total number of scalar weights (buffers excluded).
    pub fn weight_count(&self) -> usize {
        self.0
            .borrow()
            .iter()
            .filter(|p| p.kind() == ParamKind::Weight)
            .map(Param::numel)
            .sum()
    }

    /// Named snapshot of every value, in creation order.
    pub fn snapshot(&self) -> Vec<(String, Array)> {
        self.0
            .borrow()
            .iter()
            .map(|p| (p.name().to_string(), p.value().clone()))
            .collect()
    }

    /// Copies named values into matching parameters. With `prefix`, only
    /// parameters under that prefix are considered and entry names are
    /// taken relative to it. Every considered parameter must be present.
    pub fn load_named(&self, entries: &[(String, Array)], prefix: &str) -> Result<usize> {
        let mut loaded = 0;
        for p in self.with_prefix(prefix) {
            let rel = &p.name()[prefix.len()..];
            let Some((_, value)) = entries.iter().find(|(n, _)| n == rel) else {
                return Err(Error::InvalidInput(format!(
                    "missing parameter {rel} in loaded weights"
                )));
            };
            p.set_value(value.clone())?;
            loaded += 1;
        }
        Ok(loaded)
    }
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Normal with std `sqrt(2 / fan_in)`.
    He { fan_in: usize },
    /// Normal with std `1 / sqrt(fan_in)`.
    Scaled { fan_in: usize },
    Normal { std: f64 },
    Uniform { bound: f64 },
}

/// Creates named parameters under a dotted prefix, drawing initial values
/// from a seeded generator so construction is reproducible.
#[derive(Clone)]
pub struct Builder {
    store: ParamStore,
    prefix: String,
    rng: Rc<RefCell<ChaCha8Rng>>,
}

impl Builder {
    pub fn new(store: &ParamStore, seed: u64) -> Self {
        Self {
            store: store.clone(),
            prefix: String::new(),
            rng: Rc::new(RefCell::new(ChaCha8Rng::seed_from_u64(seed))),
        }
    }

    pub fn sub(&self, name: impl AsRef<str>) -> Self {
        Self {
            store: self.store.clone(),
            prefix: format!("{}{}.", self.prefix, name.as_ref()),
            rng: self.rng.clone(),
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Param> {
        let value = self.sample(shape, init);
        let p = Param::new(format!("{}{}", self.prefix, name), ParamKind::Weight, value);
        self.store.push(p.clone())?;
        Ok(p)
    }

    pub fn buffer(&self, name: &str, value: Array) -> Result<Param> {
        let p = Param::new(format!("{}{}", self.prefix, name), ParamKind::Buffer, value);
        self.store.push(p.clone())?;
        Ok(p)
    }

    fn sample(&self, shape: &[usize], init: Init) -> Array {
        let n = numel(shape);
        let mut rng = self.rng.borrow_mut();
        let normal = |rng: &mut ChaCha8Rng, std: f64| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * std
                })
                .collect()
        };
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::He { fan_in } => normal(&mut rng, (2.0 / fan_in.max(1) as f64).sqrt()),
            Init::Scaled { fan_in } => normal(&mut rng, 1.0 / (fan_in.max(1) as f64).sqrt()),
            Init::Normal { std } => normal(&mut rng, std),
            Init::Uniform { bound } => (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
        };
        Array::new(shape.to_vec(), data).expect("numel matches")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_is_deterministic_per_seed() {
        let draw = |seed| {
            let store = ParamStore::new();
            let b = Builder::new(&store, seed);
            b.sub("conv").param("weight", &[4, 3], Init::He { fan_in: 3 }).unwrap();
            store.snapshot()
        };
        assert_eq!(draw(7), draw(7));
        assert_ne!(draw(7), draw(8));
        assert_eq!(draw(7)[0].0, "conv.weight");
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let store = ParamStore::new();
        let b = Builder::new(&store, 0);
        b.param("w", &[1], Init::Zeros).unwrap();
        assert!(b.param("w", &[1], Init::Zeros).is_err());
    }

    #[test]
    fn buffers_never_train() {
        let store = ParamStore::new();
        let b = Builder::new(&store, 0);
        let buf = b.buffer("running_mean", Array::zeros([3])).unwrap();
        buf.set_trainable(true);
        assert!(!buf.is_trainable());
    }
}
