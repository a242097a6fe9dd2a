//! Named parameter storage with Xavier-uniform initialization.

use super::tape::{Arr, GradStore, Tape, Var};
use ndarray::IxDyn;
use rand::Rng;
use std::cell::RefCell;
use std::collections::BTreeMap;

/// Parameters keyed by dotted path, iterated in lexicographic order so every
/// sweep over the store is deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Arr>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Arr) {
        let name = name.into();
        debug_assert!(!self.map.contains_key(&name), "duplicate param {name}");
        self.map.insert(name, value);
    }

    pub fn get(&self, name: &str) -> &Arr {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown param {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Arr {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown param {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Arr)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Arr)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|a| a.len()).sum()
    }

    /// Xavier-uniform tensor: limit = gain * sqrt(6 / (fan_in + fan_out)).
    pub fn insert_xavier(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) {
        let limit = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-limit..=limit)).collect();
        self.insert(name, Arr::from_shape_vec(IxDyn(shape), data).unwrap());
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.insert(name, Arr::zeros(IxDyn(shape)));
    }

    pub fn insert_ones(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.insert(name, Arr::ones(IxDyn(shape)));
    }

    /// Conv kernel (O,I,K,K) with conv fan conventions.
    pub fn insert_conv(
        &mut self,
        name: impl Into<String>,
        o: usize,
        i: usize,
        k: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) {
        self.insert_xavier(name, &[o, i, k, k], i * k * k, o * k * k, gain, rng);
    }

    /// Linear weight (IN,OUT); inputs are row vectors.
    pub fn insert_linear(
        &mut self,
        name: impl Into<String>,
        inp: usize,
        out: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) {
        self.insert_xavier(name, &[inp, out], inp, out, gain, rng);
    }
}

/// Lazily creates one leaf per parameter on a tape and remembers the mapping
/// so gradients can be collected by name after the backward sweep.
pub struct Binder<'a> {
    tape: Tape,
    store: &'a ParamStore,
    vars: RefCell<BTreeMap<String, Var>>,
}

impl<'a> Binder<'a> {
    pub fn new(tape: &Tape, store: &'a ParamStore) -> Self {
        Binder {
            tape: tape.clone(),
            store,
            vars: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn var(&self, name: &str) -> Var {
        if let Some(v) = self.vars.borrow().get(name) {
            return v.clone();
        }
        let v = self.tape.leaf(self.store.get(name).clone());
        self.vars.borrow_mut().insert(name.to_string(), v.clone());
        v
    }

    /// Gradients per bound parameter; zero arrays for unreached ones.
    pub fn collect_grads(&self, grads: &GradStore) -> BTreeMap<String, Arr> {
        let mut out = BTreeMap::new();
        for (name, var) in self.vars.borrow().iter() {
            let g = grads
                .grad(var)
                .cloned()
                .unwrap_or_else(|| Arr::zeros(self.store.get(name).raw_dim()));
            out.insert(name.clone(), g);
        }
        out
    }
}
