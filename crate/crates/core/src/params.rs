//! Named parameter storage shared by the model, optimizer, and checkpoints.
//!
//! Parameters live outside any tape as plain f64 buffers. Each forward pass
//! binds the ones it touches onto a fresh tape through [`ParamCtx`]; after
//! backward, the context hands the gradients back keyed by registry index.
//! Registration order is the canonical parameter order everywhere
//! (optimizer state, checkpoints, gradient reduction).

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor};

pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, shape: &[usize], data: Vec<f64>) {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "parameter {name} data does not match shape"
        );
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        });
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.index_of(name)
            .map(|i| &self.params[i])
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn slice(&self, name: &str) -> Result<&[f64]> {
        Ok(&self.get(name)?.data)
    }

    pub fn by_index(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut Param {
        &mut self.params[i]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn total_len(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization for a linear map.
pub fn linear_init(rng: &mut impl Rng, fan_in: usize, len: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..len).map(|_| rng.random_range(-bound..bound)).collect()
}

/// Binds store parameters onto one tape, at most once each.
pub struct ParamCtx<'a> {
    tape: Tape,
    store: &'a ParamStore,
    trainable: bool,
    bound: RefCell<HashMap<usize, Tensor>>,
}

impl<'a> ParamCtx<'a> {
    pub fn new(tape: Tape, store: &'a ParamStore, trainable: bool) -> Self {
        Self {
            tape,
            store,
            trainable,
            bound: RefCell::new(HashMap::new()),
        }
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        let idx = self
            .store
            .index_of(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        if let Some(t) = self.bound.borrow().get(&idx) {
            return Ok(t.clone());
        }
        let p = self.store.by_index(idx);
        let tensor = self
            .tape
            .leaf(&p.shape, p.data.clone(), self.trainable)?;
        self.bound.borrow_mut().insert(idx, tensor.clone());
        Ok(tensor)
    }

    /// Binds `name` to an existing tensor instead of the stored values.
    /// The tensor must match the registered shape. Used to probe a single
    /// parameter (e.g. finite-difference checks) through a full forward.
    pub fn bind_override(&self, name: &str, tensor: Tensor) -> Result<()> {
        let idx = self
            .store
            .index_of(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        if tensor.shape() != self.store.by_index(idx).shape {
            return Err(Error::Shape(format!(
                "override for {name} has shape {:?}, registered {:?}",
                tensor.shape(),
                self.store.by_index(idx).shape
            )));
        }
        self.bound.borrow_mut().insert(idx, tensor);
        Ok(())
    }

    /// Collects accumulated gradients of every bound parameter, keyed by
    /// registry index. Parameters never bound (or never reached by
    /// backward) are absent.
    pub fn grads(&self) -> Vec<(usize, Vec<f64>)> {
        let bound = self.bound.borrow();
        let mut keys: Vec<usize> = bound.keys().copied().collect();
        keys.sort_unstable();
        keys.into_iter()
            .filter_map(|idx| bound[&idx].grad().map(|g| (idx, g)))
            .collect()
    }
}
