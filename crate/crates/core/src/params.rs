//! Named parameter tensors and their binding onto a tape.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::model::ModelError;
use crate::numerics::archive::Archive;
use crate::numerics::{Tape, Tensor, Var};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces `name`.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = t;
            return;
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Places every parameter on `tape` as a gradient-receiving leaf.
    pub fn bind<'a>(&'a self, tape: &mut Tape) -> Bound<'a> {
        let vars = self.tensors.iter().map(|t| tape.param(t.clone())).collect();
        Bound { store: self, vars }
    }

    /// Places every parameter on `tape` as a constant.
    pub fn bind_frozen<'a>(&'a self, tape: &mut Tape) -> Bound<'a> {
        let vars = self.tensors.iter().map(|t| tape.constant(t.clone())).collect();
        Bound { store: self, vars }
    }

    /// Uses caller-provided handles, one per parameter in store order.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<Bound<'_>, ModelError> {
        if vars.len() != self.len() {
            return Err(ModelError::InvalidArgument(format!(
                "{} handles for {} parameters",
                vars.len(),
                self.len()
            )));
        }
        Ok(Bound {
            store: self,
            vars: vars.to_vec(),
        })
    }

    pub fn to_archive_entries(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.iter().map(|(n, t)| (format!("{prefix}{n}"), t.clone())).collect()
    }

    /// Overwrites every parameter from `archive` entries named `prefix + name`,
    /// rejecting missing entries and shape changes.
    pub fn load_from(&mut self, archive: &Archive, prefix: &str) -> Result<(), ModelError> {
        for i in 0..self.names.len() {
            let key = format!("{prefix}{}", self.names[i]);
            let t = archive
                .get(&key)
                .ok_or_else(|| ModelError::MissingParam(key.clone()))?;
            if t.shape() != self.tensors[i].shape() {
                return Err(ModelError::IncompatibleParam {
                    name: key,
                    expected: self.tensors[i].shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            self.tensors[i] = t.clone();
        }
        Ok(())
    }
}

/// Parameters of one store as tape handles.
pub struct Bound<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Result<Var, ModelError> {
        self.store
            .index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    /// Handles aligned with [`ParamStore::names`].
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Glorot-uniform `fan_in × fan_out` matrix.
pub fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape product")
}

pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize], mean: f64, std: f64) -> Tensor {
    use rand_distr::{Distribution, Normal};
    let dist = Normal::new(mean, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape product")
}
