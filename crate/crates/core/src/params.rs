//! Named parameter arrays and their binding into a graph.

use std::collections::BTreeMap;

use lift3d_autograd::{Array, Gradients, Graph, Var};
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::seeding::Rng;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Array>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(Array::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), Array::zeros(v.shape())))
                .collect(),
        }
    }

    /// SHA-256 over names, shapes and exact value bits.
    pub fn hash_hex(&self) -> String {
        let mut h = Sha256::new();
        for (name, a) in &self.map {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &d in a.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in a.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        crate::seeding::to_hex(&h.finalize())
    }

    /// Registers every array as a graph leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .map
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    g.param(v.clone())
                } else {
                    g.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    /// Entries whose names start with `prefix`, with the prefix stripped.
    pub fn with_prefix_stripped(&self, prefix: &str) -> Self {
        Self {
            map: self
                .map
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore) {
        for (k, v) in &other.map {
            self.map.insert(format!("{prefix}{k}"), v.clone());
        }
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradients keyed like the store, zeros where nothing flowed.
    pub fn collect_grads(&self, g: &Graph, grads: &Gradients) -> ParamStore {
        let mut out = ParamStore::new();
        for (k, &v) in &self.vars {
            out.insert(k.clone(), grads.get_or_zeros(v, g.shape(v)));
        }
        out
    }
}

pub fn init_normal(rng: &mut Rng, shape: &[usize], std: f64) -> Array {
    let dist = Normal::new(0.0, std).expect("finite std");
    Array::from_fn(shape, |_| dist.sample(rng))
}

/// He-style init scaled by fan-in.
pub fn init_fan_in(rng: &mut Rng, shape: &[usize], fan_in: usize, gain: f64) -> Array {
    init_normal(rng, shape, gain / (fan_in as f64).sqrt())
}
