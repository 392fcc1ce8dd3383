//! Named parameter buffers and the flat JSON checkpoint format.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Rc<Vec<f64>>,
}

/// Parameters keyed by module path, e.g. `decoder.layer0.ffn.0.weight`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

// FNV-1a, so each parameter's initial values depend only on (seed, name).
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub fn rng_for(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ name_hash(name))
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], value: Vec<f64>) {
        assert_eq!(shape.iter().product::<usize>(), value.len(), "parameter value does not match shape");
        self.params.insert(name.into(), Param { shape: shape.to_vec(), value: Rc::new(value) });
    }

    /// He-normal initialization: `N(0, 2 / fan_in)`.
    pub fn init_he(&mut self, name: &str, shape: &[usize], fan_in: usize, seed: u64) {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        self.init_normal(name, shape, std, seed);
    }

    pub fn init_normal(&mut self, name: &str, shape: &[usize], std: f64, seed: u64) {
        let n: usize = shape.iter().product();
        let mut rng = rng_for(seed, name);
        let dist = Normal::new(0.0, std).expect("finite std");
        let value = (0..n).map(|_| dist.sample(&mut rng)).collect();
        self.insert(name, shape, value);
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        let n = shape.iter().product();
        self.insert(name, shape, vec![0.0; n]);
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    /// Mutable view of a parameter's values; copies only if a graph still
    /// holds the buffer.
    pub fn values_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        self.params.get_mut(name).map(|p| Rc::make_mut(&mut p.value))
    }

    pub fn set(&mut self, name: &str, value: Vec<f64>) -> Result<()> {
        let p = self.params.get_mut(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if p.value.len() != value.len() {
            return Err(Error::shape("set parameter", &p.shape, &[value.len()]));
        }
        p.value = Rc::new(value);
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_size(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// `{"module.path.weight": [..values..], ...}`, keys sorted.
    pub fn to_checkpoint_json(&self) -> Result<String> {
        let flat: BTreeMap<&str, &[f64]> = self.params.iter().map(|(k, p)| (k.as_str(), p.value.as_slice())).collect();
        Ok(serde_json::to_string(&flat)?)
    }

    /// Loads values into an already-initialized store; every key must exist
    /// with a matching length.
    pub fn load_checkpoint_json(&mut self, json: &str) -> Result<()> {
        let flat: BTreeMap<String, Vec<f64>> = serde_json::from_str(json)?;
        for (name, values) in flat {
            self.set(&name, values)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_only_on_seed_and_name() {
        let mut a = ParamStore::new();
        a.init_he("x.weight", &[4, 3], 4, 7);
        a.init_he("y.weight", &[2, 2], 2, 7);
        let mut b = ParamStore::new();
        b.init_he("y.weight", &[2, 2], 2, 7);
        b.init_he("x.weight", &[4, 3], 4, 7);
        assert_eq!(a, b);
        let mut c = ParamStore::new();
        c.init_he("x.weight", &[4, 3], 4, 8);
        assert_ne!(a.get("x.weight"), c.get("x.weight"));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut a = ParamStore::new();
        a.init_he("l.weight", &[3, 2], 3, 1);
        a.init_zeros("l.bias", &[2]);
        let json = a.to_checkpoint_json().unwrap();
        assert!(json.starts_with("{\"l.bias\":[0.0,0.0],\"l.weight\":["));
        let mut b = ParamStore::new();
        b.init_zeros("l.weight", &[3, 2]);
        b.init_he("l.bias", &[2], 1, 9);
        b.load_checkpoint_json(&json).unwrap();
        assert_eq!(a, b);
        assert!(b.load_checkpoint_json(r#"{"nope":[1.0]}"#).is_err());
        assert!(b.load_checkpoint_json(r#"{"l.bias":[1.0]}"#).is_err());
    }
}
