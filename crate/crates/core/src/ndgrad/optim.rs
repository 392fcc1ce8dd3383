use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 norm clip applied to the gradient before the update.
    pub grad_clip: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 6e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, grad_clip: Some(35.0) }
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Adam with decoupled weight decay. Parameters without a gradient in a
/// step are left untouched, moments included.
pub struct AdamW {
    pub config: AdamWConfig,
    state: HashMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW { config, state: HashMap::new() }
    }

    /// Returns the pre-clip global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>, lr: f64) -> Result<f64> {
        let norm = grads.values().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
        let clip = match self.config.grad_clip {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        let c = &self.config;
        for (name, g) in grads {
            let values = store
                .values_mut(name)
                .ok_or_else(|| crate::error::Error::UnknownParameter(name.clone()))?;
            let st = self
                .state
                .entry(name.clone())
                .or_insert_with(|| Moments { m: vec![0.0; g.len()], v: vec![0.0; g.len()], t: 0 });
            st.t += 1;
            let bc1 = 1.0 - c.beta1.powi(st.t as i32);
            let bc2 = 1.0 - c.beta2.powi(st.t as i32);
            if values.len() != g.len() {
                return Err(crate::error::Error::shape("AdamW::step", &[values.len()], &[g.len()]));
            }
            for (((w, gi), m), v) in values.iter_mut().zip(g).zip(st.m.iter_mut()).zip(st.v.iter_mut()) {
                let gi = gi * clip;
                *m = c.beta1 * *m + (1.0 - c.beta1) * gi;
                *v = c.beta2 * *v + (1.0 - c.beta2) * gi * gi;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *w);
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        store.insert("w", &[3], vec![1.0, -2.0, 0.5]);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, grad_clip: None, ..Default::default() });
        let grads = BTreeMap::from([("w".to_string(), vec![0.3, -4.0, 0.0])]);
        opt.step(&mut store, &grads, 0.1).unwrap();
        let v = store.get("w").unwrap().value.clone();
        assert!((v[0] - 0.9).abs() < 1e-6);
        assert!((v[1] + 1.9).abs() < 1e-6);
        assert_eq!(v[2], 0.5);
    }

    #[test]
    fn untouched_parameters_are_skipped() {
        let mut store = ParamStore::new();
        store.insert("a", &[1], vec![1.0]);
        store.insert("b", &[1], vec![1.0]);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut store, &BTreeMap::from([("a".to_string(), vec![1.0])]), 0.1).unwrap();
        assert_eq!(store.get("b").unwrap().value[0], 1.0);
        assert!(store.get("a").unwrap().value[0] < 1.0);
    }
}
