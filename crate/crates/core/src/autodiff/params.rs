use std::collections::BTreeMap;

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|k, _| !k.starts_with(prefix));
    }

    /// Copy of every entry whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self.params.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(k, v)| (k.clone(), v.clone())).collect(),
        }
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.params.extend(other.params);
    }

    /// Registers every parameter on `graph`; names for which `trainable` is false become constants.
    pub fn bind<'g>(&self, graph: &'g Graph, trainable: impl Fn(&str) -> bool) -> Bound<'g> {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| {
                let var = if trainable(k) { graph.leaf(v.clone()) } else { graph.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    /// Rounds every value through `f32`, the on-disk precision.
    pub fn round_to_f32(&mut self) {
        for t in self.params.values_mut() {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Parameters registered on a graph.
pub struct Bound<'g> {
    vars: BTreeMap<String, Var<'g>>,
}

impl<'g> Bound<'g> {
    pub fn get(&self, name: &str) -> Var<'g> {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<Var<'g>> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'g>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Adam with optional global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(5.0), step: 0, moments: BTreeMap::new() }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies one update to every trainable parameter in `bound`.
    pub fn step(&mut self, params: &mut ParamStore, bound: &Bound<'_>, grads: &Gradients, lr: f64) {
        self.step += 1;
        let updates: Vec<(&str, &Tensor)> =
            bound.iter().filter(|(_, v)| v.requires_grad()).filter_map(|(k, v)| grads.get(v).map(|g| (k, g))).collect();
        let norm = updates.iter().map(|(_, g)| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in updates {
            let p = params.get_mut(name).expect("bound parameter missing from store");
            let (m, v) = self.moments.entry(name.to_string()).or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi * scale;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *pi -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
            }
        }
    }
}
