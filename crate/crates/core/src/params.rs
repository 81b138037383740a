//! Named parameter storage with per-parameter freeze flags.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub frozen: bool,
}

/// Ordered map of parameter name to value. Iteration order is insertion
/// order, which is also the checkpoint blob order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(
            name.into(),
            Param {
                value,
                frozen: false,
            },
        );
    }

    /// He-normal conv weight `[c_out, c_in, k, k]` plus a zero bias.
    pub fn insert_conv<R: Rng>(
        &mut self,
        prefix: &str,
        c_out: usize,
        c_in: usize,
        kernel: usize,
        rng: &mut R,
    ) {
        let fan_in = (c_in * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let w = Tensor::from_fn(&[c_out, c_in, kernel, kernel], |_| normal.sample(rng));
        self.insert(format!("{prefix}.weight"), w);
        self.insert(format!("{prefix}.bias"), Tensor::zeros(&[c_out]));
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Set the freeze flag of every parameter whose name starts with `prefix`.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.frozen = frozen;
            }
        }
    }

    pub fn freeze_all(&mut self) {
        self.set_frozen("", true);
    }

    /// Little-endian bytes of every parameter under `prefix`, in store order.
    pub fn bytes_with_prefix(&self, prefix: &str) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, p) in &self.params {
            if name.starts_with(prefix) {
                out.extend_from_slice(name.as_bytes());
                out.extend_from_slice(&p.value.to_le_bytes());
            }
        }
        out
    }

    /// Place every parameter on `graph`. A parameter receives gradients iff
    /// `trainable` is set and it is not frozen.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| {
                let v = graph.leaf(p.value.clone(), trainable && !p.frozen);
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Place every parameter on `graph` with gradient tracking regardless of
    /// freeze flags. Used to audit that no gradient reaches a frozen model.
    pub fn bind_tracked(&self, graph: &mut Graph) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), graph.leaf(p.value.clone(), true)))
            .collect();
        Bound { vars }
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradients for every bound parameter that received one.
    pub fn collect_grads(&self, grads: &mut Gradients) -> IndexMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(name, &v)| grads.take(v).map(|g| (name.clone(), g)))
            .collect()
    }
}
