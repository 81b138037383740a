//! Adam and plain SGD over a [`ParamStore`]. Frozen parameters are never touched.

use indexmap::IndexMap;

use crate::params::ParamStore;
use crate::tensor::Tensor;

pub type GradMap = IndexMap<String, Tensor>;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    m: IndexMap<String, Tensor>,
    v: IndexMap<String, Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &GradMap, lr: f64) {
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        for (name, p) in params.iter_mut() {
            if p.frozen {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let iter = p
                .value
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data());
            for (((w, m), v), &gr) in iter {
                *m = self.beta1 * *m + (1.0 - self.beta1) * gr;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gr * gr;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    /// Moment tensors as `(name, tensor)` pairs, `adam.m.*` then `adam.v.*`.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let m = self
            .m
            .iter()
            .map(|(k, t)| (format!("adam.m.{k}"), t.clone()));
        let v = self
            .v
            .iter()
            .map(|(k, t)| (format!("adam.v.{k}"), t.clone()));
        m.chain(v).collect()
    }

    /// Rebuild from [`Adam::state_tensors`] output and the step count.
    pub fn from_state(steps: u64, tensors: &IndexMap<String, Tensor>) -> Self {
        let mut out = Self {
            steps,
            ..Self::default()
        };
        for (name, t) in tensors {
            if let Some(k) = name.strip_prefix("adam.m.") {
                out.m.insert(k.to_string(), t.clone());
            } else if let Some(k) = name.strip_prefix("adam.v.") {
                out.v.insert(k.to_string(), t.clone());
            }
        }
        out
    }
}

pub fn sgd_step(params: &mut ParamStore, grads: &GradMap, lr: f64) {
    for (name, p) in params.iter_mut() {
        if p.frozen {
            continue;
        }
        if let Some(g) = grads.get(name) {
            for (w, &gr) in p.value.data_mut().iter_mut().zip(g.data()) {
                *w -= lr * gr;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::full(&[3], 1.0));
        s.insert("b", Tensor::full(&[2], -2.0));
        s.set_frozen("b", true);
        s
    }

    fn grads() -> GradMap {
        let mut g = GradMap::new();
        g.insert("a".into(), Tensor::full(&[3], 0.5));
        g.insert("b".into(), Tensor::full(&[2], 0.5));
        g
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = store();
        Adam::new().step(&mut s, &grads(), 0.1);
        for &v in s.get("a").unwrap().value.data() {
            assert!((v - 0.9).abs() < 1e-6);
        }
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let mut s = store();
        let before = s.get("b").unwrap().clone();
        Adam::new().step(&mut s, &grads(), 0.1);
        sgd_step(&mut s, &grads(), 0.1);
        assert_eq!(s.get("b").unwrap(), &before);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut s = store();
        let before = s.clone();
        Adam::new().step(&mut s, &grads(), 0.0);
        sgd_step(&mut s, &grads(), 0.0);
        assert_eq!(s, before);
    }

    #[test]
    fn state_round_trip() {
        let mut s = store();
        let mut a = Adam::new();
        a.step(&mut s, &grads(), 0.1);
        let tensors: IndexMap<String, Tensor> = a.state_tensors().into_iter().collect();
        assert_eq!(Adam::from_state(a.steps(), &tensors), a);
    }
}
