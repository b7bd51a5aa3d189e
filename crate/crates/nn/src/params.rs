use ndarray::IxDyn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn new(index: usize) -> Self {
        Self(index)
    }

    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn insert(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(self.find(name).is_none(), "duplicate parameter {name}");
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }
}

/// Creates parameters with deterministic initial values.
pub struct Builder {
    pub params: ParamSet,
    rng: ChaCha8Rng,
}

impl Builder {
    pub fn new(seed: u64) -> Self {
        Self {
            params: ParamSet::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Glorot-uniform: U(±√(6 / (fan_in + fan_out))).
    pub fn glorot(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
        let rng = &mut self.rng;
        let t = Tensor::from_shape_fn(IxDyn(shape), |_| rng.random_range(-limit..=limit));
        self.params.insert(name, t)
    }

    pub fn fill(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.params.insert(name, Tensor::from_elem(IxDyn(shape), value))
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.fill(name, shape, 0.0)
    }

    pub fn finish(self) -> ParamSet {
        self.params
    }
}

/// Adam with optional global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
            clip_norm: Some(1.0),
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    /// Applies one update and returns the pre-clipping gradient norm.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> f64 {
        assert_eq!(params.len(), grads.len(), "gradient count mismatch");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.raw_dim())).collect();
            self.v = self.m.clone();
        }
        let norm = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
        let factor = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let step = self.learning_rate * bc2.sqrt() / bc1;
        for ((p, g), (m, v)) in params
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                let g = g * factor;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= step * *m / (v.sqrt() + self.eps);
            });
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glorot_bounds_and_determinism() {
        let mut a = Builder::new(5);
        let id = a.glorot("w", &[30, 20], 30, 20);
        let mut b = Builder::new(5);
        b.glorot("w", &[30, 20], 30, 20);
        let lim = (6.0f64 / 50.0).sqrt();
        assert!(a.params.get(id).iter().all(|v| v.abs() <= lim));
        assert_eq!(a.finish(), b.finish());
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut ps = ParamSet::default();
        let id = ps.insert("x", Tensor::from_elem(IxDyn(&[2]), 3.0));
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let g = ps.get(id).mapv(|x| 2.0 * (x - 1.0));
            opt.step(&mut ps, &[g]);
        }
        assert!(ps.get(id).iter().all(|x| (x - 1.0).abs() < 1e-3));
    }

    #[test]
    fn clipping_bounds_first_step() {
        let mut ps = ParamSet::default();
        ps.insert("x", Tensor::zeros(IxDyn(&[1])));
        let mut opt = Adam::new(0.01);
        let norm = opt.step(&mut ps, &[Tensor::from_elem(IxDyn(&[1]), 50.0)]);
        assert_eq!(norm, 50.0);
        assert!((ps.values()[0][0] + 0.01).abs() < 1e-6);
    }
}
