//! Neural-network plumbing: the autodiff graph, named parameter storage,
//! and weight initialization.

pub mod graph;

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

pub use graph::{Gradients, Graph, Id};

/// Named parameter tensors with deterministic (insertion) iteration order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: IndexMap<String, ArrayD<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        let name = name.into();
        assert!(
            self.entries.insert(name.clone(), value).is_none(),
            "duplicate parameter name: {name}"
        );
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Insert every parameter into the graph as a grad-tracked leaf and
    /// remember the node ids by name.
    pub fn bind(&self, g: &mut Graph) -> Binding {
        let mut ids = IndexMap::new();
        for (name, value) in &self.entries {
            ids.insert(name.clone(), g.leaf(value.clone()));
        }
        Binding { ids }
    }
}

/// Map from parameter name to its leaf node in one graph.
pub struct Binding {
    pub ids: IndexMap<String, Id>,
}

impl Binding {
    pub fn id(&self, name: &str) -> Id {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter not bound: {name}"))
    }
}

/// Standard normal sample via Box-Muller from the seeded stream.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// He-normal initialization: N(0, sqrt(2 / fan_in)).
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| gaussian(rng) * std)
}

/// Xavier-uniform initialization on [-a, a], a = sqrt(6 / (fan_in + fan_out)).
pub fn xavier_uniform(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> ArrayD<f64> {
    use rand::Rng;
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| (rng.random::<f64>() * 2.0 - 1.0) * a)
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn full(shape: &[usize], value: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(shape), value)
}
