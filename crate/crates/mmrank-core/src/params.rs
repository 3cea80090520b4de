//! Named parameter storage, gradient accumulation, and the Adam update.
//!
//! Parameters keep their insertion order everywhere (iteration, gradient
//! buffers, optimizer state, serialization), which is what makes training
//! bitwise reproducible run to run.

use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

pub type ParamId = usize;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(from = "ParamStoreSer<S>", into = "ParamStoreSer<S>")]
#[serde(bound = "S: Scalar")]
pub struct ParamStore<S: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    #[serde(skip)]
    index: HashMap<String, ParamId>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
struct ParamStoreSer<S: Scalar> {
    entries: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> From<ParamStoreSer<S>> for ParamStore<S> {
    fn from(ser: ParamStoreSer<S>) -> Self {
        let mut store = ParamStore::new();
        for (name, t) in ser.entries {
            store.insert(&name, t);
        }
        store
    }
}

impl<S: Scalar> From<ParamStore<S>> for ParamStoreSer<S> {
    fn from(store: ParamStore<S>) -> Self {
        ParamStoreSer { entries: store.names.into_iter().zip(store.tensors).collect() }
    }
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<S>) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.names.push(name.to_string());
        self.tensors.push(t);
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> ParamId {
        *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id]
    }

    pub fn by_name(&self, name: &str) -> &Tensor<S> {
        self.get(self.id(name))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    /// Insertion-ordered iteration.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<S>)> {
        self.names.iter().enumerate().map(|(i, n)| (i, n.as_str(), &self.tensors[i]))
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}

/// Gradient buffers aligned with a `ParamStore`.
#[derive(Clone, Debug)]
pub struct GradBuf<S> {
    buf: Vec<Vec<S>>,
}

impl<S: Scalar> GradBuf<S> {
    pub fn zeros_like(store: &ParamStore<S>) -> Self {
        GradBuf { buf: store.iter().map(|(_, _, t)| vec![S::zero(); t.len()]).collect() }
    }

    pub fn add(&mut self, id: ParamId, g: &[S]) {
        let dst = &mut self.buf[id];
        assert_eq!(dst.len(), g.len(), "gradient length mismatch for param {id}");
        for i in 0..g.len() {
            dst[i] = dst[i] + g[i];
        }
    }

    pub fn get(&self, id: ParamId) -> &[S] {
        &self.buf[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<S>> {
        self.buf.iter()
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. State rides along with checkpoints so a
/// resumed run continues the exact trajectory.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Adam<S: Scalar> {
    pub cfg: AdamConfig,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    t: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<S>) -> Self {
        let m = store.iter().map(|(_, _, t)| vec![S::zero(); t.len()]).collect();
        let v = store.iter().map(|(_, _, t)| vec![S::zero(); t.len()]).collect();
        Adam { cfg, m, v, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &GradBuf<S>) {
        assert_eq!(self.m.len(), store.len(), "optimizer/state size mismatch");
        self.t += 1;
        let b1 = lit::<S>(self.cfg.beta1);
        let b2 = lit::<S>(self.cfg.beta2);
        let lr = lit::<S>(self.cfg.lr);
        let eps = lit::<S>(self.cfg.eps);
        let one = S::one();
        let bc1 = one - lit::<S>(self.cfg.beta1.powi(self.t as i32));
        let bc2 = one - lit::<S>(self.cfg.beta2.powi(self.t as i32));
        for pid in 0..store.len() {
            let g = grads.get(pid);
            let m = &mut self.m[pid];
            let v = &mut self.v[pid];
            let w = store.get_mut(pid).values_mut();
            for i in 0..w.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] = w[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Xavier-uniform initialization: U(-a, a) with a = sqrt(6/(fan_in+fan_out)).
pub fn xavier_uniform<S: Scalar, R: Rng>(
    rng: &mut R,
    fan_in: usize,
    fan_out: usize,
    shape: Vec<usize>,
) -> Tensor<S> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, -a, a, shape)
}

pub fn uniform<S: Scalar, R: Rng>(rng: &mut R, lo: f64, hi: f64, shape: Vec<usize>) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| lit::<S>(rng.gen_range(lo..hi))).collect();
    Tensor::new(shape, values)
}
