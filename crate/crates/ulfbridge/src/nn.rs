//! Parameter storage, initialization, optimizer, and layer helpers shared
//! by all networks.

use crate::graph::{Grads, Graph, Var};
use crate::rng;
use crate::scalar::Scalar;
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Named parameter arrays. Name-sorted iteration keeps every downstream
/// consumer (optimizer, checkpoints) deterministic.
#[derive(Debug, Clone)]
pub struct ParamStore<S: Scalar> {
    entries: BTreeMap<String, ArrayD<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<S>) {
        assert!(
            self.entries.insert(name.to_string(), value).is_none(),
            "duplicate parameter name {name}"
        );
    }

    pub fn get(&self, name: &str) -> &ArrayD<S> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<S> {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<S>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<S>)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|a| a.len()).sum()
    }

    /// Exact equality of every array, elementwise bit-for-bit.
    pub fn bit_identical(&self, other: &ParamStore<S>) -> bool {
        if self.entries.len() != other.entries.len() {
            return false;
        }
        self.entries.iter().all(|(k, v)| {
            other
                .entries
                .get(k)
                .map(|o| o.shape() == v.shape() && o.iter().zip(v.iter()).all(|(a, b)| a == b))
                .unwrap_or(false)
        })
    }
}

/// Parameters bound into a graph for one forward pass.
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

    /// Collect per-parameter gradients after a backward pass. Parameters the
    /// loss never touched get zero gradients.
    pub fn grads<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        grads: &mut Grads<S>,
    ) -> BTreeMap<String, ArrayD<S>> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.vars {
            let g = grads
                .take(*var)
                .unwrap_or_else(|| ArrayD::zeros(store.get(name).raw_dim()));
            out.insert(name.clone(), g);
        }
        out
    }
}

/// Bind every parameter as a trainable leaf.
pub fn bind<S: Scalar>(g: &mut Graph<S>, store: &ParamStore<S>) -> Bound {
    bind_with(g, store, true)
}

/// Bind every parameter as a constant (frozen model in someone else's loss).
pub fn bind_frozen<S: Scalar>(g: &mut Graph<S>, store: &ParamStore<S>) -> Bound {
    bind_with(g, store, false)
}

fn bind_with<S: Scalar>(g: &mut Graph<S>, store: &ParamStore<S>, trainable: bool) -> Bound {
    let mut vars = BTreeMap::new();
    for (name, value) in store.iter() {
        let v = g.leaf(value.clone(), trainable);
        vars.insert(name.clone(), v);
    }
    Bound { vars }
}

// ── initialization ─────────────────────────────────────────────────────

/// Kaiming-uniform fan-in init for conv / linear weights.
pub fn kaiming<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<S> {
    let bound = (1.0 / fan_in as f64).sqrt();
    rng::uniform_array(rng, shape, -bound, bound)
}

pub fn zeros<S: Scalar>(shape: &[usize]) -> ArrayD<S> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones<S: Scalar>(shape: &[usize]) -> ArrayD<S> {
    ArrayD::from_elem(IxDyn(shape), S::one())
}

// ── layers ─────────────────────────────────────────────────────────────

/// 2-D convolution layer; owns parameter names inside a store.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: String,
    pub b: String,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = format!("{name}.w");
        let b = format!("{name}.b");
        store.insert(&w, kaiming(rng, &[cout, cin, k, k], cin * k * k));
        store.insert(&b, zeros(&[cout]));
        Conv2d { w, b, stride, pad }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, bound: &Bound, x: Var) -> Var {
        g.conv2d(x, bound.var(&self.w), bound.var(&self.b), self.stride, self.pad)
    }
}

/// Dense layer on (R, Cin) matrices.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: String,
    pub b: String,
}

impl Linear {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        let w = format!("{name}.w");
        let b = format!("{name}.b");
        store.insert(&w, kaiming(rng, &[cin, cout], cin));
        store.insert(&b, zeros(&[cout]));
        Linear { w, b }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, bound: &Bound, x: Var) -> Var {
        let y = g.matmul(x, bound.var(&self.w));
        g.add_row_vec(y, bound.var(&self.b))
    }
}

/// Group normalization layer with affine parameters.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: String,
    pub beta: String,
    pub groups: usize,
}

impl GroupNorm {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        channels: usize,
        groups: usize,
    ) -> Self {
        let gamma = format!("{name}.g");
        let beta = format!("{name}.b");
        store.insert(&gamma, ones(&[channels]));
        store.insert(&beta, zeros(&[channels]));
        GroupNorm { gamma, beta, groups }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, bound: &Bound, x: Var) -> Var {
        g.group_norm(x, bound.var(&self.gamma), bound.var(&self.beta), self.groups, 1e-5)
    }
}

// ── time embedding ─────────────────────────────────────────────────────

/// Sinusoidal embedding of a batch of scalar positions into `dim` features.
/// Distinct positions map to distinct vectors.
pub fn sinusoidal_embedding<S: Scalar>(positions: &[f64], dim: usize) -> ArrayD<S> {
    assert!(dim % 2 == 0, "embedding dim must be even");
    let half = dim / 2;
    let n = positions.len();
    let mut out = ArrayD::<S>::zeros(IxDyn(&[n, dim]));
    for (i, &p) in positions.iter().enumerate() {
        for j in 0..half {
            let freq = (-(10000.0f64.ln()) * j as f64 / (half as f64 - 1.0)).exp();
            out[[i, 2 * j]] = S::from_f64c((p * freq).sin());
            out[[i, 2 * j + 1]] = S::from_f64c((p * freq).cos());
        }
    }
    out
}

/// Bridge times in [0,1) are scaled before embedding so the grid spreads
/// across the frequency bands.
pub const TIME_POS_SCALE: f64 = 1000.0;

// ── optimizer ──────────────────────────────────────────────────────────

/// Adam with per-store moment state.
#[derive(Debug, Clone)]
pub struct Adam<S: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: BTreeMap<String, ArrayD<S>>,
    v: BTreeMap<String, ArrayD<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &BTreeMap<String, ArrayD<S>>) {
        self.t += 1;
        let b1 = S::from_f64c(self.beta1);
        let b2 = S::from_f64c(self.beta2);
        let one = S::one();
        let bc1 = S::from_f64c(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = S::from_f64c(1.0 - self.beta2.powi(self.t as i32));
        let lr = S::from_f64c(self.lr);
        let eps = S::from_f64c(self.eps);
        for (name, grad) in grads {
            let p = store.get_mut(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p = *p - lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }

    /// Moment arrays for checkpointing, name-prefixed.
    pub fn state_arrays(&self, prefix: &str) -> Vec<(String, ArrayD<S>)> {
        let mut out = Vec::new();
        for (k, v) in &self.m {
            out.push((format!("{prefix}.m.{k}"), v.clone()));
        }
        for (k, v) in &self.v {
            out.push((format!("{prefix}.v.{k}"), v.clone()));
        }
        out
    }

    pub fn load_state(&mut self, prefix: &str, arrays: &BTreeMap<String, ArrayD<S>>, t: u64) {
        self.t = t;
        self.m.clear();
        self.v.clear();
        let mp = format!("{prefix}.m.");
        let vp = format!("{prefix}.v.");
        for (k, arr) in arrays {
            if let Some(rest) = k.strip_prefix(&mp) {
                self.m.insert(rest.to_string(), arr.clone());
            } else if let Some(rest) = k.strip_prefix(&vp) {
                self.v.insert(rest.to_string(), arr.clone());
            }
        }
    }
}

/// Plain SGD step, used by small testbed fits.
pub fn sgd_step<S: Scalar>(
    store: &mut ParamStore<S>,
    grads: &BTreeMap<String, ArrayD<S>>,
    lr: f64,
) {
    let lr = S::from_f64c(lr);
    for (name, grad) in grads {
        let p = store.get_mut(name);
        ndarray::Zip::from(p).and(grad).for_each(|p, &g| {
            *p = *p - lr * g;
        });
    }
}
