//! Named parameter registry split into encoder (`phi`), decoder (`theta`)
//! and prior (`psi`) groups, plus the optimizers that update it.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{Graph, ParamSource, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum ParamError {
    #[error("parameter {0:?} has no group prefix (phi., theta., psi.)")]
    NoGroup(String),
    #[error("parameter {0:?} is not registered")]
    Missing(String),
    #[error("parameter {name:?} has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: [usize; 2],
        found: [usize; 2],
    },
}

/// Parameter group. Every name starts with the group's prefix, so groups
/// are disjoint by construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    /// Encoder and posterior heads.
    Phi,
    /// Embeddings, decoder, attention and output projection.
    Theta,
    /// Prior network.
    Psi,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Phi, Group::Theta, Group::Psi];

    pub fn prefix(self) -> &'static str {
        match self {
            Group::Phi => "phi.",
            Group::Theta => "theta.",
            Group::Psi => "psi.",
        }
    }

    pub fn of(name: &str) -> Option<Group> {
        Group::ALL.into_iter().find(|g| name.starts_with(g.prefix()))
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix().trim_end_matches('.'))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<S> {
    tensors: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<S>) -> Result<(), ParamError> {
        let name = name.into();
        if Group::of(&name).is_none() {
            return Err(ParamError::NoGroup(name));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    /// Registers a `rows × cols` tensor drawn uniformly from `±scale`.
    pub fn init_uniform<R: Rng + ?Sized>(&mut self, name: &str, rows: usize, cols: usize, scale: f64, rng: &mut R) {
        self.insert(name, Tensor::uniform(rows, cols, scale, rng)).expect("prefixed name");
    }

    pub fn init_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Tensor::zeros(rows, cols)).expect("prefixed name");
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>, ParamError> {
        self.tensors.get(name).ok_or_else(|| ParamError::Missing(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.tensors.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<S>> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Binds `name` into the graph (once per graph).
    ///
    /// # Panics
    /// If the parameter is missing; model code only binds names it created.
    pub fn bind(&self, g: &Graph<S>, name: &str) -> Var {
        let t = self
            .tensors
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not registered"));
        g.param(name, t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.tensors.iter()
    }

    pub fn names(&self, group: Group) -> Vec<String> {
        self.tensors
            .keys()
            .filter(|n| n.starts_with(group.prefix()))
            .cloned()
            .collect()
    }

    /// Removes every tensor of `group`.
    pub fn drop_group(&mut self, group: Group) {
        self.tensors.retain(|n, _| !n.starts_with(group.prefix()));
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            tensors: self.tensors.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.all_finite())
    }

    /// FNV-1a hash over names, shapes and value bits of one group.
    pub fn fingerprint(&self, group: Group) -> u64 {
        let mut h = Fnv::new();
        for (name, t) in self.tensors.iter().filter(|(n, _)| n.starts_with(group.prefix())) {
            h.bytes(name.as_bytes());
            h.bytes(&(t.rows() as u64).to_le_bytes());
            h.bytes(&(t.cols() as u64).to_le_bytes());
            for &v in t.data() {
                h.bytes(&v.as_f64().to_bits().to_le_bytes());
            }
        }
        h.0
    }

    pub fn count(&self, group: Group) -> usize {
        self.tensors
            .iter()
            .filter(|(n, _)| n.starts_with(group.prefix()))
            .map(|(_, t)| t.len())
            .sum()
    }
}

impl ParamSource for ParamStore<f64> {
    fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<f64>> {
        self.tensors.get_mut(name)
    }
}

pub(crate) struct Fnv(pub u64);

impl Fnv {
    pub fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    pub fn bytes(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut [(String, Tensor<S>)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|(_, g)| g.sq_norm().as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = S::lit(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Gradients restricted to the given groups; everything else is dropped.
pub fn restrict<S>(grads: Vec<(String, Tensor<S>)>, groups: &[Group]) -> Vec<(String, Tensor<S>)> {
    grads
        .into_iter()
        .filter(|(n, _)| Group::of(n).is_some_and(|g| groups.contains(&g)))
        .collect()
}

/// Plain gradient descent.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn step<S: Scalar>(&self, params: &mut ParamStore<S>, grads: &[(String, Tensor<S>)]) -> Result<(), ParamError> {
        let lr = S::lit(self.lr);
        for (name, g) in grads {
            let p = params.get_mut(name).ok_or_else(|| ParamError::Missing(name.clone()))?;
            check_shape(name, p, g)?;
            for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                *w -= lr * d;
            }
        }
        Ok(())
    }
}

/// Adam with bias correction; state is keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step<S: Scalar>(&mut self, params: &mut ParamStore<S>, grads: &[(String, Tensor<S>)]) -> Result<(), ParamError> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).ok_or_else(|| ParamError::Missing(name.clone()))?;
            check_shape(name, p, g)?;
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (i, (w, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let d = d.as_f64();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * d;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * d * d;
                let upd = self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                *w -= S::lit(upd);
            }
        }
        Ok(())
    }
}

fn check_shape<S: Scalar>(name: &str, p: &Tensor<S>, g: &Tensor<S>) -> Result<(), ParamError> {
    if p.shape() != g.shape() {
        return Err(ParamError::Shape {
            name: name.to_string(),
            expected: p.shape(),
            found: g.shape(),
        });
    }
    Ok(())
}
