//! Named parameter storage and per-tape bindings.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Parameters keyed by dotted name (`trunk.blocks.0.conv.weight`), iterated in
/// sorted order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<S: Scalar = f64> {
    params: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.params
            .get(name)
            .ok_or_else(|| invalid!("unknown parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| invalid!("unknown parameter `{name}`"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<S>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Order-sensitive FNV-1a digest over names, shapes and value bits.
    pub fn checksum<'a>(&'a self, mut filter: impl FnMut(&str) -> bool + 'a) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, t) in &self.params {
            if !filter(name) {
                continue;
            }
            eat(name.as_bytes());
            for &d in t.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                eat(&x.as_f64().to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Records every parameter on `tape`; those accepted by `trainable`
    /// become differentiable leaves, the rest constants.
    pub fn bind(&self, tape: &Tape<S>, trainable: &dyn Fn(&str) -> bool) -> Bindings {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bindings { vars }
    }
}

/// Tape handles for one [`ParamStore`].
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl FromIterator<(String, Var)> for Bindings {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Self {
            vars: iter.into_iter().collect(),
        }
    }
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| invalid!("parameter `{name}` is not bound"))
    }

    /// Extracts gradients for bound parameters that received one.
    pub fn collect_grads<S: Scalar>(
        &self,
        tape: &Tape<S>,
        grads: &mut Gradients<S>,
    ) -> BTreeMap<String, Tensor<S>> {
        self.vars
            .iter()
            .filter(|(_, v)| tape.requires_grad(**v))
            .map(|(name, v)| {
                let g = grads.take(*v).unwrap_or_else(|| Tensor::zeros(tape.shape(*v)));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Deterministic parameter initializer. Each parameter draws from a stream
/// keyed by (seed, key), so adding or removing unrelated parameters leaves the
/// others bitwise unchanged.
pub struct Init {
    seed: u64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn rng(&self, key: &str) -> ChaCha8Rng {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        for b in key.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        ChaCha8Rng::seed_from_u64(h)
    }

    /// He-normal convolution weight C_out×C_in×k×k.
    pub fn conv<S: Scalar>(&self, key: &str, c_out: usize, c_in: usize, k: usize) -> Tensor<S> {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        Tensor::randn([c_out, c_in, k, k], std, &mut self.rng(key))
    }

    /// Uniform(±1/√fan_in) linear weight K×D.
    pub fn linear<S: Scalar>(&self, key: &str, k: usize, d: usize) -> Tensor<S> {
        let bound = 1.0 / (d as f64).sqrt();
        Tensor::uniform([k, d], -bound, bound, &mut self.rng(key))
    }

    pub fn normal<S: Scalar>(&self, key: &str, shape: &[usize], std: f64) -> Tensor<S> {
        Tensor::randn(shape.to_vec(), std, &mut self.rng(key))
    }
}
