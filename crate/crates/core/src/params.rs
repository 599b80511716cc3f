//! Named parameter storage and the per-pass forward session.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Marks every parameter as non-trainable.
    pub fn freeze(&mut self) {
        self.tensors.iter_mut().for_each(|t| t.set_requires_grad(false));
    }

    pub fn accumulate(&mut self, grads: &ParamGrads) {
        for (id, g) in &grads.0 {
            self.tensors[id.0].accumulate_grad(g);
        }
    }

    /// Replaces a parameter's values, keeping its shape.
    pub fn set_values(&mut self, id: ParamId, values: &[f64]) -> Result<()> {
        let t = &mut self.tensors[id.0];
        if t.numel() != values.len() {
            return Err(Error::shape("set_values", t.shape(), &[values.len()]));
        }
        t.data_mut().copy_from_slice(values);
        Ok(())
    }
}

/// Gradients collected from one backward pass, keyed by parameter.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads(pub Vec<(ParamId, Vec<f64>)>);

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.0.iter().find(|(i, _)| *i == id).map(|(_, g)| g.as_slice())
    }
}

/// One forward pass over a [`ParamStore`].
///
/// Parameters are bound to the tape lazily, the first time a layer asks for
/// them; parameters a variant never touches therefore get no gradient.
pub struct Session<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    train: bool,
    rng: ChaCha8Rng,
}

impl<'a> Session<'a> {
    pub fn eval(store: &'a ParamStore) -> Self {
        Self::new(store, false, 0)
    }

    /// Training mode: dropout is active and draws its masks from `seed`.
    pub fn train(store: &'a ParamStore, seed: u64) -> Self {
        Self::new(store, true, seed)
    }

    fn new(store: &'a ParamStore, train: bool, seed: u64) -> Self {
        Session {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.g.leaf(self.store.get(id));
        self.bound[id.0] = Some(v);
        v
    }

    /// Inverted dropout; identity in eval mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !self.train || rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let n = self.g.value(x).len();
        let mask = (0..n)
            .map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.g.dropout_with_mask(x, mask)
    }

    /// Runs backward from `loss` and collects gradients of every bound trainable parameter.
    pub fn backward(mut self, loss: Var) -> Result<ParamGrads> {
        self.g.backward(loss)?;
        let mut out = Vec::new();
        for (i, v) in self.bound.iter().enumerate() {
            let Some(v) = v else { continue };
            if !self.store.tensors[i].requires_grad() {
                continue;
            }
            if let Some(g) = self.g.grad(*v) {
                out.push((ParamId(i), g.to_vec()));
            }
        }
        Ok(ParamGrads(out))
    }
}

/// Seeded parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Glorot-uniform over a `[fan_in, fan_out]` matrix.
    pub fn xavier(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| self.rng.gen_range(-a..a)).collect();
        Tensor::new(&[fan_in, fan_out], data).expect("positive extents")
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::new(shape, data).expect("positive extents")
    }
}

/// Mixes several integers into one RNG seed (splitmix64 finalizer).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(h << 6)
            .wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}
